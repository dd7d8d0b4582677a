//! Central finite-difference gradient checks shared by the gradient tests
//! and the acceptance run. Every check runs in f64.
//!
//! The error measure is the norm-wise relative error
//! `|g_analytic - g_numeric| / max(|g_analytic| + |g_numeric|, 1e-12)` per
//! checked tensor. Large tensors are checked on a fixed random subset of
//! coordinates.

use alf_core::config::PretrainConfig;
use alf_core::data::Snapshot;
use alf_core::graph::{GeluKind, Graph, Var};
use alf_core::losses::{focal_loss, info_nce, mse, multilabel_bce};
use alf_core::model::{Model, ModelConfig, TaskHead};
use alf_core::nn::{key_bias, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use alf_core::params::{ParamId, ParamStore, Session};
use alf_core::pretrain::{pretrain_objective, reconstruction_losses};
use alf_core::sngp::{SngpConfig, SngpHead};
use alf_core::synthetic::mixed_types;
use alf_core::tensor::Tensor;
use alf_core::trunk::{IsaBlock, Mode, TrunkShape};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub struct Check {
    pub name: String,
    pub rel_err: f64,
}

const MAX_COORDS: usize = 24;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

fn coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, MAX_COORDS).into_vec();
        v.sort_unstable();
        v
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.3..2.0))
}

/// Reduces any output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(randn(&shape, &mut rng));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Checks `f` with respect to each of `inputs`.
fn check_graph(out: &mut Vec<Check>, name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vs);
        let loss = if g.value(y).len() == 1 { y } else { project(&mut g, y, 7) };
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vs);
    let loss = if g.value(y).len() == 1 { y } else { project(&mut g, y, 7) };
    let grads = g.backward(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, v) in vs.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let idx = coords(inputs[i].len(), &mut rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &k in &idx {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] += H;
            let up = eval(&xs);
            xs[i].data_mut()[k] -= 2.0 * H;
            let down = eval(&xs);
            a.push(analytic[k]);
            n.push((up - down) / (2.0 * H));
        }
        out.push(Check {
            name: format!("{name} / input {i}"),
            rel_err: rel_err(&a, &n),
        });
    }
}

/// Checks a session-built scalar with respect to every trainable parameter
/// of `store` that receives a gradient.
fn check_store(out: &mut Vec<Check>, name: &str, store: &ParamStore<f64>, f: impl Fn(&mut Session<'_, f64>) -> Var) {
    let eval = |st: &ParamStore<f64>| -> f64 {
        let mut s = Session::new(st);
        let y = f(&mut s);
        let loss = if s.g.value(y).len() == 1 { y } else { project(&mut s.g, y, 3) };
        s.g.value(loss).item()
    };
    let mut s = Session::new(store);
    let y = f(&mut s);
    let loss = if s.g.value(y).len() == 1 { y } else { project(&mut s.g, y, 3) };
    let mut grads = s.g.backward(loss).unwrap();
    let pg: Vec<(ParamId, Vec<f64>)> = s.param_grads(&mut grads);
    if pg.is_empty() {
        out.push(Check {
            name: format!("{name}: no parameter received a gradient"),
            rel_err: f64::INFINITY,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut work = store.clone();
    for (id, analytic) in pg {
        let idx = coords(analytic.len(), &mut rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &k in &idx {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + H;
            let up = eval(&work);
            work.get_mut(id).data_mut()[k] = orig - H;
            let down = eval(&work);
            work.get_mut(id).data_mut()[k] = orig;
            a.push(analytic[k]);
            n.push((up - down) / (2.0 * H));
        }
        out.push(Check {
            name: format!("{name} / {}", store.name(id)),
            rel_err: rel_err(&a, &n),
        });
    }
}

pub fn elementwise_primitives(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[3, 4], &mut rng);
    let row = randn(&[4], &mut rng);
    let pos = positive(&[3, 4], &mut rng);
    check_graph(out, "add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check_graph(out, "sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check_graph(out, "mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check_graph(out, "add broadcast", &[a.clone(), row.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check_graph(out, "mul broadcast", &[a.clone(), row.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check_graph(out, "sub broadcast lhs", &[row.clone(), a.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check_graph(out, "scale", &[a.clone()], |g, v| g.scale(v[0], -1.7));
    check_graph(out, "add_scalar", &[a.clone()], |g, v| g.add_scalar(v[0], 0.3));
    check_graph(out, "neg", &[a.clone()], |g, v| g.neg(v[0]));
    check_graph(out, "gelu tanh", &[a.clone()], |g, v| g.gelu(v[0], GeluKind::Tanh));
    check_graph(out, "gelu erf", &[a.clone()], |g, v| g.gelu(v[0], GeluKind::Erf));
    check_graph(out, "sin", &[a.clone()], |g, v| g.sin(v[0]));
    check_graph(out, "cos", &[a.clone()], |g, v| g.cos(v[0]));
    check_graph(out, "exp", &[a.clone()], |g, v| g.exp(v[0]));
    check_graph(out, "log", &[pos.clone()], |g, v| g.log(v[0]));
    check_graph(out, "sigmoid", &[a.clone()], |g, v| g.sigmoid(v[0]));
    check_graph(out, "softplus", &[a.clone()], |g, v| g.softplus(v[0]));
    check_graph(out, "powf", &[pos.clone()], |g, v| g.powf(v[0], 2.5));
    check_graph(out, "powf fractional", &[pos], |g, v| g.powf(v[0], 0.5));
}

pub fn matmul_primitives(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check_graph(out, "matmul 2d", &[randn(&[3, 5], &mut rng), randn(&[5, 2], &mut rng)], |g, v| g.matmul(v[0], v[1]).unwrap());
    check_graph(out, "matmul batched", &[randn(&[2, 3, 4], &mut rng), randn(&[2, 4, 3], &mut rng)], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    check_graph(out, "matmul broadcast rhs", &[randn(&[2, 3, 4], &mut rng), randn(&[4, 5], &mut rng)], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    // large enough for the packed kernel
    check_graph(out, "matmul packed", &[randn(&[20, 18], &mut rng), randn(&[18, 17], &mut rng)], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    check_graph(out, "matmul packed batched", &[randn(&[2, 17, 16], &mut rng), randn(&[2, 16, 16], &mut rng)], |g, v| {
        let t = g.transpose(v[1]).unwrap();
        g.matmul(v[0], t).unwrap()
    });
}

pub fn shape_primitives(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&[2, 3, 4], &mut rng);
    check_graph(out, "permute", &[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    check_graph(out, "transpose", &[x.clone()], |g, v| g.transpose(v[0]).unwrap());
    check_graph(out, "reshape", &[x.clone()], |g, v| g.reshape(v[0], &[6, 4]).unwrap());
    check_graph(out, "concat axis 1", &[x.clone(), randn(&[2, 2, 4], &mut rng)], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    check_graph(out, "concat last axis", &[x.clone(), randn(&[2, 3, 1], &mut rng)], |g, v| g.concat(&[v[0], v[1]], 2).unwrap());
    check_graph(out, "index_select repeats", &[randn(&[5, 3], &mut rng)], |g, v| g.index_select(v[0], &[4, 0, 4, 2]).unwrap());
    check_graph(out, "gather_sum", &[randn(&[6, 3], &mut rng)], |g, v| {
        g.gather_sum(v[0], &[vec![0, 2], vec![], vec![5, 5, 1]]).unwrap()
    });
    check_graph(out, "pick_last", &[x.clone()], |g, v| g.pick_last(v[0], &[0, 3, 1, 2, 2, 0]).unwrap());
}

pub fn reduction_and_normalization_primitives(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&[2, 3, 4], &mut rng);
    check_graph(out, "sum", &[x.clone()], |g, v| g.sum(v[0]));
    check_graph(out, "mean", &[x.clone()], |g, v| g.mean(v[0]));
    for axis in 0..3 {
        check_graph(out, "sum_axis", &[x.clone()], |g, v| g.sum_axis(v[0], axis).unwrap());
        check_graph(out, "mean_axis", &[x.clone()], |g, v| g.mean_axis(v[0], axis).unwrap());
    }
    check_graph(out, "softmax", &[x.clone()], |g, v| g.softmax(v[0]));
    check_graph(out, "log_softmax", &[x.clone()], |g, v| g.log_softmax(v[0]));
    check_graph(out, "masked softmax", &[x.clone()], |g, v| {
        let mut m = Tensor::zeros(&[4]);
        m.data_mut()[2] = f64::NEG_INFINITY;
        let m = g.constant(m);
        let s = g.add(v[0], m).unwrap();
        g.softmax(s)
    });
    check_graph(out, "layer_norm", &[x.clone(), randn(&[4], &mut rng), randn(&[4], &mut rng)], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    check_graph(out, "l2_normalize", &[x.clone()], |g, v| g.l2_normalize(v[0], 1e-12));
    check_graph(out, "cosine_similarity", &[x.clone(), randn(&[2, 3, 4], &mut rng)], |g, v| {
        g.cosine_similarity(v[0], v[1]).unwrap()
    });
}

pub fn spectral_normalize_primitive(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = randn(&[4, 3], &mut rng);
    let u: Vec<f64> = vec![0.5, -0.5, 0.5, 0.5];
    let v: Vec<f64> = vec![0.6, 0.0, 0.8];
    check_graph(out, "spectral_normalize", &[w], |g, x| g.spectral_normalize(x[0], &u, &v, 1e-12).unwrap());
}

pub fn linear_feed_forward_and_layer_norm_blocks(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for spectral in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 5, 4, true, spectral, &mut rng);
        let ffn = FeedForward::new(&mut store, "ffn", 4, 7, 3, spectral, GeluKind::Tanh, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 3);
        store.get_mut(ln.gamma).data_mut().iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        store.get_mut(ln.beta).data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        lin.refresh_spectral(&mut store, 5);
        let x = store.add("x", randn(&[3, 5], &mut rng));
        check_store(out, "linear/ffn/ln", &store, |s| {
            let h = s.p(x);
            let h = lin.forward(s, h).unwrap();
            let h = ffn.forward(s, h).unwrap();
            ln.forward(s, h).unwrap()
        });
    }
}

pub fn row_attention_block(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (heads, spectral) in [(1, false), (2, true)] {
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadAttention::new(&mut store, "attn", 4, heads, true, spectral, &mut rng);
        for l in attn.linears() {
            l.refresh_spectral(&mut store, 5);
        }
        let x = store.add("x", randn(&[2, 3, 4], &mut rng));
        let mask = vec![vec![true, true, true], vec![true, false, true]];
        check_store(out, "row attention", &store, |s| {
            let xv = s.p(x);
            let bias = s.constant(key_bias(&mask));
            attn.forward(s, xv, Some(bias)).unwrap()
        });
    }
}

pub fn inter_sample_attention_block(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = TrunkShape {
        n: 3,
        d: 4,
        layers: 1,
        heads: 2,
        ffn_dim: 6,
        d_prime: 4,
        isa_heads: 2,
        isa_ffn_dim: 5,
        isa: true,
        spectral: true,
        gelu: GeluKind::Tanh,
    };
    let mut store = ParamStore::<f64>::new();
    let isa = IsaBlock::new(&mut store, "isa", &shape, &mut rng);
    for l in isa.linears() {
        l.refresh_spectral(&mut store, 5);
    }
    let x = store.add("x", randn(&[5, 3, 4], &mut rng));
    check_store(out, "isa block", &store, |s| {
        let xv = s.p(x);
        isa.forward(s, xv).unwrap()
    });
}

pub fn sngp_head_block(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let cfg = SngpConfig {
        d_rf: 16,
        ..Default::default()
    };
    let head = SngpHead::new(&mut store, "head", 4, 3, &cfg, &mut rng);
    let x = store.add("x", randn(&[5, 4], &mut rng));
    let labels = [0usize, 2, 1, 1, 0];
    check_store(out, "sngp head", &store, |s| {
        let xv = s.p(x);
        let phi = head.features(s, xv).unwrap();
        let logits = head.logits(s, phi).unwrap();
        focal_loss(&mut s.g, logits, &labels, 0.0, None).unwrap()
    });
}

pub fn focal_loss_block(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let logits = randn(&[6, 3], &mut rng).map(|x| 2.0 * x);
    let labels = [0usize, 1, 2, 2, 1, 0];
    for gamma in [0.0, 0.5, 2.0, 5.0] {
        check_graph(out, "focal", &[logits.clone()], |g, v| focal_loss(g, v[0], &labels, gamma, None).unwrap());
        check_graph(out, "focal weighted", &[logits.clone()], |g, v| {
            focal_loss(g, v[0], &labels, gamma, Some(&[0.2, 1.0, 3.0])).unwrap()
        });
    }
}

pub fn info_nce_block(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for tau in [0.1, 0.7] {
        check_graph(out, "info_nce", &[randn(&[5, 4], &mut rng), randn(&[5, 4], &mut rng)], |g, v| {
            info_nce(g, v[0], v[1], tau).unwrap()
        });
    }
}

pub fn plain_reconstruction_losses(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let target = randn(&[4, 3], &mut rng);
    check_graph(out, "mse", &[randn(&[4, 3], &mut rng)], |g, v| mse(g, v[0], target.clone()).unwrap());
    let ind = Tensor::from_fn(&[4, 3], |k| if k % 3 == 1 { 1.0 } else { 0.0 });
    check_graph(out, "multilabel bce", &[randn(&[4, 3], &mut rng)], |g, v| {
        multilabel_bce(g, v[0], ind.clone()).unwrap()
    });
}

fn small_model() -> (Model, Vec<Snapshot>) {
    let ds = mixed_types(40, 3);
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        layers: 1,
        ffn_dim: 8,
        d_prime: Some(8),
        isa_heads: 2,
        isa_ffn_dim: Some(8),
        sngp: SngpConfig {
            d_rf: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut model = Model::new(&cfg, &ds.schema, 5).unwrap();
    model.refresh_spectral(5);
    (model, ds.snapshots)
}

pub fn all_five_reconstruction_losses_through_the_model(out: &mut Vec<Check>) {
    let (model, snaps) = small_model();
    let batch: Vec<&Snapshot> = snaps[..6].iter().collect();
    let store = model.store.cast::<f64>();
    let probe = {
        let mut s = Session::new(&store);
        let f = model.forward(&mut s, &batch, Mode::Pretrain).unwrap();
        reconstruction_losses(&model, &mut s, f.out.tokens, &batch).unwrap().as_array()
    };
    for (slot, name) in [(0, "numeric"), (1, "categorical"), (2, "multi-categorical"), (4, "embedding"), (5, "multi-embedding")] {
        assert!(probe[slot].is_some(), "{name} reconstruction term missing from the batch");
        check_store(out, name, &store, |s| {
            let f = model.forward(s, &batch, Mode::Pretrain).unwrap();
            reconstruction_losses(&model, s, f.out.tokens, &batch).unwrap().as_array()[slot].unwrap()
        });
    }
}

pub fn full_pretrain_objective(out: &mut Vec<Check>) {
    let (model, snaps) = small_model();
    let batch: Vec<&Snapshot> = snaps[..6].iter().collect();
    let partner = [3usize, 2, 5, 0, 1, 4];
    let cfg = PretrainConfig::default();
    let store = model.store.cast::<f64>();
    check_store(out, "pretrain objective", &store, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        pretrain_objective(&model, s, &batch, &partner, &cfg, &mut rng).unwrap().0
    });
}

pub fn finetune_objective_through_every_head(out: &mut Vec<Check>) {
    let (model, snaps) = small_model();
    assert!(model.heads.iter().all(|h| matches!(h, TaskHead::Sngp(_))));
    let batch: Vec<&Snapshot> = snaps[..6].iter().collect();
    let store = model.store.cast::<f64>();
    check_store(out, "finetune objective", &store, |s| {
        let losses = alf_core::finetune::task_losses(&model, s, &batch).unwrap();
        let mut acc = None;
        for l in losses.into_iter().flatten() {
            acc = Some(match acc {
                None => l,
                Some(a) => s.g.add(a, l).unwrap(),
            });
        }
        acc.unwrap()
    });
}

pub type Group = fn(&mut Vec<Check>);

pub const GROUPS: &[(&str, Group)] = &[
    ("elementwise_primitives", elementwise_primitives),
    ("matmul_primitives", matmul_primitives),
    ("shape_primitives", shape_primitives),
    ("reduction_and_normalization_primitives", reduction_and_normalization_primitives),
    ("spectral_normalize_primitive", spectral_normalize_primitive),
    ("linear_feed_forward_and_layer_norm_blocks", linear_feed_forward_and_layer_norm_blocks),
    ("row_attention_block", row_attention_block),
    ("inter_sample_attention_block", inter_sample_attention_block),
    ("sngp_head_block", sngp_head_block),
    ("focal_loss_block", focal_loss_block),
    ("info_nce_block", info_nce_block),
    ("plain_reconstruction_losses", plain_reconstruction_losses),
    ("all_five_reconstruction_losses_through_the_model", all_five_reconstruction_losses_through_the_model),
    ("full_pretrain_objective", full_pretrain_objective),
    ("finetune_objective_through_every_head", finetune_objective_through_every_head),
];
