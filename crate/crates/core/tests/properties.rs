//! Property tests for the invariants of the numeric core, the data model,
//! the encoder, the trunk, the losses, the SNGP head and the metrics.

use std::collections::HashSet;

use alf_core::config::PretrainConfig;
use alf_core::data::{load_dataset, save_dataset, select_top_k_assets, Asset, AssetCriterion, FeatureValue, Snapshot};
use alf_core::encoder::Encoder;
use alf_core::graph::{GeluKind, Graph};
use alf_core::losses::{focal_loss, focal_loss_probs, info_nce, mse, multilabel_bce};
use alf_core::metrics::{auprc, auroc};
use alf_core::model::{Model, ModelConfig};
use alf_core::nn::Linear;
use alf_core::params::{ParamStore, Session};
use alf_core::pretrain::{cutmix, mixup, pretrain_objective};
use alf_core::select::{backward_eliminate, LogisticProbe};
use alf_core::sngp::{mean_field_probs, precision_matrix, softmax, SngpConfig};
use alf_core::spectral::{power_iteration, random_unit};
use alf_core::synthetic::{label_copy, mixed_types};
use alf_core::tensor::Tensor;
use alf_core::trunk::{Mode, Pooling, Trunk, TrunkShape};
use alf_core::config::SelectConfig;
use alf_core::encoder::Tokens;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 2,
        ffn_dim: 16,
        d_prime: Some(16),
        isa_heads: 2,
        isa_ffn_dim: Some(16),
        sngp: SngpConfig {
            d_rf: 32,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn ref_vec(s: &[Snapshot]) -> Vec<&Snapshot> {
    s.iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn power_iteration_is_monotone_on_psd(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0));
        // M = A^T A
        let m = Tensor::from_fn(&[n, n], |k| {
            let (i, j) = (k / n, k % n);
            (0..n).map(|r| a.data()[r * n + i] * a.data()[r * n + j]).sum()
        });
        let u0 = random_unit::<f64, _>(n, &mut rng);
        let mut prev = 0.0f64;
        for iters in 1..=30 {
            let s = power_iteration(&m, &u0, iters).unwrap().sigma;
            prop_assert!(s >= prev - 1e-12 * prev.max(1.0), "iters {iters}: {s} < {prev}");
            prev = s;
        }
    }

    #[test]
    fn spectral_linear_is_one_lipschitz(seed in any::<u64>(), din in 1usize..9, dout in 1usize..9, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", din, dout, true, true, &mut rng);
        store.get_mut(lin.w).data_mut().iter_mut().for_each(|w| *w *= scale);
        lin.refresh_spectral(&mut store, 200);
        let mut s = Session::new(&store);
        let x = Tensor::from_fn(&[16, din], |_| rng.random_range(-3.0..3.0));
        let y = Tensor::from_fn(&[16, din], |_| rng.random_range(-3.0..3.0));
        let xv = s.constant(x.clone());
        let yv = s.constant(y.clone());
        let fx = lin.forward(&mut s, xv).unwrap();
        let fy = lin.forward(&mut s, yv).unwrap();
        for r in 0..16 {
            let dx: f64 = (0..din).map(|c| (x.data()[r * din + c] - y.data()[r * din + c]).powi(2)).sum::<f64>().sqrt();
            let a = s.g.value(fx).row(r);
            let b = s.g.value(fy).row(r);
            let df: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            prop_assert!(df <= (1.0 + 1e-3) * dx + 1e-12, "|f(x)-f(y)| {df} > |x-y| {dx}");
        }
    }

    #[test]
    fn asset_selection_ignores_input_order(seed in any::<u64>(), count in 1usize..12, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assets: Vec<Asset> = (0..count)
            .map(|i| Asset {
                vector: vec![rng.random_range(-1.0..1.0), i as f32],
                timestamp: rng.random_range(0..4) as f64,
                engagement: rng.random_range(0..4) as f64,
            })
            .collect();
        let mut shuffled = assets.clone();
        shuffled.shuffle(&mut rng);
        let by_vector = |mut v: Vec<Asset>| {
            v.sort_by(|a, b| a.vector[1].total_cmp(&b.vector[1]));
            v
        };
        for c in [AssetCriterion::Recency, AssetCriterion::Engagement, AssetCriterion::CentroidOutlier] {
            let a = select_top_k_assets(&assets, k, c);
            let b = select_top_k_assets(&shuffled, k, c);
            if count <= k {
                // returned unchanged, so only the set is order-free
                prop_assert_eq!(by_vector(a), by_vector(b));
            } else {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn numeric_encoding_is_bounded(x in -1e6f64..1e6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let freq = store.add("f", Tensor::from_fn(&[4], |_| rng.random_range(-10.0..10.0)));
        let mut s = Session::new(&store);
        let xv = s.constant(Tensor::new(&[1, 1], vec![x]).unwrap());
        let f = s.p(freq);
        let e = Encoder::sinusoid(&mut s, xv, f).unwrap();
        prop_assert!(s.g.value(e).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn multi_category_encoding_is_additive(seed in any::<u64>(), mask in 1u8..63, split in 1u8..63) {
        let ds = mixed_types(4, seed);
        let model = Model::new(&small_config(), &ds.schema, seed).unwrap();
        let tags = ds.schema.feature_index("tags").unwrap();
        let all: Vec<usize> = (0..6).filter(|b| mask & (1 << b) != 0).collect();
        let a: Vec<usize> = all.iter().copied().filter(|b| split & (1 << b) != 0).collect();
        let b: Vec<usize> = all.iter().copied().filter(|b| split & (1 << b) == 0).collect();
        prop_assume!(!a.is_empty() && !b.is_empty());
        let with = |set: &Vec<usize>| {
            let mut s = ds.snapshots[0].clone();
            s.values[tags] = FeatureValue::MultiCategorical(Some(set.clone()));
            s
        };
        let rows = [with(&all), with(&a), with(&b)];
        let store = model.store.cast::<f64>();
        let mut s = Session::new(&store);
        let t = model.encoder.encode(&mut s, &ref_vec(&rows), &model.schema).unwrap();
        let off = model.encoder.token_offsets()[tags];
        let (n, d) = (model.encoder.token_count(), model.config.d);
        let x = s.g.value(t.x).data();
        for j in 0..d {
            let at = |r: usize| x[(r * n + off) * d + j];
            prop_assert!((at(0) - at(1) - at(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn tokens_are_finite_even_when_all_missing(seed in any::<u64>()) {
        let ds = mixed_types(6, seed);
        let model = Model::new(&small_config(), &ds.schema, seed).unwrap();
        let mut rows = ds.snapshots.clone();
        rows.push(Snapshot::all_missing(&ds.schema));
        let mut s = Session::new(&model.store);
        let f = model.forward(&mut s, &ref_vec(&rows), Mode::Pretrain).unwrap();
        prop_assert!(s.g.value(f.tokens.x).is_finite());
        prop_assert!(s.g.value(f.out.pooled).is_finite());
    }

    #[test]
    fn token_order_does_not_change_the_pooled_output(seed in any::<u64>(), b in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = TrunkShape {
            n: 5, d: 4, layers: 2, heads: 2, ffn_dim: 8, d_prime: 8, isa_heads: 1, isa_ffn_dim: 8,
            isa: true, spectral: true, gelu: GeluKind::Tanh,
        };
        let mut store = ParamStore::<f64>::new();
        let trunk = Trunk::new(&mut store, &shape, Pooling::Mean, &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[b, 5, 4], |_| rng.random_range(-1.0..1.0));
        let mask: Vec<Vec<bool>> = (0..b).map(|_| {
            let mut m: Vec<bool> = (0..5).map(|_| rng.random::<f64>() < 0.7).collect();
            m[0] = true;
            m
        }).collect();
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let xp = Tensor::from_fn(&[b, 5, 4], |k| {
            let (r, j, c) = (k / 20, (k / 4) % 5, k % 4);
            x.data()[r * 20 + perm[j] * 4 + c]
        });
        let mp: Vec<Vec<bool>> = mask.iter().map(|m| perm.iter().map(|&p| m[p]).collect()).collect();
        let run = |x: Tensor<f64>, mask: Vec<Vec<bool>>| {
            let mut s = Session::new(&store);
            let xv = s.constant(x);
            let out = trunk.forward(&mut s, &Tokens { x: xv, mask }, Mode::Inference).unwrap();
            (s.g.value(out.pooled).data().to_vec(), s.g.value(out.tokens).data().to_vec())
        };
        let (p0, t0) = run(x, mask);
        let (p1, t1) = run(xp, mp);
        for (a, c) in p0.iter().zip(&p1) {
            prop_assert!((a - c).abs() < 1e-12);
        }
        // row attention is equivariant: token j of the permuted run is token perm[j]
        for r in 0..b {
            for j in 0..5 {
                for c in 0..4 {
                    prop_assert!((t1[r * 20 + j * 4 + c] - t0[r * 20 + perm[j] * 4 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inference_is_batch_independent(seed in any::<u64>(), others in proptest::collection::vec(0usize..40, 0..12), at in 0usize..13) {
        let ds = mixed_types(41, seed);
        let mut model = Model::new(&small_config(), &ds.schema, seed).unwrap();
        model.fit_covariance(&ref_vec(&ds.snapshots), 16).unwrap();
        let target = &ds.snapshots[40];
        let mut batch: Vec<&Snapshot> = others.iter().map(|&i| &ds.snapshots[i]).collect();
        let at = at.min(batch.len());
        batch.insert(at, target);
        let alone = model.predict(&[target]).unwrap().remove(0);
        let within = model.predict(&batch).unwrap().remove(at);
        for (p, q) in alone.iter().zip(&within) {
            prop_assert_eq!(p.probs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), q.probs.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(p.variance.map(f64::to_bits), q.variance.map(f64::to_bits));
        }
    }

    #[test]
    fn info_nce_is_nonnegative(seed in any::<u64>(), b in 2usize..10, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_fn(&[b, 3], |_| rng.random_range(-2.0..2.0)));
        let zp = g.constant(Tensor::from_fn(&[b, 3], |_| rng.random_range(-2.0..2.0)));
        let l = info_nce(&mut g, z, zp, tau).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn focal_is_modulated_cross_entropy(seed in any::<u64>(), c in 2usize..6, gamma in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y = rng.random_range(0..c);
        let mut g = Graph::<f64>::new();
        let lv = g.constant(Tensor::new(&[1, c], logits.clone()).unwrap());
        let focal = focal_loss(&mut g, lv, &[y], gamma, None).unwrap();
        let ce = focal_loss(&mut g, lv, &[y], 0.0, None).unwrap();
        let p = softmax(&logits)[y];
        let want = (1.0 - p).powf(gamma) * g.value(ce).item();
        prop_assert!((g.value(focal).item() - want).abs() < 1e-12 * want.max(1.0));
        prop_assert!((focal_loss_probs(&[softmax(&logits)], &[y], gamma) - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn mean_field_shrinks_monotonically(l0 in -8.0f64..8.0, l1 in -8.0f64..8.0, kappa in 0.01f64..2.0) {
        let mut prev = (l1 - l0).abs();
        let argmax = l1 > l0;
        for v in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0] {
            let p = mean_field_probs(&[l0, l1], v, kappa);
            let margin = (p[1] / p[0]).ln().abs();
            prop_assert!(margin <= prev + 1e-9);
            prev = margin;
            if l0 != l1 {
                prop_assert_eq!(p[1] > p[0], argmax);
            }
        }
    }

    #[test]
    fn covariance_ignores_row_order(seed in any::<u64>(), rows in 1usize..40, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi: Vec<f64> = (0..rows * n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let p: Vec<f64> = (0..rows).map(|_| rng.random_range(0.5..1.0)).collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let phi2: Vec<f64> = order.iter().flat_map(|&i| phi[i * n..(i + 1) * n].to_vec()).collect();
        let p2: Vec<f64> = order.iter().map(|&i| p[i]).collect();
        let a = precision_matrix(&phi, &p, n, 1.0).unwrap();
        let b = precision_matrix(&phi2, &p2, n, 1.0).unwrap();
        prop_assert!((a - b).abs().max() < 1e-6);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(seed in any::<u64>(), n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-3.0f64..3.0) * 4.0).round() / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        let base = auroc(&scores, &labels).unwrap();
        for f in [|x: f64| x.exp(), |x: f64| x * x * x + x, |x: f64| 1.0 / (1.0 + (-x).exp())] {
            let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(auroc(&t, &labels).unwrap(), base);
            prop_assert_eq!(auprc(&t, &labels).unwrap(), auprc(&scores, &labels).unwrap());
        }
        // perfect separation
        let sep: Vec<f64> = labels.iter().zip(&scores).map(|(&l, &s)| if l { 10.0 + s } else { s - 10.0 }).collect();
        prop_assert_eq!(auroc(&sep, &labels).unwrap(), 1.0);
        prop_assert_eq!(auprc(&sep, &labels).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn saved_datasets_reload_to_the_same_snapshots(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let p = |f: &str| dir.path().join(f);
        let ds = mixed_types(30, seed);
        save_dataset(&ds, &p("a.csv"), &p("a.json"), Some(&p("a.f32"))).unwrap();
        let back = load_dataset(&p("a.csv"), &p("a.json"), Some(&p("a.f32"))).unwrap();
        save_dataset(&back, &p("b.csv"), &p("b.json"), Some(&p("b.f32"))).unwrap();
        let again = load_dataset(&p("b.csv"), &p("b.json"), Some(&p("b.f32"))).unwrap();
        prop_assert_eq!(&back.schema, &again.schema);
        prop_assert_eq!(std::fs::read(p("a.f32")).unwrap(), std::fs::read(p("b.f32")).unwrap());
        prop_assert_eq!(back.snapshots.len(), again.snapshots.len());
        for (x, y) in back.snapshots.iter().zip(&again.snapshots) {
            prop_assert_eq!(&x.labels, &y.labels);
            for (u, v) in x.values.iter().zip(&y.values) {
                match (u, v) {
                    // an affine normalization is not exactly invertible in binary floating point
                    (FeatureValue::Numeric(Some(a)), FeatureValue::Numeric(Some(b))) => {
                        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b)
                    }
                    _ => prop_assert_eq!(u, v),
                }
            }
        }
    }

    #[test]
    fn elimination_stays_within_tolerance_and_replays(seed in any::<u64>()) {
        let ds = label_copy(400, 3, seed);
        let (tr, va) = ds.snapshots.split_at(300);
        let cfg = SelectConfig { probe_epochs: 60, ..Default::default() };
        let probe = LogisticProbe::from_config(&cfg);
        let (reduced, trace) = backward_eliminate(&probe, &ds.schema, &ref_vec(tr), &ref_vec(va), 0, &cfg, seed).unwrap();
        if let Some(last) = trace.steps.last() {
            prop_assert!(trace.full_metric - last.metric <= cfg.tolerance);
        }
        prop_assert_eq!(trace.replay(&ds.schema).unwrap(), reduced);
    }
}

#[test]
fn reconstruction_losses_vanish_at_an_exact_inverse() {
    let mut g = Graph::<f64>::new();
    let target = Tensor::from_fn(&[5, 3], |k| k as f64 * 0.37 - 1.0);
    let pred = g.constant(target.clone());
    let l = mse(&mut g, pred, target).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let ind = Tensor::from_fn(&[5, 3], |k| (k % 2) as f64);
    let logits = g.constant(ind.map(|y| if y > 0.5 { 40.0 } else { -40.0 }));
    let l = multilabel_bce(&mut g, logits, ind).unwrap();
    assert!(g.value(l).item() < 1e-15);
}

#[test]
fn identity_augmentation_leaves_the_forward_pass_unchanged() {
    let ds = mixed_types(8, 4);
    let model = Model::new(&small_config(), &ds.schema, 4).unwrap();
    let batch = ref_vec(&ds.snapshots);
    let partner = [7usize, 6, 5, 4, 3, 2, 1, 0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mixed: Vec<Snapshot> = batch.iter().zip(&partner).map(|(x, &j)| cutmix(x, batch[j], 0.0, &mut rng).unwrap()).collect();
    let mut s = Session::new(&model.store);
    let clean = model.forward(&mut s, &batch, Mode::Pretrain).unwrap();
    let t = model.encoder.encode(&mut s, &ref_vec(&mixed), &model.schema).unwrap();
    let other = s.g.index_select(t.x, &partner).unwrap();
    let x = mixup(&mut s, t.x, other, 1.0).unwrap();
    let aug = model.trunk.forward(&mut s, &Tokens { x, mask: t.mask }, Mode::Pretrain).unwrap();
    assert_eq!(s.g.value(clean.out.tokens).data(), s.g.value(aug.tokens).data());
    assert_eq!(s.g.value(clean.out.pooled).data(), s.g.value(aug.pooled).data());
}

#[test]
fn pretraining_gradients_reach_every_encoder_parameter_class() {
    let ds = mixed_types(16, 6);
    let model = Model::new(&small_config(), &ds.schema, 6).unwrap();
    let batch = ref_vec(&ds.snapshots);
    let partner: Vec<usize> = (0..16).map(|i| (i + 5) % 16).collect();
    let mut s = Session::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (loss, _) = pretrain_objective(&model, &mut s, &batch, &partner, &PretrainConfig::default(), &mut rng).unwrap();
    let mut grads = s.g.backward(loss).unwrap();
    let pg = s.param_grads(&mut grads);
    for (class, ids) in model.encoder.param_groups() {
        assert!(!ids.is_empty(), "{class}: no parameters");
        let ids: HashSet<_> = ids.into_iter().collect();
        let norm: f32 = pg.iter().filter(|(id, _)| ids.contains(id)).flat_map(|(_, g)| g.iter()).map(|x| x * x).sum();
        assert!(norm > 0.0, "{class}: zero gradient");
    }
}

#[test]
fn spectral_activations_stay_bounded() {
    let ds = mixed_types(64, 8);
    let mut cfg = small_config();
    cfg.layers = 4;
    let mut model = Model::new(&cfg, &ds.schema, 8).unwrap();
    model.refresh_spectral(50);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let profile = ds.schema.feature_index("profile").unwrap();
    for pass in 0..1000 {
        let scale = 10f32.powi(pass % 5);
        let batch: Vec<Snapshot> = (0..8)
            .map(|_| {
                let mut s = ds.snapshots[rng.random_range(0..64)].clone();
                if let FeatureValue::Embedding(Some(v)) = &mut s.values[profile] {
                    v.iter_mut().for_each(|x| *x *= scale);
                }
                s
            })
            .collect();
        let mode = if pass % 2 == 0 { Mode::Pretrain } else { Mode::Inference };
        let mut s = Session::new(&model.store);
        let f = model.forward(&mut s, &ref_vec(&batch), mode).unwrap();
        let pooled = s.g.value(f.out.pooled);
        assert!(pooled.is_finite(), "pass {pass}");
        // after the final layer norm each row has norm about sqrt(d) times the gains
        let bound = 10.0 * (cfg.d as f32).sqrt();
        for r in 0..8 {
            let n: f32 = pooled.row(r).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!(n <= bound, "pass {pass}: pooled norm {n}");
        }
    }
}
