//! WebAssembly exports for the static demo page in `www/`.
//!
//! Every export returns a flat `Float64Array`; the layouts are documented on
//! each function. The functions are plain Rust as well, so they are tested
//! natively.

use alf_core::config::ScheduleConfig;
use alf_core::data::FeatureValue;
use alf_core::losses::focal_loss;
use alf_core::optim::{AdamW, AdamWConfig};
use alf_core::params::{ParamStore, Session};
use alf_core::rng::substream;
use alf_core::sngp::{mean_field_probs, softmax, SngpConfig, SngpHead};
use alf_core::spectral::{power_iteration, random_unit};
use alf_core::synthetic::two_cluster;
use alf_core::tensor::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

const TRAIN_STEPS: usize = 150;

fn random_features(head: &SngpHead, store: &ParamStore<f64>, xy: &[f64]) -> Vec<f64> {
    let mut s = Session::new(store);
    let x = s.constant(Tensor::new(&[xy.len() / 2, 2], xy.to_vec()).expect("pairs"));
    let phi = head.features(&mut s, x).expect("2-d input");
    s.g.value(phi).data().to_vec()
}

fn logits(head: &SngpHead, store: &ParamStore<f64>, xy: &[f64]) -> Vec<f64> {
    let mut s = Session::new(store);
    let x = s.constant(Tensor::new(&[xy.len() / 2, 2], xy.to_vec()).expect("pairs"));
    let phi = head.features(&mut s, x).expect("2-d input");
    let lg = head.logits(&mut s, phi).expect("logits");
    s.g.value(lg).data().to_vec()
}

/// Fits an SNGP head directly on 2-D inputs from two Gaussian classes at
/// `±(sep, sep)` (`n_train` points) and evaluates it on a `grid x grid`
/// lattice over `[-extent, extent]^2`, row-major with y descending.
///
/// Returns `3 g^2 + 2 n_train` values: posterior variance per cell, then
/// calibrated probability of class 1 per cell, then plain softmax
/// probability of class 1 per cell, then the training points as `x, y`
/// pairs.
#[wasm_bindgen]
pub fn sngp_field(n_train: usize, sep: f64, length_scale: f64, d_rf: usize, grid: usize, extent: f64, seed: u64) -> Vec<f64> {
    let (ds, _) = two_cluster(n_train.max(2), sep, (0.0, 0.0), 0, seed);
    let xy: Vec<f64> = ds
        .snapshots
        .iter()
        .flat_map(|s| {
            s.values.iter().map(|v| match v {
                FeatureValue::Numeric(Some(x)) => *x,
                _ => 0.0,
            })
        })
        .collect();
    let labels: Vec<usize> = ds.snapshots.iter().map(|s| s.label(0).unwrap_or(0)).collect();

    let cfg = SngpConfig {
        d_rf: d_rf.max(1),
        length_scale,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    let mut head = SngpHead::new(&mut store, "head", 2, 2, &cfg, &mut substream(seed, "sngp"));
    let mut opt = AdamW::<f64>::new(AdamWConfig::default());
    let x = Tensor::new(&[labels.len(), 2], xy.clone()).expect("pairs");
    for _ in 0..TRAIN_STEPS {
        let grads = {
            let mut s = Session::new(&store);
            let xv = s.constant(x.clone());
            let phi = head.features(&mut s, xv).expect("features");
            let lg = head.logits(&mut s, phi).expect("logits");
            let loss = focal_loss(&mut s.g, lg, &labels, 0.0, None).expect("loss");
            let mut g = s.g.backward(loss).expect("scalar loss");
            s.param_grads(&mut g)
        };
        opt.step(&mut store, &grads, 0.05).expect("finite step");
    }
    let phi = random_features(&head, &store, &xy);
    let p: Vec<f64> = logits(&head, &store, &xy).chunks(2).map(|l| softmax(l).into_iter().fold(0.0, f64::max)).collect();
    head.fit_covariance(&mut store, &phi, &p).expect("precision");

    let g = grid.max(2);
    let step = 2.0 * extent / (g - 1) as f64;
    let cells: Vec<f64> = (0..g * g)
        .flat_map(|k| {
            let (r, c) = (k / g, k % g);
            [-extent + c as f64 * step, extent - r as f64 * step]
        })
        .collect();
    let phi = random_features(&head, &store, &cells);
    let var = head.variance(&store, &phi).expect("factorizable").expect("fitted");
    let lg = logits(&head, &store, &cells);
    let mut out = var.clone();
    out.extend(lg.chunks(2).zip(&var).map(|(l, &v)| mean_field_probs(l, v, cfg.kappa)[1]));
    out.extend(lg.chunks(2).map(|l| softmax(l)[1]));
    out.extend(xy);
    out
}

/// Power iteration on a random Gaussian `rows x cols` matrix.
///
/// Returns `iters + 1` values: the estimate after each iteration, then the
/// largest singular value from a full SVD.
#[wasm_bindgen]
pub fn power_iteration_trace(rows: usize, cols: usize, iters: usize, seed: u64) -> Vec<f64> {
    let (rows, cols) = (rows.max(1), cols.max(1));
    let mut rng = substream(seed, "demo.matrix");
    let w = Tensor::<f64>::from_fn(&[rows, cols], |_| rng.sample(StandardNormal));
    let u0 = random_unit::<f64, _>(rows, &mut rng);
    let mut out: Vec<f64> = (1..=iters).map(|k| power_iteration(&w, &u0, k).expect("2-d matrix").sigma).collect();
    out.push(DMatrix::from_row_slice(rows, cols, w.data()).singular_values().max());
    out
}

/// Learning rate at every step of a `total`-step run with linear warmup to
/// `initial_lr * multiplier` and cosine decay to `alpha` of the peak.
#[wasm_bindgen]
pub fn lr_curve(total: usize, initial_lr: f64, warmup_fraction: f64, multiplier: f64, alpha: f64) -> Vec<f64> {
    let cfg = ScheduleConfig {
        initial_lr,
        warmup_target_multiplier: Some(multiplier),
        warmup_fraction,
        cosine_alpha: alpha,
        ..Default::default()
    };
    let sched = cfg.build(total, multiplier);
    (0..total).map(|s| sched.lr_at(s)).collect()
}
