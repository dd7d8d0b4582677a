//! Synthetic datasets with known structure, used by tests, benchmarks of
//! the training loops and the demo.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{select_top_k_assets, Asset, AssetCriterion, Dataset, FeatureKind, FeatureSchema, FeatureSpec, FeatureValue, Snapshot, TaskSpec};
use crate::rng::substream;

fn num(x: f64) -> FeatureValue {
    FeatureValue::Numeric(Some(x))
}

fn snap(values: Vec<FeatureValue>, labels: Vec<Option<usize>>, i: usize) -> Snapshot {
    Snapshot {
        id: Some(format!("s{i}")),
        timestamp: None,
        values,
        labels,
    }
}

fn binary_task(name: &str, gamma: f64) -> TaskSpec {
    let mut t = TaskSpec::binary(name);
    t.gamma = gamma;
    t
}

/// Two overlapping Gaussian classes in the plane, centred at `±(c, c)`
/// with unit variance. Also returns `n_shift` points from a cluster
/// centred at `shift`, away from both classes, whose labels are fair coin
/// flips: nothing seen in training says anything about them.
pub fn two_cluster(n: usize, c: f64, shift: (f64, f64), n_shift: usize, seed: u64) -> (Dataset, Vec<Snapshot>) {
    let schema =
        FeatureSchema::new(vec![FeatureSpec::numeric("x0"), FeatureSpec::numeric("x1")], vec![binary_task("y", 0.0)])
            .expect("valid schema");
    let mut rng = substream(seed, "synthetic.two_cluster");
    let mut snaps = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let m = if y == 1 { c } else { -c };
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        snaps.push(snap(vec![num(m + a), num(m + b)], vec![Some(y)], i));
    }
    let shifted = (0..n_shift)
        .map(|i| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let y = usize::from(rng.random::<bool>());
            snap(vec![num(shift.0 + 0.5 * a), num(shift.1 + 0.5 * b)], vec![Some(y)], n + i)
        })
        .collect();
    (Dataset { schema, snapshots: snaps }, shifted)
}

/// Two latent factors `z ~ N(0, I)` observed through `n_views` noisy
/// numeric mixtures and two quantized, equally noisy categorical views. The label is the
/// interaction `1[z0 * z1 > 0]`, which no single observed feature predicts.
pub fn latent_interaction(n: usize, n_views: usize, noise: f64, seed: u64) -> Dataset {
    let mut features: Vec<FeatureSpec> = (0..n_views).map(|k| FeatureSpec::numeric(&format!("v{k}"))).collect();
    features.push(FeatureSpec::categorical("q0", 6));
    features.push(FeatureSpec::categorical("q1", 6));
    let schema = FeatureSchema::new(features, vec![binary_task("y", 0.0)]).expect("valid schema");
    let mut wrng = substream(seed, "synthetic.mixing");
    let mix: Vec<(f64, f64)> = (0..n_views)
        .map(|_| {
            let t: f64 = wrng.random_range(0.0..std::f64::consts::PI);
            (t.cos(), t.sin())
        })
        .collect();
    let mut rng = substream(seed, "synthetic.latent_interaction");
    let eps = Normal::new(0.0, noise).expect("noise >= 0");
    let quant = |z: f64| (z + 3.0).floor().clamp(0.0, 5.0) as usize;
    let snapshots = (0..n)
        .map(|i| {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let mut v: Vec<FeatureValue> = mix.iter().map(|&(a, b)| num(a * z0 + b * z1 + eps.sample(&mut rng))).collect();
            v.push(FeatureValue::Categorical(Some(quant(z0 + eps.sample(&mut rng)))));
            v.push(FeatureValue::Categorical(Some(quant(z1 + eps.sample(&mut rng)))));
            snap(v, vec![Some(usize::from(z0 * z1 > 0.0))], i)
        })
        .collect();
    Dataset { schema, snapshots }
}

/// One numeric feature equal to the label (as ±1) followed by `n_noise`
/// standard-normal features.
pub fn label_copy(n: usize, n_noise: usize, seed: u64) -> Dataset {
    let mut features = vec![FeatureSpec::numeric("signal")];
    features.extend((0..n_noise).map(|k| FeatureSpec::numeric(&format!("noise{k}"))));
    let schema = FeatureSchema::new(features, vec![binary_task("y", 0.0)]).expect("valid schema");
    let mut rng = substream(seed, "synthetic.label_copy");
    let snapshots = (0..n)
        .map(|i| {
            let y = usize::from(rng.random::<bool>());
            let mut v = vec![num(if y == 1 { 1.0 } else { -1.0 })];
            v.extend((0..n_noise).map(|_| num(rng.sample(StandardNormal))));
            snap(v, vec![Some(y)], i)
        })
        .collect();
    Dataset { schema, snapshots }
}

/// `dims` standard-normal features, labelled by a random hyperplane through
/// the origin; points within `margin` of it are pushed out.
pub fn separable(n: usize, dims: usize, margin: f64, seed: u64) -> Dataset {
    let features = (0..dims).map(|k| FeatureSpec::numeric(&format!("x{k}"))).collect();
    let schema = FeatureSchema::new(features, vec![binary_task("y", 0.0)]).expect("valid schema");
    let mut rng = substream(seed, "synthetic.separable");
    let mut w: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.iter_mut().for_each(|x| *x /= norm);
    let snapshots = (0..n)
        .map(|i| {
            let mut x: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
            let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let push = if s >= 0.0 { margin } else { -margin };
            x.iter_mut().zip(&w).for_each(|(a, b)| *a += push * b);
            snap(x.into_iter().map(num).collect(), vec![Some(usize::from(s >= 0.0))], i)
        })
        .collect();
    Dataset { schema, snapshots }
}

/// Every feature kind, about 10% missing values, and two tasks (binary and
/// three-class) driven by the numeric and categorical features.
pub fn mixed_types(n: usize, seed: u64) -> Dataset {
    let features = vec![
        FeatureSpec::numeric("amount"),
        FeatureSpec::categorical("region", 5),
        FeatureSpec::new("tags", FeatureKind::MultiCategorical { vocab_size: 6 }),
        FeatureSpec::new("profile", FeatureKind::Embedding { dim: 3 }),
        FeatureSpec::new("assets", FeatureKind::MultiEmbedding { dim: 3, max_count: 2 }),
    ];
    let mut multi = TaskSpec::binary("tier");
    multi.classes = 3;
    let schema = FeatureSchema::new(features, vec![binary_task("churn", 2.0), multi]).expect("valid schema");
    let mut rng = substream(seed, "synthetic.mixed");
    let snapshots = (0..n)
        .map(|i| {
            let miss = |rng: &mut crate::rng::Rng| rng.random::<f64>() < 0.1;
            let a: f64 = rng.sample(StandardNormal);
            let region = rng.random_range(0..5usize);
            let amount = if miss(&mut rng) { None } else { Some(a) };
            let region_v = if miss(&mut rng) { None } else { Some(region) };
            let tags = if miss(&mut rng) {
                None
            } else {
                Some((0..6).filter(|_| rng.random::<f64>() < 0.3).collect())
            };
            let profile = if miss(&mut rng) {
                None
            } else {
                Some((0..3).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
            };
            let n_assets = rng.random_range(0..4usize);
            let assets = (0..n_assets)
                .map(|k| Asset {
                    vector: (0..3).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
                    timestamp: k as f64,
                    engagement: rng.random(),
                })
                .collect::<Vec<_>>();
            let assets = select_top_k_assets(&assets, 2, AssetCriterion::Engagement);
            let score = a + if region >= 3 { 1.0 } else { -0.5 };
            let churn = usize::from(score + 0.5 * rng.sample::<f64, _>(StandardNormal) > 0.0);
            let tier = if score < -0.5 { 0 } else if score < 0.8 { 1 } else { 2 };
            let tier = (rng.random::<f64>() > 0.1).then_some(tier);
            snap(
                vec![
                    FeatureValue::Numeric(amount),
                    FeatureValue::Categorical(region_v),
                    FeatureValue::MultiCategorical(tags),
                    FeatureValue::Embedding(profile),
                    FeatureValue::MultiEmbedding(assets),
                ],
                vec![Some(churn), tier],
                i,
            )
        })
        .collect();
    Dataset { schema, snapshots }
}
