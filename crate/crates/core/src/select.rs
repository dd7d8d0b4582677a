//! Backward feature elimination driven by permutation importance.
//!
//! The importance scorer is pluggable through [`Probe`]; the default is a
//! multinomial logistic regression on a flat encoding of the features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::SelectConfig;
use crate::data::{FeatureKind, FeatureSchema, FeatureValue, Snapshot};
use crate::error::{Error, Result};
use crate::metrics::task_metrics;
use crate::rng::{substream, Rng};
use crate::sngp::softmax;

/// A cheap model refit at every elimination round. `features` are indices
/// into the schema; the others must be ignored.
pub trait Probe {
    type Fitted;
    fn fit(&self, schema: &FeatureSchema, train: &[&Snapshot], features: &[usize], task: usize) -> Result<Self::Fitted>;
    /// Class probabilities per row.
    fn predict(&self, fitted: &Self::Fitted, schema: &FeatureSchema, rows: &[&Snapshot]) -> Result<Vec<Vec<f64>>>;
}

/// Validation AUROC of a fitted probe (macro one-vs-rest for multiclass).
pub fn probe_auroc<P: Probe>(
    probe: &P,
    fitted: &P::Fitted,
    schema: &FeatureSchema,
    val: &[&Snapshot],
    task: usize,
) -> Result<f64> {
    let rows: Vec<&Snapshot> = val.iter().copied().filter(|s| s.label(task).is_some()).collect();
    let labels: Vec<usize> = rows.iter().map(|s| s.label(task).expect("filtered")).collect();
    let probs = probe.predict(fitted, schema, &rows)?;
    Ok(task_metrics(&probs, &labels, schema.tasks[task].classes, 1)?.auroc)
}

/// Flat per-feature encoding: numerics as value plus a missing indicator,
/// categoricals one-hot, multi-categoricals multi-hot, embeddings raw and
/// multi-embeddings averaged.
fn encode_feature(kind: &FeatureKind, v: &FeatureValue, out: &mut Vec<f64>) {
    match (kind, v) {
        (FeatureKind::Numeric, FeatureValue::Numeric(x)) => {
            out.push(x.unwrap_or(0.0));
            out.push(f64::from(u8::from(x.is_none())));
        }
        (FeatureKind::Categorical { vocab_size }, FeatureValue::Categorical(c)) => {
            let at = out.len();
            out.resize(at + vocab_size + 1, 0.0);
            out[at + c.unwrap_or(*vocab_size)] = 1.0;
        }
        (FeatureKind::MultiCategorical { vocab_size }, FeatureValue::MultiCategorical(cs)) => {
            let at = out.len();
            out.resize(at + vocab_size + 1, 0.0);
            match cs {
                Some(cs) => cs.iter().for_each(|&c| out[at + c] = 1.0),
                None => out[at + vocab_size] = 1.0,
            }
        }
        (FeatureKind::Embedding { dim }, FeatureValue::Embedding(e)) => match e {
            Some(e) => out.extend(e.iter().map(|&x| x as f64)),
            None => out.extend(std::iter::repeat_n(0.0, *dim)),
        },
        (FeatureKind::MultiEmbedding { dim, .. }, FeatureValue::MultiEmbedding(a)) => {
            let at = out.len();
            out.resize(at + dim, 0.0);
            for asset in a {
                for (o, &x) in out[at..].iter_mut().zip(&asset.vector) {
                    *o += x as f64 / a.len() as f64;
                }
            }
        }
        _ => {
            let width = match kind {
                FeatureKind::Numeric => 2,
                FeatureKind::Categorical { vocab_size } | FeatureKind::MultiCategorical { vocab_size } => vocab_size + 1,
                FeatureKind::Embedding { dim } | FeatureKind::MultiEmbedding { dim, .. } => *dim,
            };
            out.extend(std::iter::repeat_n(0.0, width));
        }
    }
}

fn design(schema: &FeatureSchema, rows: &[&Snapshot], features: &[usize]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|s| {
            let mut x = Vec::new();
            for &f in features {
                encode_feature(&schema.features[f].kind, &s.values[f], &mut x);
            }
            x
        })
        .collect()
}

/// Multinomial logistic regression, full-batch gradient descent on
/// standardized inputs.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl LogisticProbe {
    pub fn from_config(cfg: &SelectConfig) -> Self {
        Self {
            epochs: cfg.probe_epochs,
            lr: cfg.probe_lr,
            l2: cfg.probe_l2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FittedLogistic {
    features: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[cols + 1][classes]`, bias row last.
    w: Vec<Vec<f64>>,
}

impl Probe for LogisticProbe {
    type Fitted = FittedLogistic;

    fn fit(&self, schema: &FeatureSchema, train: &[&Snapshot], features: &[usize], task: usize) -> Result<FittedLogistic> {
        let rows: Vec<&Snapshot> = train.iter().copied().filter(|s| s.label(task).is_some()).collect();
        if rows.is_empty() {
            return Err(Error::Invalid(format!("task `{}` has no labelled rows", schema.tasks[task].name)));
        }
        let classes = schema.tasks[task].classes;
        let x = design(schema, &rows, features);
        let cols = x[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; cols];
        let mut scale = vec![0.0; cols];
        for r in &x {
            r.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n);
        }
        for r in &x {
            r.iter().zip(&mean).zip(&mut scale).for_each(|((v, m), s)| *s += (v - m).powi(2) / n);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
        let xs: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect())
            .collect();
        let ys: Vec<usize> = rows.iter().map(|s| s.label(task).expect("filtered")).collect();
        let mut w = vec![vec![0.0; classes]; cols + 1];
        let mut grad = vec![vec![0.0; classes]; cols + 1];
        for _ in 0..self.epochs {
            grad.iter_mut().for_each(|g| g.fill(0.0));
            for (r, &y) in xs.iter().zip(&ys) {
                let mut z = w[cols].clone();
                for (xi, wi) in r.iter().zip(&w) {
                    z.iter_mut().zip(wi).for_each(|(z, w)| *z += xi * w);
                }
                let mut p = softmax(&z);
                p[y] -= 1.0;
                for (xi, gi) in r.iter().zip(&mut grad) {
                    gi.iter_mut().zip(&p).for_each(|(g, p)| *g += xi * p / n);
                }
                grad[cols].iter_mut().zip(&p).for_each(|(g, p)| *g += p / n);
            }
            for (j, (wj, gj)) in w.iter_mut().zip(&grad).enumerate() {
                let decay = if j < cols { self.l2 } else { 0.0 };
                wj.iter_mut().zip(gj).for_each(|(w, g)| *w -= self.lr * (g + decay * *w));
            }
        }
        Ok(FittedLogistic {
            features: features.to_vec(),
            mean,
            scale,
            w,
        })
    }

    fn predict(&self, fitted: &FittedLogistic, schema: &FeatureSchema, rows: &[&Snapshot]) -> Result<Vec<Vec<f64>>> {
        let cols = fitted.mean.len();
        Ok(design(schema, rows, &fitted.features)
            .iter()
            .map(|r| {
                let mut z = fitted.w[cols].clone();
                for ((v, (m, s)), wi) in r.iter().zip(fitted.mean.iter().zip(&fitted.scale)).zip(&fitted.w) {
                    let xi = (v - m) * s;
                    z.iter_mut().zip(wi).for_each(|(z, w)| *z += xi * w);
                }
                softmax(&z)
            })
            .collect())
    }
}

/// Copies of `rows` with feature `f` shuffled across rows.
fn permuted(rows: &[&Snapshot], f: usize, rng: &mut Rng) -> Vec<Snapshot> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    rows.iter()
        .zip(&order)
        .map(|(s, &j)| {
            let mut c = (*s).clone();
            c.values[f] = rows[j].values[f].clone();
            c
        })
        .collect()
}

/// Drop in validation AUROC when feature `f` is shuffled, averaged over
/// `repeats` permutations. `base` is the unshuffled AUROC.
#[allow(clippy::too_many_arguments)]
pub fn permutation_importance<P: Probe>(
    probe: &P,
    fitted: &P::Fitted,
    schema: &FeatureSchema,
    val: &[&Snapshot],
    task: usize,
    f: usize,
    base: f64,
    repeats: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut drop = 0.0;
    for _ in 0..repeats {
        let p = permuted(val, f, rng);
        let refs: Vec<&Snapshot> = p.iter().collect();
        drop += base - probe_auroc(probe, fitted, schema, &refs, task)?;
    }
    Ok(drop / repeats.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliminationStep {
    pub round: usize,
    pub removed: String,
    pub importance: f64,
    /// Validation AUROC after the removal.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliminationTrace {
    pub task: String,
    pub tolerance: f64,
    pub min_features: usize,
    pub repeats: usize,
    /// Validation AUROC with every feature.
    pub full_metric: f64,
    pub steps: Vec<EliminationStep>,
    /// Importances of the features still present when elimination stopped.
    pub final_importances: Vec<(String, f64)>,
}

impl EliminationTrace {
    /// Re-applies the recorded removals to `schema`.
    pub fn replay(&self, schema: &FeatureSchema) -> Result<FeatureSchema> {
        let mut keep: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
        for s in &self.steps {
            let at = keep
                .iter()
                .position(|k| *k == s.removed)
                .ok_or_else(|| Error::Invalid(format!("trace removes unknown feature `{}`", s.removed)))?;
            keep.remove(at);
        }
        Ok(schema.restrict(&keep))
    }
}

/// Repeatedly refits the probe, scores every remaining feature and removes
/// the least important one. Stops before a removal would lower validation
/// AUROC by more than `cfg.tolerance` below the full-schema value, or when
/// `cfg.min_features` remain. Ties go to the earlier feature.
pub fn backward_eliminate<P: Probe>(
    probe: &P,
    schema: &FeatureSchema,
    train: &[&Snapshot],
    val: &[&Snapshot],
    task: usize,
    cfg: &SelectConfig,
    seed: u64,
) -> Result<(FeatureSchema, EliminationTrace)> {
    if task >= schema.tasks.len() {
        return Err(Error::Invalid(format!("task index {task} out of range")));
    }
    let mut rng = substream(seed, "select");
    let mut active: Vec<usize> = (0..schema.features.len()).collect();
    let mut fitted = probe.fit(schema, train, &active, task)?;
    let full = probe_auroc(probe, &fitted, schema, val, task)?;
    let mut current = full;
    let mut trace = EliminationTrace {
        task: schema.tasks[task].name.clone(),
        tolerance: cfg.tolerance,
        min_features: cfg.min_features,
        repeats: cfg.repeats,
        full_metric: full,
        steps: Vec::new(),
        final_importances: Vec::new(),
    };
    let mut round = 0;
    loop {
        let mut imp = Vec::with_capacity(active.len());
        for &f in &active {
            imp.push(permutation_importance(probe, &fitted, schema, val, task, f, current, cfg.repeats, &mut rng)?);
        }
        trace.final_importances = active.iter().zip(&imp).map(|(&f, &v)| (schema.features[f].name.clone(), v)).collect();
        if active.len() <= cfg.min_features || active.len() < 2 {
            break;
        }
        let (pos, &score) = imp
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty");
        let mut candidate = active.clone();
        let removed = candidate.remove(pos);
        let next = probe.fit(schema, train, &candidate, task)?;
        let metric = probe_auroc(probe, &next, schema, val, task)?;
        if full - metric > cfg.tolerance {
            break;
        }
        round += 1;
        trace.steps.push(EliminationStep {
            round,
            removed: schema.features[removed].name.clone(),
            importance: score,
            metric,
        });
        active = candidate;
        fitted = next;
        current = metric;
    }
    let keep: Vec<String> = active.iter().map(|&f| schema.features[f].name.clone()).collect();
    Ok((schema.restrict(&keep), trace))
}
