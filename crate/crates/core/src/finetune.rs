//! Supervised fine-tuning of trunk and task heads on the summed focal loss,
//! with early stopping on validation AUPRC and a final covariance pass.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::config::FinetuneConfig;
use crate::data::Snapshot;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::losses::focal_loss;
use crate::metrics::{task_metrics, TaskMetrics};
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore, Session};
use crate::pretrain::BatchSampler;
use crate::rng::substream;
use crate::sngp::softmax;
use crate::tensor::Real;
use crate::trunk::Mode;

/// Per-task focal losses of a batch in fine-tuning mode. Rows without a
/// label for a task do not contribute to that task.
pub fn task_losses<T: Real>(model: &Model, s: &mut Session<'_, T>, batch: &[&Snapshot]) -> Result<Vec<Option<Var>>> {
    let f = model.forward(s, batch, Mode::Finetune)?;
    let mut out = Vec::with_capacity(model.heads.len());
    for (t, task) in model.schema.tasks.iter().enumerate() {
        let (rows, ys): (Vec<usize>, Vec<usize>) = batch
            .iter()
            .enumerate()
            .filter_map(|(r, x)| x.label(t).map(|y| (r, y)))
            .unzip();
        if rows.is_empty() {
            out.push(None);
            continue;
        }
        let pooled = if rows.len() == batch.len() {
            f.out.pooled
        } else {
            s.g.index_select(f.out.pooled, &rows)?
        };
        let logits = model.logits(s, pooled, t)?;
        out.push(Some(focal_loss(&mut s.g, logits, &ys, task.gamma, task.class_weights.as_deref())?));
    }
    Ok(out)
}

/// Uncalibrated class probabilities per task, `[task][row]`.
pub fn plain_probs(model: &Model, snaps: &[&Snapshot], chunk: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(snaps.len()); model.heads.len()];
    for c in snaps.chunks(chunk.max(1)) {
        for (t, o) in model.head_outputs(c)?.into_iter().enumerate() {
            out[t].extend(o.logits.chunks(o.classes).map(softmax));
        }
    }
    Ok(out)
}

/// Metrics of every task on the labelled rows of `snaps`, using `probs[t][row]`.
pub fn evaluate_probs(model: &Model, snaps: &[&Snapshot], probs: &[Vec<Vec<f64>>], ece_bins: usize) -> Result<Vec<Option<TaskMetrics>>> {
    model
        .schema
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let (p, y): (Vec<Vec<f64>>, Vec<usize>) = snaps
                .iter()
                .zip(&probs[t])
                .filter_map(|(x, p)| x.label(t).map(|y| (p.clone(), y)))
                .unzip();
            Ok(task_metrics(&p, &y, task.classes, ece_bins).ok())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_auprc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub steps: usize,
    pub best_step: usize,
    pub best_val_auprc: Option<f64>,
    pub curve: Vec<EvalRecord>,
    /// Per-step per-task losses.
    pub task_losses: Vec<Vec<Option<f64>>>,
}

impl FinetuneReport {
    /// First evaluated step at which validation AUROC reached `threshold`.
    pub fn steps_to_auroc(&self, threshold: f64) -> Option<usize> {
        self.curve
            .iter()
            .find(|r| r.val_auroc.is_some_and(|a| a >= threshold))
            .map(|r| r.step)
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Fine-tunes `model` on `train`, validating on `val` every
/// `cfg.eval_every` steps. The parameters of the best validation AUPRC are
/// restored at the end, then SNGP precisions are fitted on `train`.
pub fn finetune(
    model: &mut Model,
    train: &[&Snapshot],
    val: &[&Snapshot],
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<FinetuneReport> {
    for (t, task) in model.schema.tasks.iter().enumerate() {
        if !train.iter().any(|x| x.label(t).is_some()) {
            return Err(Error::Invalid(format!("task `{}` has no labelled training example", task.name)));
        }
    }
    if model.schema.tasks.is_empty() {
        return Err(Error::Invalid("fine-tuning needs at least one task".into()));
    }
    let frozen: HashSet<ParamId> = if cfg.linear_probe {
        let keep: HashSet<ParamId> = model.head_params().into_iter().collect();
        model.store.trainable_ids().filter(|id| !keep.contains(id)).collect()
    } else {
        HashSet::new()
    };
    let mut sampler = BatchSampler::new(train.len(), substream(seed, "data.finetune"));
    let mut opt = AdamW::<f32>::new(cfg.optimizer);
    let sched = cfg.schedule.build(cfg.max_steps, crate::config::FINETUNE_WARMUP_MULTIPLIER);
    let mut report = FinetuneReport {
        steps: 0,
        best_step: 0,
        best_val_auprc: None,
        curve: Vec::new(),
        task_losses: Vec::new(),
    };
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut since_best = 0usize;
    let mut window = Vec::new();
    for step in 0..cfg.max_steps {
        let idx = sampler.next(cfg.batch_size);
        let batch: Vec<&Snapshot> = idx.iter().map(|&i| train[i]).collect();
        let lr = sched.lr_at(step);
        let (losses, grads) = {
            let mut s = Session::with_frozen(&model.store, &frozen);
            let parts = task_losses(model, &mut s, &batch)?;
            let vals: Vec<Option<f64>> = parts.iter().map(|p| p.map(|v| s.g.value(v).item() as f64)).collect();
            let mut total: Option<Var> = None;
            for p in parts.into_iter().flatten() {
                total = Some(match total {
                    None => p,
                    Some(a) => s.g.add(a, p)?,
                });
            }
            let Some(total) = total else {
                report.task_losses.push(vals);
                continue;
            };
            let tv = s.g.value(total).item() as f64;
            if !tv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("task losses {vals:?}"),
                });
            }
            let mut g = s.g.backward(total)?;
            (vals, s.param_grads(&mut g))
        };
        opt.step(&mut model.store, &grads, lr)?;
        if !cfg.linear_probe {
            model.refresh_spectral(cfg.power_iters);
        }
        window.push(losses.iter().flatten().sum::<f64>());
        report.task_losses.push(losses);
        report.steps = step + 1;

        let last = step + 1 == cfg.max_steps;
        if (step + 1) % cfg.eval_every == 0 || last {
            let train_loss = window.iter().sum::<f64>() / window.len().max(1) as f64;
            window.clear();
            let (auroc, auprc) = if val.is_empty() {
                (None, None)
            } else {
                let probs = plain_probs(model, val, 512)?;
                let m = evaluate_probs(model, val, &probs, 15)?;
                (
                    mean_of(m.iter().flatten().map(|m| m.auroc)),
                    mean_of(m.iter().flatten().map(|m| m.auprc)),
                )
            };
            let rec = EvalRecord {
                step: step + 1,
                train_loss,
                val_auroc: auroc,
                val_auprc: auprc,
            };
            on_eval(&rec);
            report.curve.push(rec);
            if let Some(ap) = auprc {
                if best.as_ref().is_none_or(|(b, _)| ap > *b) {
                    best = Some((ap, model.store.clone()));
                    report.best_step = step + 1;
                    report.best_val_auprc = Some(ap);
                    since_best = 0;
                } else {
                    since_best += 1;
                    if cfg.patience > 0 && since_best >= cfg.patience {
                        break;
                    }
                }
            } else {
                report.best_step = step + 1;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
        model.reset_caches();
    }
    model.fit_covariance(train, 512)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, FeatureSpec, FeatureValue, TaskSpec};
    use crate::model::ModelConfig;
    use crate::sngp::SngpConfig;

    fn data() -> (FeatureSchema, Vec<Snapshot>) {
        let mut t2 = TaskSpec::binary("copy");
        t2.gamma = 0.0;
        let mut t1 = TaskSpec::binary("y");
        t1.gamma = 0.0;
        let schema = FeatureSchema::new(vec![FeatureSpec::numeric("a")], vec![t1, t2]).unwrap();
        let snaps = (0..40)
            .map(|i| {
                let x = i as f64 / 20.0 - 1.0;
                let y = usize::from(x > 0.0);
                Snapshot {
                    id: None,
                    timestamp: None,
                    values: vec![FeatureValue::Numeric(Some(x))],
                    labels: vec![Some(y), Some(y)],
                }
            })
            .collect();
        (schema, snaps)
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            d_prime: Some(8),
            sngp: SngpConfig {
                d_rf: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn identical_tasks_have_equal_losses() {
        let (schema, snaps) = data();
        let mut m = Model::new(&cfg(), &schema, 1).unwrap();
        // give both heads identical parameters
        let (a, b) = (m.head_params()[0], m.head_params()[1]);
        let v = m.store.get(a).clone();
        m.store.set(b, v).unwrap();
        let refs: Vec<&Snapshot> = snaps.iter().collect();
        let fc = FinetuneConfig {
            max_steps: 5,
            batch_size: 8,
            eval_every: 5,
            ..Default::default()
        };
        // identical random features too
        if let (crate::model::TaskHead::Sngp(h0), crate::model::TaskHead::Sngp(h1)) = (&m.heads[0], &m.heads[1]) {
            let (o, p) = (m.store.get(h0.omega).clone(), m.store.get(h0.phase).clone());
            let (o1, p1) = (h1.omega, h1.phase);
            m.store.set(o1, o).unwrap();
            m.store.set(p1, p).unwrap();
        }
        let r = finetune(&mut m, &refs, &[], &fc, 0, |_| {}).unwrap();
        for l in &r.task_losses {
            assert_eq!(l[0], l[1]);
        }
    }

    #[test]
    fn linear_probe_touches_only_heads() {
        let (schema, snaps) = data();
        let mut m = Model::new(&cfg(), &schema, 2).unwrap();
        let before = m.store.clone();
        let refs: Vec<&Snapshot> = snaps.iter().collect();
        let fc = FinetuneConfig {
            max_steps: 3,
            batch_size: 8,
            eval_every: 3,
            linear_probe: true,
            ..Default::default()
        };
        finetune(&mut m, &refs, &[], &fc, 0, |_| {}).unwrap();
        let heads: HashSet<ParamId> = m.head_params().into_iter().collect();
        let mut changed_head = false;
        for id in m.store.trainable_ids() {
            let same = m.store.get(id).data() == before.get(id).data();
            if heads.contains(&id) {
                changed_head |= !same;
            } else {
                assert!(same, "{} changed", m.store.name(id));
            }
        }
        assert!(changed_head);
    }

    #[test]
    fn unlabelled_task_is_error() {
        let (schema, mut snaps) = data();
        for s in &mut snaps {
            s.labels[1] = None;
        }
        let mut m = Model::new(&cfg(), &schema, 3).unwrap();
        let refs: Vec<&Snapshot> = snaps.iter().collect();
        assert!(finetune(&mut m, &refs, &[], &FinetuneConfig::default(), 0, |_| {}).is_err());
    }
}
