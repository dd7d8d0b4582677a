//! K-fold benchmark driver: optional pre-training then fine-tuning per
//! fold, test-fold metrics, mean and standard deviation across folds.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{make_folds, train_val_split, Dataset, Snapshot};
use crate::error::{Error, Result};
use crate::finetune::finetune;
use crate::metrics::{mean_std, task_metrics, TaskMetrics};
use crate::model::Model;
use crate::pretrain::pretrain;
use crate::rng::substream;

/// Where a public benchmark comes from.
#[derive(Clone, Copy, Debug)]
pub struct BenchmarkSource {
    pub name: &'static str,
    pub url: &'static str,
    /// Published mean 5-fold AUROC for reference.
    pub reference_auroc: Option<(f64, f64)>,
}

pub const SOURCES: &[BenchmarkSource] = &[
    BenchmarkSource {
        name: "1995_income",
        url: "https://www.kaggle.com/lodetomasi1995/income-classification",
        reference_auroc: Some((0.911, 0.002)),
    },
    BenchmarkSource {
        name: "blastchar",
        url: "https://www.kaggle.com/blastchar/telco-customer-churn",
        reference_auroc: Some((0.848, 0.012)),
    },
    BenchmarkSource {
        name: "adult",
        url: "http://automl.chalearn.org/data",
        reference_auroc: Some((0.733, 0.005)),
    },
    BenchmarkSource {
        name: "albert",
        url: "http://automl.chalearn.org/data",
        reference_auroc: None,
    },
    BenchmarkSource {
        name: "dota2games",
        url: "https://archive.ics.uci.edu/ml/datasets/Dota2+Games+Results",
        reference_auroc: None,
    },
];

pub fn source(name: &str) -> Option<&'static BenchmarkSource> {
    SOURCES.iter().find(|s| s.name == name)
}

/// `(data.csv, schema.json)` under `<data_dir>/<name>/`, or a
/// [`Error::MissingDataset`] naming the download location.
pub fn locate(name: &str, data_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let src = source(name).ok_or_else(|| {
        let known: Vec<&str> = SOURCES.iter().map(|s| s.name).collect();
        Error::Config(format!("unknown benchmark `{name}` (known: {})", known.join(", ")))
    })?;
    let dir = data_dir.join(name);
    let data = dir.join("data.csv");
    let schema = dir.join("schema.json");
    for p in [&data, &schema] {
        if !p.is_file() {
            return Err(Error::MissingDataset {
                name: name.to_string(),
                path: p.clone(),
                source_url: src.url.to_string(),
            });
        }
    }
    Ok((data, schema))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFold {
    pub task: String,
    #[serde(flatten)]
    pub metrics: TaskMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
    pub pretrain_final_loss: Option<f64>,
    pub finetune_steps: usize,
    pub best_step: usize,
    pub tasks: Vec<TaskFold>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub ece_mean: f64,
    pub ece_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub folds: usize,
    pub pretrain_steps: usize,
    pub auprc_interpolation: String,
    pub ece_bins: usize,
    pub seed: u64,
    pub config_digest: String,
    pub dataset_digest: String,
    pub fold_results: Vec<FoldResult>,
    pub summary: Vec<TaskSummary>,
}

impl MetricsReport {
    pub fn mean_auroc(&self, task: usize) -> Option<f64> {
        self.summary.get(task).map(|s| s.auroc_mean)
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    substream(seed, &format!("fold{fold}")).random()
}

/// Trains and scores one fold. `train`/`test` index `ds.snapshots`.
pub fn run_fold(ds: &Dataset, cfg: &RunConfig, fold: usize, train: &[usize], test: &[usize]) -> Result<FoldResult> {
    let seed = fold_seed(cfg.seed, fold);
    let labels = ds.labels(0);
    let mut vrng = substream(seed, "data.val");
    let split = train_val_split(train, &labels, cfg.finetune.val_fraction, &mut vrng)?;
    let snaps = |idx: &[usize]| -> Vec<&Snapshot> { idx.iter().map(|&i| &ds.snapshots[i]).collect() };
    let (tr, va, te) = (snaps(&split.train), snaps(&split.test), snaps(test));
    let mut model = Model::new(&cfg.model, &ds.schema, seed)?;
    let mut pretrain_final_loss = None;
    if cfg.pretrain.steps > 0 {
        let all_train = snaps(train);
        let curve = pretrain(&mut model, &all_train, &cfg.pretrain, seed, |_| {})?;
        pretrain_final_loss = curve.last().map(|r| r.total);
    }
    let report = finetune(&mut model, &tr, &va, &cfg.finetune, seed, |_| {})?;
    let preds = model.predict_all(&te, cfg.eval.chunk)?;
    let mut tasks = Vec::new();
    for (t, spec) in ds.schema.tasks.iter().enumerate() {
        let (probs, ys): (Vec<Vec<f64>>, Vec<usize>) = te
            .iter()
            .zip(&preds)
            .filter_map(|(s, p)| s.label(t).map(|y| (p[t].probs.clone(), y)))
            .unzip();
        tasks.push(TaskFold {
            task: spec.name.clone(),
            metrics: task_metrics(&probs, &ys, spec.classes, cfg.eval.ece_bins)?,
        });
    }
    Ok(FoldResult {
        fold,
        train_rows: tr.len(),
        val_rows: va.len(),
        test_rows: te.len(),
        pretrain_final_loss,
        finetune_steps: report.steps,
        best_step: report.best_step,
        tasks,
    })
}

/// Runs `cfg.eval.folds`-fold cross-validation, stratified on the first
/// task, with up to `threads` folds in flight. Results do not depend on
/// `threads`.
pub fn run_benchmark(
    name: &str,
    ds: &Dataset,
    cfg: &RunConfig,
    dataset_digest: &str,
    threads: usize,
    on_fold: impl Fn(&FoldResult) + Sync,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if ds.schema.tasks.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one task".into()));
    }
    let k = cfg.eval.folds;
    let folds = make_folds(&ds.labels(0), k, &mut substream(cfg.seed, "data.folds"))?;
    let threads = threads.clamp(1, k);
    let mut results: Vec<Option<Result<FoldResult>>> = (0..k).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, slot) in results.chunks_mut(k.div_ceil(threads)).enumerate() {
            let folds = &folds;
            let on_fold = &on_fold;
            let per = k.div_ceil(threads);
            scope.spawn(move || {
                for (j, out) in slot.iter_mut().enumerate() {
                    let f = w * per + j;
                    let r = run_fold(ds, cfg, f, &folds[f].train, &folds[f].test);
                    if let Ok(r) = &r {
                        on_fold(r);
                    }
                    *out = Some(r);
                }
            });
        }
    });
    let fold_results = results.into_iter().map(|r| r.expect("every fold ran")).collect::<Result<Vec<_>>>()?;
    let summary = ds
        .schema
        .tasks
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            let col = |f: fn(&TaskMetrics) -> f64| mean_std(&fold_results.iter().map(|r| f(&r.tasks[t].metrics)).collect::<Vec<_>>());
            let (am, asd) = col(|m| m.auroc);
            let (pm, psd) = col(|m| m.auprc);
            let (em, esd) = col(|m| m.ece);
            TaskSummary {
                task: spec.name.clone(),
                auroc_mean: am,
                auroc_std: asd,
                auprc_mean: pm,
                auprc_std: psd,
                ece_mean: em,
                ece_std: esd,
            }
        })
        .collect();
    Ok(MetricsReport {
        dataset: name.to_string(),
        folds: k,
        pretrain_steps: cfg.pretrain.steps,
        auprc_interpolation: "step".into(),
        ece_bins: cfg.eval.ece_bins,
        seed: cfg.seed,
        config_digest: cfg.digest(),
        dataset_digest: dataset_digest.to_string(),
        fold_results,
        summary,
    })
}
