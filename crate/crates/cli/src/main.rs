mod exit;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};

use alf_core::benchmark::{locate, run_benchmark};
use alf_core::checkpoint;
use alf_core::config::RunConfig;
use alf_core::data::{load_dataset, parse_dataset, read_sidecar, train_val_split, Dataset, FeatureSchema, Snapshot};
use alf_core::export::export_embeddings;
use alf_core::finetune::finetune;
use alf_core::metrics::task_metrics;
use alf_core::model::Model;
use alf_core::pretrain::pretrain;
use alf_core::rng::substream;
use alf_core::select::{backward_eliminate, LogisticProbe};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use exit::{io, Category, CliError, CliResult};
use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "alf", version, about = "Multi-modal tabular transformer: pre-train, fine-tune, predict, evaluate")]
#[command(after_help = exit::TABLE)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML, keys as in configs/default.toml); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for results and the run manifest.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/latest")]
    out: PathBuf,

    /// Worker threads (benchmark folds run in parallel).
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,

    /// Validate the configuration and inputs, print a summary and exit without training or writing files.
    #[arg(long, global = true)]
    dry_run: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Schema file (JSON).
    #[arg(long, value_name = "PATH")]
    schema: Option<PathBuf>,

    /// Delimited data file.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,

    /// Binary sidecar of little-endian f32 embedding values.
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Self-supervised pre-training; writes model.ckpt and pretrain_curve.jsonl.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Supervised fine-tuning; writes model.ckpt and finetune_report.json.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        /// Start from this checkpoint; its schema replaces --schema.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Calibrated predictions for every row; writes predictions.jsonl.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Rows to score; label columns are optional.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        embeddings: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on labelled data; writes metrics.json.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        embeddings: Option<PathBuf>,
    },
    /// K-fold benchmark on a public dataset under <data-dir>/<dataset>/; writes metrics.json.
    Benchmark {
        /// 1995_income, blastchar, adult, albert or dota2games.
        #[arg(long)]
        dataset: String,
        #[arg(long, value_name = "DIR", default_value = "data")]
        data_dir: PathBuf,
        /// Override eval.folds.
        #[arg(long)]
        folds: Option<usize>,
        /// Override pretrain.steps; 0 fine-tunes from scratch.
        #[arg(long)]
        pretrain_steps: Option<usize>,
    },
    /// Backward elimination by permutation importance; writes selection_trace.json and schema.json.
    SelectFeatures {
        #[command(flatten)]
        data: DataArgs,
        /// Task whose validation AUROC drives the elimination.
        #[arg(long, default_value_t = 0)]
        task: usize,
    },
    /// Pooled embeddings of every row; writes embeddings.f32, embeddings.tsv and export.json.
    ExportEmbeddings {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        embeddings: Option<PathBuf>,
        /// Also write a 2-D PCA projection (embeddings.pca.tsv).
        #[arg(long)]
        pca: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Benchmark { .. } => "benchmark",
            Command::SelectFeatures { .. } => "select-features",
            Command::ExportEmbeddings { .. } => "export-embeddings",
        }
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    v.as_deref().ok_or_else(|| CliError::config(format!("missing required option {flag}")))
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `data` with an already fitted schema (a checkpoint's). Task columns
/// absent from the header are dropped when `labels_optional`.
fn load_with_schema(data: &Path, mut schema: FeatureSchema, embeddings: Option<&Path>, labels_optional: bool) -> CliResult<Dataset> {
    let text = std::fs::read_to_string(data).map_err(|e| io(data, e))?;
    if labels_optional {
        let header: Vec<&str> = text.lines().next().unwrap_or("").split(schema.delimiter).map(|h| h.trim().trim_matches('"')).collect();
        if schema.tasks.iter().any(|t| !header.contains(&t.column())) {
            schema.tasks.clear();
        }
    }
    let sidecar = embeddings.map(read_sidecar).transpose()?;
    Ok(parse_dataset(&text, schema, sidecar.as_deref())?)
}

fn refs(ds: &Dataset) -> Vec<&Snapshot> {
    ds.snapshots.iter().collect()
}

fn create_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<PathBuf> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    std::fs::write(path, text + "\n").map_err(|e| io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> CliResult<PathBuf> {
    let file = std::fs::File::create(path).map_err(|e| io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, &r).expect("row serializes");
        w.write_all(b"\n").map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))?;
    Ok(path.to_path_buf())
}

#[derive(Serialize)]
struct DryRun<'a> {
    dry_run: bool,
    command: &'a str,
    config_digest: String,
    rows: usize,
    features: usize,
    tasks: Vec<String>,
}

fn dry_run(command: &str, cfg: &RunConfig, ds: &Dataset) -> CliResult<()> {
    let summary = DryRun {
        dry_run: true,
        command,
        config_digest: cfg.digest(),
        rows: ds.len(),
        features: ds.schema.features.len(),
        tasks: ds.schema.tasks.iter().map(|t| t.name.clone()).collect(),
    };
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

#[derive(Serialize)]
struct TaskReport {
    task: String,
    #[serde(flatten)]
    metrics: alf_core::metrics::TaskMetrics,
}

fn evaluate(model: &Model, ds: &Dataset, cfg: &RunConfig) -> CliResult<Vec<TaskReport>> {
    let rows = refs(ds);
    let preds = model.predict_all(&rows, cfg.eval.chunk)?;
    let mut out = Vec::new();
    for (t, spec) in model.schema.tasks.iter().enumerate() {
        let (probs, ys): (Vec<Vec<f64>>, Vec<usize>) = rows
            .iter()
            .zip(&preds)
            .filter_map(|(s, p)| s.label(t).map(|y| (p[t].probs.clone(), y)))
            .unzip();
        out.push(TaskReport {
            task: spec.name.clone(),
            metrics: task_metrics(&probs, &ys, spec.classes, cfg.eval.ece_bins)?,
        });
    }
    Ok(out)
}

fn run(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    let mut cfg = load_config(common)?;
    let threads = common.threads as usize;
    let name = cli.command.name();
    let out = &common.out;

    match &cli.command {
        Command::Pretrain { data } => {
            let (schema, path) = (required(&data.schema, "--schema")?, required(&data.data, "--data")?);
            let ds = load_dataset(path, schema, data.embeddings.as_deref())?;
            if common.dry_run {
                return dry_run(name, &cfg, &ds);
            }
            if cfg.pretrain.steps == 0 {
                return Err(CliError::config("pretrain.steps is 0; nothing to do"));
            }
            let mut m = Manifest::start(name, &cfg, threads);
            m.seeds.streams = vec!["init", "sngp", "data.pretrain", "augment"];
            m.dataset(path)?;
            create_out(out)?;
            let mut model = Model::new(&cfg.model, &ds.schema, cfg.seed)?;
            let curve = pretrain(&mut model, &refs(&ds), &cfg.pretrain, cfg.seed, |r| {
                if r.step % 50 == 0 {
                    log::info!("pretrain step {} loss {:.4}", r.step, r.total);
                }
            })?;
            let ckpt = out.join("model.ckpt");
            checkpoint::save(&model, &ckpt)?;
            m.outputs = vec![ckpt, write_lines(&out.join("pretrain_curve.jsonl"), &curve)?];
            m.finish(out)?;
        }
        Command::Finetune { data, checkpoint: init } => {
            let path = required(&data.data, "--data")?;
            let (mut model, ds) = match init {
                Some(c) => {
                    let model = checkpoint::load(c, Some(&cfg.model))?;
                    let ds = load_with_schema(path, model.schema.clone(), data.embeddings.as_deref(), false)?;
                    (Some(model), ds)
                }
                None => (None, load_dataset(path, required(&data.schema, "--schema")?, data.embeddings.as_deref())?),
            };
            if common.dry_run {
                return dry_run(name, &cfg, &ds);
            }
            let mut m = Manifest::start(name, &cfg, threads);
            m.seeds.streams = vec!["init", "sngp", "data.val", "data.finetune"];
            m.dataset(path)?;
            if let Some(c) = init {
                m.checkpoint(c)?;
            }
            create_out(out)?;
            let mut model = match model.take() {
                Some(m) => m,
                None => Model::new(&cfg.model, &ds.schema, cfg.seed)?,
            };
            let all: Vec<usize> = (0..ds.len()).collect();
            let split = train_val_split(&all, &ds.labels(0), cfg.finetune.val_fraction, &mut substream(cfg.seed, "data.val"))?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.snapshots[i]).collect::<Vec<_>>();
            let report = finetune(&mut model, &pick(&split.train), &pick(&split.test), &cfg.finetune, cfg.seed, |r| {
                log::info!("finetune step {} loss {:.4} val auroc {:?}", r.step, r.train_loss, r.val_auroc);
            })?;
            let ckpt = out.join("model.ckpt");
            checkpoint::save(&model, &ckpt)?;
            m.outputs = vec![ckpt, write_json(&out.join("finetune_report.json"), &report)?];
            m.finish(out)?;
        }
        Command::Predict { checkpoint: c, input, embeddings } => {
            let model = checkpoint::load(c, None)?;
            let ds = load_with_schema(input, model.schema.clone(), embeddings.as_deref(), true)?;
            if common.dry_run {
                return dry_run(name, &cfg, &ds);
            }
            let mut m = Manifest::start(name, &cfg, threads);
            m.checkpoint(c)?;
            m.dataset(input)?;
            create_out(out)?;
            let rows = refs(&ds);
            let preds = model.predict_all(&rows, cfg.eval.chunk)?;
            #[derive(Serialize)]
            struct Row<'a> {
                row: usize,
                id: Option<&'a str>,
                predictions: &'a [alf_core::model::Prediction],
            }
            let lines = preds.iter().enumerate().map(|(i, p)| Row {
                row: i,
                id: rows[i].id.as_deref(),
                predictions: p,
            });
            m.outputs = vec![write_lines(&out.join("predictions.jsonl"), lines)?];
            m.finish(out)?;
        }
        Command::Eval { checkpoint: c, data, embeddings } => {
            let model = checkpoint::load(c, None)?;
            let ds = load_with_schema(data, model.schema.clone(), embeddings.as_deref(), false)?;
            if common.dry_run {
                return dry_run(name, &cfg, &ds);
            }
            let mut m = Manifest::start(name, &cfg, threads);
            m.checkpoint(c)?;
            m.dataset(data)?;
            create_out(out)?;
            let report = evaluate(&model, &ds, &cfg)?;
            m.outputs = vec![write_json(&out.join("metrics.json"), &report)?];
            m.finish(out)?;
        }
        Command::Benchmark { dataset, data_dir, folds, pretrain_steps } => {
            if let Some(k) = folds {
                cfg.eval.folds = *k;
            }
            if let Some(n) = pretrain_steps {
                cfg.pretrain.steps = *n;
            }
            cfg.validate()?;
            let (data, schema) = locate(dataset, data_dir)?;
            let ds = load_dataset(&data, &schema, None)?;
            if common.dry_run {
                return dry_run(name, &cfg, &ds);
            }
            let mut m = Manifest::start(name, &cfg, threads);
            m.seeds.streams = vec!["data.folds", "fold<k>", "data.val", "init", "sngp", "data.pretrain", "augment", "data.finetune"];
            m.dataset(&data)?;
            create_out(out)?;
            let digest = m.datasets[0].sha256.clone();
            let report = run_benchmark(dataset, &ds, &cfg, &digest, threads, |f| {
                log::info!("fold {} auroc {:.4}", f.fold, f.tasks[0].metrics.auroc);
            })?;
            for s in &report.summary {
                println!("{}: auroc {:.4} ± {:.4}, auprc {:.4} ± {:.4}", s.task, s.auroc_mean, s.auroc_std, s.auprc_mean, s.auprc_std);
            }
            m.outputs = vec![write_json(&out.join("metrics.json"), &report)?];
            m.finish(out)?;
        }
        Command::SelectFeatures { data, task } => {
            let (schema, path) = (required(&data.schema, "--schema")?, required(&data.data, "--data")?);
            let ds = load_dataset(path, schema, data.embeddings.as_deref())?;
            if *task >= ds.schema.tasks.len() {
                return Err(CliError::config(format!("--task {task} out of range ({} tasks)", ds.schema.tasks.len())));
            }
            if common.dry_run {
                return dry_run(name, &cfg, &ds);
            }
            let mut m = Manifest::start(name, &cfg, threads);
            m.seeds.streams = vec!["data.select", "select"];
            m.dataset(path)?;
            create_out(out)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let split = train_val_split(&all, &ds.labels(*task), cfg.select.val_fraction, &mut substream(cfg.seed, "data.select"))?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.snapshots[i]).collect::<Vec<_>>();
            let probe = LogisticProbe::from_config(&cfg.select);
            let (reduced, trace) = backward_eliminate(&probe, &ds.schema, &pick(&split.train), &pick(&split.test), *task, &cfg.select, cfg.seed)?;
            for s in &trace.steps {
                println!("removed {} (importance {:.5}, val auroc {:.4})", s.removed, s.importance, s.metric);
            }
            let schema_out = out.join("schema.json");
            reduced.save(&schema_out)?;
            m.outputs = vec![write_json(&out.join("selection_trace.json"), &trace)?, schema_out];
            m.finish(out)?;
        }
        Command::ExportEmbeddings { checkpoint: c, data, embeddings, pca } => {
            let model = checkpoint::load(c, None)?;
            let ds = load_with_schema(data, model.schema.clone(), embeddings.as_deref(), true)?;
            if common.dry_run {
                return dry_run(name, &cfg, &ds);
            }
            let mut m = Manifest::start(name, &cfg, threads);
            m.checkpoint(c)?;
            m.dataset(data)?;
            create_out(out)?;
            let summary = export_embeddings(&model, &refs(&ds), cfg.eval.chunk, &out.join("embeddings"), *pca)?;
            let mut outputs = vec![summary.vectors.clone(), summary.index.clone()];
            outputs.extend(summary.pca.clone());
            outputs.push(write_json(&out.join("export.json"), &summary)?);
            m.outputs = outputs;
            m.finish(out)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let category = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    std::process::exit(if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { Category::Usage.code() } else { 0 });
                }
                ErrorKind::MissingRequiredArgument => Category::Config,
                _ => Category::Usage,
            };
            let text = e.to_string();
            let message = text.split("\nUsage:").next().unwrap_or(&text).trim().trim_start_matches("error:").trim().to_string();
            let err = CliError::new(category, message);
            eprintln!("{err}");
            std::process::exit(category.code());
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.category.code());
    }
}
