//! Run manifests: everything needed to reproduce a run's outputs.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use alf_core::config::RunConfig;
use serde::Serialize;

use crate::exit::{io, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct DatasetDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Seeds {
    /// Root seed; every random stream is derived from it by name.
    pub root: u64,
    pub streams: Vec<&'static str>,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub git_describe: &'static str,
    pub config: RunConfig,
    pub config_digest: String,
    pub seeds: Seeds,
    pub datasets: Vec<DatasetDigest>,
    pub checkpoint: Option<DatasetDigest>,
    pub threads: usize,
    pub started_unix: u64,
    pub wall_time_secs: f64,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl Manifest {
    pub fn start(command: &str, config: &RunConfig, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            git_describe: env!("ALF_GIT_DESCRIBE"),
            config: config.clone(),
            config_digest: config.digest(),
            seeds: Seeds {
                root: config.seed,
                streams: Vec::new(),
            },
            datasets: Vec::new(),
            checkpoint: None,
            threads,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_time_secs: 0.0,
            outputs: Vec::new(),
            clock: Some(Instant::now()),
        }
    }

    pub fn dataset(&mut self, path: &Path) -> CliResult<()> {
        let sha256 = alf_core::benchmark::file_digest(path)?;
        self.datasets.push(DatasetDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn checkpoint(&mut self, path: &Path) -> CliResult<()> {
        let sha256 = alf_core::benchmark::file_digest(path)?;
        self.checkpoint = Some(DatasetDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Writes `<dir>/manifest.json`.
    pub fn finish(mut self, dir: &Path) -> CliResult<PathBuf> {
        self.wall_time_secs = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
        Ok(path)
    }
}
