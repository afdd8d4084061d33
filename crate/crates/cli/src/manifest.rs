use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use read_lab::checkpoint::write_atomic;
use read_lab::trainer::RunSummary;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{dataset_checksums, RunConfig};
use crate::CliError;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub outdir: PathBuf,
    pub metrics: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Record of one `train` invocation, written to `<outdir>/manifest.json`
/// when the run ends. `config` is a complete flat config that can be
/// passed back to `train --config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Value,
    pub dataset_checksums: BTreeMap<String, String>,
    pub seed: u64,
    pub artifacts: Artifacts,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outcome: String,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn absolute(p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if let Ok(abs) = std::path::absolute(&*path) {
            *path = abs;
        }
    }
}

impl RunManifest {
    pub fn start(config: &RunConfig, outdir: &Path) -> Result<Self, CliError> {
        let mut config = config.clone();
        let d = &mut config.data;
        for p in [&mut d.train_path, &mut d.test_path, &mut d.train_features, &mut d.test_features] {
            absolute(p);
        }
        Ok(RunManifest {
            dataset_checksums: dataset_checksums(&config.data)?.into_iter().collect(),
            seed: config.train.seed,
            config: config.to_json(),
            artifacts: Artifacts {
                outdir: outdir.to_path_buf(),
                ..Default::default()
            },
            started_at: now(),
            finished_at: None,
            outcome: "running".into(),
            final_accuracy: None,
            best_accuracy: None,
        })
    }

    pub fn finish(&mut self, outcome: &read_lab::Result<RunSummary>) {
        self.finished_at = Some(now());
        match outcome {
            Ok(s) => {
                self.outcome = "ok".into();
                self.artifacts.metrics = Some(s.metrics_path.clone());
                self.artifacts.final_checkpoint = Some(s.final_checkpoint.clone());
                self.final_accuracy = Some(s.final_accuracy);
                self.best_accuracy = Some(s.best_accuracy);
            }
            Err(e) => self.outcome = format!("aborted: {e}"),
        }
    }

    pub fn write(&self, outdir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(outdir).map_err(|e| CliError::Runtime(format!("{}: {e}", outdir.display())))?;
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&outdir.join(FILE), json.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn read(outdir: &Path) -> Result<Self, CliError> {
        let path = outdir.join(FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        RunConfig::from_json(&self.config.to_string(), Path::new(FILE), Path::new(""))
    }
}
