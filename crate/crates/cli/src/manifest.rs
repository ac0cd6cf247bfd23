use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use enct5_core::model::ModelConfig;
use enct5_core::tasks::TaskSpec;
use enct5_core::training::{HistoryRow, TrainConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timing {
    pub steps: usize,
    pub total_seconds: f64,
    pub mean_step_seconds: f64,
}

impl Timing {
    pub fn from_history(history: &[HistoryRow]) -> Self {
        let total: f64 = history.iter().map(|r| r.seconds).sum();
        Timing {
            steps: history.len(),
            total_seconds: total,
            mean_step_seconds: if history.is_empty() {
                0.0
            } else {
                total / history.len() as f64
            },
        }
    }
}

/// Written next to every output. `input_hash` covers the command, the
/// resolved configs and the bytes of every input file.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub model_config: Option<ModelConfig>,
    pub train_config: Option<TrainConfig>,
    pub task: Option<TaskSpec>,
    pub inputs: Vec<PathBuf>,
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub timing: Option<Timing>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            seed,
            model_config: None,
            train_config: None,
            task: None,
            inputs: Vec::new(),
            input_hash: String::new(),
            outputs: Vec::new(),
            timing: None,
        }
    }

    pub fn finish(&mut self) -> Result<()> {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(self.seed.to_le_bytes());
        if let Some(c) = &self.model_config {
            h.update(c.to_toml_string().as_bytes());
        }
        if let Some(c) = &self.train_config {
            h.update(c.to_toml_string().as_bytes());
        }
        if let Some(t) = &self.task {
            h.update(t.to_toml_string().as_bytes());
        }
        for p in &self.inputs {
            let bytes = std::fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        self.input_hash = format!("{:x}", h.finalize());
        Ok(())
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finish()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
