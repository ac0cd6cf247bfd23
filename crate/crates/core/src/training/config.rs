use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parameters `finetune` returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The evaluation point with the highest validation score (earliest on ties).
    #[default]
    BestValidation,
    Last,
}

fn default_rate() -> f64 {
    0.15
}

fn default_span() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Rows per step. With packing on, a row can hold several examples.
    pub batch_size: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
    /// Constant learning rate.
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub packing: bool,
    /// Validation cadence in steps; 0 evaluates only after the last step.
    #[serde(default)]
    pub eval_every: usize,
    /// Checkpoint cadence in steps; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default = "default_rate")]
    pub corruption_rate: f64,
    #[serde(default = "default_span")]
    pub mean_span_len: f64,
}

impl TrainConfig {
    /// Hyperparameters of the full-scale fine-tuning runs.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 2048,
            max_input_len: 512,
            max_target_len: 62,
            learning_rate: 1e-3,
            steps: 50_000,
            seed: 0,
            packing: true,
            eval_every: 1000,
            checkpoint_every: 1000,
            selection: Selection::BestValidation,
            corruption_rate: 0.15,
            mean_span_len: 3.0,
        }
    }

    /// Scaled-down preset that runs on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            max_input_len: 64,
            max_target_len: 8,
            learning_rate: 1e-3,
            steps: 2000,
            seed: 0,
            packing: true,
            eval_every: 100,
            checkpoint_every: 500,
            selection: Selection::BestValidation,
            corruption_rate: 0.15,
            mean_span_len: 3.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Unknown {
                kind: "preset",
                name: name.into(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("max_input_len", self.max_input_len),
            ("max_target_len", self.max_target_len),
            ("steps", self.steps),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a positive finite number");
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return bad("corruption_rate", "must lie in [0, 1)");
        }
        if !(self.mean_span_len >= 1.0) {
            return bad("mean_span_len", "must be at least 1");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}
