use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "t5")]
    T5,
    /// T5 with every decoder layer but the first removed.
    #[serde(rename = "1dect5")]
    OneDecT5,
    /// Encoder plus a cross-attention pooling head and class projection.
    #[serde(rename = "enct5")]
    EncT5,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::T5 => "t5",
            Variant::OneDecT5 => "1dect5",
            Variant::EncT5 => "enct5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t5" => Ok(Variant::T5),
            "1dect5" => Ok(Variant::OneDecT5),
            "enct5" => Ok(Variant::EncT5),
            _ => Err(Error::Unknown {
                kind: "variant",
                name: s.into(),
            }),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Classification,
    Regression,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            _ => Err(Error::Unknown {
                kind: "task kind",
                name: s.into(),
            }),
        }
    }
}

fn one() -> usize {
    1
}

/// Architecture hyperparameters shared by all three variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    /// Per-head key/value width.
    pub d_kv: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub vocab_size: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub norm_eps: f64,
    #[serde(default)]
    pub variant: Variant,
    /// Number of real classes `n` (EncT5 only; the head has `n + 1` outputs).
    #[serde(default = "one")]
    pub num_classes: usize,
    #[serde(default)]
    pub task_kind: TaskKind,
}

impl ModelConfig {
    /// Small symmetric model used by the desk-scale presets.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 32,
            d_ff: 64,
            num_heads: 4,
            d_kv: 8,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            vocab_size,
            rel_buckets: 16,
            rel_max_distance: 32,
            norm_eps: 1e-6,
            variant: Variant::T5,
            num_classes: 1,
            task_kind: TaskKind::Classification,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.d_kv
    }

    /// Decoder depth actually instantiated for this variant.
    pub fn decoder_layers(&self) -> usize {
        match self.variant {
            Variant::T5 => self.num_decoder_layers,
            Variant::OneDecT5 => 1,
            Variant::EncT5 => 0,
        }
    }

    /// Output width of the EncT5 projection: `n + 1` for classification
    /// (index 0 is the padding class), 2 for regression (index 1 is the prediction).
    pub fn head_width(&self) -> usize {
        match self.task_kind {
            TaskKind::Classification => self.num_classes + 1,
            TaskKind::Regression => 2,
        }
    }

    /// Same base shape retargeted to another variant.
    pub fn with_variant(&self, variant: Variant, num_classes: usize, task_kind: TaskKind) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        match variant {
            Variant::T5 => {}
            Variant::OneDecT5 => c.num_decoder_layers = 1,
            Variant::EncT5 => {
                c.num_classes = num_classes;
                c.task_kind = task_kind;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        for (field, v) in [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("num_heads", self.num_heads),
            ("d_kv", self.d_kv),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.rel_buckets == 0 || self.rel_buckets % 2 != 0 {
            return bad("rel_buckets", "must be a positive even number");
        }
        if self.rel_buckets < 4 {
            return bad("rel_buckets", "must be at least 4");
        }
        if 4 * self.rel_max_distance <= self.rel_buckets {
            return bad("rel_max_distance", "must exceed rel_buckets / 4");
        }
        if !(self.norm_eps > 0.0) || !self.norm_eps.is_finite() {
            return bad("norm_eps", "must be a positive finite number");
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be at least 1");
        }
        if self.variant == Variant::OneDecT5 && self.num_decoder_layers == 0 {
            return bad("num_decoder_layers", "1dect5 needs one decoder layer");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}
