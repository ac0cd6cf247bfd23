//! Checkpoint storage and the weight-loading transformations between variants.

mod checkpoint;

pub use checkpoint::{Checkpoint, DType, ManifestEntry, FORMAT_VERSION, MAGIC};

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{canonical_shapes, init_param, layer_prefix, ModelConfig, ParameterStore, TaskKind, Variant};

/// What a surgery did with every parameter name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SurgeryReport {
    /// Target names whose tensor was copied from the source.
    pub loaded: Vec<String>,
    /// Source names with no counterpart in the target.
    pub dropped: Vec<String>,
    /// Target names initialized from `(seed, name)`.
    pub fresh: Vec<String>,
    /// Renamed loads and other remarks, one line each.
    pub notes: Vec<String>,
}

impl SurgeryReport {
    /// Plain-text listing used by the command line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (title, names) in [
            ("loaded", &self.loaded),
            ("dropped", &self.dropped),
            ("fresh", &self.fresh),
        ] {
            s.push_str(&format!("{title} ({}):\n", names.len()));
            for n in names {
                s.push_str(&format!("  {n}\n"));
            }
        }
        if !self.notes.is_empty() {
            s.push_str("notes:\n");
            for n in &self.notes {
                s.push_str(&format!("  {n}\n"));
            }
        }
        s
    }
}

fn require_decoder(src: &Checkpoint) -> Result<()> {
    if src.config.variant == Variant::EncT5 || src.config.decoder_layers() == 0 {
        return Err(Error::NoDecoderLayers);
    }
    Ok(())
}

/// Keeps only the first decoder layer of an encoder-decoder checkpoint.
pub fn surgery_1dect5(src: &Checkpoint) -> Result<(Checkpoint, SurgeryReport)> {
    require_decoder(src)?;
    let cfg = src
        .config
        .with_variant(Variant::OneDecT5, src.config.num_classes, src.config.task_kind);
    let want = canonical_shapes(&cfg);
    let mut report = SurgeryReport::default();
    let mut params = ParameterStore::new();
    for (name, t) in src.params.iter() {
        if want.contains_key(name) {
            params.insert(name, t.clone());
            report.loaded.push(name.to_string());
        } else {
            report.dropped.push(name.to_string());
        }
    }
    let out = Checkpoint::new(cfg, src.seed, params)?;
    Ok((out, report))
}

/// Target name → source name for every EncT5 parameter that is loaded.
fn enct5_sources(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let dec0 = layer_prefix("decoder", 0);
    let mut map = BTreeMap::new();
    for name in canonical_shapes(cfg).into_keys() {
        let source = if let Some(rest) = name.strip_prefix("head/") {
            match rest {
                "bos_embedding" | "projection_kernel" | "projection_bias" => continue,
                "final_norm" => "decoder/final_norm".to_string(),
                _ => format!("{dec0}/{rest}"),
            }
        } else {
            name.clone()
        };
        map.insert(name, source);
    }
    map
}

/// Builds an EncT5 checkpoint from an encoder-decoder one: embeddings and the
/// encoder are copied, the pooling layer takes decoder layer 0's
/// cross-attention and feed-forward blocks with their norms, and the BOS query
/// and class projection are initialized from `(seed, name)`.
pub fn surgery_enct5(
    src: &Checkpoint,
    n_classes: usize,
    kind: TaskKind,
    seed: u64,
) -> Result<(Checkpoint, SurgeryReport)> {
    require_decoder(src)?;
    if n_classes < 1 {
        return Err(Error::InvalidConfig {
            field: "num_classes".into(),
            reason: "must be at least 1".into(),
        });
    }
    let cfg = src.config.with_variant(Variant::EncT5, n_classes, kind);
    let shapes = canonical_shapes(&cfg);
    let sources = enct5_sources(&cfg);
    let mut report = SurgeryReport::default();
    let mut params = ParameterStore::new();
    let mut used = BTreeSet::new();
    for (name, shape) in &shapes {
        let loaded = sources
            .get(name)
            .and_then(|s| src.params.get(s).map(|t| (s, t)))
            .filter(|(_, t)| t.shape() == shape.as_slice());
        match loaded {
            Some((s, t)) => {
                params.insert(name.clone(), t.clone());
                report.loaded.push(name.clone());
                used.insert(s.clone());
                if s != name {
                    report.notes.push(format!("{name} <- {s}"));
                }
            }
            None => {
                if let Some(s) = sources.get(name) {
                    report
                        .notes
                        .push(format!("{name}: no compatible {s} in source, initialized fresh"));
                }
                params.insert(name.clone(), init_param(&cfg, name, shape, seed));
                report.fresh.push(name.clone());
            }
        }
    }
    report.dropped = src
        .params
        .names()
        .filter(|n| !used.contains(*n))
        .map(String::from)
        .collect();
    let out = Checkpoint::new(cfg, seed, params)?;
    Ok((out, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffStatus {
    Equal,
    Differs,
    OnlyInA,
    OnlyInB,
}

/// Bitwise per-name comparison of two stores.
pub fn diff(a: &ParameterStore, b: &ParameterStore) -> BTreeMap<String, DiffStatus> {
    let mut out = BTreeMap::new();
    for (name, t) in a.iter() {
        let status = match b.get(name) {
            None => DiffStatus::OnlyInA,
            Some(u) if u.bit_eq(t) => DiffStatus::Equal,
            Some(_) => DiffStatus::Differs,
        };
        out.insert(name.to_string(), status);
    }
    for name in b.names() {
        if !a.contains(name) {
            out.insert(name.to_string(), DiffStatus::OnlyInB);
        }
    }
    out
}
