//! Canonical parameter names, shapes, initialization and counting.
//!
//! Name grammar (stable; checkpoint surgery relies on it):
//!
//! ```text
//! embedding                                  [vocab, d_model]
//! {encoder|decoder}/layer_NN/self_attn/{q,k,v,o}
//! {encoder|decoder}/layer_00/self_attn/rel_bias   [rel_buckets, num_heads]  (shared by the stack)
//! {encoder|decoder}/layer_NN/self_attn_norm  [d_model]
//! decoder/layer_NN/cross_attn/{q,k,v,o}
//! decoder/layer_NN/cross_attn_norm
//! {encoder|decoder}/layer_NN/ffn/{wi_0,wi_1,wo}
//! {encoder|decoder}/layer_NN/ffn_norm
//! encoder/final_norm, decoder/final_norm
//! decoder/lm_head                            [d_model, vocab]   (no bias)
//! head/cross_attn/{q,k,v,o}, head/cross_attn_norm
//! head/ffn/{wi_0,wi_1,wo}, head/ffn_norm, head/final_norm
//! head/bos_embedding                         [d_model]
//! head/projection_kernel                     [d_model, n + 1]
//! head/projection_bias                       [n + 1]
//! ```
//!
//! `NN` is the zero-padded layer index. Projections are stored input-major:
//! `q`, `k`, `v` are `[d_model, heads·d_kv]`, `o` is `[heads·d_kv, d_model]`,
//! `wi_*` are `[d_model, d_ff]` and `wo` is `[d_ff, d_model]`.

use std::collections::BTreeMap;

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Rng, Tensor, Var};

pub const EMBEDDING: &str = "embedding";
pub const BOS_EMBEDDING: &str = "head/bos_embedding";
pub const PROJECTION_KERNEL: &str = "head/projection_kernel";
pub const PROJECTION_BIAS: &str = "head/projection_bias";
pub const LM_HEAD: &str = "decoder/lm_head";

pub fn layer_prefix(stack: &str, layer: usize) -> String {
    format!("{stack}/layer_{layer:02}")
}

fn attn_shapes(out: &mut BTreeMap<String, Vec<usize>>, prefix: &str, cfg: &ModelConfig) {
    let (d, inner) = (cfg.d_model, cfg.inner_dim());
    for p in ["q", "k", "v"] {
        out.insert(format!("{prefix}/{p}"), vec![d, inner]);
    }
    out.insert(format!("{prefix}/o"), vec![inner, d]);
}

fn ffn_shapes(out: &mut BTreeMap<String, Vec<usize>>, prefix: &str, cfg: &ModelConfig) {
    out.insert(format!("{prefix}/wi_0"), vec![cfg.d_model, cfg.d_ff]);
    out.insert(format!("{prefix}/wi_1"), vec![cfg.d_model, cfg.d_ff]);
    out.insert(format!("{prefix}/wo"), vec![cfg.d_ff, cfg.d_model]);
}

/// Every parameter name of the variant with its shape, in lexicographic order.
pub fn canonical_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = cfg.d_model;
    let mut out = BTreeMap::new();
    out.insert(EMBEDDING.to_string(), vec![cfg.vocab_size, d]);
    for l in 0..cfg.num_encoder_layers {
        let p = layer_prefix("encoder", l);
        attn_shapes(&mut out, &format!("{p}/self_attn"), cfg);
        if l == 0 {
            out.insert(format!("{p}/self_attn/rel_bias"), vec![cfg.rel_buckets, cfg.num_heads]);
        }
        out.insert(format!("{p}/self_attn_norm"), vec![d]);
        ffn_shapes(&mut out, &format!("{p}/ffn"), cfg);
        out.insert(format!("{p}/ffn_norm"), vec![d]);
    }
    out.insert("encoder/final_norm".into(), vec![d]);
    match cfg.variant {
        Variant::T5 | Variant::OneDecT5 => {
            for l in 0..cfg.decoder_layers() {
                let p = layer_prefix("decoder", l);
                attn_shapes(&mut out, &format!("{p}/self_attn"), cfg);
                if l == 0 {
                    out.insert(format!("{p}/self_attn/rel_bias"), vec![cfg.rel_buckets, cfg.num_heads]);
                }
                out.insert(format!("{p}/self_attn_norm"), vec![d]);
                attn_shapes(&mut out, &format!("{p}/cross_attn"), cfg);
                out.insert(format!("{p}/cross_attn_norm"), vec![d]);
                ffn_shapes(&mut out, &format!("{p}/ffn"), cfg);
                out.insert(format!("{p}/ffn_norm"), vec![d]);
            }
            out.insert("decoder/final_norm".into(), vec![d]);
            out.insert(LM_HEAD.into(), vec![d, cfg.vocab_size]);
        }
        Variant::EncT5 => {
            attn_shapes(&mut out, "head/cross_attn", cfg);
            out.insert("head/cross_attn_norm".into(), vec![d]);
            ffn_shapes(&mut out, "head/ffn", cfg);
            out.insert("head/ffn_norm".into(), vec![d]);
            out.insert("head/final_norm".into(), vec![d]);
            out.insert(BOS_EMBEDDING.into(), vec![d]);
            out.insert(PROJECTION_KERNEL.into(), vec![d, cfg.head_width()]);
            out.insert(PROJECTION_BIAS.into(), vec![cfg.head_width()]);
        }
    }
    out
}

enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

fn init_rule(name: &str, cfg: &ModelConfig) -> Init {
    let d = cfg.d_model as f64;
    let leaf = name.rsplit('/').next().unwrap_or(name);
    match leaf {
        _ if name.ends_with("_norm") => Init::Ones,
        "projection_bias" => Init::Zeros,
        "embedding" => Init::Normal(1.0),
        "bos_embedding" | "projection_kernel" | "lm_head" | "rel_bias" | "k" | "v" | "wi_0" | "wi_1" => {
            Init::Normal(d.powf(-0.5))
        }
        "q" => Init::Normal((d * cfg.d_kv as f64).powf(-0.5)),
        "o" => Init::Normal((cfg.inner_dim() as f64).powf(-0.5)),
        "wo" => Init::Normal((cfg.d_ff as f64).powf(-0.5)),
        _ => Init::Normal(d.powf(-0.5)),
    }
}

/// Fresh value for one parameter, a pure function of `(seed, name)`.
pub fn init_param(cfg: &ModelConfig, name: &str, shape: &[usize], seed: u64) -> Tensor {
    match init_rule(name, cfg) {
        Init::Ones => Tensor::ones(shape),
        Init::Zeros => Tensor::zeros(shape),
        Init::Normal(std) => Tensor::randn(shape, std, &mut Rng::keyed(seed, name)),
    }
}

/// Ordered map from canonical parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Randomly initialized store for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let params = canonical_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_param(cfg, &name, &shape, seed);
                (name, t)
            })
            .collect();
        ParameterStore { params }
    }

    /// All-zero store with the canonical shapes; used for counting.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let params = canonical_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        ParameterStore { params }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.params.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Every tensor bitwise equal under the same name set.
    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Checks that names and shapes are exactly the canonical set for `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let want = canonical_shapes(cfg);
        for (name, shape) in &want {
            match self.params.get(name) {
                None => return Err(Error::MissingParameter(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::UnexpectedParameter(extra.clone()));
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect();
        Bound { vars }
    }
}

impl FromIterator<(String, Tensor)> for ParameterStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParameterStore {
            params: iter.into_iter().collect(),
        }
    }
}

/// Parameter names bound to graph leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Per-name gradients; parameters that the loss does not reach are omitted.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| {
                grads.get(v).map(|data| {
                    let t = Tensor::new(g.shape(v).to_vec(), data.to_vec()).expect("gradient shape");
                    (name.clone(), t)
                })
            })
            .collect()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Element counts by group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParamCount {
    pub embedding: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub head: usize,
    pub output_projection: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embedding + self.encoder + self.decoder + self.head + self.output_projection
    }

    /// Sums the canonically constructed store, grouped by name prefix.
    pub fn enumerate(cfg: &ModelConfig) -> Self {
        let mut c = ParamCount::default();
        for (name, t) in ParameterStore::zeros(cfg).iter() {
            let n = t.numel();
            if name == EMBEDDING {
                c.embedding += n;
            } else if name == LM_HEAD {
                c.output_projection += n;
            } else if name.starts_with("encoder/") {
                c.encoder += n;
            } else if name.starts_with("decoder/") {
                c.decoder += n;
            } else if name.starts_with("head/") {
                c.head += n;
            } else {
                unreachable!("ungrouped parameter {name}");
            }
        }
        c
    }

    /// Same breakdown from the architecture formulas.
    pub fn closed_form(cfg: &ModelConfig) -> Self {
        let (d, v, dff, inner) = (cfg.d_model, cfg.vocab_size, cfg.d_ff, cfg.inner_dim());
        let attn = 4 * d * inner;
        let ffn = 3 * d * dff;
        let rel = cfg.rel_buckets * cfg.num_heads;
        let stack_rel = |layers: usize| if layers > 0 { rel } else { 0 };
        let le = cfg.num_encoder_layers;
        let encoder = le * (attn + ffn + 2 * d) + stack_rel(le) + d;
        let mut c = ParamCount {
            embedding: v * d,
            encoder,
            ..Default::default()
        };
        match cfg.variant {
            Variant::T5 | Variant::OneDecT5 => {
                let ld = cfg.decoder_layers();
                c.decoder = ld * (2 * attn + ffn + 3 * d) + stack_rel(ld) + d;
                c.output_projection = d * v;
            }
            Variant::EncT5 => {
                let w = cfg.head_width();
                let pooling_layer = attn + ffn + 3 * d;
                c.head = pooling_layer + d + d * w + w;
            }
        }
        c
    }
}

/// Exact parameter count of the canonical store for `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    ParamCount::enumerate(cfg)
}
