//! Forward passes: the shared encoder, the T5/1decT5 decoder and the EncT5 head.
//!
//! Hidden states are `[rows, len, d_model]`. Every block is pre-norm with a
//! residual connection; attention logits are not scaled by `1/sqrt(d_kv)` (T5
//! folds that into the query initialization).

use super::config::{ModelConfig, TaskKind, Variant};
use super::params::{
    layer_prefix, Bound, ParameterStore, BOS_EMBEDDING, EMBEDDING, LM_HEAD, PROJECTION_BIAS, PROJECTION_KERNEL,
};
use super::relpos::bucket_matrix;
use crate::error::{Error, Result};
use crate::packing::{batch_cross_mask, batch_self_mask, Packed, PackedBatch};
use crate::tensor::{Graph, Tensor, Var};

pub struct EncoderOutput {
    /// `[rows, len, d_model]` after the final norm.
    pub hidden: Var,
    /// Self-attention probabilities per layer, `[rows, heads, len, len]`.
    pub attn_probs: Vec<Var>,
}

pub struct DecoderOutput {
    /// `[rows, target_len, vocab]`.
    pub logits: Var,
    /// Causal self-attention probabilities per layer, `[rows, heads, T, T]`.
    pub self_attn_probs: Vec<Var>,
    pub cross_attn_probs: Vec<Var>,
}

pub struct HeadOutput {
    /// `[rows, max_segments, head_width]`.
    pub logits: Var,
    /// Pooling attention output before the residual, `[rows, max_segments, d_model]`.
    pub pooled: Var,
    pub attn_probs: Var,
}

struct AttnWeights {
    q: Var,
    k: Var,
    v: Var,
    o: Var,
}

impl AttnWeights {
    fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(AttnWeights {
            q: p.var(&format!("{prefix}/q"))?,
            k: p.var(&format!("{prefix}/k"))?,
            v: p.var(&format!("{prefix}/v"))?,
            o: p.var(&format!("{prefix}/o"))?,
        })
    }
}

/// Projects `[rows, len, d]` to per-head `[rows, heads, len, d_kv]`.
fn heads(g: &mut Graph, cfg: &ModelConfig, x: Var, w: Var, rows: usize, len: usize) -> Result<Var> {
    let p = g.matmul(x, w)?;
    let p = g.reshape(p, &[rows, len, cfg.num_heads, cfg.d_kv])?;
    g.permute(p, &[0, 2, 1, 3])
}

#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    cfg: &ModelConfig,
    w: &AttnWeights,
    xq: Var,
    xkv: Var,
    rows: usize,
    lq: usize,
    lk: usize,
    bias: Option<Var>,
    mask: &Tensor,
) -> Result<(Var, Var)> {
    let q = heads(g, cfg, xq, w.q, rows, lq)?;
    let k = heads(g, cfg, xkv, w.k, rows, lk)?;
    let v = heads(g, cfg, xkv, w.v, rows, lk)?;
    let mut scores = g.bmm(q, k, true)?;
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    let probs = g.softmax_lastdim(scores, Some(mask))?;
    let ctx = g.bmm(probs, v, false)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[rows, lq, cfg.inner_dim()])?;
    Ok((g.matmul(ctx, w.o)?, probs))
}

/// Gated-GELU feed-forward: `(gelu(x·wi_0) ⊙ (x·wi_1))·wo`.
fn ffn(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let a = g.matmul(x, p.var(&format!("{prefix}/wi_0"))?)?;
    let a = g.gelu(a)?;
    let b = g.matmul(x, p.var(&format!("{prefix}/wi_1"))?)?;
    let h = g.mul(a, b)?;
    g.matmul(h, p.var(&format!("{prefix}/wo"))?)
}

/// Relative-position bias `[rows, heads, Lq, Lk]` from per-row positions.
fn position_bias(
    g: &mut Graph,
    cfg: &ModelConfig,
    table: Var,
    qpos: &[u32],
    kpos: &[u32],
    rows: usize,
    bidirectional: bool,
) -> Result<Var> {
    let (lq, lk) = (qpos.len() / rows, kpos.len() / rows);
    let mut buckets = Vec::with_capacity(rows * lq * lk);
    for r in 0..rows {
        buckets.extend(bucket_matrix(
            &qpos[r * lq..][..lq],
            &kpos[r * lk..][..lk],
            bidirectional,
            cfg.rel_buckets,
            cfg.rel_max_distance,
        ));
    }
    let b = g.gather_rows(table, &buckets)?;
    let b = g.reshape(b, &[rows, lq, lk, cfg.num_heads])?;
    g.permute(b, &[0, 3, 1, 2])
}

fn embed(g: &mut Graph, cfg: &ModelConfig, p: &Bound, ids: &[u32], rows: usize, len: usize) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab: cfg.vocab_size,
        });
    }
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let x = g.gather_rows(p.var(EMBEDDING)?, &ids)?;
    g.reshape(x, &[rows, len, cfg.d_model])
}

pub fn encoder_forward(g: &mut Graph, cfg: &ModelConfig, p: &Bound, batch: &PackedBatch) -> Result<EncoderOutput> {
    let (rows, len) = (batch.rows, batch.len);
    let mut x = embed(g, cfg, p, &batch.token_ids, rows, len)?;
    let mut attn_probs = Vec::with_capacity(cfg.num_encoder_layers);
    if cfg.num_encoder_layers > 0 {
        let table = p.var(&format!("{}/self_attn/rel_bias", layer_prefix("encoder", 0)))?;
        let bias = position_bias(g, cfg, table, &batch.positions, &batch.positions, rows, true)?;
        let mask = batch_self_mask(&batch.segment_ids, rows, len, false);
        for l in 0..cfg.num_encoder_layers {
            let pre = layer_prefix("encoder", l);
            let n = g.rms_norm(x, p.var(&format!("{pre}/self_attn_norm"))?, cfg.norm_eps)?;
            let w = AttnWeights::bind(p, &format!("{pre}/self_attn"))?;
            let (a, probs) = attention(g, cfg, &w, n, n, rows, len, len, Some(bias), &mask)?;
            attn_probs.push(probs);
            x = g.add(x, a)?;
            let n = g.rms_norm(x, p.var(&format!("{pre}/ffn_norm"))?, cfg.norm_eps)?;
            let f = ffn(g, p, &format!("{pre}/ffn"), n)?;
            x = g.add(x, f)?;
        }
    }
    let hidden = g.rms_norm(x, p.var("encoder/final_norm")?, cfg.norm_eps)?;
    Ok(EncoderOutput { hidden, attn_probs })
}

pub fn decoder_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    enc: &EncoderOutput,
    batch: &PackedBatch,
) -> Result<DecoderOutput> {
    if cfg.variant == Variant::EncT5 {
        return Err(Error::Variant("EncT5 has no decoder".into()));
    }
    let dec = batch
        .decoder
        .as_ref()
        .ok_or_else(|| Error::shape("decoder_forward", "batch has no decoder side"))?;
    let (rows, t, len) = (batch.rows, dec.len, batch.len);
    if g.shape(enc.hidden) != [rows, len, cfg.d_model] {
        return Err(Error::shape(
            "decoder_forward",
            format!("encoder output {:?}", g.shape(enc.hidden)),
        ));
    }
    let mut x = embed(g, cfg, p, &dec.input_ids(), rows, t)?;
    let layers = cfg.decoder_layers();
    let mut self_attn_probs = Vec::with_capacity(layers);
    let mut cross_attn_probs = Vec::with_capacity(layers);
    if layers > 0 {
        let table = p.var(&format!("{}/self_attn/rel_bias", layer_prefix("decoder", 0)))?;
        let bias = position_bias(g, cfg, table, &dec.positions, &dec.positions, rows, false)?;
        let self_mask = batch_self_mask(&dec.segment_ids, rows, t, true);
        let cross_mask = batch_cross_mask(&dec.segment_ids, &batch.segment_ids, rows, t, len);
        for l in 0..layers {
            let pre = layer_prefix("decoder", l);
            let n = g.rms_norm(x, p.var(&format!("{pre}/self_attn_norm"))?, cfg.norm_eps)?;
            let w = AttnWeights::bind(p, &format!("{pre}/self_attn"))?;
            let (a, probs) = attention(g, cfg, &w, n, n, rows, t, t, Some(bias), &self_mask)?;
            self_attn_probs.push(probs);
            x = g.add(x, a)?;

            let n = g.rms_norm(x, p.var(&format!("{pre}/cross_attn_norm"))?, cfg.norm_eps)?;
            let w = AttnWeights::bind(p, &format!("{pre}/cross_attn"))?;
            let (a, probs) = attention(g, cfg, &w, n, enc.hidden, rows, t, len, None, &cross_mask)?;
            cross_attn_probs.push(probs);
            x = g.add(x, a)?;

            let n = g.rms_norm(x, p.var(&format!("{pre}/ffn_norm"))?, cfg.norm_eps)?;
            let f = ffn(g, p, &format!("{pre}/ffn"), n)?;
            x = g.add(x, f)?;
        }
    }
    let x = g.rms_norm(x, p.var("decoder/final_norm")?, cfg.norm_eps)?;
    let logits = g.matmul(x, p.var(LM_HEAD)?)?;
    Ok(DecoderOutput {
        logits,
        self_attn_probs,
        cross_attn_probs,
    })
}

/// EncT5 head: one learned query per packed example, pooled by masked
/// cross-attention over that example's encoder outputs, then a gated FFN and
/// the `d_model × (n+1)` class projection with bias.
pub fn enct5_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    enc: &EncoderOutput,
    batch: &PackedBatch,
) -> Result<HeadOutput> {
    if cfg.variant != Variant::EncT5 {
        return Err(Error::Variant(format!("{} has no EncT5 head", cfg.variant)));
    }
    let (rows, len, d) = (batch.rows, batch.len, cfg.d_model);
    let slots = batch.max_segments();
    for (row, &count) in batch.segment_counts.iter().enumerate() {
        if count > slots {
            return Err(Error::TooManySegments { row, count, max: slots });
        }
    }
    let bos = g.reshape(p.var(BOS_EMBEDDING)?, &[1, d])?;
    let h = g.gather_rows(bos, &vec![0; rows * slots])?;
    let mut h = g.reshape(h, &[rows, slots, d])?;

    let query_segments = batch.slot_segments();
    let mask = batch_cross_mask(&query_segments, &batch.segment_ids, rows, slots, len);
    let n = g.rms_norm(h, p.var("head/cross_attn_norm")?, cfg.norm_eps)?;
    let w = AttnWeights::bind(p, "head/cross_attn")?;
    let (pooled, attn_probs) = attention(g, cfg, &w, n, enc.hidden, rows, slots, len, None, &mask)?;
    h = g.add(h, pooled)?;
    let n = g.rms_norm(h, p.var("head/ffn_norm")?, cfg.norm_eps)?;
    let f = ffn(g, p, "head/ffn", n)?;
    h = g.add(h, f)?;
    let h = g.rms_norm(h, p.var("head/final_norm")?, cfg.norm_eps)?;
    let logits = g.matmul(h, p.var(PROJECTION_KERNEL)?)?;
    let logits = g.add_bias(logits, p.var(PROJECTION_BIAS)?)?;
    Ok(HeadOutput {
        logits,
        pooled,
        attn_probs,
    })
}

/// Everything one full forward pass produced.
pub struct ModelOutput {
    pub encoder: EncoderOutput,
    pub decoder: Option<DecoderOutput>,
    pub head: Option<HeadOutput>,
    /// Decoder logits `[rows, T, vocab]` or head logits `[rows, S, width]`.
    pub logits: Var,
}

/// Runs the encoder and then the decoder or the EncT5 head, by variant.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, p: &Bound, batch: &PackedBatch) -> Result<ModelOutput> {
    let encoder = encoder_forward(g, cfg, p, batch)?;
    if cfg.variant == Variant::EncT5 {
        let head = enct5_forward(g, cfg, p, &encoder, batch)?;
        Ok(ModelOutput {
            logits: head.logits,
            encoder,
            decoder: None,
            head: Some(head),
        })
    } else {
        let dec = decoder_forward(g, cfg, p, &encoder, batch)?;
        Ok(ModelOutput {
            logits: dec.logits,
            encoder,
            decoder: Some(dec),
            head: None,
        })
    }
}

/// Training objective for `batch`, a mean over examples. For the decoder
/// variants an example's loss is its teacher-forced sequence negative
/// log-likelihood (summed over target tokens); for EncT5 it is the
/// cross-entropy over the `n + 1` classes, or the squared error on output 1 for
/// regression. Padded target positions and padded slots carry weight 0.
pub fn loss(g: &mut Graph, cfg: &ModelConfig, p: &Bound, batch: &PackedBatch) -> Result<(Var, ModelOutput)> {
    let out = forward(g, cfg, p, batch)?;
    let loss = if cfg.variant == Variant::EncT5 {
        let slots = batch
            .slots
            .as_ref()
            .ok_or_else(|| Error::shape("loss", "EncT5 batch has no slot targets"))?;
        match cfg.task_kind {
            TaskKind::Classification => g.cross_entropy_masked(out.logits, &slots.classes, &slots.weights)?,
            TaskKind::Regression => {
                let pred = g.select_last(out.logits, 1)?;
                g.mse_masked(pred, &slots.values, &slots.weights)?
            }
        }
    } else {
        let dec = batch.decoder.as_ref().expect("decoder side checked by forward");
        let targets: Vec<usize> = dec.target_ids.iter().map(|&t| t as usize).collect();
        let weights: Vec<f64> = dec
            .segment_ids
            .iter()
            .map(|&s| if s == 0 { 0.0 } else { 1.0 })
            .collect();
        let tokens: f64 = weights.iter().sum();
        let examples: usize = batch.segment_counts.iter().sum();
        let mean = g.cross_entropy_masked(out.logits, &targets, &weights)?;
        g.scale(mean, tokens / examples as f64)?
    };
    Ok((loss, out))
}

/// Per-example logits in input order: `[width]` per example for EncT5,
/// `[target_len, vocab]` for the decoder variants.
pub fn example_logits(cfg: &ModelConfig, store: &ParameterStore, packed: &Packed) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = forward(&mut g, cfg, &p, &packed.batch)?;
    let logits = g.value(out.logits);
    let (s, w) = (logits.shape()[1], logits.shape()[2]);
    packed
        .placements
        .iter()
        .map(|pl| {
            if cfg.variant == Variant::EncT5 {
                let at = (pl.row * s + pl.segment as usize - 1) * w;
                Tensor::new(vec![w], logits.data()[at..at + w].to_vec())
            } else {
                let at = (pl.row * s + pl.target_offset) * w;
                Tensor::new(
                    vec![pl.target_len, w],
                    logits.data()[at..at + pl.target_len * w].to_vec(),
                )
            }
        })
        .collect()
}

/// Argmax over the real classes `1..=n`, ignoring the padding class at index 0.
/// Ties go to the lowest index.
pub fn predict_class(logits: &[f64]) -> usize {
    let mut best = 1;
    for c in 2..logits.len() {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}
