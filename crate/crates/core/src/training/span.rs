//! Span corruption.
//!
//! For a sequence of length `n`, `round(n·rate)` tokens are noise, grouped
//! into `round(noise / mean_span_len)` spans (at least one, at most the number
//! of sentinels and of non-noise tokens). Noise and non-noise lengths are each
//! split into that many positive parts uniformly at random and interleaved,
//! non-noise first. Each noise span becomes one sentinel in the input; the
//! target lists `sentinel_i span_i` for every span and ends with `</s>`.

use crate::error::{Error, Result};
use crate::tasks::tokenizer::{Tokenizer, END, NUM_SENTINELS};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corrupted {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// `(noise_tokens, spans)` for a sequence of length `n`.
pub fn span_counts(n: usize, rate: f64, mean_span_len: f64) -> (usize, usize) {
    if n < 2 {
        return (0, 0);
    }
    let noise = ((n as f64 * rate).round() as usize).min(n - 1);
    if noise == 0 {
        return (0, 0);
    }
    let spans = ((noise as f64 / mean_span_len).round() as usize)
        .max(1)
        .min(NUM_SENTINELS)
        .min(n - noise)
        .min(noise);
    (noise, spans)
}

/// Longest sequence whose corruption fits `max_input` (including the `</s>`
/// appended to inputs) and `max_target`.
pub fn max_source_len(rate: f64, mean_span_len: f64, max_input: usize, max_target: usize) -> usize {
    let mut n = max_input.saturating_sub(1);
    while n > 1 {
        let (noise, spans) = span_counts(n, rate, mean_span_len);
        if noise + spans + 1 <= max_target {
            break;
        }
        n -= 1;
    }
    n
}

/// Splits `total` into `parts` positive lengths, uniformly over compositions.
fn random_partition(total: usize, parts: usize, rng: &mut Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (1..total).collect();
    for i in 0..parts - 1 {
        let j = i + rng.below((cuts.len() - i) as u64) as usize;
        cuts.swap(i, j);
    }
    let mut chosen = cuts[..parts - 1].to_vec();
    chosen.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in chosen.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Noise mask with the span structure described in the module docs.
pub fn noise_mask(n: usize, rate: f64, mean_span_len: f64, rng: &mut Rng) -> Vec<bool> {
    let (noise, spans) = span_counts(n, rate, mean_span_len);
    if spans == 0 {
        return vec![false; n];
    }
    let noise_parts = random_partition(noise, spans, rng);
    let keep_parts = random_partition(n - noise, spans, rng);
    let mut mask = Vec::with_capacity(n);
    for (k, z) in keep_parts.into_iter().zip(noise_parts) {
        mask.extend(std::iter::repeat(false).take(k));
        mask.extend(std::iter::repeat(true).take(z));
    }
    mask
}

/// Replaces each maximal run of masked tokens with the next sentinel.
pub fn apply_mask(tokens: &[u32], mask: &[bool], tok: &Tokenizer) -> Corrupted {
    let mut input = Vec::new();
    let mut target = Vec::new();
    let mut span = 0;
    for (i, (&t, &m)) in tokens.iter().zip(mask).enumerate() {
        if m {
            if i == 0 || !mask[i - 1] {
                let s = tok.sentinel(span);
                span += 1;
                input.push(s);
                target.push(s);
            }
            target.push(t);
        } else {
            input.push(t);
        }
    }
    target.push(END);
    Corrupted { input, target }
}

pub fn span_corrupt(
    tokens: &[u32],
    rng: &mut Rng,
    rate: f64,
    mean_span_len: f64,
    tok: &Tokenizer,
) -> Result<Corrupted> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig {
            field: "corruption_rate".into(),
            reason: "must lie in [0, 1)".into(),
        });
    }
    if !(mean_span_len >= 1.0) {
        return Err(Error::InvalidConfig {
            field: "mean_span_len".into(),
            reason: "must be at least 1".into(),
        });
    }
    let mask = noise_mask(tokens.len(), rate, mean_span_len, rng);
    Ok(apply_mask(tokens, &mask, tok))
}

/// Inverts [`span_corrupt`]: splices each target span back in place of its
/// sentinel.
pub fn reconstruct(c: &Corrupted, tok: &Tokenizer) -> Vec<u32> {
    let mut spans: Vec<(u32, Vec<u32>)> = Vec::new();
    for &t in &c.target {
        if t == END {
            break;
        }
        if tok.is_sentinel(t) {
            spans.push((t, Vec::new()));
        } else if let Some(last) = spans.last_mut() {
            last.1.push(t);
        }
    }
    let mut out = Vec::new();
    for &t in &c.input {
        if tok.is_sentinel(t) {
            if let Some((_, s)) = spans.iter().find(|(id, _)| *id == t) {
                out.extend_from_slice(s);
            }
        } else {
            out.push(t);
        }
    }
    out
}
