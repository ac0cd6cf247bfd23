//! Packing several examples into fixed-length rows, and the attention masks
//! that keep packed examples from seeing each other.
//!
//! Every row carries three parallel arrays: token ids, segment ids (0 for
//! padding, `1..=S` for the examples in order) and within-segment positions
//! that restart at 0 for each example. Relative-position buckets are computed
//! from those positions, so a packed example produces exactly the attention
//! logits it would produce alone.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MASK_VALUE};

pub const PAD_ID: u32 = 0;

/// Row layout policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Next-fit: append to the current row while the example fits, else open a new row.
    Packed,
    /// One example per row.
    Unpacked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub rows: usize,
    pub len: usize,
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub positions: Vec<u32>,
    pub segment_counts: Vec<usize>,
    pub decoder: Option<DecoderSide>,
    pub slots: Option<SlotTargets>,
}

/// Decoder targets for encoder-decoder variants, laid out like the encoder side.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSide {
    pub len: usize,
    pub target_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub positions: Vec<u32>,
}

/// Per-example targets for the EncT5 head, `[rows × max_segments]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotTargets {
    pub max_segments: usize,
    /// Class id per slot; 0 marks a padded slot (the padding class).
    pub classes: Vec<usize>,
    /// Regression target per slot; 0.0 in padded slots.
    pub values: Vec<f64>,
    /// 1.0 for real slots, 0.0 for padded ones.
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SlotTarget {
    Class(usize),
    Value(f64),
}

/// Where one input example landed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub row: usize,
    /// 1-based segment id within the row.
    pub segment: u32,
    pub offset: usize,
    pub len: usize,
    pub target_offset: usize,
    pub target_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Packed {
    pub batch: PackedBatch,
    /// `placements[i]` locates example `i`; inverts the packing.
    pub placements: Vec<Placement>,
}

impl DecoderSide {
    /// Teacher-forcing inputs: targets shifted right within each segment, with
    /// the padding id 0 as the start token.
    pub fn input_ids(&self) -> Vec<u32> {
        let mut out = vec![PAD_ID; self.target_ids.len()];
        for i in 0..self.target_ids.len() {
            if self.segment_ids[i] != 0 && self.positions[i] > 0 {
                out[i] = self.target_ids[i - 1];
            }
        }
        out
    }
}

impl PackedBatch {
    /// Number of query slots for the EncT5 head.
    pub fn max_segments(&self) -> usize {
        match &self.slots {
            Some(s) => s.max_segments,
            None => self.segment_counts.iter().copied().max().unwrap_or(0).max(1),
        }
    }

    /// Segment id of each EncT5 query slot, `[rows × max_segments]`.
    pub fn slot_segments(&self) -> Vec<u32> {
        let s = self.max_segments();
        let mut out = vec![0; self.rows * s];
        for (r, &c) in self.segment_counts.iter().enumerate() {
            for k in 0..c.min(s) {
                out[r * s + k] = k as u32 + 1;
            }
        }
        out
    }

    pub fn row<'a>(&self, v: &'a [u32], r: usize) -> &'a [u32] {
        &v[r * self.len..(r + 1) * self.len]
    }

    /// Checks the layout invariants: padding only after the last segment,
    /// segment ids increasing by one at each boundary, positions counting up
    /// from 0 within a segment, and token id 0 exactly where segment id is 0.
    pub fn validate(&self) -> Result<()> {
        validate_side(
            self.rows,
            self.len,
            &self.token_ids,
            &self.segment_ids,
            &self.positions,
            true,
        )?;
        for r in 0..self.rows {
            let max = self.row(&self.segment_ids, r).iter().copied().max().unwrap_or(0);
            if max as usize != self.segment_counts[r] {
                return Err(Error::shape("packed batch", format!("row {r}: segment count mismatch")));
            }
        }
        if let Some(d) = &self.decoder {
            validate_side(self.rows, d.len, &d.target_ids, &d.segment_ids, &d.positions, true)?;
        }
        Ok(())
    }
}

fn validate_side(rows: usize, len: usize, tokens: &[u32], segs: &[u32], pos: &[u32], pad_zero: bool) -> Result<()> {
    let bad = |r: usize, why: &str| Err(Error::shape("packed batch", format!("row {r}: {why}")));
    if tokens.len() != rows * len || segs.len() != rows * len || pos.len() != rows * len {
        return bad(0, "array length");
    }
    for r in 0..rows {
        let (t, s, p) = (
            &tokens[r * len..][..len],
            &segs[r * len..][..len],
            &pos[r * len..][..len],
        );
        let mut prev_seg = 0u32;
        let mut in_pad = false;
        for i in 0..len {
            if pad_zero && ((t[i] == PAD_ID) != (s[i] == 0)) {
                return bad(r, "token id 0 must coincide with segment id 0");
            }
            if s[i] == 0 {
                in_pad = true;
                if p[i] != 0 {
                    return bad(r, "padding position must be 0");
                }
                continue;
            }
            if in_pad {
                return bad(r, "segment after padding");
            }
            if s[i] == prev_seg {
                if p[i] != p[i - 1] + 1 {
                    return bad(r, "positions must increase by 1 within a segment");
                }
            } else if s[i] == prev_seg + 1 {
                if p[i] != 0 {
                    return bad(r, "positions must restart at 0");
                }
            } else {
                return bad(r, "segment ids must increase by 1");
            }
            prev_seg = s[i];
        }
    }
    Ok(())
}

/// Assigns rows to examples of the given (input, target) lengths.
fn plan(lens: &[(usize, usize)], max_len: usize, max_target: usize, layout: Layout) -> Result<Vec<Placement>> {
    let mut out = Vec::with_capacity(lens.len());
    let (mut row, mut used, mut used_t, mut seg) = (0usize, 0usize, 0usize, 0u32);
    for (i, &(len, tlen)) in lens.iter().enumerate() {
        if len == 0 || len > max_len {
            return Err(Error::ExampleTooLong { index: i, len, max_len });
        }
        if tlen > max_target {
            return Err(Error::ExampleTooLong {
                index: i,
                len: tlen,
                max_len: max_target,
            });
        }
        let fits = used + len <= max_len && used_t + tlen <= max_target;
        if i > 0 && (layout == Layout::Unpacked || !fits) {
            row += 1;
            used = 0;
            used_t = 0;
            seg = 0;
        }
        seg += 1;
        out.push(Placement {
            row,
            segment: seg,
            offset: used,
            len,
            target_offset: used_t,
            target_len: tlen,
        });
        used += len;
        used_t += tlen;
    }
    Ok(out)
}

fn fill_side(
    placements: &[Placement],
    rows: usize,
    len: usize,
    seqs: &[&[u32]],
    target: bool,
) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    let mut tok = vec![PAD_ID; rows * len];
    let mut seg = vec![0; rows * len];
    let mut pos = vec![0; rows * len];
    for (p, s) in placements.iter().zip(seqs) {
        let off = if target { p.target_offset } else { p.offset };
        let base = p.row * len + off;
        for (j, &t) in s.iter().enumerate() {
            tok[base + j] = t;
            seg[base + j] = p.segment;
            pos[base + j] = j as u32;
        }
    }
    (tok, seg, pos)
}

fn counts(placements: &[Placement], rows: usize) -> Vec<usize> {
    let mut c = vec![0; rows];
    for p in placements {
        c[p.row] = c[p.row].max(p.segment as usize);
    }
    c
}

fn check_tokens(seqs: &[Vec<u32>]) -> Result<()> {
    for (i, s) in seqs.iter().enumerate() {
        if s.contains(&PAD_ID) {
            return Err(Error::shape("pack", format!("example {i} contains the padding id")));
        }
    }
    Ok(())
}

/// Packs encoder-only sequences into rows of `max_len`.
pub fn pack(examples: &[Vec<u32>], max_len: usize) -> Result<Packed> {
    pack_with(examples, max_len, Layout::Packed)
}

pub fn pack_with(examples: &[Vec<u32>], max_len: usize, layout: Layout) -> Result<Packed> {
    check_tokens(examples)?;
    let lens: Vec<(usize, usize)> = examples.iter().map(|e| (e.len(), 0)).collect();
    let placements = plan(&lens, max_len, 0, layout)?;
    let rows = placements.last().map_or(0, |p| p.row + 1);
    let seqs: Vec<&[u32]> = examples.iter().map(Vec::as_slice).collect();
    let (token_ids, segment_ids, positions) = fill_side(&placements, rows, max_len, &seqs, false);
    Ok(Packed {
        batch: PackedBatch {
            rows,
            len: max_len,
            token_ids,
            segment_ids,
            positions,
            segment_counts: counts(&placements, rows),
            decoder: None,
            slots: None,
        },
        placements,
    })
}

/// Packs (input, target) pairs; an example fits only if both sides fit.
pub fn pack_seq2seq(
    inputs: &[Vec<u32>],
    targets: &[Vec<u32>],
    max_len: usize,
    max_target: usize,
    layout: Layout,
) -> Result<Packed> {
    if inputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: targets.len(),
        });
    }
    check_tokens(inputs)?;
    check_tokens(targets)?;
    let lens: Vec<(usize, usize)> = inputs.iter().zip(targets).map(|(a, b)| (a.len(), b.len())).collect();
    if let Some(i) = lens.iter().position(|l| l.1 == 0) {
        return Err(Error::shape("pack_seq2seq", format!("example {i} has an empty target")));
    }
    let placements = plan(&lens, max_len, max_target, layout)?;
    let rows = placements.last().map_or(0, |p| p.row + 1);
    let ins: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let tgs: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
    let (token_ids, segment_ids, positions) = fill_side(&placements, rows, max_len, &ins, false);
    let (t_ids, t_segs, t_pos) = fill_side(&placements, rows, max_target, &tgs, true);
    Ok(Packed {
        batch: PackedBatch {
            rows,
            len: max_len,
            token_ids,
            segment_ids,
            positions,
            segment_counts: counts(&placements, rows),
            decoder: Some(DecoderSide {
                len: max_target,
                target_ids: t_ids,
                segment_ids: t_segs,
                positions: t_pos,
            }),
            slots: None,
        },
        placements,
    })
}

/// Packs inputs with one EncT5 target per example. `max_segments` widens the
/// slot dimension beyond the largest row count (the extra slots are padding).
pub fn pack_slots(
    inputs: &[Vec<u32>],
    targets: &[SlotTarget],
    max_len: usize,
    max_segments: Option<usize>,
    layout: Layout,
) -> Result<Packed> {
    if inputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: targets.len(),
        });
    }
    let mut packed = pack_with(inputs, max_len, layout)?;
    let batch = &mut packed.batch;
    let most = batch.segment_counts.iter().copied().max().unwrap_or(0);
    let s = max_segments.unwrap_or(most);
    if most > s {
        let row = batch.segment_counts.iter().position(|&c| c == most).unwrap();
        return Err(Error::TooManySegments {
            row,
            count: most,
            max: s,
        });
    }
    let mut slots = SlotTargets {
        max_segments: s,
        classes: vec![0; batch.rows * s],
        values: vec![0.0; batch.rows * s],
        weights: vec![0.0; batch.rows * s],
    };
    for (p, t) in packed.placements.iter().zip(targets) {
        let i = p.row * s + (p.segment as usize - 1);
        slots.weights[i] = 1.0;
        match *t {
            SlotTarget::Class(c) => slots.classes[i] = c,
            SlotTarget::Value(v) => slots.values[i] = v,
        }
    }
    batch.slots = Some(slots);
    Ok(packed)
}

/// Recovers the input sequences in their original order.
pub fn unpack(packed: &Packed) -> Vec<Vec<u32>> {
    let b = &packed.batch;
    packed
        .placements
        .iter()
        .map(|p| b.token_ids[p.row * b.len + p.offset..][..p.len].to_vec())
        .collect()
}

/// Additive self-attention mask `[L × L]`: `i` may attend `j` iff both share a
/// nonzero segment id (and `j ≤ i` when `causal`).
pub fn self_attention_mask(segment_ids: &[u32], causal: bool) -> Tensor {
    let l = segment_ids.len();
    let mut m = Tensor::zeros(&[l, l]);
    fill_self_mask(m.data_mut(), segment_ids, causal);
    m
}

/// Additive cross-attention mask `[Lq × Lk]`: query `q` may attend key `k`
/// iff their segment ids match and are nonzero.
pub fn cross_attention_mask(query_segment_ids: &[u32], key_segment_ids: &[u32]) -> Tensor {
    let mut m = Tensor::zeros(&[query_segment_ids.len(), key_segment_ids.len()]);
    fill_cross_mask(m.data_mut(), query_segment_ids, key_segment_ids);
    m
}

pub(crate) fn fill_self_mask(out: &mut [f64], segs: &[u32], causal: bool) {
    let l = segs.len();
    for i in 0..l {
        for j in 0..l {
            let ok = segs[i] != 0 && segs[i] == segs[j] && (!causal || j <= i);
            out[i * l + j] = if ok { 0.0 } else { MASK_VALUE };
        }
    }
}

pub(crate) fn fill_cross_mask(out: &mut [f64], q: &[u32], k: &[u32]) {
    let lk = k.len();
    for (i, &qs) in q.iter().enumerate() {
        for (j, &ks) in k.iter().enumerate() {
            out[i * lk + j] = if qs != 0 && qs == ks { 0.0 } else { MASK_VALUE };
        }
    }
}

/// Stacks per-row self-attention masks into `[rows, 1, L, L]`.
pub fn batch_self_mask(segs: &[u32], rows: usize, len: usize, causal: bool) -> Tensor {
    let mut m = Tensor::zeros(&[rows, 1, len, len]);
    for r in 0..rows {
        fill_self_mask(
            &mut m.data_mut()[r * len * len..][..len * len],
            &segs[r * len..][..len],
            causal,
        );
    }
    m
}

/// Stacks per-row cross-attention masks into `[rows, 1, Lq, Lk]`.
pub fn batch_cross_mask(q: &[u32], k: &[u32], rows: usize, lq: usize, lk: usize) -> Tensor {
    let mut m = Tensor::zeros(&[rows, 1, lq, lk]);
    for r in 0..rows {
        fill_cross_mask(
            &mut m.data_mut()[r * lq * lk..][..lq * lk],
            &q[r * lq..][..lq],
            &k[r * lk..][..lk],
        );
    }
    m
}
