use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskKind, Variant};
use crate::packing::{pack_seq2seq, pack_slots, Layout, Packed, SlotTarget};
use crate::tasks::tokenizer::{Tokenizer, END};
use crate::tasks::{Example, Target, TaskSpec};
use crate::tensor::Rng;

/// One training or evaluation example, already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub input: Vec<u32>,
    /// Decoder target ending in `</s>`; empty for EncT5.
    pub target: Vec<u32>,
    /// Gold class (1-based) or score.
    pub gold: SlotTarget,
}

/// Cuts `ids` to `max_len` tokens, keeping a final `</s>`.
pub fn truncate(mut ids: Vec<u32>, max_len: usize) -> Vec<u32> {
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(END);
    }
    ids
}

pub fn gold_of(spec: &TaskSpec, ex: &Example) -> Result<SlotTarget> {
    match (&ex.target, spec.kind) {
        (Target::Label(l), TaskKind::Classification) => Ok(SlotTarget::Class(spec.class_of(l)?)),
        (Target::Score(s), TaskKind::Regression) => Ok(SlotTarget::Value(*s)),
        _ => Err(Error::Variant(format!(
            "target kind does not match task `{}`",
            spec.name
        ))),
    }
}

/// Tokenizes `examples` for `variant`. Inputs longer than `max_input` are
/// truncated; text-to-text targets longer than `max_target` are an error.
pub fn encode_examples(
    spec: &TaskSpec,
    tok: &Tokenizer,
    examples: &[Example],
    variant: Variant,
    max_input: usize,
    max_target: usize,
) -> Result<Vec<Item>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let input = truncate(spec.encode_input(tok, ex), max_input);
            let gold = gold_of(spec, ex)?;
            let target = if variant == Variant::EncT5 {
                Vec::new()
            } else {
                let t = tok.encode_with_end(&spec.target_text(ex)?);
                if t.len() > max_target {
                    return Err(Error::ExampleTooLong {
                        index: i,
                        len: t.len(),
                        max_len: max_target,
                    });
                }
                t
            };
            Ok(Item { input, target, gold })
        })
        .collect()
}

/// Packs `items` for `cfg.variant`. `max_segments` widens the EncT5 slot
/// dimension with padded slots.
pub fn build_batch(
    cfg: &ModelConfig,
    items: &[Item],
    max_len: usize,
    max_target: usize,
    layout: Layout,
    max_segments: Option<usize>,
) -> Result<Packed> {
    let inputs: Vec<Vec<u32>> = items.iter().map(|it| it.input.clone()).collect();
    if cfg.variant == Variant::EncT5 {
        let golds: Vec<SlotTarget> = items.iter().map(|it| it.gold).collect();
        pack_slots(&inputs, &golds, max_len, max_segments, layout)
    } else {
        let targets: Vec<Vec<u32>> = items.iter().map(|it| it.target.clone()).collect();
        pack_seq2seq(&inputs, &targets, max_len, max_target, layout)
    }
}

/// Endless stream of example indices, reshuffled at every epoch.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
    pending: Option<Item>,
    pub epoch: usize,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySplit("train".into()));
        }
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            rng: Rng::keyed(seed, "batcher"),
            pending: None,
            epoch: 0,
        };
        b.shuffle();
        Ok(b)
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.below(i as u64 + 1) as usize;
            self.order.swap(i, j);
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    /// Pulls items until `rows` rows are full under `layout`. The item that
    /// would open row `rows + 1` is held back for the next batch.
    pub fn next_batch<F>(
        &mut self,
        mut make: F,
        rows: usize,
        max_len: usize,
        max_target: usize,
        layout: Layout,
    ) -> Result<Vec<Item>>
    where
        F: FnMut(usize) -> Result<Item>,
    {
        let mut out: Vec<Item> = Vec::new();
        let (mut row, mut used, mut used_t) = (0usize, 0usize, 0usize);
        loop {
            let item = match self.pending.take() {
                Some(it) => it,
                None => make(self.next_index())?,
            };
            let (len, tlen) = (item.input.len(), item.target.len());
            if len > max_len || tlen > max_target {
                return Err(Error::ExampleTooLong {
                    index: out.len(),
                    len: len.max(tlen),
                    max_len: if len > max_len { max_len } else { max_target },
                });
            }
            let fits = used + len <= max_len && used_t + tlen <= max_target;
            if !out.is_empty() && (layout == Layout::Unpacked || !fits) {
                if row + 1 == rows {
                    self.pending = Some(item);
                    return Ok(out);
                }
                row += 1;
                used = 0;
                used_t = 0;
            }
            used += len;
            used_t += tlen;
            out.push(item);
        }
    }
}
