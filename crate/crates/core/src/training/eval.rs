use serde::Serialize;

use super::data::{gold_of, truncate, Item};
use crate::error::{Error, Result};
use crate::model::{example_logits, predict_class, ModelConfig, ParameterStore, TaskKind, Variant};
use crate::packing::{pack_seq2seq, pack_slots, Layout, SlotTarget};
use crate::tasks::metrics::{classification_bundle, regression_bundle};
use crate::tasks::tokenizer::Tokenizer;
use crate::tasks::{aggregate, score_grid, Example, MetricBundle, TaskSpec};

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Predictions {
    Classes(Vec<usize>),
    Scores(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub bundle: MetricBundle,
    /// Mean of the task's declared metrics.
    pub score: f64,
    pub predictions: Predictions,
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row[target] - m - z.ln()
}

/// Teacher-forced `log p(target | input)` for each pair, summed over target
/// tokens.
pub fn sequence_log_likelihoods(
    cfg: &ModelConfig,
    params: &ParameterStore,
    inputs: &[Vec<u32>],
    targets: &[Vec<u32>],
    max_len: usize,
) -> Result<Vec<f64>> {
    if cfg.variant == Variant::EncT5 {
        return Err(Error::Variant("rank classification needs a decoder".into()));
    }
    let max_target = targets.iter().map(Vec::len).max().unwrap_or(1);
    let mut out = Vec::with_capacity(inputs.len());
    for (ins, tgs) in inputs.chunks(EVAL_CHUNK).zip(targets.chunks(EVAL_CHUNK)) {
        let packed = pack_seq2seq(ins, tgs, max_len, max_target, Layout::Packed)?;
        let logits = example_logits(cfg, params, &packed)?;
        for (l, t) in logits.iter().zip(tgs) {
            let v = l.shape()[1];
            out.push(
                t.iter()
                    .enumerate()
                    .map(|(j, &tok)| log_softmax_at(&l.data()[j * v..(j + 1) * v], tok as usize))
                    .sum(),
            );
        }
    }
    Ok(out)
}

/// Index of the highest-scoring candidate per example; ties go to the earliest.
fn rank(
    cfg: &ModelConfig,
    params: &ParameterStore,
    inputs: &[Vec<u32>],
    candidates: &[Vec<u32>],
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut best = vec![0usize; inputs.len()];
    let mut best_ll = vec![f64::NEG_INFINITY; inputs.len()];
    for (c, cand) in candidates.iter().enumerate() {
        let targets = vec![cand.clone(); inputs.len()];
        let ll = sequence_log_likelihoods(cfg, params, inputs, &targets, max_len)?;
        for i in 0..inputs.len() {
            if ll[i] > best_ll[i] {
                best_ll[i] = ll[i];
                best[i] = c;
            }
        }
    }
    Ok(best)
}

/// Raw predictions for encoded items: 1-based classes, or scores.
pub fn predict(
    cfg: &ModelConfig,
    params: &ParameterStore,
    spec: &TaskSpec,
    tok: &Tokenizer,
    items: &[Item],
    max_len: usize,
) -> Result<Predictions> {
    let inputs: Vec<Vec<u32>> = items.iter().map(|it| it.input.clone()).collect();
    if cfg.variant == Variant::EncT5 {
        let mut classes = Vec::new();
        let mut scores = Vec::new();
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let dummy = vec![SlotTarget::Class(1); chunk.len()];
            let packed = pack_slots(chunk, &dummy, max_len, None, Layout::Packed)?;
            for l in example_logits(cfg, params, &packed)? {
                match spec.kind {
                    TaskKind::Classification => classes.push(predict_class(l.data())),
                    TaskKind::Regression => scores.push(l.data()[1]),
                }
            }
        }
        return Ok(match spec.kind {
            TaskKind::Classification => Predictions::Classes(classes),
            TaskKind::Regression => Predictions::Scores(scores),
        });
    }
    let candidates: Vec<Vec<u32>> = spec.candidates().iter().map(|c| tok.encode_with_end(c)).collect();
    let best = rank(cfg, params, &inputs, &candidates, max_len)?;
    Ok(match spec.kind {
        TaskKind::Classification => Predictions::Classes(best.into_iter().map(|c| c + 1).collect()),
        TaskKind::Regression => {
            let grid = score_grid();
            Predictions::Scores(best.into_iter().map(|c| grid[c]).collect())
        }
    })
}

/// Scores `preds` against the golds of `items`. F1 treats the last label as
/// the positive class.
pub fn score_predictions(spec: &TaskSpec, items: &[Item], preds: &Predictions) -> Result<MetricBundle> {
    match preds {
        Predictions::Classes(p) => {
            let golds: Vec<usize> = items
                .iter()
                .map(|it| match it.gold {
                    SlotTarget::Class(c) => c,
                    SlotTarget::Value(_) => 0,
                })
                .collect();
            classification_bundle(&spec.name, &spec.metrics, p, &golds, spec.num_classes())
        }
        Predictions::Scores(p) => {
            let golds: Vec<f64> = items
                .iter()
                .map(|it| match it.gold {
                    SlotTarget::Value(v) => v,
                    SlotTarget::Class(c) => c as f64,
                })
                .collect();
            regression_bundle(&spec.name, &spec.metrics, p, &golds)
        }
    }
}

/// Evaluates `params` on `examples`. T5 and 1decT5 use rank classification
/// over the label strings (regression ranks the 0.2-spaced score grid); EncT5
/// uses the class argmax or output 1 for regression.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParameterStore,
    spec: &TaskSpec,
    tok: &Tokenizer,
    examples: &[Example],
    max_len: usize,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let items = eval_items(spec, tok, examples, max_len)?;
    evaluate_items(cfg, params, spec, tok, &items, max_len)
}

pub fn evaluate_items(
    cfg: &ModelConfig,
    params: &ParameterStore,
    spec: &TaskSpec,
    tok: &Tokenizer,
    items: &[Item],
    max_len: usize,
) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let predictions = predict(cfg, params, spec, tok, items, max_len)?;
    let bundle = score_predictions(spec, items, &predictions)?;
    let score = aggregate(&[(&spec.metrics, &bundle)])?.overall;
    Ok(Evaluation {
        bundle,
        score,
        predictions,
    })
}

/// Items for evaluation only: inputs and golds, no decoder targets.
pub fn eval_items(spec: &TaskSpec, tok: &Tokenizer, examples: &[Example], max_len: usize) -> Result<Vec<Item>> {
    examples
        .iter()
        .map(|ex| {
            Ok(Item {
                input: truncate(spec.encode_input(tok, ex), max_len),
                target: Vec::new(),
                gold: gold_of(spec, ex)?,
            })
        })
        .collect()
}
