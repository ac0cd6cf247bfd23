use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::adafactor::{Adafactor, AdafactorState};
use super::config::{Selection, TrainConfig};
use super::data::{build_batch, encode_examples, Batcher, Item};
use super::eval::{eval_items, evaluate_items};
use super::span::{max_source_len, span_corrupt};
use crate::error::{Error, Result};
use crate::model::{loss, ModelConfig, ParameterStore, TaskKind, Variant};
use crate::packing::{Layout, PackedBatch, SlotTarget};
use crate::surgery::Checkpoint;
use crate::tasks::tokenizer::{Tokenizer, END};
use crate::tasks::{Metric, Splits, TaskSpec};
use crate::tensor::{Graph, Rng, Tensor};

/// Parameters, optimizer and step counter for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub optimizer: Adafactor,
    pub state: AdafactorState,
    pub step: usize,
}

/// Loss and per-parameter gradients of `batch`, without updating anything.
pub fn loss_and_gradients(
    cfg: &ModelConfig,
    params: &ParameterStore,
    batch: &PackedBatch,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::unchecked();
    let p = params.bind(&mut g);
    let (l, _) = loss(&mut g, cfg, &p, batch)?;
    let value = g.value(l).data()[0];
    let grads = g.backward(l)?;
    Ok((value, p.gradients(&g, &grads)))
}

impl Trainer {
    pub fn new(config: ModelConfig, params: ParameterStore, learning_rate: f64) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Trainer {
            config,
            params,
            optimizer: Adafactor::new(learning_rate),
            state: AdafactorState::new(),
            step: 0,
        })
    }

    /// One optimizer step on `batch`; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &PackedBatch) -> Result<f64> {
        let step = self.step + 1;
        let (value, grads) = loss_and_gradients(&self.config, &self.params, batch)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        self.optimizer.step(&mut self.params, &grads, &mut self.state)?;
        self.step = step;
        Ok(value)
    }

    pub fn checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        Checkpoint::new(self.config.clone(), seed, self.params.clone())
    }
}

/// One line of the loss/metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    /// Examples in this step's batch.
    pub examples: usize,
    pub rows: usize,
    pub seconds: f64,
    /// Validation score and metrics, on evaluation steps.
    pub validation: Option<f64>,
    pub metrics: BTreeMap<Metric, f64>,
}

/// Writes `history` as CSV: `step,loss,examples,rows,seconds,val_score` and
/// one `val_<metric>` column per metric seen.
pub fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let metrics: Vec<Metric> = {
        let mut all: Vec<Metric> = history.iter().flat_map(|r| r.metrics.keys().copied()).collect();
        all.sort();
        all.dedup();
        all
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<String> = ["step", "loss", "examples", "rows", "seconds", "val_score"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(metrics.iter().map(|m| format!("val_{}", m.name())));
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in history {
        let mut rec = vec![
            r.step.to_string(),
            r.loss.to_string(),
            r.examples.to_string(),
            r.rows.to_string(),
            format!("{:.6}", r.seconds),
            opt(r.validation),
        ];
        rec.extend(metrics.iter().map(|m| opt(r.metrics.get(m).copied())));
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn layout(tc: &TrainConfig) -> Layout {
    if tc.packing {
        Layout::Packed
    } else {
        Layout::Unpacked
    }
}

fn save_periodic(tc: &TrainConfig, trainer: &Trainer, dir: Option<&Path>, saved: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = dir {
        if tc.checkpoint_every > 0 && trainer.step % tc.checkpoint_every == 0 {
            let path = dir.join(format!("ckpt_{:06}.bin", trainer.step));
            trainer.checkpoint(tc.seed)?.save(&path)?;
            saved.push(path);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub trainer: Trainer,
    pub history: Vec<HistoryRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Splits corpus sentences into chunks whose span corruption always fits the
/// configured input and target lengths.
pub fn pretraining_chunks(tc: &TrainConfig, corpus: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let n = max_source_len(
        tc.corruption_rate,
        tc.mean_span_len,
        tc.max_input_len,
        tc.max_target_len,
    )
    .max(1);
    corpus
        .iter()
        .flat_map(|s| s.chunks(n).map(<[u32]>::to_vec))
        .filter(|c| !c.is_empty())
        .collect()
}

/// Span-corruption pretraining of a T5 model from `params`. Checkpoints go to
/// `ckpt_dir` every `checkpoint_every` steps when a directory is given.
pub fn pretrain(
    tc: &TrainConfig,
    cfg: &ModelConfig,
    params: ParameterStore,
    corpus: &[Vec<u32>],
    tok: &Tokenizer,
    ckpt_dir: Option<&Path>,
) -> Result<PretrainRun> {
    tc.validate()?;
    if cfg.variant != Variant::T5 {
        return Err(Error::Variant(format!(
            "pretraining needs a t5 model, got {}",
            cfg.variant
        )));
    }
    let chunks = pretraining_chunks(tc, corpus);
    if chunks.is_empty() {
        return Err(Error::EmptySplit("corpus".into()));
    }
    let mut trainer = Trainer::new(cfg.clone(), params, tc.learning_rate)?;
    let mut batcher = Batcher::new(chunks.len(), tc.seed)?;
    let mut rng = Rng::keyed(tc.seed, "span_corruption");
    let mut history = Vec::with_capacity(tc.steps);
    let mut checkpoints = Vec::new();
    for _ in 0..tc.steps {
        let t0 = Instant::now();
        let items = batcher.next_batch(
            |i| {
                let c = span_corrupt(&chunks[i], &mut rng, tc.corruption_rate, tc.mean_span_len, tok)?;
                let mut input = c.input;
                input.push(END);
                Ok(Item {
                    input,
                    target: c.target,
                    gold: SlotTarget::Class(0),
                })
            },
            tc.batch_size,
            tc.max_input_len,
            tc.max_target_len,
            layout(tc),
        )?;
        let packed = build_batch(cfg, &items, tc.max_input_len, tc.max_target_len, layout(tc), None)?;
        let l = trainer.train_step(&packed.batch)?;
        history.push(HistoryRow {
            step: trainer.step,
            loss: l,
            examples: items.len(),
            rows: packed.batch.rows,
            seconds: t0.elapsed().as_secs_f64(),
            validation: None,
            metrics: BTreeMap::new(),
        });
        save_periodic(tc, &trainer, ckpt_dir, &mut checkpoints)?;
    }
    Ok(PretrainRun {
        trainer,
        history,
        checkpoints,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub trainer: Trainer,
    /// Parameters chosen by the selection rule.
    pub selected: ParameterStore,
    pub selected_step: usize,
    pub selected_score: f64,
    pub history: Vec<HistoryRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Fine-tunes `params` on the training split of `spec`, evaluating on the
/// validation split every `eval_every` steps and after the last step.
pub fn finetune(
    tc: &TrainConfig,
    cfg: &ModelConfig,
    params: ParameterStore,
    spec: &TaskSpec,
    splits: &Splits,
    tok: &Tokenizer,
    ckpt_dir: Option<&Path>,
) -> Result<FinetuneRun> {
    tc.validate()?;
    spec.validate()?;
    if cfg.variant == Variant::EncT5 {
        if cfg.task_kind != spec.kind {
            return Err(Error::Variant(format!(
                "model head is {:?}, task `{}` is {:?}",
                cfg.task_kind, spec.name, spec.kind
            )));
        }
        if cfg.task_kind == TaskKind::Classification && cfg.num_classes != spec.num_classes() {
            return Err(Error::Variant(format!(
                "model has {} classes, task `{}` has {}",
                cfg.num_classes,
                spec.name,
                spec.num_classes()
            )));
        }
    }
    let train = encode_examples(
        spec,
        tok,
        &splits.train,
        cfg.variant,
        tc.max_input_len,
        tc.max_target_len,
    )?;
    let val = eval_items(spec, tok, &splits.validation, tc.max_input_len)?;
    let mut trainer = Trainer::new(cfg.clone(), params, tc.learning_rate)?;
    let mut batcher = Batcher::new(train.len(), tc.seed)?;
    let mut history = Vec::with_capacity(tc.steps);
    let mut checkpoints = Vec::new();
    let mut selected: Option<(ParameterStore, usize, f64)> = None;
    let max_target = if cfg.variant == Variant::EncT5 {
        0
    } else {
        tc.max_target_len
    };
    for _ in 0..tc.steps {
        let t0 = Instant::now();
        let items = batcher.next_batch(
            |i| Ok(train[i].clone()),
            tc.batch_size,
            tc.max_input_len,
            max_target,
            layout(tc),
        )?;
        let packed = build_batch(cfg, &items, tc.max_input_len, max_target, layout(tc), None)?;
        let l = trainer.train_step(&packed.batch)?;
        let seconds = t0.elapsed().as_secs_f64();
        let mut row = HistoryRow {
            step: trainer.step,
            loss: l,
            examples: items.len(),
            rows: packed.batch.rows,
            seconds,
            validation: None,
            metrics: BTreeMap::new(),
        };
        let at_eval = trainer.step == tc.steps || (tc.eval_every > 0 && trainer.step % tc.eval_every == 0);
        if at_eval && !val.is_empty() {
            let ev = evaluate_items(cfg, &trainer.params, spec, tok, &val, tc.max_input_len)?;
            row.validation = Some(ev.score);
            row.metrics = ev.bundle.values.clone();
            if selected.as_ref().map_or(true, |s| ev.score > s.2) {
                selected = Some((trainer.params.clone(), trainer.step, ev.score));
            }
        }
        history.push(row);
        save_periodic(tc, &trainer, ckpt_dir, &mut checkpoints)?;
    }
    let (selected, selected_step, selected_score) = match (tc.selection, selected) {
        (Selection::BestValidation, Some(s)) => s,
        _ => {
            let last = history.iter().rev().find_map(|r| r.validation).unwrap_or(f64::NAN);
            (trainer.params.clone(), trainer.step, last)
        }
    };
    Ok(FinetuneRun {
        trainer,
        selected,
        selected_step,
        selected_score,
        history,
        checkpoints,
    })
}
