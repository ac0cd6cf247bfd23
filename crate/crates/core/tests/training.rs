use std::collections::BTreeMap;

use enct5_core::model::{forward, ModelConfig, ParameterStore, TaskKind, Variant, PROJECTION_BIAS};
use enct5_core::packing::{pack_seq2seq, Layout, SlotTarget};
use enct5_core::surgery::Checkpoint;
use enct5_core::tasks::tokenizer::{Tokenizer, END};
use enct5_core::tasks::{
    synth_task, synthetic_spec, topic_corpus, DataSource, Example, Metric, Splits, Target, TaskSpec,
};
use enct5_core::tensor::{Graph, Rng, Tensor};
use enct5_core::training::eval::{eval_items, score_predictions};
use enct5_core::training::{
    build_batch, encode_examples, factored_second_moment, finetune, loss_and_gradients, pretrain, reconstruct,
    sequence_log_likelihoods, span_corrupt, write_history, Adafactor, AdafactorState, Batcher, Item, Predictions,
    Selection, TrainConfig, Trainer,
};
use enct5_core::Error;

fn tiny(variant: Variant, classes: usize, kind: TaskKind) -> ModelConfig {
    let mut c = ModelConfig::desk(Tokenizer::new().vocab_size());
    c.d_model = 16;
    c.d_ff = 32;
    c.num_heads = 2;
    c.d_kv = 8;
    c.rel_buckets = 8;
    c.rel_max_distance = 16;
    c.with_variant(variant, classes, kind)
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_input_len: 32,
        max_target_len: 8,
        steps,
        eval_every: 0,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    }
}

fn majority(size: usize, seed: u64) -> (TaskSpec, Splits) {
    (
        synthetic_spec("majority", seed, size).unwrap(),
        synth_task("majority", seed, size).unwrap(),
    )
}

fn items_for(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Item> {
    let (spec, splits) = majority(64, seed);
    let tok = Tokenizer::new();
    encode_examples(&spec, &tok, &splits.train[..n], cfg.variant, 32, 8).unwrap()
}

#[test]
fn pretraining_loss_decreases_over_200_steps() {
    let tok = Tokenizer::new();
    let cfg = tiny(Variant::T5, 1, TaskKind::Classification);
    let corpus = topic_corpus(&tok, 3, 400, 12, 24);
    let tc = tiny_train(200);
    let run = pretrain(&tc, &cfg, ParameterStore::init(&cfg, 0), &corpus, &tok, None).unwrap();
    assert_eq!(run.history.len(), 200);
    let head: f64 = run.history[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let tail: f64 = run.history[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(run.history[199].loss < run.history[0].loss);
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn checkpoint_cadence_and_history_csv() {
    let dir = tempfile::tempdir().unwrap();
    let tok = Tokenizer::new();
    let cfg = tiny(Variant::T5, 1, TaskKind::Classification);
    let corpus = topic_corpus(&tok, 1, 50, 10, 20);
    let tc = TrainConfig {
        checkpoint_every: 2,
        ..tiny_train(7)
    };
    let run = pretrain(
        &tc,
        &cfg,
        ParameterStore::init(&cfg, 0),
        &corpus,
        &tok,
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!(run.trainer.step, 7);
    let names: Vec<String> = run
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["ckpt_000002.bin", "ckpt_000004.bin", "ckpt_000006.bin"]);
    let ck = Checkpoint::load(&run.checkpoints[2]).unwrap();
    assert_eq!(ck.config, cfg);

    let csv = dir.path().join("loss.csv");
    write_history(&csv, &run.history).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,examples,rows,seconds,val_score");
    assert_eq!(lines.len(), 8);
    assert!(lines[3].starts_with("3,"));
}

#[test]
fn packing_changes_rows_but_not_the_loss() {
    for variant in [Variant::T5, Variant::OneDecT5, Variant::EncT5] {
        let cfg = tiny(variant, 2, TaskKind::Classification);
        let params = ParameterStore::init(&cfg, 4);
        let items = items_for(&cfg, 12, 2);
        let max_t = if variant == Variant::EncT5 { 0 } else { 8 };
        let packed = build_batch(&cfg, &items, 32, max_t, Layout::Packed, None).unwrap();
        let unpacked = build_batch(&cfg, &items, 32, max_t, Layout::Unpacked, None).unwrap();
        assert!(packed.batch.rows < unpacked.batch.rows);
        let (a, _) = loss_and_gradients(&cfg, &params, &packed.batch).unwrap();
        let (b, _) = loss_and_gradients(&cfg, &params, &unpacked.batch).unwrap();
        assert!((a - b).abs() < 1e-9, "{variant}: {a} vs {b}");
    }
}

#[test]
fn packed_and_unpacked_training_track_each_other() {
    for variant in [Variant::T5, Variant::EncT5] {
        let cfg = tiny(variant, 2, TaskKind::Classification);
        let items = items_for(&cfg, 48, 5);
        let max_t = if variant == Variant::EncT5 { 0 } else { 8 };
        let mut packed = Trainer::new(cfg.clone(), ParameterStore::init(&cfg, 1), 1e-3).unwrap();
        let mut unpacked = packed.clone();
        for chunk in items.chunks(6) {
            let p = build_batch(&cfg, chunk, 32, max_t, Layout::Packed, None).unwrap();
            let u = build_batch(&cfg, chunk, 32, max_t, Layout::Unpacked, None).unwrap();
            let a = packed.train_step(&p.batch).unwrap();
            let b = unpacked.train_step(&u.batch).unwrap();
            assert!((a - b).abs() < 1e-9, "{variant} step {}: {a} vs {b}", packed.step);
        }
    }
}

#[test]
fn padded_slots_leave_the_trajectory_bitwise_unchanged() {
    let cfg = tiny(Variant::EncT5, 2, TaskKind::Classification);
    let (spec, splits) = majority(256, 9);
    let tok = Tokenizer::new();
    let items = encode_examples(&spec, &tok, &splits.train, cfg.variant, 32, 0).unwrap();
    let mut plain = Trainer::new(cfg.clone(), ParameterStore::init(&cfg, 2), 1e-2).unwrap();
    let mut padded = plain.clone();
    let mut batcher = Batcher::new(items.len(), 0).unwrap();
    for _ in 0..100 {
        let batch = batcher
            .next_batch(|i| Ok(items[i].clone()), 3, 32, 0, Layout::Packed)
            .unwrap();
        let a = build_batch(&cfg, &batch, 32, 0, Layout::Packed, None).unwrap();
        let extra = a.batch.max_segments() + 3;
        let b = build_batch(&cfg, &batch, 32, 0, Layout::Packed, Some(extra)).unwrap();
        let slots = b.batch.slots.as_ref().unwrap();
        assert!(slots.weights.iter().filter(|&&w| w == 0.0).count() >= 3 * b.batch.rows);
        let la = plain.train_step(&a.batch).unwrap();
        let lb = padded.train_step(&b.batch).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert!(plain.params.bit_eq(&padded.params), "diverged at step {}", plain.step);
    }
}

#[test]
fn removing_padded_slots_changes_no_gradient() {
    for kind in [TaskKind::Classification, TaskKind::Regression] {
        let cfg = tiny(Variant::EncT5, 2, kind);
        let params = ParameterStore::init(&cfg, 3);
        let (spec, splits) = if kind == TaskKind::Regression {
            (
                synthetic_spec("linear_score", 1, 32).unwrap(),
                synth_task("linear_score", 1, 32).unwrap(),
            )
        } else {
            majority(32, 1)
        };
        let items = encode_examples(&spec, &Tokenizer::new(), &splits.train[..10], cfg.variant, 32, 0).unwrap();
        let a = build_batch(&cfg, &items, 32, 0, Layout::Packed, None).unwrap();
        let b = build_batch(&cfg, &items, 32, 0, Layout::Packed, Some(9)).unwrap();
        let (la, ga) = loss_and_gradients(&cfg, &params, &a.batch).unwrap();
        let (lb, gb) = loss_and_gradients(&cfg, &params, &b.batch).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga.keys().collect::<Vec<_>>(), gb.keys().collect::<Vec<_>>());
        for (name, g) in &ga {
            assert!(g.bit_eq(&gb[name]), "{kind:?} {name}");
        }
    }
}

#[test]
fn enct5_gradients_stay_inside_the_store_and_reach_every_parameter() {
    let cfg = tiny(Variant::EncT5, 2, TaskKind::Classification);
    let params = ParameterStore::init(&cfg, 5);
    let items = items_for(&cfg, 8, 1);
    let batch = build_batch(&cfg, &items, 32, 0, Layout::Packed, None).unwrap();
    let (_, grads) = loss_and_gradients(&cfg, &params, &batch.batch).unwrap();
    assert!(grads.keys().all(|k| params.contains(k)));
    assert!(!grads.keys().any(|k| k.starts_with("decoder/")));
    let names: Vec<&str> = params.names().collect();
    assert_eq!(grads.keys().map(String::as_str).collect::<Vec<_>>(), names);

    let mut t = Trainer::new(cfg.clone(), params.clone(), 1e-3).unwrap();
    t.train_step(&batch.batch).unwrap();
    for (name, before) in params.iter() {
        let after = t.params.get(name).unwrap();
        assert!(!after.bit_eq(before), "{name} was not updated");
    }
}

#[test]
fn one_step_is_bitwise_reproducible() {
    let cfg = tiny(Variant::T5, 1, TaskKind::Classification);
    let items = items_for(&cfg, 6, 3);
    let batch = build_batch(&cfg, &items, 32, 8, Layout::Packed, None).unwrap();
    let mut a = Trainer::new(cfg.clone(), ParameterStore::init(&cfg, 8), 1e-3).unwrap();
    let mut b = a.clone();
    assert_eq!(
        a.train_step(&batch.batch).unwrap().to_bits(),
        b.train_step(&batch.batch).unwrap().to_bits()
    );
    assert!(a.params.bit_eq(&b.params));
    assert_eq!(a.state, b.state);
}

#[test]
fn non_finite_loss_reports_the_step() {
    let cfg = tiny(Variant::EncT5, 2, TaskKind::Classification);
    let mut params = ParameterStore::init(&cfg, 1);
    params.get_mut(PROJECTION_BIAS).unwrap().data_mut()[1] = f64::NAN;
    let items = items_for(&cfg, 4, 1);
    let batch = build_batch(&cfg, &items, 32, 0, Layout::Packed, None).unwrap();
    let mut t = Trainer::new(cfg, params, 1e-3).unwrap();
    assert!(matches!(
        t.train_step(&batch.batch),
        Err(Error::Diverged { step: 1, .. })
    ));
}

/// Straight-line log-likelihood: one example per forward pass, explicit
/// log-sum-exp over each vocabulary row.
fn oracle_log_likelihood(cfg: &ModelConfig, params: &ParameterStore, input: &[u32], target: &[u32]) -> f64 {
    let packed = pack_seq2seq(
        &[input.to_vec()],
        &[target.to_vec()],
        input.len(),
        target.len(),
        Layout::Unpacked,
    )
    .unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let out = forward(&mut g, cfg, &p, &packed.batch).unwrap();
    let logits = g.value(out.logits);
    let v = cfg.vocab_size;
    let mut total = 0.0;
    for (j, &t) in target.iter().enumerate() {
        let row = &logits.data()[j * v..(j + 1) * v];
        let mut m = row[0];
        for &x in row {
            if x > m {
                m = x;
            }
        }
        let mut z = 0.0;
        for &x in row {
            z += (x - m).exp();
        }
        total += row[t as usize] - (m + z.ln());
    }
    total
}

#[test]
fn rank_scores_match_an_independent_forward_pass() {
    let tok = Tokenizer::new();
    for variant in [Variant::T5, Variant::OneDecT5] {
        let cfg = tiny(variant, 1, TaskKind::Classification);
        let params = ParameterStore::init(&cfg, 11);
        let (spec, splits) = majority(16, 4);
        let items = eval_items(&spec, &tok, &splits.train[..10], 32).unwrap();
        let inputs: Vec<Vec<u32>> = items.iter().map(|i| i.input.clone()).collect();
        for label in &spec.labels {
            let target = tok.encode_with_end(label);
            let targets = vec![target.clone(); inputs.len()];
            let ll = sequence_log_likelihoods(&cfg, &params, &inputs, &targets, 32).unwrap();
            for (i, inp) in inputs.iter().enumerate() {
                let want = oracle_log_likelihood(&cfg, &params, inp, &target);
                assert!(
                    (ll[i] - want).abs() < 1e-9,
                    "{variant} {label} {i}: {} vs {want}",
                    ll[i]
                );
            }
        }
    }
}

#[test]
fn perfect_and_constant_predictors() {
    let (spec, splits) = majority(40, 2);
    let tok = Tokenizer::new();
    let items = eval_items(&spec, &tok, &splits.validation, 32).unwrap();
    let golds: Vec<usize> = items
        .iter()
        .map(|i| match i.gold {
            SlotTarget::Class(c) => c,
            SlotTarget::Value(_) => unreachable!(),
        })
        .collect();
    let perfect = score_predictions(&spec, &items, &Predictions::Classes(golds.clone())).unwrap();
    assert_eq!(perfect.values[&Metric::Accuracy], 1.0);
    assert_eq!(perfect.values[&Metric::Matthews], 1.0);
    let constant = score_predictions(&spec, &items, &Predictions::Classes(vec![1; golds.len()])).unwrap();
    assert_eq!(constant.values[&Metric::Accuracy], 0.5);
    assert_eq!(constant.values[&Metric::Matthews], 0.0);
    assert!(constant.degenerate.contains(&Metric::Matthews));
}

#[test]
fn span_corruption_round_trips_on_10k_sequences() {
    let tok = Tokenizer::new();
    let mut rng = Rng::new(2024);
    for _ in 0..10_000 {
        let len = 1 + rng.below(80) as usize;
        let seq: Vec<u32> = (0..len).map(|_| tok.word(rng.below(64) as usize)).collect();
        let rate = 0.05 + 0.6 * rng.uniform();
        let mean = 1.0 + 4.0 * rng.uniform();
        let c = span_corrupt(&seq, &mut rng, rate, mean, &tok).unwrap();
        assert_eq!(reconstruct(&c, &tok), seq);
        assert_eq!(*c.target.last().unwrap(), END);
        assert!(!c.input.contains(&END));
        let sentinels = c.input.iter().filter(|&&t| tok.is_sentinel(t)).count();
        assert_eq!(sentinels, c.target.iter().filter(|&&t| tok.is_sentinel(t)).count());
        assert!(sentinels <= 16);
        if len >= 2 {
            let noise = c.target.len() - 1 - sentinels;
            assert_eq!(noise, ((len as f64 * rate).round() as usize).min(len - 1));
        }
    }
}

#[test]
fn factored_second_moment_matches_a_straight_line_oracle() {
    let (r, c) = (5, 7);
    let mut rng = Rng::new(6);
    let start = Tensor::randn(&[r, c], 1.0, &mut rng);
    let mut store: ParameterStore = std::iter::once(("w".to_string(), start.clone())).collect();
    let mut state = AdafactorState::new();
    let opt = Adafactor::new(0.01);

    let mut rows = vec![0.0; r];
    let mut cols = vec![0.0; c];
    let mut theta = start.data().to_vec();
    for t in 1..=4u64 {
        let g = Tensor::randn(&[r, c], 0.5, &mut rng);
        let beta = 1.0 - (t as f64).powf(-0.8);
        let gd = g.data();
        for i in 0..r {
            let mut s = 0.0;
            for j in 0..c {
                s += gd[i * c + j] * gd[i * c + j] + 1e-30;
            }
            rows[i] = beta * rows[i] + (1.0 - beta) * s / c as f64;
        }
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += gd[i * c + j] * gd[i * c + j] + 1e-30;
            }
            cols[j] = beta * cols[j] + (1.0 - beta) * s / r as f64;
        }
        let mean_r: f64 = rows.iter().sum::<f64>() / r as f64;
        let mut v_hat = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v_hat[i * c + j] = rows[i] * cols[j] / mean_r;
            }
        }
        for (a, b) in factored_second_moment(&rows, &cols).iter().zip(&v_hat) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let mut u: Vec<f64> = (0..r * c).map(|k| gd[k] / v_hat[k].sqrt()).collect();
        let rms = (u.iter().map(|x| x * x).sum::<f64>() / (r * c) as f64).sqrt();
        if rms > 1.0 {
            for x in &mut u {
                *x /= rms;
            }
        }
        for k in 0..r * c {
            theta[k] -= 0.01 * u[k];
        }

        let grads = BTreeMap::from([("w".to_string(), g.clone())]);
        opt.step(&mut store, &grads, &mut state).unwrap();
        let got = store.get("w").unwrap().data();
        for k in 0..r * c {
            assert!((got[k] - theta[k]).abs() < 1e-12, "step {t} index {k}");
        }
    }
}

fn label_task(dir: &std::path::Path) -> (TaskSpec, Splits) {
    let ex = |a: &str, l: &str| Example {
        text_a: a.into(),
        text_b: Some("w1 w2".into()),
        target: Target::Label(l.into()),
    };
    let train: Vec<Example> = (0..8)
        .map(|i| {
            ex(
                &format!("w{} w{}", i, i + 1),
                if i % 2 == 0 { "entailment" } else { "not_entailment" },
            )
        })
        .collect();
    let spec = TaskSpec {
        name: "toy_nli".into(),
        kind: TaskKind::Classification,
        labels: vec!["entailment".into(), "not_entailment".into()],
        metrics: vec![Metric::Accuracy],
        prefix: "match".into(),
        template: "{prefix} {a} </s> {b}".into(),
        source: DataSource::Files {
            train: dir.join("train.tsv"),
            validation: dir.join("dev.tsv"),
            test: None,
        },
    };
    let splits = Splits {
        validation: train[..4].to_vec(),
        train,
        test: Vec::new(),
    };
    (spec, splits)
}

#[test]
fn multi_token_labels_train_and_rank() {
    let dir = tempfile::tempdir().unwrap();
    let tok = Tokenizer::new();
    let (spec, splits) = label_task(dir.path());
    assert!(tok.encode_with_end("entailment").len() > 2);
    let tc = TrainConfig {
        max_target_len: 12,
        eval_every: 2,
        ..tiny_train(4)
    };
    let cfg = tiny(Variant::T5, 1, TaskKind::Classification);
    let run = finetune(&tc, &cfg, ParameterStore::init(&cfg, 0), &spec, &splits, &tok, None).unwrap();
    let evals: Vec<(usize, f64)> = run
        .history
        .iter()
        .filter_map(|r| r.validation.map(|v| (r.step, v)))
        .collect();
    assert_eq!(evals.iter().map(|e| e.0).collect::<Vec<_>>(), [2, 4]);
    let best = evals.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(run.selected_score, best);
    assert_eq!(run.selected_step, evals.iter().find(|e| e.1 == best).unwrap().0);

    let last = TrainConfig {
        selection: Selection::Last,
        ..tc
    };
    let run = finetune(&last, &cfg, ParameterStore::init(&cfg, 0), &spec, &splits, &tok, None).unwrap();
    assert_eq!(run.selected_step, 4);
    assert!(run.selected.bit_eq(&run.trainer.params));
}

#[test]
fn enct5_slot_targets_follow_label_order() {
    let dir = tempfile::tempdir().unwrap();
    let tok = Tokenizer::new();
    let (spec, splits) = label_task(dir.path());
    let cfg = tiny(Variant::EncT5, 2, TaskKind::Classification);
    let items = encode_examples(&spec, &tok, &splits.train[..3], cfg.variant, 40, 0).unwrap();
    let b = build_batch(&cfg, &items, 40, 0, Layout::Packed, Some(4)).unwrap();
    let slots = b.batch.slots.unwrap();
    assert_eq!(b.batch.rows, 1);
    assert_eq!(slots.classes, vec![1, 2, 1, 0]);
    assert_eq!(slots.weights, vec![1.0, 1.0, 1.0, 0.0]);

    let mut bad = splits.clone();
    bad.train[0].target = Target::Label("maybe".into());
    let err = finetune(
        &tiny_train(1),
        &cfg,
        ParameterStore::init(&cfg, 0),
        &spec,
        &bad,
        &tok,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::UnknownLabel { .. }));
    let wrong = tiny(Variant::EncT5, 3, TaskKind::Classification);
    let err = finetune(
        &tiny_train(1),
        &wrong,
        ParameterStore::init(&wrong, 0),
        &spec,
        &splits,
        &tok,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Variant(_)));
}
