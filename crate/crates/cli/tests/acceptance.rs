//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are reported but do not fail the run unless
//! `ACCEPTANCE_STRICT=1`. `ACCEPTANCE_ONLY=<name>[,<name>]` runs a subset.

use std::collections::BTreeSet;
use std::process::{Command, ExitCode};
use std::time::Instant;

use enct5_core::model::{
    example_logits, forward, loss, Bound, ModelConfig, ParamCount, ParameterStore, TaskKind, Variant,
};
use enct5_core::packing::{pack_seq2seq, pack_slots, Layout, SlotTarget};
use enct5_core::surgery::{surgery_1dect5, surgery_enct5, Checkpoint};
use enct5_core::tasks::metrics::{
    accuracy, aggregate, confusion, f1, matthews, pearson, spearman, Metric, MetricBundle,
};
use enct5_core::tasks::synth::{synth_task, synthetic_spec, topic_corpus};
use enct5_core::tasks::tokenizer::Tokenizer;
use enct5_core::tensor::{check_gradients, op_catalogue, Graph, Rng, Tensor};
use enct5_core::training::{
    build_batch, encode_examples, finetune, pretrain, Batcher, FinetuneRun, TrainConfig, Trainer,
};

const KNOWN_RED: &[&str] = &["parameter-efficiency", "pretraining-benefit"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("packing-equivalence", packing_equivalence),
        ("identity-self-attention", identity_self_attention),
        ("gradient-correctness", gradient_correctness),
        ("parameter-efficiency", parameter_efficiency),
        ("surgery-correctness", surgery_correctness),
        ("padding-class-neutrality", padding_class_neutrality),
        ("metrics", metrics),
        ("step-time-report", step_time_report),
        ("pretraining-benefit", pretraining_benefit),
        ("variant-ordering", variant_ordering),
    ];
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<BTreeSet<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut blocking = Vec::new();
    let mut lines = Vec::new();
    for (name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(name)) {
            continue;
        }
        let t0 = Instant::now();
        let o = check();
        let secs = t0.elapsed().as_secs_f64();
        let known = KNOWN_RED.contains(&name);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        let line = format!("{tag:<12} {name:<26} {} [{secs:.1}s]", o.detail);
        println!("{line}");
        lines.push(line);
        if !o.pass && (strict || !known) {
            blocking.push(name);
        }
    }
    println!();
    for l in &lines {
        println!("{l}");
    }
    if blocking.is_empty() {
        println!("acceptance: no blocking failures");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: blocking failures: {}", blocking.join(", "));
        ExitCode::FAILURE
    }
}

fn desk(variant: Variant, classes: usize, kind: TaskKind) -> ModelConfig {
    ModelConfig::desk(Tokenizer::new().vocab_size()).with_variant(variant, classes, kind)
}

fn random_seqs(rng: &mut Rng, n: usize, lo: usize, hi: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = lo + rng.below((hi - lo + 1) as u64) as usize;
            (0..len).map(|_| 2 + rng.below(vocab as u64 - 2) as u32).collect()
        })
        .collect()
}

fn packing_equivalence() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    let mut models = 0;
    for variant in [Variant::T5, Variant::OneDecT5, Variant::EncT5] {
        let cfg = desk(variant, 3, TaskKind::Classification);
        for m in 0..50 {
            let store = ParameterStore::init(&cfg, 1000 + m);
            let inputs = random_seqs(&mut rng, 8, 1, 12, cfg.vocab_size);
            let (a, b) = if variant == Variant::EncT5 {
                let t: Vec<_> = (0..inputs.len())
                    .map(|_| SlotTarget::Class(1 + rng.below(3) as usize))
                    .collect();
                (
                    pack_slots(&inputs, &t, 32, None, Layout::Packed),
                    pack_slots(&inputs, &t, 32, None, Layout::Unpacked),
                )
            } else {
                let targets = random_seqs(&mut rng, inputs.len(), 1, 4, cfg.vocab_size);
                (
                    pack_seq2seq(&inputs, &targets, 32, 12, Layout::Packed),
                    pack_seq2seq(&inputs, &targets, 32, 12, Layout::Unpacked),
                )
            };
            let (a, b) = (a.unwrap(), b.unwrap());
            let la = example_logits(&cfg, &store, &a).unwrap();
            let lb = example_logits(&cfg, &store, &b).unwrap();
            for (x, y) in la.iter().zip(&lb) {
                let d = if x.shape() == y.shape() {
                    x.max_abs_diff(y)
                } else {
                    f64::INFINITY
                };
                worst = worst.max(d);
            }
            models += 1;
        }
    }
    outcome(
        worst <= 1e-9,
        format!("max |packed - unpacked| = {worst:.2e} over {models} models (tol 1e-9)"),
    )
}

fn identity_self_attention() -> Outcome {
    let mut rng = Rng::new(77);
    let mut matrices = 0;
    let mut bad = 0;
    for variant in [Variant::T5, Variant::OneDecT5] {
        let cfg = desk(variant, 1, TaskKind::Classification);
        for m in 0..20 {
            let store = ParameterStore::init(&cfg, 500 + m);
            let inputs = random_seqs(&mut rng, 4, 1, 10, cfg.vocab_size);
            let targets = random_seqs(&mut rng, 4, 1, 1, cfg.vocab_size);
            let packed = pack_seq2seq(&inputs, &targets, 16, 1, Layout::Unpacked).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let out = forward(&mut g, &cfg, &p, &packed.batch).unwrap();
            for probs in out.decoder.unwrap().self_attn_probs {
                let shape = g.shape(probs).to_vec();
                let v = g.value(probs);
                let (rows, heads) = (shape[0], shape[1]);
                matrices += rows * heads;
                if shape[2..] != [1, 1] || v.data().iter().any(|&x| x != 1.0) {
                    bad += rows * heads;
                }
            }
        }
    }
    outcome(
        bad == 0,
        format!("{matrices} per-head matrices from 40 models, {bad} differ from [[1.0]]"),
    )
}

fn gradient_correctness() -> Outcome {
    const EPS: f64 = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut ops = BTreeSet::new();
    for seed in 0..3 {
        for case in op_catalogue(seed) {
            let r = case.check(EPS).unwrap();
            ops.insert(case.name);
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, case.name.to_string());
            }
        }
    }
    let mut cfg = ModelConfig::desk(20);
    cfg.d_model = 8;
    cfg.d_ff = 12;
    cfg.num_heads = 2;
    cfg.d_kv = 4;
    cfg.rel_buckets = 4;
    cfg.rel_max_distance = 8;
    let cls = cfg.with_variant(Variant::EncT5, 3, TaskKind::Classification);
    let reg = cfg.with_variant(Variant::EncT5, 1, TaskKind::Regression);
    let inputs = vec![vec![3, 4, 5], vec![6, 7], vec![8, 9, 10, 11]];
    let cases = [
        (
            "enct5 classification loss",
            cls,
            [SlotTarget::Class(2), SlotTarget::Class(1), SlotTarget::Class(3)],
        ),
        (
            "enct5 regression loss",
            reg,
            [SlotTarget::Value(0.7), SlotTarget::Value(-1.2), SlotTarget::Value(2.5)],
        ),
    ];
    for (name, cfg, targets) in cases {
        let batch = pack_slots(&inputs, &targets, 6, Some(3), Layout::Packed).unwrap().batch;
        let store = ParameterStore::init(&cfg, 11);
        let names: Vec<String> = store.names().map(String::from).collect();
        let values: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let r = check_gradients(&values, EPS, |g: &mut Graph, vars| {
            let bound: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            Ok(loss(g, &cfg, &bound, &batch)?.0)
        })
        .unwrap();
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name.to_string());
        }
    }
    outcome(
        worst.0 < 1e-4,
        format!(
            "{} ops + 2 EncT5 losses, worst rel error {:.2e} ({}) (tol 1e-4)",
            ops.len(),
            worst.0,
            worst.1
        ),
    )
}

fn symmetric(layers: usize, d: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(512);
    c.d_model = d;
    c.d_ff = 2 * d;
    c.num_heads = d / 16;
    c.d_kv = 16;
    c.num_encoder_layers = layers;
    c.num_decoder_layers = layers;
    c
}

fn parameter_efficiency() -> Outcome {
    let mut ratios = Vec::new();
    let mut closed_form_ok = true;
    let mut all_below = true;
    for layers in [2, 4, 6] {
        for d in [64, 128] {
            let base = symmetric(layers, d);
            let t5 = base.with_variant(Variant::T5, 1, TaskKind::Classification);
            let enc = base.with_variant(Variant::EncT5, 2, TaskKind::Classification);
            for c in [&t5, &enc] {
                closed_form_ok &= ParamCount::enumerate(c) == ParamCount::closed_form(c);
            }
            let r = ParamCount::enumerate(&enc).total() as f64 / ParamCount::enumerate(&t5).total() as f64;
            all_below &= r < 0.55;
            ratios.push(format!("L{layers}/d{d}={r:.3}"));
        }
    }
    outcome(
        closed_form_ok && all_below,
        format!(
            "enct5/t5 {} (need < 0.55); closed form {}",
            ratios.join(" "),
            if closed_form_ok { "matches" } else { "DIFFERS" }
        ),
    )
}

fn surgery_correctness() -> Outcome {
    let base = desk(Variant::T5, 1, TaskKind::Classification);
    let src = Checkpoint::init(base.clone(), 31).unwrap();
    let (out, report) = surgery_enct5(&src, 3, TaskKind::Classification, 4).unwrap();
    let fresh: BTreeSet<&str> = report.fresh.iter().map(String::as_str).collect();
    let fresh_ok = fresh == BTreeSet::from(["head/bos_embedding", "head/projection_kernel", "head/projection_bias"]);
    let mut mismatched = Vec::new();
    for name in &report.loaded {
        let src_name = match name.strip_prefix("head/") {
            Some("final_norm") => "decoder/final_norm".to_string(),
            Some(rest) => format!("decoder/layer_00/{rest}"),
            None => name.clone(),
        };
        let same = src
            .params
            .get(&src_name)
            .is_some_and(|t| t.bit_eq(out.params.get(name).unwrap()));
        if !same {
            mismatched.push(name.clone());
        }
    }
    let mut one = base.clone();
    one.num_decoder_layers = 1;
    let src1 = Checkpoint::init(one, 32).unwrap();
    let (out1, report1) = surgery_1dect5(&src1).unwrap();
    let noop = out1.params.bit_eq(&src1.params) && report1.fresh.is_empty() && report1.dropped.is_empty();
    outcome(
        fresh_ok && mismatched.is_empty() && noop,
        format!(
            "fresh = {:?}; {} loaded tensors, {} not bitwise equal; 1dect5 on L_dec=1 no-op: {noop}",
            report.fresh,
            report.loaded.len(),
            mismatched.len()
        ),
    )
}

fn padding_class_neutrality() -> Outcome {
    let tok = Tokenizer::new();
    let cfg = desk(Variant::EncT5, 2, TaskKind::Classification);
    let spec = synthetic_spec("majority", 4, 512).unwrap();
    let splits = synth_task("majority", 4, 512).unwrap();
    let items = encode_examples(&spec, &tok, &splits.train, cfg.variant, 64, 0).unwrap();
    let mut plain = Trainer::new(cfg.clone(), ParameterStore::init(&cfg, 8), 1e-3).unwrap();
    let mut padded = plain.clone();
    let mut batcher = Batcher::new(items.len(), 3).unwrap();
    let mut pad_slots = 0;
    for _ in 0..100 {
        let batch = batcher
            .next_batch(|i| Ok(items[i].clone()), 4, 64, 0, Layout::Packed)
            .unwrap();
        let a = build_batch(&cfg, &batch, 64, 0, Layout::Packed, None).unwrap();
        let extra = a.batch.max_segments() + 4;
        let b = build_batch(&cfg, &batch, 64, 0, Layout::Packed, Some(extra)).unwrap();
        pad_slots += b
            .batch
            .slots
            .as_ref()
            .unwrap()
            .weights
            .iter()
            .filter(|&&w| w == 0.0)
            .count();
        let la = plain.train_step(&a.batch).unwrap();
        let lb = padded.train_step(&b.batch).unwrap();
        if la.to_bits() != lb.to_bits() || !plain.params.bit_eq(&padded.params) {
            return outcome(false, format!("trajectories diverge at step {}", plain.step));
        }
    }
    outcome(
        true,
        format!("100 steps bitwise identical, {pad_slots} padded slots added"),
    )
}

fn check(failures: &mut Vec<String>, what: String, got: f64, want: f64) {
    if (got - want).abs() > 1e-12 {
        failures.push(format!("{what}: {got} vs {want}"));
    }
}

fn metrics() -> Outcome {
    let mut failures = Vec::new();
    // Binary fixtures with expected confusion counts (tp, fp, fn, tn).
    let binary: [(&[usize], &[usize], (usize, usize, usize, usize)); 6] = [
        (&[1, 1, 0, 1], &[1, 0, 0, 1], (2, 1, 0, 1)),
        (&[1, 0, 1, 0], &[1, 0, 1, 0], (2, 0, 0, 2)),
        (&[1, 0, 1, 0], &[0, 1, 0, 1], (0, 2, 2, 0)),
        (
            &[1, 1, 1, 1, 0, 0, 0, 0, 0, 0],
            &[1, 1, 1, 0, 1, 1, 0, 0, 0, 0],
            (3, 1, 2, 4),
        ),
        (&[0, 0, 1], &[0, 1, 1], (1, 0, 1, 1)),
        (&[1, 1, 0, 0, 1, 0, 1, 1], &[1, 0, 0, 1, 1, 0, 0, 1], (3, 2, 1, 2)),
    ];
    for (i, (p, g, counts)) in binary.iter().enumerate() {
        if confusion(p, g, 1) != *counts {
            failures.push(format!("fixture {i}: confusion {:?}", confusion(p, g, 1)));
        }
        let (tp, fp, fn_, tn) = (counts.0 as f64, counts.1 as f64, counts.2 as f64, counts.3 as f64);
        let n = tp + fp + fn_ + tn;
        let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        let mcc = if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom
        };
        let f = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        check(
            &mut failures,
            format!("fixture {i} accuracy"),
            accuracy(p, g).unwrap(),
            (tp + tn) / n,
        );
        check(&mut failures, format!("fixture {i} f1"), f1(p, g, 1).unwrap().value, f);
        check(
            &mut failures,
            format!("fixture {i} mcc"),
            matthews(p, g).unwrap().value,
            mcc,
        );
    }
    // The first fixture's MCC by hand: (2*1 - 1*0) / sqrt(3*2*2*1).
    check(
        &mut failures,
        "fixture 0 mcc by hand".into(),
        matthews(binary[0].0, binary[0].1).unwrap().value,
        2.0 / 12f64.sqrt(),
    );

    // Correlation fixtures: closed forms worked out by hand.
    let x = [1.0, 2.0, 3.0, 4.0];
    check(
        &mut failures,
        "pearson affine".into(),
        pearson(&x, &[3.0, 5.0, 7.0, 9.0]).unwrap().value,
        1.0,
    );
    // y = 5,1,9,6: means 2.5 and 5.25, cross sum 5.5, sx² 5, sy² 32.75
    check(
        &mut failures,
        "pearson fixture".into(),
        pearson(&x, &[5.0, 1.0, 9.0, 6.0]).unwrap().value,
        5.5 / (5f64 * 32.75).sqrt(),
    );
    // ranks [1,2,3,4] vs [2,1,4,3]: sum d² = 4
    check(
        &mut failures,
        "spearman fixture".into(),
        spearman(&x, &[5.0, 1.0, 9.0, 7.0]).unwrap().value,
        1.0 - 6.0 * 4.0 / 60.0,
    );
    // ties: y ranks [1.5,1.5,3,4]; pearson of ranks
    let ry = [1.5, 1.5, 3.0, 4.0];
    let my = 2.5;
    let cov: f64 = x.iter().zip(&ry).map(|(a, b)| (a - 2.5) * (b - my)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    check(
        &mut failures,
        "spearman ties".into(),
        spearman(&x, &[2.0, 2.0, 5.0, 8.0]).unwrap().value,
        cov / (5f64 * vy).sqrt(),
    );

    // Eight tasks, one or two metrics each: metric means first, then the task mean.
    let mut rng = Rng::new(8);
    let pairs = [
        vec![Metric::Matthews],
        vec![Metric::Accuracy],
        vec![Metric::F1, Metric::Accuracy],
        vec![Metric::Pearson, Metric::Spearman],
        vec![Metric::F1, Metric::Accuracy],
        vec![Metric::Accuracy],
        vec![Metric::Accuracy],
        vec![Metric::Accuracy],
    ];
    let mut bundles = Vec::new();
    let mut task_means = Vec::new();
    for (i, ms) in pairs.iter().enumerate() {
        let mut b = MetricBundle::new(format!("task{i}"));
        let mut s = 0.0;
        for m in ms {
            let v = (rng.below(1000) as f64) / 1000.0;
            b.values.insert(*m, v);
            s += v;
        }
        task_means.push(s / ms.len() as f64);
        bundles.push(b);
    }
    let input: Vec<(&[Metric], &MetricBundle)> = pairs.iter().map(Vec::as_slice).zip(&bundles).collect();
    let agg = aggregate(&input).unwrap();
    let expected = task_means.iter().sum::<f64>() / 8.0;
    check(&mut failures, "8-task aggregate".into(), agg.overall, expected);
    let flat: Vec<f64> = bundles.iter().flat_map(|b| b.values.values().copied()).collect();
    let flat_mean = flat.iter().sum::<f64>() / flat.len() as f64;

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "10 fixtures to 1e-12; 8-task aggregate {:.6} (flat metric mean would be {flat_mean:.6})",
                agg.overall
            )
        } else {
            failures.join("; ")
        },
    )
}

fn step_time_report() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_enct5"))
        .args(["step-time", "--steps", "10"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let printed = out.status.success()
        && lines.iter().any(|l| l.starts_with("t5 "))
        && lines.iter().any(|l| l.starts_with("enct5 "));
    outcome(printed, lines.join(" | "))
}

/// Pretrained desk T5 checkpoint, built once and shared by the last two criteria.
fn pretrained() -> &'static ParameterStore {
    static CELL: std::sync::OnceLock<ParameterStore> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let tok = Tokenizer::new();
        let mut tc = TrainConfig::desk();
        tc.steps = 2000;
        tc.seed = 0;
        let corpus = topic_corpus(&tok, tc.seed, 4000, 16, 36);
        let cfg = desk(Variant::T5, 1, TaskKind::Classification);
        let run = pretrain(&tc, &cfg, ParameterStore::init(&cfg, tc.seed), &corpus, &tok, None).unwrap();
        run.trainer.params
    })
}

fn finetune_run(cfg: &ModelConfig, params: ParameterStore, generator: &str, seed: u64, steps: usize) -> FinetuneRun {
    let tok = Tokenizer::new();
    let spec = synthetic_spec(generator, seed, 2000).unwrap();
    let splits = synth_task(generator, seed, 2000).unwrap();
    let mut tc = TrainConfig::desk();
    tc.steps = steps;
    tc.seed = seed;
    tc.eval_every = 100;
    finetune(&tc, cfg, params, &spec, &splits, &tok, None).unwrap()
}

fn pretraining_benefit() -> Outcome {
    let base = desk(Variant::T5, 1, TaskKind::Classification);
    let src = Checkpoint::new(base.clone(), 0, pretrained().clone()).unwrap();
    let (enc, _) = surgery_enct5(&src, 2, TaskKind::Classification, 0).unwrap();
    let pre = finetune_run(&enc.config, enc.params, "majority", 0, 500);
    let cfg = base.with_variant(Variant::EncT5, 2, TaskKind::Classification);
    let rnd = finetune_run(&cfg, ParameterStore::init(&cfg, 0), "majority", 0, 500);
    let (p, r) = (pre.selected_score, rnd.selected_score);
    outcome(
        p >= 0.95 && p - r >= 0.05,
        format!(
            "val acc pretrained {p:.3} (step {}), random init {r:.3} (step {}); need >= 0.95 and a gap >= 0.05, gap {:+.3}",
            pre.selected_step,
            rnd.selected_step,
            p - r
        ),
    )
}

fn variant_ordering() -> Outcome {
    let base = desk(Variant::T5, 1, TaskKind::Classification);
    let src = Checkpoint::new(base, 0, pretrained().clone()).unwrap();
    let (dec1, _) = surgery_1dect5(&src).unwrap();
    let (enc, _) = surgery_enct5(&src, 2, TaskKind::Classification, 0).unwrap();
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for seed in 0..3 {
        let e = finetune_run(&enc.config, enc.params.clone(), "paired_match", seed, 300).selected_score;
        let d = finetune_run(&dec1.config, dec1.params.clone(), "paired_match", seed, 300).selected_score;
        if e >= d {
            wins += 1;
            per_seed.push(format!("seed {seed}: enct5 {e:.3} >= 1dect5 {d:.3}"));
        } else {
            per_seed.push(format!("seed {seed}: enct5 {e:.3} < 1dect5 {d:.3} (reversal)"));
        }
    }
    outcome(wins >= 2, format!("{wins}/3 seeds; {}", per_seed.join("; ")))
}
