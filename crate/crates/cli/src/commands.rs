use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use enct5_core::model::{count_parameters, ModelConfig, ParamCount, ParameterStore, TaskKind, Variant};
use enct5_core::packing::{pack, self_attention_mask, Layout};
use enct5_core::surgery::{surgery_1dect5, surgery_enct5, Checkpoint, SurgeryReport};
use enct5_core::tasks::tokenizer::Tokenizer;
use enct5_core::tasks::{load_task, synth_task, synthetic_spec, topic_corpus, Splits, TaskSpec};
use enct5_core::training::{
    self, build_batch, encode_examples, evaluate, write_history, Batcher, TrainConfig, Trainer,
};

use crate::manifest::{RunManifest, Timing};
use crate::{
    EvalArgs, FinetuneArgs, KindArg, PackInspectArgs, ParamsArgs, PretrainArgs, StepTimeArgs, SurgeryArgs, VariantArg,
};

/// Sentences in the built-in pretraining corpus unless `synthetic:topic:N` says otherwise.
const TOPIC_SENTENCES: usize = 4000;

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::T5 => Variant::T5,
            VariantArg::OneDecT5 => Variant::OneDecT5,
            VariantArg::Enct5 => Variant::EncT5,
        }
    }
}

impl From<KindArg> for TaskKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Classification => TaskKind::Classification,
            KindArg::Regression => TaskKind::Regression,
        }
    }
}

/// Resolved input plus the file it came from, if any.
struct Loaded<T> {
    value: T,
    file: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn model_config(arg: &str, tok: &Tokenizer) -> Result<Loaded<ModelConfig>> {
    if let Some(name) = arg.strip_prefix("preset:") {
        if name != "desk" {
            bail!("unknown model preset `{name}`");
        }
        return Ok(Loaded {
            value: ModelConfig::desk(tok.vocab_size()),
            file: None,
        });
    }
    let path = PathBuf::from(arg);
    let value = ModelConfig::from_toml_str(&read(&path)?).with_context(|| format!("model config {arg}"))?;
    Ok(Loaded {
        value,
        file: Some(path),
    })
}

fn train_config(arg: &str) -> Result<Loaded<TrainConfig>> {
    if let Some(name) = arg.strip_prefix("preset:") {
        return Ok(Loaded {
            value: TrainConfig::preset(name)?,
            file: None,
        });
    }
    let path = PathBuf::from(arg);
    let value = TrainConfig::from_toml_str(&read(&path)?).with_context(|| format!("train config {arg}"))?;
    Ok(Loaded {
        value,
        file: Some(path),
    })
}

/// Task spec and its splits. Data files named by a spec are hashed as inputs.
fn task(arg: &str) -> Result<(TaskSpec, Splits, Vec<PathBuf>)> {
    if let Some(rest) = arg.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [generator, seed, size] = parts[..] else {
            bail!("expected synthetic:<generator>:<seed>:<size>, got `{arg}`");
        };
        let seed: u64 = seed.parse().context("synthetic task seed")?;
        let size: usize = size.parse().context("synthetic task size")?;
        let spec = synthetic_spec(generator, seed, size)?;
        let splits = synth_task(generator, seed, size)?;
        return Ok((spec, splits, Vec::new()));
    }
    let spec = TaskSpec::load(arg).with_context(|| format!("task spec {arg}"))?;
    let splits = load_task(&spec)?;
    let mut files = vec![PathBuf::from(arg)];
    if let enct5_core::tasks::DataSource::Files {
        train,
        validation,
        test,
    } = &spec.source
    {
        files.extend([train.clone(), validation.clone()]);
        files.extend(test.clone());
    }
    Ok((spec, splits, files))
}

fn corpus(arg: &str, tok: &Tokenizer, seed: u64) -> Result<Loaded<Vec<Vec<u32>>>> {
    if let Some(rest) = arg.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        if parts.next() != Some("topic") {
            bail!("unknown synthetic corpus `{arg}`; expected synthetic:topic[:N]");
        }
        let n = match parts.next() {
            Some(n) => n.parse().context("synthetic corpus size")?,
            None => TOPIC_SENTENCES,
        };
        return Ok(Loaded {
            value: topic_corpus(tok, seed, n, 16, 36),
            file: None,
        });
    }
    let path = PathBuf::from(arg);
    let value = read(&path)?
        .lines()
        .map(|l| tok.encode(l))
        .filter(|s| !s.is_empty())
        .collect();
    Ok(Loaded {
        value,
        file: Some(path),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let tok = Tokenizer::new();
    let mc = model_config(&a.model_config, &tok)?;
    let tc = train_config(&a.train_config)?;
    let corpus = corpus(&a.corpus, &tok, tc.value.seed)?;
    if mc.value.vocab_size < tok.vocab_size() {
        bail!(
            "vocab_size {} is smaller than the tokenizer's {}",
            mc.value.vocab_size,
            tok.vocab_size()
        );
    }
    create_dir(&a.out)?;
    let params = ParameterStore::init(&mc.value, tc.value.seed);
    let run = training::pretrain(&tc.value, &mc.value, params, &corpus.value, &tok, Some(&a.out))?;
    let final_path = a.out.join("final.bin");
    run.trainer.checkpoint(tc.value.seed)?.save(&final_path)?;
    let loss_path = a.out.join("loss.csv");
    write_history(&loss_path, &run.history)?;
    let first = run.history.first().map_or(f64::NAN, |r| r.loss);
    let last = run.history.last().map_or(f64::NAN, |r| r.loss);
    println!("pretrained {} steps: loss {first:.4} -> {last:.4}", run.trainer.step);

    let mut m = RunManifest::new("pretrain", tc.value.seed);
    m.model_config = Some(mc.value);
    m.train_config = Some(tc.value);
    m.inputs.extend(mc.file.into_iter().chain(tc.file).chain(corpus.file));
    m.outputs = run.checkpoints;
    m.outputs.extend([final_path, loss_path]);
    m.timing = Some(Timing::from_history(&run.history));
    m.write(&a.out.join("manifest.json"))
}

fn convert(
    src: &Checkpoint,
    variant: Variant,
    classes: usize,
    kind: TaskKind,
    seed: u64,
) -> Result<(Checkpoint, Option<SurgeryReport>)> {
    let from = src.config.variant;
    Ok(match (from, variant) {
        (a, b) if a == b => (src.clone(), None),
        (Variant::T5 | Variant::OneDecT5, Variant::OneDecT5) => {
            let (c, r) = surgery_1dect5(src)?;
            (c, Some(r))
        }
        (Variant::T5 | Variant::OneDecT5, Variant::EncT5) => {
            let (c, r) = surgery_enct5(src, classes, kind, seed)?;
            (c, Some(r))
        }
        _ => bail!("cannot convert a {from} checkpoint to {variant}"),
    })
}

pub fn surgery(a: SurgeryArgs) -> Result<()> {
    let variant = Variant::from(a.variant);
    if variant == Variant::T5 {
        bail!("surgery targets 1dect5 or enct5");
    }
    let src = Checkpoint::load(&a.from)?;
    let (out, report) = convert(&src, variant, a.classes, a.task_kind.into(), a.seed)?;
    let report = report.unwrap_or_default();
    out.save(&a.out)?;
    let text = report.render();
    print!("{text}");
    let report_path = sibling(&a.out, "report.txt");
    std::fs::write(&report_path, &text).with_context(|| format!("writing {}", report_path.display()))?;

    let mut m = RunManifest::new("surgery", a.seed);
    m.model_config = Some(out.config);
    m.inputs.push(a.from);
    m.outputs = vec![a.out.clone(), report_path];
    m.write(&sibling(&a.out, "manifest.json"))
}

/// `out.bin` -> `out.bin.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let tok = Tokenizer::new();
    let variant = Variant::from(a.variant);
    let tc = train_config(&a.train_config)?;
    let (spec, splits, task_files) = task(&a.task)?;
    let n = spec.num_classes();
    let mut inputs = task_files;
    inputs.extend(tc.file.clone());
    let (cfg, params) = if a.init == "random" {
        let Some(mc) = &a.model_config else {
            bail!("--init random needs --model-config");
        };
        let mc = model_config(mc, &tok)?;
        inputs.extend(mc.file);
        let cfg = mc.value.with_variant(variant, n, spec.kind);
        cfg.validate()?;
        let params = ParameterStore::init(&cfg, tc.value.seed);
        (cfg, params)
    } else {
        let path = PathBuf::from(&a.init);
        let src = Checkpoint::load(&path)?;
        inputs.push(path);
        let (ck, report) = convert(&src, variant, n, spec.kind, tc.value.seed)?;
        if let Some(r) = report {
            print!("{}", r.render());
        }
        (ck.config, ck.params)
    };
    create_dir(&a.out)?;
    let run = training::finetune(&tc.value, &cfg, params, &spec, &splits, &tok, Some(&a.out))?;
    let best = a.out.join("best.bin");
    Checkpoint::new(cfg.clone(), tc.value.seed, run.selected.clone())?.save(&best)?;
    let last = a.out.join("last.bin");
    run.trainer.checkpoint(tc.value.seed)?.save(&last)?;
    let hist = a.out.join("history.csv");
    write_history(&hist, &run.history)?;
    let summary = a.out.join("selection.json");
    let body = serde_json::json!({
        "selected_step": run.selected_step,
        "selected_score": run.selected_score,
        "steps": run.trainer.step,
    });
    std::fs::write(&summary, serde_json::to_string_pretty(&body)? + "\n")?;
    println!(
        "{variant} on {}: selected step {} with validation score {:.4}",
        spec.name, run.selected_step, run.selected_score
    );

    let mut m = RunManifest::new("finetune", tc.value.seed);
    m.model_config = Some(cfg);
    m.train_config = Some(tc.value);
    m.task = Some(spec);
    m.inputs = inputs;
    m.outputs = run.checkpoints.clone();
    m.outputs.extend([best, last, hist, summary]);
    m.timing = Some(Timing::from_history(&run.history));
    m.write(&a.out.join("manifest.json"))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let tok = Tokenizer::new();
    let ck = Checkpoint::load(&a.ckpt)?;
    let variant = Variant::from(a.variant);
    if ck.config.variant != variant {
        bail!("checkpoint holds a {} model, not {variant}", ck.config.variant);
    }
    let (spec, splits, task_files) = task(&a.task)?;
    let examples = splits.get(&a.split)?;
    let ev = evaluate(&ck.config, &ck.params, &spec, &tok, examples, a.max_len)?;
    let text = serde_json::to_string_pretty(&ev.bundle)?;
    println!("{text}");
    println!("score {:.6}", ev.score);
    if let Some(dir) = a.out {
        create_dir(&dir)?;
        let path = dir.join(format!("metrics_{}.json", a.split));
        let body = serde_json::json!({ "bundle": ev.bundle, "score": ev.score });
        std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
        let mut m = RunManifest::new("eval", ck.seed);
        m.model_config = Some(ck.config);
        m.task = Some(spec);
        m.inputs = task_files;
        m.inputs.push(a.ckpt);
        m.outputs.push(path);
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn count_line(label: &str, c: &ParamCount) -> String {
    format!(
        "{label:<8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>11}",
        c.embedding,
        c.encoder,
        c.decoder,
        c.head,
        c.output_projection,
        c.total()
    )
}

pub fn params(a: ParamsArgs) -> Result<()> {
    let tok = Tokenizer::new();
    let base = model_config(&a.model_config, &tok)?.value;
    let kind = TaskKind::from(a.task_kind);
    let variant = Variant::from(a.variant);
    println!(
        "{:<8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>11}",
        "variant", "embedding", "encoder", "decoder", "head", "lm_head", "total"
    );
    let mut counts = Vec::new();
    for v in [Variant::T5, Variant::OneDecT5, Variant::EncT5] {
        let cfg = base.with_variant(v, a.classes, kind);
        cfg.validate()?;
        let c = count_parameters(&cfg);
        if c != ParamCount::closed_form(&cfg) {
            bail!("closed-form count disagrees with enumeration for {v}");
        }
        let marker = if v == variant { "*" } else { "" };
        println!("{}", count_line(&format!("{v}{marker}"), &c));
        counts.push(c.total());
    }
    println!("ratio enct5/t5  {:.4}", counts[2] as f64 / counts[0] as f64);
    println!("ratio 1dect5/t5 {:.4}", counts[1] as f64 / counts[0] as f64);
    println!("closed form matches enumeration for all variants");
    Ok(())
}

pub fn pack_inspect(a: PackInspectArgs) -> Result<()> {
    if a.max_len == 0 {
        bail!("--max-len must be positive");
    }
    let tok = Tokenizer::new();
    let (spec, splits, _) = task(&a.task)?;
    let examples = splits.get(&a.split)?;
    let items = training::eval::eval_items(&spec, &tok, examples, a.max_len)?;
    let inputs: Vec<Vec<u32>> = items.into_iter().map(|i| i.input).collect();
    let packed = pack(&inputs, a.max_len)?;
    let b = &packed.batch;
    let used = b.segment_ids.iter().filter(|&&s| s != 0).count();
    let (min, max) = (
        b.segment_counts.iter().min().copied().unwrap_or(0),
        b.segment_counts.iter().max().copied().unwrap_or(0),
    );
    println!("examples          {}", inputs.len());
    println!("rows              {}", b.rows);
    println!("fill ratio        {:.4}", used as f64 / (b.rows * b.len) as f64);
    println!(
        "segments per row  min {min} mean {:.2} max {max}",
        inputs.len() as f64 / b.rows as f64
    );
    let segs = b.row(&b.segment_ids, 0);
    let width = segs.iter().rposition(|&s| s != 0).map_or(0, |i| i + 1);
    let mask = self_attention_mask(segs, false);
    println!("row 0 self-attention mask ({width} used positions; '#' = visible):");
    let line: String = segs[..width]
        .iter()
        .map(|s| char::from_digit(*s % 36, 36).unwrap_or('?'))
        .collect();
    println!("     {line}");
    for i in 0..width {
        let row: String = (0..width)
            .map(|j| if mask.data()[i * b.len + j] == 0.0 { '#' } else { '.' })
            .collect();
        println!("{i:>4} {row}");
    }
    Ok(())
}

/// Mean seconds per step over `steps` steps after one warm-up step.
fn time_variant(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    spec: &TaskSpec,
    splits: &Splits,
    tok: &Tokenizer,
    steps: usize,
) -> Result<f64> {
    let max_target = if cfg.variant == Variant::EncT5 {
        0
    } else {
        tc.max_target_len
    };
    let items = encode_examples(
        spec,
        tok,
        &splits.train,
        cfg.variant,
        tc.max_input_len,
        tc.max_target_len,
    )?;
    let layout = if tc.packing { Layout::Packed } else { Layout::Unpacked };
    let mut batcher = Batcher::new(items.len(), tc.seed)?;
    let mut trainer = Trainer::new(cfg.clone(), ParameterStore::init(cfg, tc.seed), tc.learning_rate)?;
    let mut total = 0.0;
    for s in 0..=steps {
        let batch = batcher.next_batch(
            |i| Ok(items[i].clone()),
            tc.batch_size,
            tc.max_input_len,
            max_target,
            layout,
        )?;
        let packed = build_batch(cfg, &batch, tc.max_input_len, max_target, layout, None)?;
        let t0 = Instant::now();
        trainer.train_step(&packed.batch)?;
        if s > 0 {
            total += t0.elapsed().as_secs_f64();
        }
    }
    Ok(total / steps as f64)
}

pub fn step_time(a: StepTimeArgs) -> Result<()> {
    if a.steps == 0 {
        bail!("--steps must be positive");
    }
    let tok = Tokenizer::new();
    let base = model_config(&a.model_config, &tok)?.value;
    let tc = train_config(&a.train_config)?.value;
    let spec = synthetic_spec("majority", tc.seed, 256)?;
    let splits = synth_task("majority", tc.seed, 256)?;
    let t5 = base.with_variant(Variant::T5, 2, TaskKind::Classification);
    let enc = base.with_variant(Variant::EncT5, 2, TaskKind::Classification);
    let t_t5 = time_variant(&t5, &tc, &spec, &splits, &tok, a.steps)?;
    let t_enc = time_variant(&enc, &tc, &spec, &splits, &tok, a.steps)?;
    println!(
        "batch {} rows x {} tokens, d_model {}, {} encoder / {} decoder layers, {} timed steps",
        tc.batch_size, tc.max_input_len, base.d_model, base.num_encoder_layers, base.num_decoder_layers, a.steps
    );
    println!("t5     {:>9.2} ms/step", t_t5 * 1e3);
    println!("enct5  {:>9.2} ms/step", t_enc * 1e3);
    println!("speedup t5/enct5 {:.3}x (informational)", t_t5 / t_enc);
    Ok(())
}
