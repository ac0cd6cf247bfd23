//! Synthetic tasks and the pretraining corpus they share a vocabulary with.
//!
//! The words `w0..w63` split into two groups of 32 (`w0..w31` and
//! `w32..w63`). Corpus sentences are topical: each picks a group and mostly
//! draws from it, so a model pretrained on them learns group membership that the
//! downstream tasks depend on.

use std::collections::HashSet;

use super::metrics::Metric;
use super::spec::{DataSource, Example, Splits, Target, TaskSpec};
use super::tokenizer::{Tokenizer, NUM_WORDS};
use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::tensor::Rng;

const GROUP: usize = NUM_WORDS / 2;

pub const GENERATORS: [&str; 3] = ["majority", "paired_match", "linear_score"];

fn word(group: usize, rng: &mut Rng) -> usize {
    group * GROUP + rng.below(GROUP as u64) as usize
}

fn words(ids: &[usize]) -> String {
    ids.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

fn shuffle<T>(v: &mut [T], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        v.swap(i, j);
    }
}

/// Majority-token input: `len` words of which a strict majority comes from
/// `group`.
fn majority_input(group: usize, rng: &mut Rng) -> Vec<usize> {
    let len = 8 + rng.below(9) as usize;
    let majority = len / 2 + 1 + rng.below(2) as usize;
    let mut ids: Vec<usize> = (0..len)
        .map(|i| word(if i < majority { group } else { 1 - group }, rng))
        .collect();
    shuffle(&mut ids, rng);
    ids
}

fn topical(group: usize, len: usize, purity: f64, rng: &mut Rng) -> Vec<usize> {
    (0..len)
        .map(|_| word(if rng.uniform() < purity { group } else { 1 - group }, rng))
        .collect()
}

fn generate(generator: &str, rng: &mut Rng, index: usize) -> Result<Example> {
    Ok(match generator {
        "majority" => {
            let group = index % 2;
            Example {
                text_a: words(&majority_input(group, rng)),
                text_b: None,
                target: Target::Label(["first", "second"][group].into()),
            }
        }
        "paired_match" => {
            let same = index % 2 == 1;
            let ga = rng.below(2) as usize;
            let gb = if same { ga } else { 1 - ga };
            let la = 4 + rng.below(5) as usize;
            let lb = 4 + rng.below(5) as usize;
            Example {
                text_a: words(&topical(ga, la, 0.8, rng)),
                text_b: Some(words(&topical(gb, lb, 0.8, rng))),
                target: Target::Label(["mismatch", "match"][same as usize].into()),
            }
        }
        "linear_score" => {
            let len = 6 + rng.below(7) as usize;
            let ids: Vec<usize> = (0..len).map(|_| word(rng.below(2) as usize, rng)).collect();
            let share = ids.iter().filter(|&&i| i < GROUP).count() as f64 / len as f64;
            let score = (5.0 * share + rng.normal(0.0, 0.1)).clamp(0.0, 5.0);
            Example {
                text_a: words(&ids),
                text_b: None,
                target: Target::Score(score),
            }
        }
        other => {
            return Err(Error::Unknown {
                kind: "generator",
                name: other.into(),
            })
        }
    })
}

/// Deterministic train/validation/test splits. `size` is the training split;
/// validation and test get `size / 4` each. Classification labels are exactly
/// balanced within each split (up to one example for odd sizes) and no input
/// text appears in more than one split.
pub fn synth_task(generator: &str, seed: u64, size: usize) -> Result<Splits> {
    let mut rng = Rng::keyed(seed, generator);
    let mut seen = HashSet::new();
    let mut split = |n: usize, rng: &mut Rng| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        let mut tries = 0usize;
        while out.len() < n {
            let ex = generate(generator, rng, out.len())?;
            let key = (ex.text_a.clone(), ex.text_b.clone());
            if seen.insert(key) {
                out.push(ex);
            } else {
                tries += 1;
                if tries > 100 * n + 1000 {
                    return Err(Error::InvalidConfig {
                        field: "size".into(),
                        reason: "too large for the generator's input space".into(),
                    });
                }
            }
        }
        shuffle(&mut out, rng);
        Ok(out)
    };
    let train = split(size, &mut rng)?;
    let validation = split(size / 4, &mut rng)?;
    let test = split(size / 4, &mut rng)?;
    Ok(Splits {
        train,
        validation,
        test,
    })
}

/// Ready-made spec for one of the built-in generators.
pub fn synthetic_spec(generator: &str, seed: u64, size: usize) -> Result<TaskSpec> {
    let (kind, labels, metrics, prefix): (_, &[&str], _, _) = match generator {
        "majority" => (
            TaskKind::Classification,
            &["first", "second"],
            vec![Metric::Accuracy, Metric::Matthews],
            "majority",
        ),
        "paired_match" => (
            TaskKind::Classification,
            &["mismatch", "match"],
            vec![Metric::F1, Metric::Accuracy],
            "match",
        ),
        "linear_score" => (
            TaskKind::Regression,
            &[],
            vec![Metric::Pearson, Metric::Spearman],
            "score",
        ),
        other => {
            return Err(Error::Unknown {
                kind: "generator",
                name: other.into(),
            })
        }
    };
    let spec = TaskSpec {
        name: generator.into(),
        kind,
        labels: labels.iter().map(|s| s.to_string()).collect(),
        metrics,
        prefix: prefix.into(),
        template: "{prefix} {a} </s> {b}".into(),
        source: DataSource::Synthetic {
            generator: generator.into(),
            seed,
            size,
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// Topical word sequences for span-corruption pretraining. Each sentence picks
/// a group; every next word either continues the previous one within the group
/// (`w_k → w_{k+1}`, wrapping) or is drawn from the sentence's group with
/// probability 0.9 and from the other group otherwise.
pub fn topic_corpus(tok: &Tokenizer, seed: u64, sentences: usize, min_len: usize, max_len: usize) -> Vec<Vec<u32>> {
    let mut rng = Rng::keyed(seed, "topic_corpus");
    (0..sentences)
        .map(|_| {
            let group = rng.below(2) as usize;
            let len = min_len + rng.below((max_len - min_len + 1) as u64) as usize;
            let mut prev = word(group, &mut rng);
            let mut out = vec![tok.word(prev)];
            while out.len() < len {
                prev = if rng.uniform() < 0.4 {
                    let g = prev / GROUP;
                    g * GROUP + (prev % GROUP + 1) % GROUP
                } else {
                    word(if rng.uniform() < 0.9 { group } else { 1 - group }, &mut rng)
                };
                out.push(tok.word(prev));
            }
            out
        })
        .collect()
}

/// Group (0 or 1) of word `w{i}`.
pub fn word_group(i: usize) -> usize {
    i / GROUP
}
