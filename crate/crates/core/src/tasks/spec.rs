use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::Metric;
use super::synth;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::model::TaskKind;

fn default_template() -> String {
    "{prefix} {a} </s> {b}".into()
}

/// Where a task's examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Built-in generator; `size` is the training split size.
    Synthetic { generator: String, seed: u64, size: usize },
    /// TSV (header row) or JSONL files, chosen by extension. Relative paths
    /// resolve against the spec file's directory.
    Files {
        train: PathBuf,
        validation: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Ordered label strings; label `i` is class `i + 1`.
    #[serde(default)]
    pub labels: Vec<String>,
    pub metrics: Vec<Metric>,
    /// Task prefix prepended to every input.
    #[serde(default)]
    pub prefix: String,
    /// Input template with `{prefix}`, `{a}` and `{b}` placeholders. Single-segment
    /// examples drop everything from the first separator after `{a}`.
    #[serde(default = "default_template")]
    pub template: String,
    pub source: DataSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Label(String),
    Score(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: String,
    #[serde(default)]
    pub text_b: Option<String>,
    pub target: Target,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[Example]> {
        let s = match name {
            "train" => &self.train,
            "validation" | "val" | "dev" => &self.validation,
            "test" => &self.test,
            _ => {
                return Err(Error::Unknown {
                    kind: "split",
                    name: name.into(),
                })
            }
        };
        if s.is_empty() {
            return Err(Error::EmptySplit(name.into()));
        }
        Ok(s)
    }
}

impl TaskSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: TaskSpec = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml_str(&text)?;
        if let DataSource::Files {
            train,
            validation,
            test,
        } = &mut spec.source
        {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [Some(train), Some(validation), test.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("task spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.metrics.is_empty() {
            return bad("metrics", "at least one metric is required");
        }
        match self.kind {
            TaskKind::Classification => {
                if self.labels.len() < 2 {
                    return bad("labels", "classification needs at least two labels");
                }
                let mut seen = self.labels.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != self.labels.len() {
                    return bad("labels", "labels must be distinct");
                }
            }
            TaskKind::Regression => {
                if self.metrics.iter().any(|m| !m.is_regression()) {
                    return bad("metrics", "regression tasks support pearson and spearman only");
                }
            }
        }
        if !self.template.contains("{a}") {
            return bad("template", "must contain {a}");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.labels.len(),
            TaskKind::Regression => 1,
        }
    }

    /// Class id `1..=n` of a label string.
    pub fn class_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| i + 1)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.into(),
                task: self.name.clone(),
            })
    }

    pub fn label_of(&self, class: usize) -> &str {
        &self.labels[class - 1]
    }

    /// Input text after applying the template.
    pub fn render_input(&self, ex: &Example) -> String {
        let t = match &ex.text_b {
            Some(b) => self.template.replace("{b}", b),
            None => match self.template.find("{a}") {
                Some(i) => {
                    let head = &self.template[..i + 3];
                    let rest = &self.template[i + 3..];
                    let keep = rest.find("</s>").map_or(rest, |j| &rest[..j]);
                    format!("{head}{}", keep.replace("{b}", ""))
                }
                None => self.template.clone(),
            },
        };
        let t = t.replace("{prefix}", &self.prefix).replace("{a}", &ex.text_a);
        t.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn encode_input(&self, tok: &Tokenizer, ex: &Example) -> Vec<u32> {
        tok.encode_with_end(&self.render_input(ex))
    }

    /// Target string for the text-to-text variants.
    pub fn target_text(&self, ex: &Example) -> Result<String> {
        match (&ex.target, self.kind) {
            (Target::Label(l), TaskKind::Classification) => {
                self.class_of(l)?;
                Ok(l.clone())
            }
            (Target::Score(s), TaskKind::Regression) => Ok(score_string(*s)),
            _ => Err(Error::Variant(format!(
                "target kind does not match task `{}`",
                self.name
            ))),
        }
    }

    /// Candidate target strings for rank classification.
    pub fn candidates(&self) -> Vec<String> {
        match self.kind {
            TaskKind::Classification => self.labels.clone(),
            TaskKind::Regression => score_grid().into_iter().map(score_string).collect(),
        }
    }
}

/// Regression targets for the text-to-text variants are rounded to the
/// nearest 0.2 on `[0, 5]` and written with one decimal.
pub fn score_string(x: f64) -> String {
    let snapped = ((x.clamp(0.0, 5.0) / 0.2).round() * 0.2 * 10.0).round() / 10.0;
    format!("{snapped:.1}")
}

pub fn score_grid() -> Vec<f64> {
    (0..=25).map(|i| (i * 2) as f64 / 10.0).collect()
}

#[derive(Deserialize)]
struct Row {
    text_a: String,
    #[serde(default)]
    text_b: Option<String>,
    label: String,
}

fn row_to_example(spec: &TaskSpec, row: Row, path: &Path, line: usize) -> Result<Example> {
    let target = match spec.kind {
        TaskKind::Classification => {
            spec.class_of(&row.label).map_err(|_| Error::MalformedRow {
                path: path.display().to_string(),
                line,
                reason: format!("unknown label `{}`", row.label),
            })?;
            Target::Label(row.label)
        }
        TaskKind::Regression => Target::Score(row.label.trim().parse().map_err(|_| Error::MalformedRow {
            path: path.display().to_string(),
            line,
            reason: format!("score `{}` is not a number", row.label),
        })?),
    };
    let text_b = row.text_b.filter(|b| !b.is_empty());
    Ok(Example {
        text_a: row.text_a,
        text_b,
        target,
    })
}

/// Reads one split. `.jsonl` files hold one object per line with `text_a`,
/// optional `text_b` and `label`; anything else is tab-separated with a header
/// row naming the same columns.
pub fn read_examples(spec: &TaskSpec, path: &Path) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, reason: String| Error::MalformedRow {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut out = Vec::new();
    if path.extension().is_some_and(|e| e == "jsonl") {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
            out.push(row_to_example(spec, row, path, i + 1)?);
        }
    } else {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .from_reader(text.as_bytes());
        for rec in rdr.deserialize::<Row>() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                malformed(line, e.to_string())
            })?;
            // header is line 1
            out.push(row_to_example(spec, rec, path, out.len() + 2)?);
        }
    }
    Ok(out)
}

/// Loads every split of `spec`, in file order.
pub fn load_task(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    match &spec.source {
        DataSource::Synthetic { generator, seed, size } => synth::synth_task(generator, *seed, *size),
        DataSource::Files {
            train,
            validation,
            test,
        } => Ok(Splits {
            train: read_examples(spec, train)?,
            validation: read_examples(spec, validation)?,
            test: match test {
                Some(t) => read_examples(spec, t)?,
                None => Vec::new(),
            },
        }),
    }
}
