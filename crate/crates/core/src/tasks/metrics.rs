//! GLUE-style metrics and the cross-task aggregation rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Matthews,
    Pearson,
    Spearman,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Matthews => "matthews",
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
        }
    }

    pub fn is_regression(self) -> bool {
        matches!(self, Metric::Pearson | Metric::Spearman)
    }
}

/// A metric value; `degenerate` marks a zero denominator reported as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ok(value: f64) -> Self {
        Score {
            value,
            degenerate: false,
        }
    }

    fn zero() -> Self {
        Score {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn check<T, U>(a: &[T], b: &[U]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: 2,
        });
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Binary confusion counts `(tp, fp, fn, tn)` for `positive`.
pub fn confusion(preds: &[usize], golds: &[usize], positive: usize) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// `2PR / (P + R)` for `positive`; 0 (flagged) when `P + R = 0`.
pub fn f1(preds: &[usize], golds: &[usize], positive: usize) -> Result<Score> {
    check(preds, golds)?;
    let (tp, fp, fn_, _) = confusion(preds, golds, positive);
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if p + r == 0.0 {
        return Ok(Score::zero());
    }
    Ok(Score::ok(2.0 * p * r / (p + r)))
}

/// Matthews correlation. For two labels this is
/// `(TP·TN − FP·FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))`; with more labels it
/// is the multiclass generalization over the full confusion matrix. 0 (flagged)
/// when the denominator vanishes.
pub fn matthews(preds: &[usize], golds: &[usize]) -> Result<Score> {
    check(preds, golds)?;
    let mut labels: Vec<usize> = preds.iter().chain(golds).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let idx = |x: usize| labels.binary_search(&x).unwrap();
    let k = labels.len();
    let mut c = vec![0f64; k * k];
    for (&p, &g) in preds.iter().zip(golds) {
        c[idx(g) * k + idx(p)] += 1.0;
    }
    if k == 2 {
        let (tn, fp, fn_, tp) = (c[0], c[1], c[2], c[3]);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            return Ok(Score::zero());
        }
        return Ok(Score::ok((tp * tn - fp * fn_) / den.sqrt()));
    }
    let n = preds.len() as f64;
    let correct: f64 = (0..k).map(|i| c[i * k + i]).sum();
    let t: Vec<f64> = (0..k).map(|i| (0..k).map(|j| c[i * k + j]).sum()).collect();
    let p: Vec<f64> = (0..k).map(|j| (0..k).map(|i| c[i * k + j]).sum()).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let den = (n * n - p.iter().map(|x| x * x).sum::<f64>()) * (n * n - t.iter().map(|x| x * x).sum::<f64>());
    if den == 0.0 {
        return Ok(Score::zero());
    }
    Ok(Score::ok((correct * n - tp) / den.sqrt()))
}

/// Pearson correlation; 0 (flagged) when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Score> {
    check(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Score::zero());
    }
    Ok(Score::ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Score> {
    check(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Metric values for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub task: String,
    pub values: BTreeMap<Metric, f64>,
    /// Metrics that hit a zero denominator and were reported as 0.
    #[serde(default)]
    pub degenerate: Vec<Metric>,
}

impl MetricBundle {
    pub fn new(task: impl Into<String>) -> Self {
        MetricBundle {
            task: task.into(),
            values: BTreeMap::new(),
            degenerate: Vec::new(),
        }
    }

    pub fn record(&mut self, metric: Metric, score: Score) {
        self.values.insert(metric, score.value);
        if score.degenerate && !self.degenerate.contains(&metric) {
            self.degenerate.push(metric);
        }
    }
}

/// Classification metrics over class ids `1..=n`; `positive` is the class used
/// for F1.
pub fn classification_bundle(
    task: &str,
    metrics: &[Metric],
    preds: &[usize],
    golds: &[usize],
    positive: usize,
) -> Result<MetricBundle> {
    let mut b = MetricBundle::new(task);
    for &m in metrics {
        let s = match m {
            Metric::Accuracy => Score::ok(accuracy(preds, golds)?),
            Metric::F1 => f1(preds, golds, positive)?,
            Metric::Matthews => matthews(preds, golds)?,
            Metric::Pearson | Metric::Spearman => {
                let x: Vec<f64> = preds.iter().map(|&p| p as f64).collect();
                let y: Vec<f64> = golds.iter().map(|&g| g as f64).collect();
                if m == Metric::Pearson {
                    pearson(&x, &y)?
                } else {
                    spearman(&x, &y)?
                }
            }
        };
        b.record(m, s);
    }
    Ok(b)
}

pub fn regression_bundle(task: &str, metrics: &[Metric], preds: &[f64], golds: &[f64]) -> Result<MetricBundle> {
    let mut b = MetricBundle::new(task);
    for &m in metrics {
        let s = match m {
            Metric::Pearson => pearson(preds, golds)?,
            Metric::Spearman => spearman(preds, golds)?,
            other => {
                return Err(Error::MissingMetric {
                    task: task.into(),
                    metric: format!("{} is not defined for regression", other.name()),
                })
            }
        };
        b.record(m, s);
    }
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub per_task: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Order-independent mean: sorts before summing so any permutation of the
/// inputs gives the identical result.
fn mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Averages each task's declared metrics, then averages the task scores with
/// equal weight.
pub fn aggregate(tasks: &[(&[Metric], &MetricBundle)]) -> Result<Aggregate> {
    if tasks.is_empty() {
        return Err(Error::EmptySplit("aggregate: no tasks".into()));
    }
    let mut per_task = BTreeMap::new();
    for (declared, bundle) in tasks {
        if declared.is_empty() {
            return Err(Error::MissingMetric {
                task: bundle.task.clone(),
                metric: "<none declared>".into(),
            });
        }
        let mut vals = declared
            .iter()
            .map(|m| {
                bundle.values.get(m).copied().ok_or_else(|| Error::MissingMetric {
                    task: bundle.task.clone(),
                    metric: m.name().into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        per_task.insert(bundle.task.clone(), mean(&mut vals));
    }
    let mut scores: Vec<f64> = per_task.values().copied().collect();
    let overall = mean(&mut scores);
    Ok(Aggregate { per_task, overall })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion_case() {
        let (p, g) = ([1, 1, 0, 1], [1, 0, 0, 1]);
        assert_eq!(confusion(&p, &g, 1), (2, 1, 0, 1));
        // (2·1 − 1·0) / sqrt(3·2·2·1)
        assert!((matthews(&p, &g).unwrap().value - 2.0 / 12f64.sqrt()).abs() < 1e-12);
        assert!((f1(&p, &g, 1).unwrap().value - 0.8).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases_flagged() {
        let s = matthews(&[1, 1, 1, 1], &[1, 2, 1, 2]).unwrap();
        assert_eq!(s, Score::zero());
        assert_eq!(f1(&[1, 1], &[1, 1], 2).unwrap(), Score::zero());
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), Score::zero());
        assert!(matches!(accuracy(&[1], &[1]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(accuracy(&[1, 2], &[1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn ties_share_mean_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
