//! Adafactor without momentum, weight decay or relative step sizes.
//!
//! At step `t` (1-based) the second-moment decay is `β̂₂ = 1 − t^−0.8`.
//! Matrices keep a row accumulator `R` and a column accumulator `C`:
//!
//! ```text
//! R ← β̂₂·R + (1 − β̂₂)·rowmean(g² + ε₁)
//! C ← β̂₂·C + (1 − β̂₂)·colmean(g² + ε₁)
//! V̂ = R ⊗ C / mean(R)
//! ```
//!
//! Vectors keep a full accumulator `V ← β̂₂·V + (1 − β̂₂)·(g² + ε₁)`. The update
//! `u = g / √V̂` is scaled down to RMS `d` when larger, then `θ ← θ − lr·u`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adafactor {
    pub learning_rate: f64,
    pub eps1: f64,
    pub clip_threshold: f64,
    pub decay_exponent: f64,
}

impl Adafactor {
    pub fn new(learning_rate: f64) -> Self {
        Adafactor {
            learning_rate,
            eps1: 1e-30,
            clip_threshold: 1.0,
            decay_exponent: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Moments {
    Factored { rows: Vec<f64>, cols: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdafactorState {
    /// Completed steps.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdafactorState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Second-moment estimate `V̂` for a `[r, c]` factored accumulator.
pub fn factored_second_moment(rows: &[f64], cols: &[f64]) -> Vec<f64> {
    let mean_r = rows.iter().sum::<f64>() / rows.len() as f64;
    let mut v = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &c in cols {
            v.push(r * c / mean_r);
        }
    }
    v
}

impl Adafactor {
    /// Applies one update to every parameter that has an entry in `grads`.
    /// Parameters without a gradient entry, and their accumulators, are left
    /// untouched. All gradients are checked before anything is modified.
    pub fn step(
        &self,
        params: &mut ParameterStore,
        grads: &BTreeMap<String, Tensor>,
        state: &mut AdafactorState,
    ) -> Result<()> {
        let t = state.step + 1;
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: name.clone(),
                    step: t,
                });
            }
            match params.get(name) {
                None => return Err(Error::MissingParameter(name.clone())),
                Some(p) if p.shape() != g.shape() => {
                    return Err(Error::shape(
                        "adafactor",
                        format!("gradient for `{name}` has shape {:?}", g.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        let beta = 1.0 - (t as f64).powf(-self.decay_exponent);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let gd = g.data();
            let sq: Vec<f64> = gd.iter().map(|x| x * x + self.eps1).collect();
            let v_hat = if p.rank() == 2 {
                let (r, c) = (p.shape()[0], p.shape()[1]);
                let m = state.moments.entry(name.clone()).or_insert_with(|| Moments::Factored {
                    rows: vec![0.0; r],
                    cols: vec![0.0; c],
                });
                let Moments::Factored { rows, cols } = m else {
                    return Err(Error::shape("adafactor", format!("state for `{name}` is not factored")));
                };
                for i in 0..r {
                    let mean = sq[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
                    rows[i] = beta * rows[i] + (1.0 - beta) * mean;
                }
                for j in 0..c {
                    let mut s = 0.0;
                    for i in 0..r {
                        s += sq[i * c + j];
                    }
                    cols[j] = beta * cols[j] + (1.0 - beta) * s / r as f64;
                }
                factored_second_moment(rows, cols)
            } else {
                let m = state
                    .moments
                    .entry(name.clone())
                    .or_insert_with(|| Moments::Full(vec![0.0; gd.len()]));
                let Moments::Full(v) = m else {
                    return Err(Error::shape("adafactor", format!("state for `{name}` is factored")));
                };
                for (vi, s) in v.iter_mut().zip(&sq) {
                    *vi = beta * *vi + (1.0 - beta) * s;
                }
                v.clone()
            };
            let mut u: Vec<f64> = gd.iter().zip(&v_hat).map(|(g, v)| g / v.sqrt()).collect();
            let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
            let denom = (rms / self.clip_threshold).max(1.0);
            for x in &mut u {
                *x /= denom;
            }
            for (w, du) in p.data_mut().iter_mut().zip(&u) {
                *w -= self.learning_rate * du;
            }
        }
        state.step = t;
        Ok(())
    }
}
