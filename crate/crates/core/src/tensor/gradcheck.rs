//! Central finite-difference check of reverse-mode gradients.

use super::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Worst element found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |autodiff − fd| / (|fd| + 1e-8)` over every input element.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub elements: usize,
}

/// Compares the gradient of the scalar built by `f` against central
/// differences with step `eps`, for every element of every input.
///
/// `f` receives one trainable leaf per input, in order, and must return a
/// single-element node.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::unchecked();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        elements: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.get(v).unwrap_or(&zeros);
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            let fd = (up - down) / (2.0 * eps);
            let rel = (analytic[j] - fd).abs() / (fd.abs() + 1e-8);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_index = j;
            }
            report.elements += 1;
        }
    }
    Ok(report)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::shape(
            "check_gradients",
            format!("objective has shape {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One differentiable op wired into a scalar objective for [`check_gradients`].
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

impl OpCase {
    pub fn check(&self, eps: f64) -> Result<GradCheck> {
        check_gradients(&self.inputs, eps, &self.build)
    }
}

/// Contracts `out` with a fixed pseudo-random weight so every output element
/// reaches the objective with a distinct coefficient.
fn weighted_sum(g: &mut Graph, out: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut Rng::new(0x5eed ^ salt));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Every differentiable graph op with random inputs drawn from `[-2, 2]`.
pub fn op_catalogue(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::new(seed);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -2.0, 2.0, &mut rng);
    let mut cases: Vec<OpCase> = Vec::new();
    let mut add = |name: &'static str, inputs: Vec<Tensor>, build: Build| cases.push(OpCase { name, inputs, build });

    add(
        "matmul",
        vec![u(&[3, 4]), u(&[4, 2])],
        Box::new(|g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o, 1)
        }),
    );
    add(
        "matmul_batched_lhs",
        vec![u(&[2, 3, 4]), u(&[4, 5])],
        Box::new(|g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o, 2)
        }),
    );
    add(
        "bmm",
        vec![u(&[2, 3, 4]), u(&[2, 4, 5])],
        Box::new(|g, v| {
            let o = g.bmm(v[0], v[1], false)?;
            weighted_sum(g, o, 3)
        }),
    );
    add(
        "bmm_transposed",
        vec![u(&[2, 2, 3, 4]), u(&[2, 2, 5, 4])],
        Box::new(|g, v| {
            let o = g.bmm(v[0], v[1], true)?;
            weighted_sum(g, o, 4)
        }),
    );
    add(
        "add",
        vec![u(&[3, 4]), u(&[3, 4])],
        Box::new(|g, v| {
            let o = g.add(v[0], v[1])?;
            weighted_sum(g, o, 5)
        }),
    );
    add(
        "mul",
        vec![u(&[3, 4]), u(&[3, 4])],
        Box::new(|g, v| {
            let o = g.mul(v[0], v[1])?;
            weighted_sum(g, o, 6)
        }),
    );
    add(
        "add_bias",
        vec![u(&[2, 3, 4]), u(&[4])],
        Box::new(|g, v| {
            let o = g.add_bias(v[0], v[1])?;
            weighted_sum(g, o, 7)
        }),
    );
    add(
        "scale",
        vec![u(&[5])],
        Box::new(|g, v| {
            let o = g.scale(v[0], -1.7)?;
            weighted_sum(g, o, 8)
        }),
    );
    add(
        "gelu",
        vec![u(&[3, 5])],
        Box::new(|g, v| {
            let o = g.gelu(v[0])?;
            weighted_sum(g, o, 9)
        }),
    );
    add(
        "rms_norm",
        vec![u(&[3, 6]), u(&[6])],
        Box::new(|g, v| {
            let o = g.rms_norm(v[0], v[1], 1e-6)?;
            weighted_sum(g, o, 10)
        }),
    );
    add(
        "softmax",
        vec![u(&[3, 5])],
        Box::new(|g, v| {
            let o = g.softmax_lastdim(v[0], None)?;
            weighted_sum(g, o, 11)
        }),
    );
    add(
        "softmax_masked",
        vec![u(&[2, 3, 4])],
        Box::new(|g, v| {
            let m = super::MASK_VALUE;
            let mask = Tensor::from_rows(&[&[0.0, 0.0, m, 0.0], &[m, m, m, m], &[0.0, m, 0.0, 0.0]])?;
            let o = g.softmax_lastdim(v[0], Some(&mask))?;
            weighted_sum(g, o, 12)
        }),
    );
    add(
        "gather_rows",
        vec![u(&[5, 3])],
        Box::new(|g, v| {
            let o = g.gather_rows(v[0], &[0, 2, 2, 4, 2])?;
            weighted_sum(g, o, 13)
        }),
    );
    add(
        "permute",
        vec![u(&[2, 3, 4])],
        Box::new(|g, v| {
            let o = g.permute(v[0], &[2, 0, 1])?;
            weighted_sum(g, o, 14)
        }),
    );
    add(
        "reshape",
        vec![u(&[2, 6])],
        Box::new(|g, v| {
            let o = g.reshape(v[0], &[3, 4])?;
            weighted_sum(g, o, 15)
        }),
    );
    add(
        "select_last",
        vec![u(&[3, 4])],
        Box::new(|g, v| {
            let o = g.select_last(v[0], 2)?;
            weighted_sum(g, o, 16)
        }),
    );
    add(
        "sum",
        vec![u(&[7])],
        Box::new(|g, v| {
            let s = g.sum(v[0])?;
            g.scale(s, 0.3)
        }),
    );
    add(
        "cross_entropy_masked",
        vec![u(&[2, 2, 5])],
        Box::new(|g, v| g.cross_entropy_masked(v[0], &[3, 0, 4, 1], &[1.0, 0.0, 1.0, 1.0])),
    );
    add(
        "mse_masked",
        vec![u(&[4, 1])],
        Box::new(|g, v| g.mse_masked(v[0], &[0.5, -1.0, 2.0, 0.0], &[1.0, 1.0, 0.0, 1.0])),
    );
    cases
}
