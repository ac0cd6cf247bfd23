//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its output and whatever it needs for the backward pass, and returns
//! a [`Var`] handle. Because nodes are appended in evaluation order, the node
//! list is already topologically sorted; [`Graph::backward`] walks it in
//! reverse and accumulates each contribution into the input's gradient buffer
//! in that fixed order, so repeated runs are bitwise reproducible.
//!
//! All matrix kernels reduce over their contraction index strictly in
//! ascending order. Rows that carry only zero gradient therefore leave every
//! accumulated sum bitwise unchanged.

use super::Tensor;
use crate::error::{Error, Result};

/// Additive mask value for disallowed attention pairs.
pub const MASK_VALUE: f64 = -1e30;

/// Mask entries at or below this threshold exclude the key from the softmax.
const MASKED_BELOW: f64 = MASK_VALUE * 0.5;

/// `sqrt(2 / pi)`, the scale inside the tanh approximation of GELU.
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_COEFF: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
        cols: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Gelu {
        x: usize,
    },
    RmsNorm {
        x: usize,
        scale: usize,
        d: usize,
        inv_rms: Vec<f64>,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
        cols: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    SelectLast {
        x: usize,
        index: usize,
        cols: usize,
    },
    Sum {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        total_weight: f64,
        probs: Vec<f64>,
        classes: usize,
    },
    Mse {
        pred: usize,
        targets: Vec<f64>,
        weights: Vec<f64>,
        total_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Empty graph in checked mode: every op output is tested for NaN/Inf.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dimensions of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        )
    }

    /// Batched product over matching leading dimensions:
    /// `a[..., m, k] · b[..., k, n]`, or `a · bᵀ` with `b[..., n, k]` when
    /// `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"));
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(bad());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for g in 0..batch {
                let ab = &da[g * m * k..(g + 1) * m * k];
                let bb = &db[g * k * n..(g + 1) * k * n];
                let ob = &mut out[g * m * n..(g + 1) * m * n];
                if transpose_b {
                    matmul_nt_acc(ab, bb, ob, m, k, n);
                } else {
                    matmul_acc(ab, bb, ob, m, k, n);
                }
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(
            "bmm",
            Tensor::new(shape, out)?,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("add", t, Op::Add { a: a.0, b: b.0 }, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("mul", t, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    /// Adds a `[cols]` vector to every row of `x[..., cols]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let cols = sb[0];
        let bv = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x.0) || self.rg(bias.0);
        self.push(
            "add_bias",
            Tensor::new(sx, data)?,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                cols,
            },
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x.0);
        self.push("scale", t, Op::Scale { x: x.0, factor }, rg)
    }

    /// Tanh approximation: `0.5·x·(1 + tanh(GELU_SCALE·(x + GELU_COEFF·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x.0);
        self.push("gelu", t, Op::Gelu { x: x.0 }, rg)
    }

    /// `y = x / sqrt(mean(x²) + eps) ⊙ scale`, mean over the last dimension.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(scale).to_vec());
        if ss.len() != 1 || sx.last() != Some(&ss[0]) {
            return Err(Error::shape("rms_norm", format!("{sx:?} with scale {ss:?}")));
        }
        if !(eps >= 0.0) {
            return Err(Error::shape("rms_norm", format!("eps must be >= 0, got {eps}")));
        }
        let d = ss[0];
        let sv = self.value(scale).data();
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(sv).map(|(v, s)| v * inv * s));
        }
        let rg = self.rg(x.0) || self.rg(scale.0);
        self.push(
            "rms_norm",
            Tensor::new(sx, out)?,
            Op::RmsNorm {
                x: x.0,
                scale: scale.0,
                d,
                inv_rms,
            },
            rg,
        )
    }

    /// Softmax over the last dimension with an optional additive mask.
    ///
    /// The mask is broadcast against `x` right-aligned, NumPy style (each mask
    /// dimension equals the matching `x` dimension or is 1). Keys whose mask
    /// entry is at or below `MASK_VALUE / 2` are excluded outright and get
    /// probability exactly 0; a row with no remaining key is all zeros.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        let xv = self.value(x).data();
        let rows = xv.len() / cols;
        let layout = match mask {
            Some(m) => Some(MaskLayout::new(&sx, m.shape())?),
            None => None,
        };
        let mut out = vec![0.0; xv.len()];
        let mut shifted = vec![0.0; cols];
        let mut keep = vec![false; cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                let add = match (&layout, mask) {
                    (Some(l), Some(m)) => m.data()[l.offset(r, c)],
                    _ => 0.0,
                };
                keep[c] = add > MASKED_BELOW;
                shifted[c] = row[c] + add;
                if keep[c] && shifted[c] > max {
                    max = shifted[c];
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for c in 0..cols {
                if keep[c] {
                    o[c] = (shifted[c] - max).exp();
                    sum += o[c];
                }
            }
            for c in 0..cols {
                if keep[c] {
                    o[c] /= sum;
                }
            }
        }
        let rg = self.rg(x.0);
        self.push("softmax", Tensor::new(sx, out)?, Op::Softmax { x: x.0, cols }, rg)
    }

    /// `out[i] = table[ids[i]]` for a rank-2 `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return Err(Error::shape("gather_rows", format!("table {st:?}, {} ids", ids.len())));
        }
        let (rows, cols) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab: rows,
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table.0);
        self.push(
            "gather_rows",
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
                cols,
            },
            rg,
        )
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len()
            || axes
                .iter()
                .any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", format!("{sx:?} by {axes:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let src = permuted_offsets(&sx, axes);
        let xv = self.value(x).data();
        let out = src.iter().map(|&o| xv[o]).collect();
        let rg = self.rg(x.0);
        self.push(
            "permute",
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x.0);
        self.push("reshape", t, Op::Reshape { x: x.0 }, rg)
    }

    /// `x[..., index]`, dropping the last dimension (a `[N, C]` input gives `[N]`).
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        if index >= cols {
            return Err(Error::shape("select_last", format!("index {index} of {sx:?}")));
        }
        let out: Vec<f64> = self.value(x).data().chunks_exact(cols).map(|r| r[index]).collect();
        let shape = if sx.len() > 1 {
            sx[..sx.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(x.0);
        self.push(
            "select_last",
            Tensor::new(shape, out)?,
            Op::SelectLast { x: x.0, index, cols },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x.0);
        self.push("sum", Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    /// Mask-weighted mean cross-entropy over rows of `logits[..., C]`.
    ///
    /// Rows with weight 0 are skipped entirely: they add nothing to the value
    /// and receive an exactly-zero gradient.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let classes = *sl.last().unwrap();
        let rows = self.value(logits).numel() / classes;
        check_loss_inputs("cross_entropy_masked", rows, targets.len(), weights)?;
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::shape(
                "cross_entropy_masked",
                format!("target {t} >= {classes} classes"),
            ));
        }
        let total_weight: f64 = weights.iter().sum();
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let row = &lv[r * classes..][..classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * classes..(r + 1) * classes];
            let mut sum = 0.0;
            for c in 0..classes {
                p[c] = (row[c] - max).exp();
                sum += p[c];
            }
            for v in p.iter_mut() {
                *v /= sum;
            }
            let lse = max + sum.ln();
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let value = loss / total_weight;
        let rg = self.rg(logits.0);
        self.push(
            "cross_entropy_masked",
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total_weight,
                probs,
                classes,
            },
            rg,
        )
    }

    /// Mask-weighted mean squared error between `pred` (any shape, flattened)
    /// and `targets`.
    pub fn mse_masked(&mut self, pred: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(pred).numel();
        check_loss_inputs("mse_masked", n, targets.len(), weights)?;
        let total_weight: f64 = weights.iter().sum();
        let pv = self.value(pred).data();
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] != 0.0 {
                let e = pv[i] - targets[i];
                loss += weights[i] * e * e;
            }
        }
        let rg = self.rg(pred.0);
        self.push(
            "mse_masked",
            Tensor::scalar(loss / total_weight),
            Op::Mse {
                pred: pred.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total_weight,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`, visiting nodes in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let ga = slot(grads, a, m * k);
                    matmul_nt_acc(g, val(b), ga, m, n, k);
                }
                if self.rg(b) {
                    let gb = slot(grads, b, k * n);
                    matmul_tn_acc(val(a), g, gb, m, k, n);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (av, bv) = (val(a), val(b));
                if self.rg(a) {
                    let ga = slot(grads, a, batch * m * k);
                    for bi in 0..batch {
                        let gg = &g[bi * m * n..][..m * n];
                        let bb = &bv[bi * k * n..][..k * n];
                        let out = &mut ga[bi * m * k..][..m * k];
                        if transpose_b {
                            // C = A·Bᵀ with B [n, k]: dA = G·B
                            matmul_acc(gg, bb, out, m, n, k);
                        } else {
                            matmul_nt_acc(gg, bb, out, m, n, k);
                        }
                    }
                }
                if self.rg(b) {
                    let gb = slot(grads, b, batch * k * n);
                    for bi in 0..batch {
                        let gg = &g[bi * m * n..][..m * n];
                        let ab = &av[bi * m * k..][..m * k];
                        let out = &mut gb[bi * k * n..][..k * n];
                        if transpose_b {
                            // dB = Gᵀ·A, shape [n, k]
                            matmul_tn_acc(gg, ab, out, m, n, k);
                        } else {
                            matmul_tn_acc(ab, gg, out, m, k, n);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.rg(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    let bv = val(b);
                    for ((o, gi), bi) in slot(grads, a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.rg(b) {
                    let av = val(a);
                    for ((o, gi), ai) in slot(grads, b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::AddBias { x, bias, cols } => {
                if self.rg(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if self.rg(bias) {
                    let gb = slot(grads, bias, cols);
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if self.rg(x) {
                    for (o, gi) in slot(grads, x, g.len()).iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                }
            }
            &Op::Gelu { x } => {
                if self.rg(x) {
                    let xv = val(x);
                    for ((o, gi), &xi) in slot(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(xi);
                    }
                }
            }
            Op::RmsNorm { x, scale, d, inv_rms } => {
                let (x, scale, d) = (*x, *scale, *d);
                let (xv, sv) = (val(x), val(scale));
                if self.rg(x) {
                    let gx = slot(grads, x, xv.len());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * d..][..d];
                        let gr = &g[r * d..][..d];
                        let dot: f64 = (0..d).map(|i| gr[i] * sv[i] * xr[i]).sum();
                        let c = inv * inv * inv * dot / d as f64;
                        for i in 0..d {
                            gx[r * d + i] += inv * gr[i] * sv[i] - xr[i] * c;
                        }
                    }
                }
                if self.rg(scale) {
                    let gs = slot(grads, scale, d);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for i in 0..d {
                            gs[i] += g[r * d + i] * xv[r * d + i] * inv;
                        }
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if self.rg(x) {
                    let y = node.value.data();
                    let gx = slot(grads, x, y.len());
                    for ((yr, gr), or) in y
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            or[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids, cols } => {
                let (table, cols) = (*table, *cols);
                if self.rg(table) {
                    let n = self.nodes[table].value.numel();
                    let gt = slot(grads, table, n);
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Permute { x, axes } => {
                if self.rg(*x) {
                    let sx = self.nodes[*x].value.shape().to_vec();
                    let src = permuted_offsets(&sx, axes);
                    let gx = slot(grads, *x, g.len());
                    for (o, &s) in src.iter().enumerate() {
                        gx[s] += g[o];
                    }
                }
            }
            &Op::Reshape { x } => {
                if self.rg(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
            }
            &Op::SelectLast { x, index, cols } => {
                if self.rg(x) {
                    let gx = slot(grads, x, g.len() * cols);
                    for (r, gi) in g.iter().enumerate() {
                        gx[r * cols + index] += gi;
                    }
                }
            }
            &Op::Sum { x } => {
                if self.rg(x) {
                    for o in slot(grads, x, self.nodes[x].value.numel()).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                total_weight,
                probs,
                classes,
            } => {
                if self.rg(*logits) {
                    let c = *classes;
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let f = g[0] * w / total_weight;
                        for j in 0..c {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            gl[r * c + j] += f * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse {
                pred,
                targets,
                weights,
                total_weight,
            } => {
                if self.rg(*pred) {
                    let pv = val(*pred);
                    let gp = slot(grads, *pred, pv.len());
                    for (i, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            gp[i] += g[0] * 2.0 * w * (pv[i] - targets[i]) / total_weight;
                        }
                    }
                }
            }
        }
    }
}

fn check_loss_inputs(op: &'static str, rows: usize, targets: usize, weights: &[f64]) -> Result<()> {
    if targets != rows || weights.len() != rows {
        return Err(Error::shape(
            op,
            format!("{rows} rows, {targets} targets, {} weights", weights.len()),
        ));
    }
    if let Some(w) = weights.iter().find(|&&w| w != 0.0 && w != 1.0) {
        return Err(Error::shape(op, format!("weight-mask entry {w} is not 0 or 1")));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::EmptyLossSupport);
    }
    Ok(())
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], i: usize, len: usize) -> &'a mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// `out[m, n] += a[m, k] · b[k, n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] · b[n, k]ᵀ`.
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ · b[m, n]`, reducing over `m` in ascending order.
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// For each output position of `permute(shape, axes)`, the flat input offset.
fn permuted_offsets(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let r = shape.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Maps (row, column) of a softmax input onto a broadcast mask.
struct MaskLayout {
    lead_shape: Vec<usize>,
    lead_strides: Vec<usize>,
    col_stride: usize,
}

impl MaskLayout {
    fn new(x_shape: &[usize], m_shape: &[usize]) -> Result<Self> {
        let r = x_shape.len();
        if m_shape.len() > r {
            return Err(Error::shape("softmax mask", format!("{m_shape:?} vs {x_shape:?}")));
        }
        let mut padded = vec![1; r - m_shape.len()];
        padded.extend_from_slice(m_shape);
        let mut strides = vec![0; r];
        let mut acc = 1;
        for i in (0..r).rev() {
            if padded[i] == x_shape[i] {
                strides[i] = if padded[i] == 1 { 0 } else { acc };
            } else if padded[i] != 1 {
                return Err(Error::shape("softmax mask", format!("{m_shape:?} vs {x_shape:?}")));
            }
            acc *= padded[i];
        }
        Ok(MaskLayout {
            lead_shape: x_shape[..r - 1].to_vec(),
            lead_strides: strides[..r - 1].to_vec(),
            col_stride: strides[r - 1],
        })
    }

    fn offset(&self, row: usize, col: usize) -> usize {
        let mut rem = row;
        let mut off = col * self.col_stride;
        for i in (0..self.lead_shape.len()).rev() {
            off += (rem % self.lead_shape[i]) * self.lead_strides[i];
            rem /= self.lead_shape[i];
        }
        off
    }
}
