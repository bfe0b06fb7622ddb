//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node whose parents already exist, so node order
//! is a topological order and the backward sweep is a single reverse pass.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

static PARALLEL_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Enables row-parallel matrix products on the ambient rayon pool.
///
/// Each output element is reduced in the same order regardless of the
/// thread count, so results stay bit-identical to the serial path.
pub fn set_parallelism(threads: usize) {
    PARALLEL_THREADS.store(threads.max(1), Ordering::Relaxed);
}

fn parallel_enabled(work: usize) -> bool {
    PARALLEL_THREADS.load(Ordering::Relaxed) > 1 && work >= 1 << 16
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    InfoNce {
        logits: Var,
        p_row: Vec<f64>,
        p_col: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn as_matrix(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op}: expected a matrix, got {s:?}"))),
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(i, out): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if parallel_enabled(m * k * n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(i, out): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if parallel_enabled(m * k * n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out = &mut c[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    c
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul", av)?;
        let (k2, n) = as_matrix("matmul", bv)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree for {:?} × {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n));
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise sum of equally shaped tensors. Each element's addends are
    /// accumulated in ascending value order, so the result does not depend on
    /// the order of `parts`.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("add_n: no inputs".into()))?;
        for &p in &parts[1..] {
            same_shape("add_n", self.value(first), self.value(p))?;
        }
        let shape = self.value(first).shape().to_vec();
        let n = self.value(first).numel();
        let mut scratch = Vec::with_capacity(parts.len());
        let data = (0..n)
            .map(|e| {
                scratch.clear();
                scratch.extend(parts.iter().map(|&p| self.value(p).data()[e]));
                scratch.sort_by(f64::total_cmp);
                scratch.iter().fold(0.0, |s, v| s + v)
            })
            .collect();
        let out = Tensor::from_parts(shape, data);
        self.push("add_n", out, Op::AddN(parts.to_vec()), parts)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Row-wise affine shift: `x[n×d] + bias[d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.cols();
        if bv.numel() != d {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} does not match row width {d} of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("add_row", out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::Shape(format!(
                "mul_scalar: expected a scalar factor, got {:?}",
                sv.shape()
            )));
        }
        let c = sv.item();
        let out = self.value(x).map(|v| v * c);
        self.push("mul_scalar", out, Op::MulScalar(x, s), &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push("exp", out, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Per-row standardization (population variance) followed by `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm: eps must be >= 0, got {eps}"
            )));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: gamma {:?} / beta {:?} must have {d} elements",
                gv.shape(),
                bv.shape()
            )));
        }
        let n = xv.rows();
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "layer_norm: row {r} has zero variance and eps = 0"
                )));
            }
            let is = 1.0 / denom.sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(gv.data()[j] * h + bv.data()[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for (r, row) in xv.data().chunks(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "l2_normalize: row {r} has zero norm"
                )));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("l2_normalize", out, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix("transpose", xv)?;
        let src = xv.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::from_parts(vec![c, r], data);
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        let rows = as_matrix("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts {rows} and {r} differ"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `‖x‖²` over all elements.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Symmetric cross-entropy over a square logit matrix with diagonal targets:
    /// `−(1/2N)(Σᵢ log softmax_row(s)ᵢᵢ + Σᵢ log softmax_col(s)ᵢᵢ)`.
    pub fn infonce(&mut self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        let (n, m) = as_matrix("infonce", lv)?;
        if n != m {
            return Err(Error::Shape(format!(
                "infonce: logits must be square, got {n}×{m}"
            )));
        }
        let s = lv.data();
        let mut p_row = vec![0.0; n * n];
        let mut p_col = vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            let row = &s[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..n {
                p_row[i * n + j] = (row[j] - mx).exp() / z;
            }
            total += (row[i] - mx) - z.ln();
        }
        for j in 0..n {
            let mx = (0..n)
                .map(|i| s[i * n + j])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|i| (s[i * n + j] - mx).exp()).sum();
            for i in 0..n {
                p_col[i * n + j] = (s[i * n + j] - mx).exp() / z;
            }
            total += (s[j * n + j] - mx) - z.ln();
        }
        let loss = -total / (2.0 * n as f64);
        self.push(
            "infonce",
            Tensor::scalar(loss),
            Op::InfoNce {
                logits,
                p_row,
                p_col,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`; gradients are summed over all paths.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if rg(*a) {
                        acc(&mut grads, *a, &matmul_nt(&g, bv.data(), m, n, k));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, &matmul_tn(av.data(), &g, m, k, n));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, &g);
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, &g);
                    }
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        if rg(p) {
                            acc(&mut grads, p, &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, &g);
                    }
                    if rg(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        acc(&mut grads, *b, &neg);
                    }
                }
                Op::AddRow(x, b) => {
                    if rg(*x) {
                        acc(&mut grads, *x, &g);
                    }
                    if rg(*b) {
                        let d = self.value(*b).numel();
                        let mut gb = vec![0.0; d];
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                        acc(&mut grads, *b, &gb);
                    }
                }
                Op::Scale(x, c) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    acc(&mut grads, *x, &gx);
                }
                Op::MulScalar(x, s) => {
                    let c = self.value(*s).item();
                    if rg(*x) {
                        let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                        acc(&mut grads, *x, &gx);
                    }
                    if rg(*s) {
                        let gs: f64 = g
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(a, b)| a * b)
                            .sum();
                        acc(&mut grads, *s, &[gs]);
                    }
                }
                Op::Exp(x) => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(a, y)| a * y)
                        .collect();
                    acc(&mut grads, *x, &gx);
                }
                Op::Gelu(x) => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, &v)| a * gelu_grad_scalar(v))
                        .collect();
                    acc(&mut grads, *x, &gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).data();
                    let d = gam.len();
                    if rg(*gamma) {
                        let mut gg = vec![0.0; d];
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                        acc(&mut grads, *gamma, &gg);
                    }
                    if rg(*beta) {
                        let mut gb = vec![0.0; d];
                        for grow in g.chunks(d) {
                            gb.iter_mut().zip(grow).for_each(|(s, v)| *s += v);
                        }
                        acc(&mut grads, *beta, &gb);
                    }
                    if rg(*x) {
                        let mut gx = Vec::with_capacity(g.len());
                        let df = d as f64;
                        for ((grow, hrow), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                            let dh: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                gx.push(is / df * (df * dh[j] - sum_dh - hrow[j] * sum_dh_h));
                            }
                        }
                        acc(&mut grads, *x, &gx);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = node.value.data();
                    let d = node.value.cols();
                    let mut gx = Vec::with_capacity(g.len());
                    for ((grow, yrow), &nrm) in g.chunks(d).zip(y.chunks(d)).zip(norms) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        gx.extend(grow.iter().zip(yrow).map(|(a, b)| (a - b * dot) / nrm));
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::Transpose(x) => {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] = g[i * c + j];
                        }
                    }
                    acc(&mut grads, *x, &gx);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        if rg(p) {
                            let mut gp = Vec::with_capacity(rows * w);
                            for i in 0..rows {
                                gp.extend_from_slice(
                                    &g[i * total + offset..i * total + offset + w],
                                );
                            }
                            acc(&mut grads, p, &gp);
                        }
                        offset += w;
                    }
                }
                Op::Reshape(x) => acc(&mut grads, *x, &g),
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    acc(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    acc(&mut grads, *x, &vec![g[0] / n as f64; n]);
                }
                Op::SumSquares(x) => {
                    let gx: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .map(|v| 2.0 * v * g[0])
                        .collect();
                    acc(&mut grads, *x, &gx);
                }
                Op::InfoNce {
                    logits,
                    p_row,
                    p_col,
                } => {
                    let n = self.value(*logits).shape()[0];
                    let scale = g[0] / (2.0 * n as f64);
                    let mut gl = Vec::with_capacity(n * n);
                    for i in 0..n {
                        for j in 0..n {
                            let target = if i == j { 2.0 } else { 0.0 };
                            gl.push(scale * (p_row[i * n + j] + p_col[i * n + j] - target));
                        }
                    }
                    acc(&mut grads, *logits, &gl);
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let b = t.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c), &m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));

        let p = t.constant(m(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let v = t.constant(m(&[vec![5.0], vec![7.0]]));
        let c = t.matmul(p, v).unwrap();
        assert_eq!(t.value(c).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let mut expect = [[0.0f64; 2]; 3];
        for (i, row) in expect.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                for k in 0..4 {
                    *cell += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let c = t.matmul(av, bv).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((t.value(c).data()[i * 2 + j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] × [2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1.0, 2.0, 3.0]]));
        let g = t.constant(Tensor::filled(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        let expect = [-1.224_744_871, 0.0, 1.224_744_871];
        for (v, e) in t.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_constant_row_and_affine_collapse() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![4.0; 5], vec![1.0, -2.0, 3.0, 0.5, 7.0]]));
        let g = t.constant(Tensor::filled(&[5], 1.0));
        let b = t.constant(Tensor::zeros(&[5]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).row(0).iter().all(|&v| v == 0.0));

        let g0 = t.constant(Tensor::zeros(&[5]));
        let b5 = t.constant(Tensor::filled(&[5], 5.0));
        let y = t.layer_norm(x, g0, b5, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn layer_norm_zero_variance_without_eps_is_degenerate() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![2.0, 2.0]]));
        let g = t.constant(Tensor::filled(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            t.layer_norm(x, g, b, 0.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!((gelu_scalar(1.0) - 0.841_344_746).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![3.0, 4.0], vec![0.0, 1.0]]));
        let y = t.l2_normalize(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.6, 0.8, 0.0, 1.0]);

        let z = t.constant(m(&[vec![1.0, 1.0], vec![0.0, 0.0]]));
        let err = t.l2_normalize(z).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.5]).unwrap());
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let q = t.sum_squares(x).unwrap();
        let g = t.backward(q).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_accumulates_over_paths() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.add(x, x).unwrap();
        let z = t.mul_scalar(y, x).unwrap(); // 2x²
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 12.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn infonce_small_cases() {
        let mut t = Tape::new();
        let one = t.constant(Tensor::scalar(3.7).reshape(&[1, 1]).unwrap());
        let l = t.infonce(one).unwrap();
        assert_eq!(t.value(l).item(), 0.0);

        let eye = t.constant(Tensor::eye(2));
        let l = t.infonce(eye).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((t.value(l).item() - expect).abs() < 1e-12);
        assert!((t.value(l).item() - 0.313_262).abs() < 1e-6);
    }
}
