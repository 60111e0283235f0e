//! Dense network math for the fixed encoder/decoder architectures.
//!
//! Everything is `f64`. Batches are row-major matrices with one sample per
//! row; weight matrices have shape `(out_dim, in_dim)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::node::NodeId;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Four-lane dot product; the fixed lane order keeps results bitwise stable.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

/// Multiply-accumulate counts charged to one node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTally {
    pub forward: u64,
    pub backward: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }

    /// Charges one dense layer applied to `batch` samples.
    pub fn charge_forward(&mut self, batch: usize, in_dim: usize, out_dim: usize) {
        self.forward += (batch * in_dim * out_dim) as u64;
    }

    /// Backward of a dense layer costs twice its forward.
    pub fn charge_backward(&mut self, batch: usize, in_dim: usize, out_dim: usize) {
        self.backward += 2 * (batch * in_dim * out_dim) as u64;
    }
}

impl std::ops::AddAssign for FlopTally {
    fn add_assign(&mut self, rhs: Self) {
        self.forward += rhs.forward;
        self.backward += rhs.backward;
    }
}

/// Per-node attribution of every MAC spent in a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlopCounter {
    per_node: BTreeMap<NodeId, FlopTally>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tally_mut(&mut self, node: NodeId) -> &mut FlopTally {
        self.per_node.entry(node).or_default()
    }

    pub fn tally(&self, node: NodeId) -> FlopTally {
        self.per_node.get(&node).copied().unwrap_or_default()
    }

    pub fn per_node(&self) -> &BTreeMap<NodeId, FlopTally> {
        &self.per_node
    }

    pub fn forward_flops(&self) -> u64 {
        self.per_node.values().map(|t| t.forward).sum()
    }

    pub fn backward_flops(&self) -> u64 {
        self.per_node.values().map(|t| t.backward).sum()
    }

    pub fn total(&self) -> u64 {
        self.forward_flops() + self.backward_flops()
    }

    pub fn total_where(&self, pred: impl Fn(NodeId) -> bool) -> FlopTally {
        let mut acc = FlopTally::default();
        for (&node, &t) in &self.per_node {
            if pred(node) {
                acc += t;
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// `W x + b` for a single vector.
pub fn dense_forward(w: &Matrix, b: &[f64], x: &[f64], flops: &mut FlopTally) -> Result<Vec<f64>> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(Error::config(format!(
            "dense_forward: weight {}x{}, bias {}, input {}",
            w.rows,
            w.cols,
            b.len(),
            x.len()
        )));
    }
    flops.charge_forward(1, w.cols, w.rows);
    Ok((0..w.rows).map(|o| dot(w.row(o), x) + b[o]).collect())
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gates `upstream` by `pre_activation > 0`.
pub fn relu_backward(pre_activation: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre_activation
        .iter()
        .zip(upstream)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn relu_matrix(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward_matrix(pre_activation: &Matrix, upstream: &mut Matrix) {
    for (g, &x) in upstream.data.iter_mut().zip(&pre_activation.data) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Numerically stable log-softmax.
pub fn softmax_log_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - max - lse).collect()
}

pub fn softmax_log_probs_matrix(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        out.row_mut(r)
            .copy_from_slice(&softmax_log_probs(logits.row(r)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// He-uniform weights (limit `sqrt(6 / fan_in)`), zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite He limit");
        let data = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Matrix {
                rows: out_dim,
                cols: in_dim,
                data,
            },
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Matrix, flops: &mut FlopTally) -> Result<Matrix> {
        if x.cols != self.in_dim() {
            return Err(Error::config(format!(
                "dense layer expects width {}, got {}",
                self.in_dim(),
                x.cols
            )));
        }
        let mut out = Matrix::zeros(x.rows, self.out_dim());
        for m in 0..x.rows {
            let xr = x.row(m);
            let orow = out.row_mut(m);
            for (o, slot) in orow.iter_mut().enumerate() {
                *slot = dot(self.weight.row(o), xr) + self.bias[o];
            }
        }
        flops.charge_forward(x.rows, self.in_dim(), self.out_dim());
        Ok(out)
    }

    /// Parameter gradients, plus the input gradient when `want_input_grad`.
    ///
    /// The FLOP charge is the fixed 2x-forward cost model either way.
    pub fn backward(
        &self,
        x: &Matrix,
        grad_out: &Matrix,
        want_input_grad: bool,
        flops: &mut FlopTally,
    ) -> Result<(DenseGrads, Option<Matrix>)> {
        if x.cols != self.in_dim() || grad_out.cols != self.out_dim() || x.rows != grad_out.rows {
            return Err(Error::config("dense backward shape mismatch"));
        }
        let mut gw = Matrix::zeros(self.out_dim(), self.in_dim());
        let mut gb = vec![0.0; self.out_dim()];
        let mut gx = want_input_grad.then(|| Matrix::zeros(x.rows, self.in_dim()));
        for m in 0..x.rows {
            let xr = x.row(m);
            for (o, &g) in grad_out.row(m).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                axpy(g, xr, gw.row_mut(o));
                if let Some(gx) = gx.as_mut() {
                    axpy(g, self.weight.row(o), gx.row_mut(m));
                }
            }
        }
        flops.charge_backward(x.rows, self.in_dim(), self.out_dim());
        Ok((
            DenseGrads {
                weight: gw,
                bias: gb,
            },
            gx,
        ))
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::config("adam_step shape mismatch"));
    }
    if !(hyper.lr > 0.0) {
        return Err(Error::config("learning rate must be positive"));
    }
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite gradient at index {bad}"
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Adam moments for both tensors of a dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAdam {
    pub weight: AdamState,
    pub bias: AdamState,
}

impl DenseAdam {
    pub fn for_layer(layer: &Dense) -> Self {
        Self {
            weight: AdamState::new(layer.weight.data.len()),
            bias: AdamState::new(layer.bias.len()),
        }
    }

    pub fn step(&mut self, layer: &mut Dense, grads: &DenseGrads, hyper: &AdamHyper) -> Result<()> {
        // Check both tensors first so a failure leaves the layer untouched.
        if !grads.weight.is_finite() || grads.bias.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite gradient in dense layer"));
        }
        adam_step(
            &mut layer.weight.data,
            &grads.weight.data,
            &mut self.weight,
            hyper,
        )?;
        adam_step(&mut layer.bias, &grads.bias, &mut self.bias, hyper)
    }
}
