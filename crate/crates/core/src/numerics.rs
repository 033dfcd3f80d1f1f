//! Dense numeric kernel shared by every other module.
//!
//! Everything here is a pure function over `f64` slices. The public
//! operations validate their inputs and return [`Result`]; the `*_acc`
//! kernels further down are unchecked hot loops used by the model and the
//! trainer, and assume the caller has already validated shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a probability vector sums to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A discrete probability distribution: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    /// Wraps `values` after checking non-negativity and unit mass.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::usage("probability vector must be non-empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::usage(format!(
                "probability entries must be finite and >= 0, got {v}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::usage(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(ProbVec(values))
    }

    /// Uniform distribution over `d` outcomes.
    pub fn uniform(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::usage("uniform distribution needs d > 0"));
        }
        Ok(ProbVec(vec![1.0 / d as f64; d]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVec {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ProbVec::new(values)
    }
}

impl From<ProbVec> for Vec<f64> {
    fn from(p: ProbVec) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for ProbVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::usage(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::usage(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::usage("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<ProbVec> {
    if v.is_empty() {
        return Err(Error::usage("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::usage("softmax input must be finite"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVec(out))
}

/// Unchecked softmax over a finite, non-empty slice.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Rescales a non-negative vector to unit mass.
pub fn normalize(v: &[f64]) -> Result<ProbVec> {
    if v.is_empty() {
        return Err(Error::usage("cannot normalize an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::usage("normalize expects finite non-negative entries"));
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return Err(Error::degenerate("vector has zero total mass"));
    }
    Ok(ProbVec(v.iter().map(|x| x / sum).collect()))
}

/// Hellinger distance `sqrt(sum_j (sqrt(p_j) - sqrt(q_j))^2) / sqrt(2)`, in `[0, 1]`.
pub fn hellinger(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::usage(format!(
            "hellinger length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let sq: f64 = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(a, b)| {
            let diff = a.sqrt() - b.sqrt();
            diff * diff
        })
        .sum();
    Ok((sq.sqrt() * std::f64::consts::FRAC_1_SQRT_2).min(1.0))
}

/// Indices of the `floor(rho * d)` smallest scores, returned in ascending
/// index order. Ties at the cut are resolved in favour of the lower index.
pub fn mask_indices_by_quantile(scores: &[f64], rho: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::usage("mask scores must be non-empty"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::usage(format!("mask ratio {rho} outside [0, 1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::usage("mask scores contain NaN"));
    }
    let m = mask_count(scores.len(), rho);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps ascending index among equal scores
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut picked = order[..m].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `floor(rho * d)`, absorbing the binary representation error of decimal ratios.
pub fn mask_count(d: usize, rho: f64) -> usize {
    (((rho * d as f64) + 1e-9).floor() as usize).min(d)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::usage(format!(
            "matmul shape mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::usage(format!(
            "layer_norm length mismatch: x {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::usage("layer_norm of an empty vector"));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::usage(format!("layer_norm epsilon must be > 0, got {eps}")));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, gain, bias, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns `(mean, 1/sqrt(var + eps))`.
pub(crate) fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

// ---------------------------------------------------------------------------
// Unchecked kernels (row-major, accumulate into `c`).
// ---------------------------------------------------------------------------

/// `c[m x n] += a[m x k] * b[k x n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators (fixed reduction order).
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
