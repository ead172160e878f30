//! Dense row-major `f64` matrices and the handful of numerical helpers the
//! rest of the crate is built on: stable softmax, Frobenius norms, and the
//! central-difference gradient used to check every analytic gradient.
//!
//! Matrix products go through `matrixmultiply::dgemm`, with transposes
//! expressed as strides so no copies are made.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix. At least one row and one column, all entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(rows.len(), cols, data)
    }

    /// Zero matrix. Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Unchecked constructor for internal results whose shape is known.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * c).collect(),
        )
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        if idx.is_empty() {
            return Err(Error::invalid("row selection is empty"));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::invalid(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_raw(idx.len(), self.cols, data))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, true)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        gemm(self, true, other, false)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "inner dimensions differ: {k} vs {kb}");
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    let mut c = vec![0.0; m * n];
    // SAFETY: strides describe exactly the buffers of `a`, `b` (read) and `c`
    // (written, m×n row-major), all of which live for the duration of the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Matrix::from_raw(m, n, c)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    norm(&m.data)
}

/// `softmax(scale · logits)`, computed with max subtraction.
///
/// `scale` plays the role of an inverse temperature: the classifiers in this
/// crate use `exp(τ·score)` with τ up to 64.
pub fn stable_softmax(logits: &[f64], scale: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!(
            "softmax scale must be positive, got {scale}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax logits must be finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // exp underflows to exactly 0 below about -745.1.
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&v| {
            let z = scale * (v - max);
            if z < -746.0 {
                0.0
            } else {
                z.exp()
            }
        })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// `ln Σ exp(v_i)` without overflow. `v` must be non-empty.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy `-ln softmax(scale·logits)[target]` and its gradient with
/// respect to the (unscaled) logits.
pub(crate) fn softmax_xent(logits: &[f64], scale: f64, target: usize) -> (f64, Vec<f64>) {
    let scaled: Vec<f64> = logits.iter().map(|v| v * scale).collect();
    let lse = log_sum_exp(&scaled);
    let loss = lse - scaled[target];
    let grad = scaled
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let p = (s - lse).exp();
            scale * (p - if c == target { 1.0 } else { 0.0 })
        })
        .collect();
    (loss, grad)
}

/// Central finite-difference gradient of `f` at `theta`:
/// `(f(θ + ε e_i) − f(θ − ε e_i)) / 2ε` per component.
pub fn central_diff_grad<F>(f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {eps}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let plus = f(&probe);
        probe[i] = theta[i] - eps;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "objective is not finite around component {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}
