//! Deterministic dense numeric kernels.
//!
//! Everything here is pure and uses a fixed accumulation order, so identical
//! inputs produce bit-identical outputs across calls. That determinism is what
//! lets the layout-equivalence tests compare prefix-shared and paired formats
//! at tight tolerances.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows in matrix literal".into()));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * other`, accumulated in a fixed i-k-j loop order.
    pub fn matmul(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul dimension mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`. Same deterministic accumulation, avoids materializing
    /// the transpose.
    pub fn matmul_transposed(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_transposed dimension mismatch: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc = acc + a * b;
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Max-subtracted softmax over the allowed entries of one attention row.
///
/// Disallowed entries get probability exactly zero. Errors if every entry is
/// masked: a token always sees at least itself under the layouts built here,
/// so an all-masked row means the caller constructed an invalid mask.
pub fn masked_softmax_row<S: Scalar>(scores: &[S], allowed: &[bool]) -> Result<Vec<S>> {
    if scores.len() != allowed.len() {
        return Err(Error::Shape(format!(
            "softmax row has {} scores but {} mask entries",
            scores.len(),
            allowed.len()
        )));
    }
    let mut max = S::neg_infinity();
    for (&s, &a) in scores.iter().zip(allowed) {
        if a && s > max {
            max = s;
        }
    }
    if max == S::neg_infinity() {
        return Err(Error::AllMasked("no allowed entries in softmax row".into()));
    }
    let mut out = vec![S::zero(); scores.len()];
    let mut denom = S::zero();
    for ((o, &s), &a) in out.iter_mut().zip(scores).zip(allowed) {
        if a {
            let e = (s - max).exp();
            *o = e;
            denom = denom + e;
        }
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
    Ok(out)
}

/// RMS normalization: `x / sqrt(mean(x^2) + eps) * gain`, elementwise.
pub fn rms_norm<S: Scalar>(x: &[S], gain: &[S], eps: S) -> Result<Vec<S>> {
    if x.len() != gain.len() {
        return Err(Error::Shape(format!(
            "rms_norm input length {} != gain length {}",
            x.len(),
            gain.len()
        )));
    }
    let inv = rms_norm_inv(x, eps);
    Ok(x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect())
}

/// The `1 / sqrt(mean(x^2) + eps)` factor; cached by the model for backward.
pub fn rms_norm_inv<S: Scalar>(x: &[S], eps: S) -> S {
    let n = S::from_f64(x.len() as f64);
    let mean_sq = x.iter().map(|&v| v * v).sum::<S>() / n;
    (mean_sq + eps).sqrt().recip()
}

/// Rotary position embedding over adjacent value pairs.
///
/// Row `t` of `input` is rotated according to `positions[t]`: pair `i`
/// (columns `2i`, `2i+1`) turns by `positions[t] * theta_base^(-2i/d)`.
/// Position 0 is the identity rotation.
pub fn rope_apply<S: Scalar>(
    input: &Matrix<S>,
    positions: &[usize],
    theta_base: f64,
) -> Result<Matrix<S>> {
    let d = input.cols();
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rotary embedding requires an even dimension, got {d}"
        )));
    }
    if positions.len() != input.rows() {
        return Err(Error::Shape(format!(
            "rope_apply got {} positions for {} rows",
            positions.len(),
            input.rows()
        )));
    }
    let mut out = input.clone();
    for (t, &pos) in positions.iter().enumerate() {
        rope_rotate_row(out.row_mut(t), pos, theta_base, false);
    }
    Ok(out)
}

/// Rotates one row in place. `inverse` applies the transpose rotation, which
/// is what gradients need on the way back.
pub fn rope_rotate_row<S: Scalar>(row: &mut [S], position: usize, theta_base: f64, inverse: bool) {
    let d = row.len();
    debug_assert_eq!(d % 2, 0);
    for i in 0..d / 2 {
        let freq = theta_base.powf(-(2.0 * i as f64) / d as f64);
        let mut angle = position as f64 * freq;
        if inverse {
            angle = -angle;
        }
        let cos = S::from_f64(angle.cos());
        let sin = S::from_f64(angle.sin());
        let x0 = row[2 * i];
        let x1 = row[2 * i + 1];
        row[2 * i] = x0 * cos - x1 * sin;
        row[2 * i + 1] = x0 * sin + x1 * cos;
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// SiLU (swish) gate activation: `x * sigmoid(x)`.
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// Derivative of SiLU with respect to its input.
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// `log(1 + exp(x))` without overflow; `-log(sigmoid(-x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
