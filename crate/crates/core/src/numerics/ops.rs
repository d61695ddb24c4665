//! Forward kernels shared by the recorded (training) and direct (inference)
//! execution paths. Each has a matching backward rule in `tape.rs`.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Additive logit sentinel for masked attention keys. Added pre-softmax, it
/// drives the masked column's weight to exactly zero (exp underflows) while
/// each row stays a proper distribution over the unmasked keys.
pub const MASKED_LOGIT: f64 = -1.0e9;

/// Coefficients of the tanh-form GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608028654;
pub const GELU_CUBIC: f64 = 0.044715;

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::DimMismatch {
            op: "matmul",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            let brow = b.row(p);
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimMismatch {
            op: "matmul_transb",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut acc = 0.0;
            for p in 0..a.cols() {
                acc += arow[p] * brow[p];
            }
            orow[j] = acc;
        }
    }
    Ok(out)
}

/// Row-wise softmax with an optional additive mask, stabilized by row-max
/// subtraction. Mask entries are expected to be 0 or [`MASKED_LOGIT`]; a row
/// whose keys are all masked is an error (callers must keep >= 1 key alive).
pub fn softmax_rows(m: &Matrix, additive_mask: Option<&Matrix>) -> Result<Matrix> {
    if let Some(mask) = additive_mask {
        if !m.same_shape(mask) {
            return Err(Error::DimMismatch {
                op: "softmax_rows",
                left_rows: m.rows(),
                left_cols: m.cols(),
                right_rows: mask.rows(),
                right_cols: mask.cols(),
            });
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let masked = |j: usize| -> f64 {
            match additive_mask {
                Some(mask) => row[j] + mask.at(i, j),
                None => row[j],
            }
        };
        if let Some(mask) = additive_mask {
            if (0..m.cols()).all(|j| mask.at(i, j) <= MASKED_LOGIT / 2.0) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        let mut max = f64::NEG_INFINITY;
        for j in 0..m.cols() {
            max = max.max(masked(j));
        }
        let mut sum = 0.0;
        for j in 0..m.cols() {
            let e = (masked(j) - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        let orow = out.row_mut(i);
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Row-wise layer normalization with per-column affine parameters.
/// `gain` and `bias` are 1 x cols.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    check_row_vector("layer_norm gain", gain, x.cols())?;
    check_row_vector("layer_norm bias", bias, x.cols())?;
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let c = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let inv_std = 1.0 / (var + eps).sqrt();
        let orow = out.row_mut(i);
        for j in 0..row.len() {
            orow[j] = (row[j] - mean) * inv_std * gain.at(0, j) + bias.at(0, j);
        }
    }
    Ok(out)
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

fn check_row_vector(what: &str, v: &Matrix, cols: usize) -> Result<()> {
    if v.rows() != 1 || v.cols() != cols {
        return Err(Error::ShapeMismatch {
            what: what.to_string(),
            expected_rows: 1,
            expected_cols: cols,
            got_rows: v.rows(),
            got_cols: v.cols(),
        });
    }
    Ok(())
}
