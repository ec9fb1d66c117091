//! Link functions between linear predictors and means or precisions.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A finite linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LinearPredictor(f64);

impl LinearPredictor {
    pub fn new(eta: f64) -> Result<Self> {
        if eta.is_finite() {
            Ok(Self(eta))
        } else {
            Err(Error::domain(format!("linear predictor {eta} is not finite")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Mean under the logit link.
    pub fn to_mean(self) -> f64 {
        inv_logit(self.0)
    }

    /// Precision under the log link.
    pub fn to_precision(self) -> f64 {
        inv_log(self.0)
    }
}

pub fn logit(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok((p / (1.0 - p)).ln())
    } else {
        Err(Error::domain(format!("logit requires 0 < p < 1, got {p}")))
    }
}

/// Logistic function, evaluated so that neither tail loses precision.
#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(inv_logit(x))` without forming the probability.
#[inline]
pub fn ln_inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_link(phi: f64) -> Result<f64> {
    if phi > 0.0 && phi.is_finite() {
        Ok(phi.ln())
    } else {
        Err(Error::domain(format!("log link requires a positive precision, got {phi}")))
    }
}

#[inline]
pub fn inv_log(x: f64) -> f64 {
    x.exp()
}

/// Row-wise softmax of a linear-predictor matrix whose first column is the
/// base category (all zeros).
pub fn multivariate_logit_inverse(eta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if eta.ncols() < 2 {
        return Err(Error::dim("need at least two categories"));
    }
    if eta.column(0).iter().any(|v| *v != 0.0) {
        return Err(Error::domain("base column of the linear predictor must be zero"));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("linear predictor entries must be finite"));
    }
    let mut out = eta.clone();
    let mut buf = vec![0.0; eta.ncols()];
    for i in 0..eta.nrows() {
        buf.iter_mut().enumerate().for_each(|(j, b)| *b = eta[(i, j)]);
        softmax_in_place(&mut buf);
        buf.iter().enumerate().for_each(|(j, b)| out[(i, j)] = *b);
    }
    Ok(out)
}

/// Softmax of one row, shifted by its maximum before exponentiation.
pub fn softmax(eta: &[f64]) -> Vec<f64> {
    let mut v = eta.to_vec();
    softmax_in_place(&mut v);
    v
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}
