//! Special functions needed by Dirichlet maximum likelihood and Wald inference.
//!
//! The digamma and trigamma functions use upward recurrence into the asymptotic
//! region followed by a Bernoulli-number expansion; both reach an absolute
//! error well under 1e-10 on the positive half line.

use crate::error::{Error, Result};

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const ASYMPTOTIC_FROM: f64 = 10.0;

/// Digamma ψ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("digamma requires x > 0, got {x}")));
    }
    Ok(psi(x))
}

/// Trigamma ψ'(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("trigamma requires x > 0, got {x}")));
    }
    Ok(psi1(x))
}

/// Solves ψ(x) = y for x > 0 by Newton's method.
///
/// Starting point follows Minka's piecewise approximation, which keeps the
/// iteration inside the basin of the unique root for every finite `y`.
pub fn inverse_digamma(y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::domain(format!("inverse_digamma requires finite y, got {y}")));
    }
    Ok(inv_psi(y))
}

/// Natural log of the gamma function for x > 0.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

#[inline]
pub(crate) fn psi(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_2k / (2k x^2k), k = 1..6
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    acc + x.ln() - 0.5 * inv - series
}

#[inline]
pub(crate) fn psi1(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0))))));
    acc + series
}

pub(crate) fn inv_psi(y: f64) -> f64 {
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y + EULER_GAMMA)
    };
    for _ in 0..100 {
        let step = (psi(x) - y) / psi1(x);
        let mut next = x - step;
        if next <= 0.0 {
            next = 0.5 * x;
        }
        let done = (next - x).abs() <= 1e-15 * x.max(1e-300);
        x = next;
        if done {
            break;
        }
    }
    x
}
