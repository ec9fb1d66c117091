//! Approximate per-dimension reference analyses on the logit scale.
//!
//! Each response part is logit-transformed and modeled on its own, either
//! by ordinary least squares or by a linear mixed model with a random
//! intercept per group. Neither respects the unit-sum constraint, so their
//! results are labeled approximate wherever they are written out.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::dataset::CompositionDataset;
use crate::error::{Error, Result};
use crate::linalg::{least_squares, spd_inverse};
use crate::links::inv_logit;

const EM_TOL: f64 = 1e-10;
const EM_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    LogitLm,
    LogitMixed,
}

impl ReferenceKind {
    pub fn label(self) -> &'static str {
        match self {
            ReferenceKind::LogitLm => "logit-lm (approximate)",
            ReferenceKind::LogitMixed => "logit-mixed (approximate)",
        }
    }
}

/// Fit of one logit-transformed response part.
#[derive(Debug, Clone)]
pub struct ReferenceFit {
    pub kind: ReferenceKind,
    pub dimension: usize,
    pub names: Vec<String>,
    pub estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Residual standard deviation.
    pub sigma: f64,
    /// Random-intercept standard deviation (mixed model only).
    pub tau: Option<f64>,
    /// Degrees of freedom for t intervals; `None` means normal intervals.
    pub df: Option<f64>,
}

impl ReferenceFit {
    pub fn std_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(f64::sqrt)
    }

    fn critical(&self, level: f64) -> f64 {
        let p = 0.5 + level / 2.0;
        match self.df {
            Some(df) => StudentsT::new(0.0, 1.0, df).expect("positive df").inverse_cdf(p),
            None => Normal::standard().inverse_cdf(p),
        }
    }

    /// Back-transformed estimate and interval for the part at covariate
    /// row `x`.
    pub fn interval_at(&self, x: &[f64], level: f64) -> (f64, f64, f64) {
        let xv = DVector::from_column_slice(x);
        let eta = xv.dot(&self.estimate);
        let se = (xv.transpose() * &self.covariance * &xv)[(0, 0)].max(0.0).sqrt();
        let c = self.critical(level);
        (inv_logit(eta), inv_logit(eta - c * se), inv_logit(eta + c * se))
    }
}

fn logit_column(ds: &CompositionDataset, j: usize) -> DVector<f64> {
    let p = ds.p();
    // logit(y) = ln y - ln(1 - y), with ln(1 - y) from the other parts
    DVector::from_iterator(
        ds.n(),
        ds.responses().iter().map(|c| {
            let ly = c.log_parts()[j];
            let rest: f64 = (0..p).filter(|&k| k != j).map(|k| c.parts()[k]).sum();
            ly - rest.ln()
        }),
    )
}

/// Ordinary least squares of each logit part on the mean design.
pub fn logit_lm(ds: &CompositionDataset) -> Result<Vec<ReferenceFit>> {
    let x = ds.x();
    let (n, q) = (ds.n(), ds.q());
    if n <= q {
        return Err(Error::DegenerateData(format!("{n} rows leave no residual degrees of freedom for {q} columns")));
    }
    let xtx_inv = spd_inverse(&(x.transpose() * x))
        .ok_or_else(|| Error::DegenerateData("mean design cross-product is singular".into()))?;
    (0..ds.p())
        .map(|j| {
            let y = logit_column(ds, j);
            let b = least_squares(x, &y);
            let resid = &y - x * &b;
            let s2 = resid.norm_squared() / (n - q) as f64;
            Ok(ReferenceFit {
                kind: ReferenceKind::LogitLm,
                dimension: j,
                names: ds.mean_design().names.clone(),
                estimate: b,
                covariance: &xtx_inv * s2,
                sigma: s2.sqrt(),
                tau: None,
                df: Some((n - q) as f64),
            })
        })
        .collect()
}

/// Maximum-likelihood random-intercept model per logit part, fitted by EM.
pub fn logit_mixed(ds: &CompositionDataset) -> Result<Vec<ReferenceFit>> {
    let group = ds
        .group()
        .ok_or_else(|| Error::Config("the mixed reference model needs a group column".into()))?;
    let g = ds.n_groups();
    (0..ds.p())
        .map(|j| {
            let y = logit_column(ds, j);
            let (b, s2, t2, cov) = fit_random_intercept(ds.x(), &y, group, g)?;
            Ok(ReferenceFit {
                kind: ReferenceKind::LogitMixed,
                dimension: j,
                names: ds.mean_design().names.clone(),
                estimate: b,
                covariance: cov,
                sigma: s2.sqrt(),
                tau: Some(t2.sqrt()),
                df: None,
            })
        })
        .collect()
}

/// EM for y = Xb + u_g + e with u ~ N(0, t2), e ~ N(0, s2). Returns
/// (b, s2, t2, cov(b)) with the GLS covariance at the estimates.
pub(crate) fn fit_random_intercept(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    group: &[usize],
    g: usize,
) -> Result<(DVector<f64>, f64, f64, DMatrix<f64>)> {
    let n = y.len();
    let mut size = vec![0.0; g];
    group.iter().for_each(|&k| size[k] += 1.0);
    let mut b = least_squares(x, y);
    let r0 = y - x * &b;
    let mut s2 = (r0.norm_squared() / n as f64).max(1e-8);
    let mut t2 = s2 / 2.0;
    let mut m = vec![0.0; g];
    let mut v = vec![0.0; g];
    let mut converged = false;
    for _ in 0..EM_MAX_ITER {
        let resid = y - x * &b;
        let mut sums = vec![0.0; g];
        group.iter().zip(resid.iter()).for_each(|(&k, r)| sums[k] += r);
        for k in 0..g {
            v[k] = 1.0 / (size[k] / s2 + 1.0 / t2);
            m[k] = v[k] * sums[k] / s2;
        }
        let adj = DVector::from_iterator(n, (0..n).map(|i| y[i] - m[group[i]]));
        let b_new = least_squares(x, &adj);
        let fit = x * &b_new;
        let s2_new = (0..n)
            .map(|i| (y[i] - fit[i] - m[group[i]]).powi(2) + v[group[i]])
            .sum::<f64>()
            / n as f64;
        let t2_new = (0..g).map(|k| m[k] * m[k] + v[k]).sum::<f64>() / g as f64;
        let change = (&b_new - &b).amax().max((s2_new - s2).abs() / s2).max((t2_new - t2).abs() / t2.max(1e-6 * s2));
        b = b_new;
        s2 = s2_new.max(1e-12);
        t2 = t2_new.max(1e-12);
        if change < EM_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            iterations: EM_MAX_ITER,
            message: "random-intercept EM did not settle".into(),
            last: b.iter().copied().chain([s2, t2]).collect(),
        });
    }
    // X' V^-1 X with V_g^-1 = (I - c_g 11') / s2, c_g = t2 / (s2 + n_g t2)
    let q = x.ncols();
    let mut col_sums = DMatrix::<f64>::zeros(g, q);
    for (i, &k) in group.iter().enumerate() {
        for c in 0..q {
            col_sums[(k, c)] += x[(i, c)];
        }
    }
    let mut info = x.transpose() * x;
    for k in 0..g {
        let c = t2 / (s2 + size[k] * t2);
        let sk = col_sums.row(k).transpose();
        info -= &sk * sk.transpose() * c;
    }
    info /= s2;
    let cov = spd_inverse(&info).ok_or_else(|| Error::DegenerateData("mixed-model information is singular".into()))?;
    Ok((b, s2, t2, cov))
}
