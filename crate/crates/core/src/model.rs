//! The penalized hierarchical Dirichlet regression model.
//!
//! Every response dimension has its own logit-linear mean model with no
//! reference category, so the fitted means of one observation need not sum
//! to one. The sum-to-one restriction is replaced by a soft constraint
//!
//! ```text
//! y_i            ~ Dirichlet(exp(log_alpha_i))
//! log_alpha_ij   ~ N(ln mu_ij + ln phi_i, 1/xi_star)
//! logit(mu_ij)   = x_i . beta_j (+ u_{g(i) j})
//! ln phi_i       = w_i . beta_phi
//! sum_j mu_ij    ~ N(1, 1/xi)
//! beta, beta_phi ~ N(0, prior_beta_variance)
//! xi ~ Exp(mean 1000/P),  xi_star ~ Exp(mean 100/P)
//! u_gj ~ N(0, sigma_uj^2),  sigma_uj ~ Exp(mean sigma_u_prior_mean)
//! ```
//!
//! and draws are renormalized afterwards with [`apply_corrections`].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::CompositionDataset;
use crate::dirichlet::dirichlet_log_density;
use crate::error::{Error, Result};
use crate::links::{inv_logit, ln_inv_logit};

/// Regression coefficients, one mean column per response dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    /// Q×P mean coefficients.
    pub beta: DMatrix<f64>,
    /// R precision coefficients.
    pub beta_phi: DVector<f64>,
    /// G×P random intercepts on the logit scale.
    pub u: Option<DMatrix<f64>>,
    /// Per-dimension random-intercept standard deviations.
    pub sigma_u: Option<Vec<f64>>,
}

impl CoefficientSet {
    pub fn zeros(q: usize, p: usize, r: usize) -> Self {
        Self {
            beta: DMatrix::zeros(q, p),
            beta_phi: DVector::zeros(r),
            u: None,
            sigma_u: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.iter().chain(self.beta_phi.iter()).all(|v| v.is_finite()) {
            return Err(Error::domain("coefficients must be finite"));
        }
        if let Some(u) = &self.u {
            if !u.iter().all(|v| v.is_finite()) {
                return Err(Error::domain("random effects must be finite"));
            }
        }
        if let Some(s) = &self.sigma_u {
            if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::domain("random-effect scales must be positive"));
            }
        }
        Ok(())
    }
}

/// Latent log-concentrations and the two penalty precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// n×P.
    pub log_alpha: DMatrix<f64>,
    pub xi: f64,
    pub xi_star: f64,
}

impl LatentState {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) || !(self.xi_star > 0.0) || !self.xi.is_finite() || !self.xi_star.is_finite() {
            return Err(Error::domain(format!(
                "penalty precisions must be positive, got xi={} xi_star={}",
                self.xi, self.xi_star
            )));
        }
        if self.log_alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("log_alpha must be finite"));
        }
        Ok(())
    }
}

/// Prior settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Variance of the Normal prior on every beta and beta_phi.
    pub prior_beta_variance: f64,
    /// Prior mean of xi; `None` means 1000/P.
    pub xi_prior_mean: Option<f64>,
    /// Prior mean of xi_star; `None` means 100/P.
    pub xi_star_prior_mean: Option<f64>,
    pub random_effects: bool,
    pub sigma_u_prior_mean: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prior_beta_variance: 10_000.0,
            xi_prior_mean: None,
            xi_star_prior_mean: None,
            random_effects: false,
            sigma_u_prior_mean: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn xi_mean(&self, p: usize) -> f64 {
        self.xi_prior_mean.unwrap_or(1000.0 / p as f64)
    }

    pub fn xi_star_mean(&self, p: usize) -> f64 {
        self.xi_star_prior_mean.unwrap_or(100.0 / p as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            Some(self.prior_beta_variance),
            self.xi_prior_mean,
            self.xi_star_prior_mean,
            Some(self.sigma_u_prior_mean),
        ];
        if all.iter().flatten().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("prior settings must be positive".into()));
        }
        Ok(())
    }
}

/// Per-observation logit-linear predictors `x_i . beta_j + u_{g(i) j}`.
pub fn linear_predictor(
    x: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    random: Option<(&DMatrix<f64>, &[usize])>,
) -> Result<DMatrix<f64>> {
    if x.ncols() != beta.nrows() {
        return Err(Error::dim(format!(
            "design has {} columns but beta has {} rows",
            x.ncols(),
            beta.nrows()
        )));
    }
    let mut eta = x * beta;
    if let Some((u, group)) = random {
        if group.len() != x.nrows() || u.ncols() != beta.ncols() {
            return Err(Error::dim("random effects do not match the data"));
        }
        for (i, &g) in group.iter().enumerate() {
            if g >= u.nrows() {
                return Err(Error::dim(format!("group index {g} has no random effect row")));
            }
            for j in 0..eta.ncols() {
                eta[(i, j)] += u[(g, j)];
            }
        }
    }
    Ok(eta)
}

/// Raw (unnormalized) means `inv_logit(x_i . beta_j + u)`.
pub fn mean_surface(
    x: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    random: Option<(&DMatrix<f64>, &[usize])>,
) -> Result<DMatrix<f64>> {
    Ok(linear_predictor(x, beta, random)?.map(inv_logit))
}

/// Precisions `exp(w_i . beta_phi)`.
pub fn precision_surface(w: &DMatrix<f64>, beta_phi: &DVector<f64>) -> Result<DVector<f64>> {
    if w.ncols() != beta_phi.len() {
        return Err(Error::dim(format!(
            "precision design has {} columns but beta_phi has {} entries",
            w.ncols(),
            beta_phi.len()
        )));
    }
    Ok((w * beta_phi).map(f64::exp))
}

fn random_part<'a>(
    ds: &'a CompositionDataset,
    coeffs: &'a CoefficientSet,
    config: &ModelConfig,
) -> Result<Option<(&'a DMatrix<f64>, &'a [usize])>> {
    if !config.random_effects {
        return Ok(None);
    }
    let group = ds
        .group()
        .ok_or_else(|| Error::Config("random effects need a grouping column".into()))?;
    let u = coeffs
        .u
        .as_ref()
        .ok_or_else(|| Error::domain("random effects enabled but no u supplied"))?;
    if u.nrows() != ds.n_groups() {
        return Err(Error::dim(format!("u has {} rows for {} groups", u.nrows(), ds.n_groups())));
    }
    Ok(Some((u, group)))
}

fn check_shapes(ds: &CompositionDataset, coeffs: &CoefficientSet, latent: &LatentState) -> Result<()> {
    if coeffs.beta.shape() != (ds.q(), ds.p()) {
        return Err(Error::dim(format!("beta is {:?}, expected {:?}", coeffs.beta.shape(), (ds.q(), ds.p()))));
    }
    if coeffs.beta_phi.len() != ds.r() {
        return Err(Error::dim("beta_phi length does not match the precision design"));
    }
    if latent.log_alpha.shape() != (ds.n(), ds.p()) {
        return Err(Error::dim("log_alpha shape does not match the data"));
    }
    Ok(())
}

#[inline]
pub(crate) fn normal_ln_pdf(x: f64, mean: f64, precision: f64) -> f64 {
    0.5 * (precision / (2.0 * PI)).ln() - 0.5 * precision * (x - mean).powi(2)
}

#[inline]
pub(crate) fn exponential_ln_pdf(x: f64, mean: f64) -> f64 {
    -mean.ln() - x / mean
}

/// Log of the penalized posterior density, including all normalizing
/// constants of its Normal and Exponential factors.
pub fn log_penalized_posterior(
    ds: &CompositionDataset,
    coeffs: &CoefficientSet,
    latent: &LatentState,
    config: &ModelConfig,
) -> Result<f64> {
    latent.validate()?;
    coeffs.validate()?;
    config.validate()?;
    check_shapes(ds, coeffs, latent)?;
    let (n, p) = (ds.n(), ds.p());
    let random = random_part(ds, coeffs, config)?;
    let eta = linear_predictor(ds.x(), &coeffs.beta, random)?;
    let ln_phi = ds.w() * &coeffs.beta_phi;
    let log_y = ds.log_y();

    let mut lp = 0.0;
    let mut alpha = vec![0.0; p];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..p {
            let la = latent.log_alpha[(i, j)];
            alpha[j] = la.exp();
            row_sum += inv_logit(eta[(i, j)]);
            lp += normal_ln_pdf(la, ln_inv_logit(eta[(i, j)]) + ln_phi[i], latent.xi_star);
        }
        lp += dirichlet_log_density(&alpha, &log_y[i * p..(i + 1) * p]);
        lp += normal_ln_pdf(row_sum, 1.0, latent.xi);
    }
    let beta_prec = 1.0 / config.prior_beta_variance;
    lp += coeffs
        .beta
        .iter()
        .chain(coeffs.beta_phi.iter())
        .map(|b| normal_ln_pdf(*b, 0.0, beta_prec))
        .sum::<f64>();
    lp += exponential_ln_pdf(latent.xi, config.xi_mean(p));
    lp += exponential_ln_pdf(latent.xi_star, config.xi_star_mean(p));
    if let Some((u, _)) = random {
        let sigma = coeffs
            .sigma_u
            .as_ref()
            .ok_or_else(|| Error::domain("random effects enabled but no sigma_u supplied"))?;
        if sigma.len() != p {
            return Err(Error::dim("sigma_u needs one entry per dimension"));
        }
        for (j, &s) in sigma.iter().enumerate() {
            lp += u.column(j).iter().map(|v| normal_ln_pdf(*v, 0.0, 1.0 / (s * s))).sum::<f64>();
            lp += exponential_ln_pdf(s, config.sigma_u_prior_mean);
        }
    }
    Ok(lp)
}

/// Analytic gradient of [`log_penalized_posterior`] with respect to `beta`
/// (Q×P) and `beta_phi`.
pub fn gradient_coefficients(
    ds: &CompositionDataset,
    coeffs: &CoefficientSet,
    latent: &LatentState,
    config: &ModelConfig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    latent.validate()?;
    check_shapes(ds, coeffs, latent)?;
    let (n, p) = (ds.n(), ds.p());
    let random = random_part(ds, coeffs, config)?;
    let eta = linear_predictor(ds.x(), &coeffs.beta, random)?;
    let ln_phi = ds.w() * &coeffs.beta_phi;

    let mut g_eta = DMatrix::zeros(n, p);
    let mut g_lnphi = DVector::zeros(n);
    for i in 0..n {
        let row_sum: f64 = (0..p).map(|j| inv_logit(eta[(i, j)])).sum();
        let dev = row_sum - 1.0;
        for j in 0..p {
            let mu = inv_logit(eta[(i, j)]);
            let resid = latent.log_alpha[(i, j)] - ln_inv_logit(eta[(i, j)]) - ln_phi[i];
            g_eta[(i, j)] = latent.xi_star * resid * (1.0 - mu) - latent.xi * dev * mu * (1.0 - mu);
            g_lnphi[i] += latent.xi_star * resid;
        }
    }
    let inv_var = 1.0 / config.prior_beta_variance;
    let g_beta = ds.x().transpose() * g_eta - &coeffs.beta * inv_var;
    let g_phi = ds.w().transpose() * g_lnphi - &coeffs.beta_phi * inv_var;
    Ok((g_beta, g_phi))
}

/// Renormalizes one draw of raw means and forms the matching concentrations:
/// `mu_adj = mu / rowsum(mu)`, `alpha_adj = mu_adj * phi`.
pub fn apply_corrections(mu: &DMatrix<f64>, phi: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if mu.nrows() != phi.len() {
        return Err(Error::dim("one precision per row of means is required"));
    }
    if mu.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
        return Err(Error::domain("raw means must lie in (0, 1)"));
    }
    if phi.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::domain("precisions must be positive"));
    }
    let mut mu_adj = mu.clone();
    let mut alpha_adj = mu.clone();
    for i in 0..mu.nrows() {
        let s: f64 = mu.row(i).sum();
        for j in 0..mu.ncols() {
            mu_adj[(i, j)] = mu[(i, j)] / s;
            alpha_adj[(i, j)] = mu_adj[(i, j)] * phi[i];
        }
    }
    Ok((mu_adj, alpha_adj))
}
