//! Maximum-likelihood Dirichlet regression with a multivariate-logit mean
//! model and a log-link precision model.
//!
//! One response dimension (the base) has its coefficients fixed at zero and
//! the others are relative log-odds against it. Parameters are packed into a
//! single vector: the mean coefficients of each non-base dimension in turn
//! (all Q rows), then the R precision coefficients.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::dataset::CompositionDataset;
use crate::dirichlet::{fit_moments, sample_log_gammas};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, least_squares, spd_inverse};
use crate::optim::{bfgs, newton_polish, numeric_hessian, BfgsOptions, TraceRow};
use crate::sampler::quantile;
use crate::seeding::{rng_from_seed, split_seed};
use crate::special::{ln_gamma, psi};

/// Required gradient max-norm at a reported optimum.
pub const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MLConfig {
    /// 0-based base dimension.
    pub base: usize,
    /// Random perturbations of the starting point tried after the first.
    pub restarts: usize,
    pub perturbation_sd: f64,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for MLConfig {
    fn default() -> Self {
        Self { base: 0, restarts: 2, perturbation_sd: 0.5, seed: 1, max_iter: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientKind {
    Mean,
    Precision,
}

#[derive(Debug, Clone, Serialize)]
pub struct MLCoefficient {
    pub name: String,
    pub kind: CoefficientKind,
    /// 0-based response dimension; `None` for precision coefficients.
    pub dimension: Option<usize>,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MLFit {
    /// Q×P with the base column identically zero.
    pub beta: DMatrix<f64>,
    pub beta_phi: DVector<f64>,
    pub base: usize,
    /// Covariance of the packed parameter vector; `None` when the Hessian
    /// could not be inverted.
    pub covariance: Option<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub gradient_norm: f64,
    /// Non-base mean coefficients and all precision coefficients with Wald
    /// statistics. Base-dimension coefficients are not listed.
    pub coefficients: Vec<MLCoefficient>,
    pub warnings: Vec<String>,
}

/// Two-sided Wald p-value, `None` unless the standard error is positive.
pub fn wald_test(estimate: f64, std_error: f64) -> Option<f64> {
    (std_error > 0.0 && std_error.is_finite() && estimate.is_finite())
        .then(|| erfc((estimate / std_error).abs() / std::f64::consts::SQRT_2))
}

struct Problem<'a> {
    ds: &'a CompositionDataset,
    base: usize,
    others: Vec<usize>,
}

impl<'a> Problem<'a> {
    fn new(ds: &'a CompositionDataset, base: usize) -> Result<Self> {
        if base >= ds.p() {
            return Err(Error::Config(format!("base dimension {} out of range for {} parts", base + 1, ds.p())));
        }
        Ok(Self { ds, base, others: (0..ds.p()).filter(|&j| j != base).collect() })
    }

    fn len(&self) -> usize {
        self.others.len() * self.ds.q() + self.ds.r()
    }

    fn unpack(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let q = self.ds.q();
        let mut beta = DMatrix::zeros(q, self.ds.p());
        for (m, &j) in self.others.iter().enumerate() {
            for k in 0..q {
                beta[(k, j)] = theta[m * q + k];
            }
        }
        let off = self.others.len() * q;
        let beta_phi = DVector::from_iterator(self.ds.r(), (0..self.ds.r()).map(|k| theta[off + k]));
        (beta, beta_phi)
    }

    fn pack(&self, beta: &DMatrix<f64>, beta_phi: &DVector<f64>) -> DVector<f64> {
        let q = self.ds.q();
        let mut theta = DVector::zeros(self.len());
        for (m, &j) in self.others.iter().enumerate() {
            for k in 0..q {
                theta[m * q + k] = beta[(k, j)] - beta[(k, self.base)];
            }
        }
        let off = self.others.len() * q;
        for k in 0..self.ds.r() {
            theta[off + k] = beta_phi[k];
        }
        theta
    }

    /// Negative log-likelihood and its gradient.
    fn objective(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let (beta, beta_phi) = self.unpack(theta);
        let (ll, gb, gphi) = log_likelihood_parts(self.ds, &beta, &beta_phi, true);
        let q = self.ds.q();
        let mut g = DVector::zeros(self.len());
        for (m, &j) in self.others.iter().enumerate() {
            for k in 0..q {
                g[m * q + k] = gb[(k, j)];
            }
        }
        let off = self.others.len() * q;
        for k in 0..self.ds.r() {
            g[off + k] = gphi[k];
        }
        (-ll, -g)
    }
}

/// Log-likelihood and, when asked, its gradient in `beta` (all P columns,
/// as if each were free) and `beta_phi`.
fn log_likelihood_parts(
    ds: &CompositionDataset,
    beta: &DMatrix<f64>,
    beta_phi: &DVector<f64>,
    with_grad: bool,
) -> (f64, DMatrix<f64>, DVector<f64>) {
    let (n, p) = (ds.n(), ds.p());
    let eta = ds.x() * beta;
    let ln_phi = ds.w() * beta_phi;
    let log_y = ds.log_y();
    let mut ll = 0.0;
    let mut d_eta = DMatrix::zeros(if with_grad { n } else { 0 }, p);
    let mut d_lnphi = DVector::zeros(if with_grad { n } else { 0 });
    let mut ln_mu = vec![0.0; p];
    let mut g = vec![0.0; p];
    for i in 0..n {
        let m = (0..p).map(|j| eta[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..p).map(|j| (eta[(i, j)] - m).exp()).sum::<f64>().ln();
        let phi = ln_phi[i].exp();
        ll += ln_gamma(phi);
        for j in 0..p {
            ln_mu[j] = eta[(i, j)] - lse;
            let a = (ln_mu[j] + ln_phi[i]).exp();
            ll += -ln_gamma(a) + (a - 1.0) * log_y[i * p + j];
            if with_grad {
                g[j] = psi(phi) - psi(a) + log_y[i * p + j];
            }
        }
        if with_grad {
            let mean_g: f64 = (0..p).map(|j| ln_mu[j].exp() * g[j]).sum();
            for j in 0..p {
                let mu = ln_mu[j].exp();
                d_eta[(i, j)] = phi * mu * (g[j] - mean_g);
            }
            d_lnphi[i] = (0..p).map(|j| (ln_mu[j] + ln_phi[i]).exp() * g[j]).sum();
        }
    }
    if !with_grad {
        return (ll, DMatrix::zeros(0, 0), DVector::zeros(0));
    }
    (ll, ds.x().transpose() * d_eta, ds.w().transpose() * d_lnphi)
}

/// Dirichlet log-likelihood with softmax means and log-link precision.
pub fn ml_log_likelihood(ds: &CompositionDataset, beta: &DMatrix<f64>, beta_phi: &DVector<f64>) -> f64 {
    log_likelihood_parts(ds, beta, beta_phi, false).0
}

/// Gradient of `ml_log_likelihood` in every column of `beta` and in
/// `beta_phi`.
pub fn ml_gradient(ds: &CompositionDataset, beta: &DMatrix<f64>, beta_phi: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (_, gb, gp) = log_likelihood_parts(ds, beta, beta_phi, true);
    (gb, gp)
}

/// Row-wise softmax of `x·beta`.
pub fn ml_mean_surface(x: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut mu = x * beta;
    let mut row = vec![0.0; mu.ncols()];
    for i in 0..mu.nrows() {
        row.iter_mut().enumerate().for_each(|(j, v)| *v = mu[(i, j)]);
        crate::links::softmax_in_place(&mut row);
        row.iter().enumerate().for_each(|(j, v)| mu[(i, j)] = *v);
    }
    mu
}

fn starting_point(ds: &CompositionDataset, base: usize) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = (ds.n(), ds.p());
    let floor = 1e-3f64.ln();
    let log_y = ds.log_y();
    let mut beta = DMatrix::zeros(ds.q(), p);
    for j in (0..p).filter(|&j| j != base) {
        let t = DVector::from_iterator(
            n,
            (0..n).map(|i| log_y[i * p + j].max(floor) - log_y[i * p + base].max(floor)),
        );
        beta.set_column(j, &least_squares(ds.x(), &t));
    }
    let a0 = fit_moments(ds.responses()).map(|d| d.alpha0()).unwrap_or(1.0);
    let beta_phi = least_squares(ds.w(), &DVector::from_element(n, a0.ln()));
    (beta, beta_phi)
}

/// Fit plus the optimizer trace of the best attempt, returned even when the
/// fit fails.
pub fn fit_ml_regression_traced(ds: &CompositionDataset, cfg: &MLConfig) -> (Result<MLFit>, Vec<TraceRow>) {
    let prob = match Problem::new(ds, cfg.base) {
        Ok(p) => p,
        Err(e) => return (Err(e), Vec::new()),
    };
    let (b0, p0) = starting_point(ds, cfg.base);
    let theta0 = prob.pack(&b0, &p0);
    let mut rng = rng_from_seed(split_seed(cfg.seed, 0x4d4c));
    let jitter = Normal::new(0.0, cfg.perturbation_sd.max(0.0)).expect("valid sd");
    let mut starts = vec![theta0.clone()];
    for _ in 0..cfg.restarts {
        starts.push(theta0.map(|v| v + jitter.sample(&mut rng)));
    }

    let opts = BfgsOptions { grad_tol: GRAD_TOL * 0.1, max_iter: cfg.max_iter };
    let fg = |t: &DVector<f64>| prob.objective(t);
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut best_trace = Vec::new();
    let mut last_failure: Option<(Error, Vec<TraceRow>)> = None;
    for start in starts {
        let (x, trace) = match bfgs(fg, start, &opts) {
            Ok(m) => (m.x, m.trace),
            // a stalled line search near the optimum is common; polish and judge by the gradient
            Err((e, m)) => {
                if m.value.is_finite() {
                    (m.x, m.trace)
                } else {
                    last_failure = Some((e, m.trace));
                    continue;
                }
            }
        };
        let x = newton_polish(fg, x, GRAD_TOL * 0.01, 20);
        let (f, g) = fg(&x);
        if !(f.is_finite() && g.amax() < GRAD_TOL) {
            let msg = format!("gradient norm {:.3e} at the best point", g.amax());
            last_failure = Some((
                Error::Convergence { iterations: trace.len(), message: msg, last: x.iter().copied().collect() },
                trace,
            ));
            continue;
        }
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((x, f));
            best_trace = trace;
        }
    }
    let Some((theta, f)) = best else {
        let (e, trace) = last_failure.unwrap_or_else(|| {
            (Error::Convergence { iterations: 0, message: "no start converged".into(), last: Vec::new() }, Vec::new())
        });
        return (Err(e), trace);
    };

    let (_, grad) = fg(&theta);
    let hess = numeric_hessian(|t| fg(t).1, &theta, 1e-4);
    let mut warnings = Vec::new();
    let covariance = spd_inverse(&hess).map(|c| (&c + c.transpose()) * 0.5);
    if covariance.is_none() {
        let w = "Hessian is not positive definite at the optimum; inference unavailable".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }
    let (beta, beta_phi) = prob.unpack(&theta);
    let q = ds.q();
    let mut coefficients = Vec::with_capacity(theta.len());
    let names = &ds.mean_design().names;
    for (m, &j) in prob.others.iter().enumerate() {
        for k in 0..q {
            coefficients.push((format!("{}:{}", ds.response_names()[j], names[k]), CoefficientKind::Mean, Some(j), m * q + k));
        }
    }
    let off = prob.others.len() * q;
    for (k, name) in ds.precision_design().names.iter().enumerate() {
        coefficients.push((format!("phi:{name}"), CoefficientKind::Precision, None, off + k));
    }
    let coefficients = coefficients
        .into_iter()
        .map(|(name, kind, dimension, idx)| {
            let estimate = theta[idx];
            let var = covariance.as_ref().map(|c| c[(idx, idx)]);
            let std_error = var.filter(|v| *v > 0.0).map(f64::sqrt);
            let z = std_error.map(|s| estimate / s);
            let p_value = std_error.and_then(|s| wald_test(estimate, s));
            MLCoefficient { name, kind, dimension, estimate, std_error, z, p_value }
        })
        .collect();
    let fit = MLFit {
        beta,
        beta_phi,
        base: cfg.base,
        covariance,
        log_likelihood: -f,
        gradient_norm: grad.amax(),
        coefficients,
        warnings,
    };
    (Ok(fit), best_trace)
}

/// Maximizes the likelihood by BFGS from a least-squares start and
/// `cfg.restarts` perturbed copies, keeping the best converged attempt.
pub fn fit_ml_regression(ds: &CompositionDataset, cfg: &MLConfig) -> Result<MLFit> {
    fit_ml_regression_traced(ds, cfg).0
}

/// Equal-tailed 95% intervals, each n×P.
#[derive(Debug, Clone)]
pub struct MLIntervals {
    pub mean_lower: DMatrix<f64>,
    pub mean_upper: DMatrix<f64>,
    pub predictive_lower: DMatrix<f64>,
    pub predictive_upper: DMatrix<f64>,
}

impl MLFit {
    pub fn mean_surface(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        ml_mean_surface(x, &self.beta)
    }

    pub fn precision_surface(&self, w: &DMatrix<f64>) -> DVector<f64> {
        (w * &self.beta_phi).map(f64::exp)
    }

    /// Mean and predictive intervals by simulation: parameter vectors drawn
    /// from the asymptotic Normal, one Dirichlet response per draw.
    pub fn intervals(&self, ds: &CompositionDataset, n_draws: usize, seed: u64) -> Result<MLIntervals> {
        let cov = self
            .covariance
            .as_ref()
            .ok_or_else(|| Error::Diagnostics("no covariance available for interval simulation".into()))?;
        let chol = cholesky_lower(cov).ok_or_else(|| Error::Diagnostics("covariance is not positive definite".into()))?;
        let prob = Problem::new(ds, self.base)?;
        let theta = prob.pack(&self.beta, &self.beta_phi);
        let (n, p) = (ds.n(), ds.p());
        let mut rng = rng_from_seed(seed);
        let mut mu_draws = vec![Vec::with_capacity(n_draws); n * p];
        let mut y_draws = vec![Vec::with_capacity(n_draws); n * p];
        let mut alpha = vec![0.0; p];
        let mut lg = vec![0.0; p];
        for _ in 0..n_draws {
            let z = DVector::from_iterator(theta.len(), (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)));
            let t = &theta + &chol * z;
            let (b, bp) = prob.unpack(&t);
            let mu = ml_mean_surface(ds.x(), &b);
            let phi = (ds.w() * &bp).map(f64::exp);
            for i in 0..n {
                for j in 0..p {
                    mu_draws[i * p + j].push(mu[(i, j)]);
                    alpha[j] = mu[(i, j)] * phi[i];
                }
                sample_log_gammas(&alpha, &mut rng, &mut lg);
                let m = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = lg.iter().map(|v| (v - m).exp()).sum();
                for j in 0..p {
                    y_draws[i * p + j].push((lg[j] - m).exp() / s);
                }
            }
        }
        let band = |draws: &mut Vec<Vec<f64>>| {
            let mut lo = DMatrix::zeros(n, p);
            let mut hi = DMatrix::zeros(n, p);
            for i in 0..n {
                for j in 0..p {
                    let v = &mut draws[i * p + j];
                    v.sort_by(f64::total_cmp);
                    lo[(i, j)] = quantile(v, 0.025);
                    hi[(i, j)] = quantile(v, 0.975);
                }
            }
            (lo, hi)
        };
        let (mean_lower, mean_upper) = band(&mut mu_draws);
        let (predictive_lower, predictive_upper) = band(&mut y_draws);
        Ok(MLIntervals { mean_lower, mean_upper, predictive_lower, predictive_upper })
    }

    /// Whether `truth` lies in the joint 95% Wald region of the non-base
    /// mean coefficients (chi-square on the packed mean block).
    pub fn covers_jointly(&self, ds: &CompositionDataset, truth: &DMatrix<f64>) -> Option<bool> {
        let cov = self.covariance.as_ref()?;
        let prob = Problem::new(ds, self.base).ok()?;
        let k = prob.others.len() * ds.q();
        let est = prob.pack(&self.beta, &self.beta_phi);
        let tru = prob.pack(truth, &self.beta_phi);
        let d = (est - tru).rows(0, k).into_owned();
        let sub = cov.view((0, 0), (k, k)).into_owned();
        let inv = spd_inverse(&sub)?;
        let stat = (d.transpose() * inv * &d)[(0, 0)];
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let crit = ChiSquared::new(k as f64).ok()?.inverse_cdf(0.95);
        Some(stat <= crit)
    }
}
