//! One Metropolis-within-Gibbs chain.
//!
//! Parameters and derived quantities live in flat row-major buffers so each
//! block update only touches the rows it changes. Coefficient blocks get two
//! random-walk moves per sweep: a centered move that holds `log_alpha` fixed,
//! and a non-centered move that shifts `log_alpha` along with the mean or
//! precision it is centered on. The latter leaves the latent residuals
//! unchanged, so it mixes well when `xi_star` is large.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};

use super::{BlockAcceptance, Draw, FrozenBlocks, SamplerConfig};
use crate::dataset::CompositionDataset;
use crate::linalg::{cholesky_lower, least_squares};
use crate::links::{inv_logit, ln_inv_logit, logit};
use crate::model::{apply_corrections, CoefficientSet, LatentState, ModelConfig};
use crate::special::ln_gamma;

const LOGIT_CLAMP: (f64, f64) = (0.001, 0.999);
const RE_SCALE_FLOOR: f64 = 0.05;

/// Random-walk scale with Robbins–Monro adaptation on the log scale.
#[derive(Debug, Clone)]
struct Adaptive {
    log_scale: f64,
    window_acc: u32,
    window_tries: u32,
    acc: u64,
    tries: u64,
}

impl Adaptive {
    fn new(scale: f64) -> Self {
        Self { log_scale: scale.ln(), window_acc: 0, window_tries: 0, acc: 0, tries: 0 }
    }

    #[inline]
    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    #[inline]
    fn record(&mut self, accepted: bool) {
        self.window_tries += 1;
        self.tries += 1;
        if accepted {
            self.window_acc += 1;
            self.acc += 1;
        }
    }

    fn adapt(&mut self, target: f64, batch: usize) {
        if self.window_tries > 0 {
            let rate = self.window_acc as f64 / self.window_tries as f64;
            let gain = 3.0 / ((batch + 1) as f64).sqrt();
            self.log_scale = (self.log_scale + gain * (rate - target)).clamp(-12.0, 3.0);
        }
        self.window_acc = 0;
        self.window_tries = 0;
    }

    fn reset_counts(&mut self) {
        self.acc = 0;
        self.tries = 0;
        self.window_acc = 0;
        self.window_tries = 0;
    }
}

#[inline]
fn accept<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

#[inline]
fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) struct Chain<'a> {
    model: &'a ModelConfig,
    frozen: FrozenBlocks,
    noncentered: bool,
    n: usize,
    p: usize,
    q: usize,
    r: usize,
    g: usize,
    x: Vec<f64>,
    w: Vec<f64>,
    log_y: &'a [f64],
    group: Vec<usize>,
    group_rows: Vec<Vec<usize>>,
    re: bool,
    beta_chol: Vec<f64>,
    phi_chol: Vec<f64>,

    beta: Vec<f64>,
    beta_phi: Vec<f64>,
    u: Vec<f64>,
    sigma_u: Vec<f64>,
    la: Vec<f64>,
    xi: f64,
    xi_star: f64,

    eta: Vec<f64>,
    ln_mu: Vec<f64>,
    mu: Vec<f64>,
    row_sum: Vec<f64>,
    ln_phi: Vec<f64>,
    alpha: Vec<f64>,
    lg_alpha: Vec<f64>,
    alpha0: Vec<f64>,
    lg_alpha0: Vec<f64>,

    beta_c: Vec<Adaptive>,
    beta_nc: Vec<Adaptive>,
    phi_c: Adaptive,
    phi_nc: Adaptive,
    u_c: Vec<Adaptive>,
    u_nc: Vec<Adaptive>,
    sig_c: Vec<Adaptive>,
    sig_s: Vec<Adaptive>,
    sig_joint: Vec<Adaptive>,
    la_step: Vec<Adaptive>,
    xs_scale: Adaptive,

    scratch2: Vec<f64>,
    scratch3: Vec<f64>,
    scratch4: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Lower Cholesky factor of `(AᵀA)⁻¹`, row-major; the natural shape of the
/// posterior of a coefficient block acting through design `A`.
fn proposal_factor(a: &DMatrix<f64>) -> Vec<f64> {
    let k = a.ncols();
    let gram = a.transpose() * a;
    let cov = crate::linalg::spd_inverse(&gram).unwrap_or_else(|| DMatrix::identity(k, k));
    row_major(&cholesky_lower(&cov).unwrap_or_else(|| DMatrix::identity(k, k)))
}

/// Starting values: per-dimension least squares on clamped logits for the
/// means, group means of its residuals for random effects, the moments
/// precision for the intercept, latents at their means and penalty
/// precisions at their prior means.
pub(crate) fn default_init(ds: &CompositionDataset, model: &ModelConfig) -> (CoefficientSet, LatentState) {
    let (n, p) = (ds.n(), ds.p());
    let mut beta = DMatrix::zeros(ds.q(), p);
    let mut resid = DMatrix::<f64>::zeros(n, p);
    for j in 0..p {
        let target = DVector::from_iterator(
            n,
            ds.responses().iter().map(|y| {
                logit(y.parts()[j].clamp(LOGIT_CLAMP.0, LOGIT_CLAMP.1)).expect("clamped into (0,1)")
            }),
        );
        let b = least_squares(ds.x(), &target);
        resid.set_column(j, &(&target - ds.x() * &b));
        beta.set_column(j, &b);
    }
    let alpha0 = crate::dirichlet::fit_moments(ds.responses())
        .map(|d| d.alpha0())
        .unwrap_or(1.0);
    let beta_phi = least_squares(ds.w(), &DVector::from_element(n, alpha0.ln()));
    let (u, sigma_u) = match (model.random_effects, ds.group()) {
        (true, Some(group)) => {
            // group means of the least-squares residuals
            let g = ds.n_groups();
            let mut u = DMatrix::<f64>::zeros(g, p);
            let mut count = vec![0.0; g];
            for (i, &k) in group.iter().enumerate() {
                count[k] += 1.0;
                for j in 0..p {
                    u[(k, j)] += resid[(i, j)];
                }
            }
            for k in 0..g {
                for j in 0..p {
                    u[(k, j)] /= count[k];
                }
            }
            let sigma = (0..p)
                .map(|j| (u.column(j).norm_squared() / g as f64).sqrt().max(RE_SCALE_FLOOR))
                .collect();
            (Some(u), Some(sigma))
        }
        (true, None) => (Some(DMatrix::zeros(0, p)), Some(vec![model.sigma_u_prior_mean; p])),
        _ => (None, None),
    };
    let coeffs = CoefficientSet { beta, beta_phi, u, sigma_u };
    let random = coeffs.u.as_ref().zip(ds.group());
    let eta = crate::model::linear_predictor(ds.x(), &coeffs.beta, random).expect("shapes checked");
    let ln_phi = ds.w() * &coeffs.beta_phi;
    let log_alpha = DMatrix::from_fn(n, p, |i, j| ln_inv_logit(eta[(i, j)]) + ln_phi[i]);
    let latent = LatentState {
        log_alpha,
        xi: model.xi_mean(p),
        xi_star: model.xi_star_mean(p),
    };
    (coeffs, latent)
}

impl<'a> Chain<'a> {
    pub(crate) fn new(
        ds: &'a CompositionDataset,
        model: &'a ModelConfig,
        frozen: FrozenBlocks,
        noncentered: bool,
        coeffs: &CoefficientSet,
        latent: &LatentState,
    ) -> Self {
        let (n, p, q, r) = (ds.n(), ds.p(), ds.q(), ds.r());
        let re = model.random_effects;
        let g = if re { ds.n_groups() } else { 0 };
        let group = if re { ds.group().map(<[usize]>::to_vec).unwrap_or_default() } else { Vec::new() };
        let mut group_rows = vec![Vec::new(); g];
        for (i, &k) in group.iter().enumerate() {
            group_rows[k].push(i);
        }
        let u = match (&coeffs.u, re) {
            (Some(u), true) => row_major(u),
            _ => vec![0.0; g * p],
        };
        let sigma_u = match (&coeffs.sigma_u, re) {
            (Some(s), true) => s.clone(),
            _ => vec![model.sigma_u_prior_mean; if re { p } else { 0 }],
        };
        let la = row_major(&latent.log_alpha);
        let mut chain = Self {
            model,
            frozen,
            noncentered,
            n,
            p,
            q,
            r,
            g,
            x: row_major(ds.x()),
            w: row_major(ds.w()),
            log_y: ds.log_y(),
            group,
            group_rows,
            re,
            beta_chol: proposal_factor(ds.x()),
            phi_chol: proposal_factor(ds.w()),
            beta: row_major(&coeffs.beta),
            beta_phi: coeffs.beta_phi.iter().copied().collect(),
            u,
            sigma_u,
            alpha: la.iter().map(|v| v.exp()).collect(),
            la,
            xi: latent.xi,
            xi_star: latent.xi_star,
            eta: vec![0.0; n * p],
            ln_mu: vec![0.0; n * p],
            mu: vec![0.0; n * p],
            row_sum: vec![0.0; n],
            ln_phi: vec![0.0; n],
            lg_alpha: vec![0.0; n * p],
            alpha0: vec![0.0; n],
            lg_alpha0: vec![0.0; n],
            beta_c: vec![Adaptive::new(1.0); p],
            beta_nc: vec![Adaptive::new(1.0); p],
            phi_c: Adaptive::new(0.5),
            phi_nc: Adaptive::new(1.0),
            u_c: vec![Adaptive::new(0.3); g],
            u_nc: vec![Adaptive::new(0.3); g],
            sig_c: vec![Adaptive::new(0.3); if re { p } else { 0 }],
            sig_s: vec![Adaptive::new(0.3); if re { p } else { 0 }],
            sig_joint: vec![Adaptive::new(0.3); if re { p } else { 0 }],
            la_step: vec![Adaptive::new(0.5); n * p],
            xs_scale: Adaptive::new(0.05),
            scratch2: vec![0.0; n],
            scratch3: vec![0.0; n * p],
            scratch4: vec![0.0; n * p],
        };
        chain.refresh();
        chain
    }

    fn refresh(&mut self) {
        let (n, p, q, r) = (self.n, self.p, self.q, self.r);
        for i in 0..n {
            let mut lp = 0.0;
            for k in 0..r {
                lp += self.w[i * r + k] * self.beta_phi[k];
            }
            self.ln_phi[i] = lp;
            let mut rs = 0.0;
            let mut a0 = 0.0;
            for j in 0..p {
                let mut e = 0.0;
                for k in 0..q {
                    e += self.x[i * q + k] * self.beta[k * p + j];
                }
                if self.re {
                    e += self.u[self.group[i] * p + j];
                }
                let idx = i * p + j;
                self.eta[idx] = e;
                self.ln_mu[idx] = ln_inv_logit(e);
                self.mu[idx] = inv_logit(e);
                rs += self.mu[idx];
                self.alpha[idx] = self.la[idx].exp();
                self.lg_alpha[idx] = ln_gamma(self.alpha[idx]);
                a0 += self.alpha[idx];
            }
            self.row_sum[i] = rs;
            self.alpha0[i] = a0;
            self.lg_alpha0[i] = ln_gamma(a0);
        }
    }

    /// Whether every cached quantity at the current state is finite.
    pub(crate) fn is_finite_start(&self) -> bool {
        let all = [&self.eta, &self.la, &self.alpha, &self.lg_alpha, &self.lg_alpha0, &self.ln_phi];
        all.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.alpha.iter().all(|a| *a > 0.0)
            && self.xi > 0.0
            && self.xi_star > 0.0
    }

    fn proposal<R: Rng + ?Sized>(rng: &mut R, chol: &[f64], dim: usize, scale: f64, out: &mut [f64]) {
        let z: Vec<f64> = (0..dim).map(|_| std_normal(rng)).collect();
        for a in 0..dim {
            let mut s = 0.0;
            for b in 0..=a {
                s += chol[a * dim + b] * z[b];
            }
            out[a] = scale * s;
        }
    }

    #[inline]
    fn la_resid(&self, idx: usize, i: usize) -> f64 {
        self.la[idx] - self.ln_mu[idx] - self.ln_phi[i]
    }

    pub(crate) fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        // moves that carry ln α along must respect a frozen ln α
        let carry = self.noncentered && !self.frozen.log_alpha;
        if !self.frozen.beta {
            for j in 0..self.p {
                self.beta_centered(j, rng);
                if carry {
                    self.beta_noncentered(j, rng);
                }
            }
        }
        if !self.frozen.beta_phi {
            self.beta_phi_centered(rng);
            if carry {
                self.beta_phi_noncentered(rng);
            }
        }
        if self.re && !self.frozen.random_effects {
            for g in 0..self.g {
                self.u_move(g, false, rng);
                if !self.frozen.log_alpha {
                    self.u_move(g, true, rng);
                }
            }
            for j in 0..self.p {
                self.sigma_centered(j, rng);
                self.sigma_scaling(j, rng);
                if self.noncentered {
                    self.sigma_joint(j, rng);
                }
            }
        }
        if !self.frozen.log_alpha {
            for idx in 0..self.n * self.p {
                self.la_single(idx, rng);
            }
        }
        if !self.frozen.xi {
            let (shape, rate) = self.xi_conditional();
            self.xi = Gamma::new(shape, 1.0 / rate).expect("valid gamma").sample(rng);
        }
        if !self.frozen.log_alpha && !self.frozen.xi_star && self.noncentered {
            self.xi_star_scaling(rng);
        }
        if !self.frozen.xi_star {
            let (shape, rate) = self.xi_star_conditional();
            self.xi_star = Gamma::new(shape, 1.0 / rate).expect("valid gamma").sample(rng);
        }
    }

    pub(crate) fn xi_conditional(&self) -> (f64, f64) {
        let ss: f64 = self.row_sum.iter().map(|s| (s - 1.0).powi(2)).sum();
        super::gamma_conditional(self.n, ss, self.model.xi_mean(self.p))
    }

    pub(crate) fn xi_star_conditional(&self) -> (f64, f64) {
        let mut ss = 0.0;
        for i in 0..self.n {
            for j in 0..self.p {
                ss += self.la_resid(i * self.p + j, i).powi(2);
            }
        }
        super::gamma_conditional(self.n * self.p, ss, self.model.xi_star_mean(self.p))
    }

    fn beta_prior_delta(&self, old: &[f64], step: &[f64]) -> f64 {
        let v = self.model.prior_beta_variance;
        old.iter()
            .zip(step)
            .map(|(b, d)| -((b + d).powi(2) - b * b) / (2.0 * v))
            .sum()
    }

    /// Change in the Dirichlet log-likelihood of row `i` when entry `idx`
    /// moves to concentration `a_new`.
    #[inline]
    fn dir_delta_single(&self, i: usize, idx: usize, a_new: f64) -> (f64, f64, f64) {
        let a0_new = self.alpha0[i] - self.alpha[idx] + a_new;
        let lg_new = ln_gamma(a_new);
        let lg0_new = ln_gamma(a0_new);
        let d = lg0_new - self.lg_alpha0[i] - lg_new
            + self.lg_alpha[idx]
            + (a_new - self.alpha[idx]) * self.log_y[idx];
        (d, lg_new, lg0_new)
    }

    fn beta_centered<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let (n, p, q) = (self.n, self.p, self.q);
        let mut step = vec![0.0; q];
        Self::proposal(rng, &self.beta_chol, q, self.beta_c[j].scale(), &mut step);
        let old: Vec<f64> = (0..q).map(|k| self.beta[k * p + j]).collect();
        let mut delta = self.beta_prior_delta(&old, &step);
        for i in 0..n {
            let idx = i * p + j;
            let de: f64 = (0..q).map(|k| self.x[i * q + k] * step[k]).sum();
            let e = self.eta[idx] + de;
            let ln_mu = ln_inv_logit(e);
            let mu = inv_logit(e);
            let r_old = self.la_resid(idx, i);
            let r_new = self.la[idx] - ln_mu - self.ln_phi[i];
            let rs_new = self.row_sum[i] - self.mu[idx] + mu;
            delta += -0.5 * self.xi_star * (r_new * r_new - r_old * r_old)
                - 0.5 * self.xi * ((rs_new - 1.0).powi(2) - (self.row_sum[i] - 1.0).powi(2));
            self.scratch2[i] = e;
        }
        let ok = accept(rng, delta);
        self.beta_c[j].record(ok);
        if ok {
            for k in 0..q {
                self.beta[k * p + j] += step[k];
            }
            for i in 0..n {
                self.set_eta(i, j, self.scratch2[i]);
            }
        }
    }

    #[inline]
    fn set_eta(&mut self, i: usize, j: usize, e: f64) {
        let idx = i * self.p + j;
        let mu = inv_logit(e);
        self.row_sum[i] += mu - self.mu[idx];
        self.eta[idx] = e;
        self.mu[idx] = mu;
        self.ln_mu[idx] = ln_inv_logit(e);
    }

    #[inline]
    fn set_la(&mut self, i: usize, idx: usize, la: f64, a: f64, lg: f64, lg0: f64) {
        self.alpha0[i] += a - self.alpha[idx];
        self.la[idx] = la;
        self.alpha[idx] = a;
        self.lg_alpha[idx] = lg;
        self.lg_alpha0[i] = lg0;
    }

    fn beta_noncentered<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let (n, p, q) = (self.n, self.p, self.q);
        let mut step = vec![0.0; q];
        Self::proposal(rng, &self.beta_chol, q, self.beta_nc[j].scale(), &mut step);
        let old: Vec<f64> = (0..q).map(|k| self.beta[k * p + j]).collect();
        let mut delta = self.beta_prior_delta(&old, &step);
        for i in 0..n {
            let idx = i * p + j;
            let de: f64 = (0..q).map(|k| self.x[i * q + k] * step[k]).sum();
            let e = self.eta[idx] + de;
            let mu = inv_logit(e);
            let la_new = self.la[idx] + ln_inv_logit(e) - self.ln_mu[idx];
            let a_new = la_new.exp();
            let (dd, _, _) = self.dir_delta_single(i, idx, a_new);
            let rs_new = self.row_sum[i] - self.mu[idx] + mu;
            delta += dd - 0.5 * self.xi * ((rs_new - 1.0).powi(2) - (self.row_sum[i] - 1.0).powi(2));
            self.scratch2[i] = e;
            self.scratch3[i] = la_new;
        }
        let ok = accept(rng, delta);
        self.beta_nc[j].record(ok);
        if ok {
            for k in 0..q {
                self.beta[k * p + j] += step[k];
            }
            for i in 0..n {
                let idx = i * p + j;
                let la_new = self.scratch3[i];
                let a_new = la_new.exp();
                let (_, lg, lg0) = self.dir_delta_single(i, idx, a_new);
                self.set_la(i, idx, la_new, a_new, lg, lg0);
                self.set_eta(i, j, self.scratch2[i]);
            }
        }
    }

    fn beta_phi_centered<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (n, p, r) = (self.n, self.p, self.r);
        let mut step = vec![0.0; r];
        Self::proposal(rng, &self.phi_chol, r, self.phi_c.scale(), &mut step);
        let mut delta = self.beta_prior_delta(&self.beta_phi.clone(), &step);
        for i in 0..n {
            let d: f64 = (0..r).map(|k| self.w[i * r + k] * step[k]).sum();
            self.scratch2[i] = d;
            for j in 0..p {
                let r_old = self.la_resid(i * p + j, i);
                let r_new = r_old - d;
                delta += -0.5 * self.xi_star * (r_new * r_new - r_old * r_old);
            }
        }
        let ok = accept(rng, delta);
        self.phi_c.record(ok);
        if ok {
            for k in 0..r {
                self.beta_phi[k] += step[k];
            }
            for i in 0..n {
                self.ln_phi[i] += self.scratch2[i];
            }
        }
    }

    fn beta_phi_noncentered<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (n, p, r) = (self.n, self.p, self.r);
        let mut step = vec![0.0; r];
        Self::proposal(rng, &self.phi_chol, r, self.phi_nc.scale(), &mut step);
        let mut delta = self.beta_prior_delta(&self.beta_phi.clone(), &step);
        for i in 0..n {
            let d: f64 = (0..r).map(|k| self.w[i * r + k] * step[k]).sum();
            self.scratch2[i] = d;
            let c = d.exp();
            let a0_new = self.alpha0[i] * c;
            let mut dd = ln_gamma(a0_new) - self.lg_alpha0[i];
            for j in 0..p {
                let idx = i * p + j;
                let a_new = self.alpha[idx] * c;
                let lg = ln_gamma(a_new);
                self.scratch3[idx] = lg;
                dd += -lg + self.lg_alpha[idx] + (a_new - self.alpha[idx]) * self.log_y[idx];
            }
            delta += dd;
        }
        let ok = accept(rng, delta);
        self.phi_nc.record(ok);
        if ok {
            for k in 0..r {
                self.beta_phi[k] += step[k];
            }
            for i in 0..n {
                let d = self.scratch2[i];
                self.ln_phi[i] += d;
                let mut a0 = 0.0;
                for j in 0..p {
                    let idx = i * p + j;
                    self.la[idx] += d;
                    self.alpha[idx] = self.la[idx].exp();
                    self.lg_alpha[idx] = self.scratch3[idx];
                    a0 += self.alpha[idx];
                }
                self.alpha0[i] = a0;
                self.lg_alpha0[i] = ln_gamma(a0);
            }
        }
    }

    fn la_single<R: Rng + ?Sized>(&mut self, idx: usize, rng: &mut R) {
        let i = idx / self.p;
        let step = self.la_step[idx].scale() * std_normal(rng);
        let la_new = self.la[idx] + step;
        let a_new = la_new.exp();
        let (dd, lg, lg0) = self.dir_delta_single(i, idx, a_new);
        let r_old = self.la_resid(idx, i);
        let r_new = r_old + step;
        let delta = dd - 0.5 * self.xi_star * (r_new * r_new - r_old * r_old);
        let ok = accept(rng, delta) && a_new > 0.0 && a_new.is_finite();
        self.la_step[idx].record(ok);
        if ok {
            self.set_la(i, idx, la_new, a_new, lg, lg0);
        }
    }

    /// Stretches every latent residual by `c` and divides `xi_star` by `c²`.
    /// The Normal term is unchanged, so only the Dirichlet likelihood, the
    /// prior on `xi_star` and the Jacobian enter the ratio.
    fn xi_star_scaling<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (n, p) = (self.n, self.p);
        let log_c = self.xs_scale.scale() * std_normal(rng);
        let c = log_c.exp();
        let xs_new = self.xi_star / (c * c);
        let mut delta = -(xs_new - self.xi_star) / self.model.xi_star_mean(p) - 2.0 * log_c;
        for i in 0..n {
            let mut a0 = 0.0;
            for j in 0..p {
                let idx = i * p + j;
                let la_new = self.la[idx] + (c - 1.0) * self.la_resid(idx, i);
                let a = la_new.exp();
                let lg = ln_gamma(a);
                delta += -lg + self.lg_alpha[idx] + (a - self.alpha[idx]) * self.log_y[idx];
                a0 += a;
                self.scratch3[idx] = la_new;
                self.scratch4[idx] = lg;
            }
            let lg0 = ln_gamma(a0);
            delta += lg0 - self.lg_alpha0[i];
            self.scratch2[i] = lg0;
        }
        let ok = accept(rng, delta) && xs_new.is_finite() && xs_new > 0.0;
        self.xs_scale.record(ok);
        if ok {
            self.xi_star = xs_new;
            for i in 0..n {
                let mut a0 = 0.0;
                for j in 0..p {
                    let idx = i * p + j;
                    self.la[idx] = self.scratch3[idx];
                    self.alpha[idx] = self.la[idx].exp();
                    self.lg_alpha[idx] = self.scratch4[idx];
                    a0 += self.alpha[idx];
                }
                self.alpha0[i] = a0;
                self.lg_alpha0[i] = self.scratch2[i];
            }
        }
    }

    fn u_move<R: Rng + ?Sized>(&mut self, g: usize, noncentered: bool, rng: &mut R) {
        let p = self.p;
        let scale = if noncentered { self.u_nc[g].scale() } else { self.u_c[g].scale() };
        let step: Vec<f64> = (0..p).map(|_| scale * std_normal(rng)).collect();
        let mut delta = 0.0;
        for j in 0..p {
            let old = self.u[g * p + j];
            let s2 = self.sigma_u[j] * self.sigma_u[j];
            delta += -((old + step[j]).powi(2) - old * old) / (2.0 * s2);
        }
        let rows = std::mem::take(&mut self.group_rows[g]);
        for &i in &rows {
            let mut rs_new = self.row_sum[i];
            for j in 0..p {
                let idx = i * p + j;
                let e = self.eta[idx] + step[j];
                let mu = inv_logit(e);
                let ln_mu = ln_inv_logit(e);
                rs_new += mu - self.mu[idx];
                if noncentered {
                    let la_new = self.la[idx] + ln_mu - self.ln_mu[idx];
                    self.scratch3[idx] = la_new;
                } else {
                    let r_old = self.la_resid(idx, i);
                    let r_new = self.la[idx] - ln_mu - self.ln_phi[i];
                    delta += -0.5 * self.xi_star * (r_new * r_new - r_old * r_old);
                }
            }
            if noncentered {
                // whole-row Dirichlet change
                let mut a0_new = 0.0;
                let mut dd = 0.0;
                for j in 0..p {
                    let idx = i * p + j;
                    let a_new = self.scratch3[idx].exp();
                    a0_new += a_new;
                    dd += -ln_gamma(a_new) + self.lg_alpha[idx] + (a_new - self.alpha[idx]) * self.log_y[idx];
                }
                delta += dd + ln_gamma(a0_new) - self.lg_alpha0[i];
            }
            delta += -0.5 * self.xi * ((rs_new - 1.0).powi(2) - (self.row_sum[i] - 1.0).powi(2));
        }
        let ok = accept(rng, delta);
        if noncentered {
            self.u_nc[g].record(ok);
        } else {
            self.u_c[g].record(ok);
        }
        if ok {
            for j in 0..p {
                self.u[g * p + j] += step[j];
            }
            for &i in &rows {
                for j in 0..p {
                    let idx = i * p + j;
                    let e = self.eta[idx] + step[j];
                    self.set_eta(i, j, e);
                    if noncentered {
                        let la_new = self.scratch3[idx];
                        self.la[idx] = la_new;
                        self.alpha[idx] = la_new.exp();
                        self.lg_alpha[idx] = ln_gamma(self.alpha[idx]);
                    }
                }
                if noncentered {
                    let a0: f64 = (0..p).map(|j| self.alpha[i * p + j]).sum();
                    self.alpha0[i] = a0;
                    self.lg_alpha0[i] = ln_gamma(a0);
                }
            }
        }
        self.group_rows[g] = rows;
    }

    fn sigma_prior(&self, s: f64) -> f64 {
        -s / self.model.sigma_u_prior_mean
    }

    fn sigma_centered<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let p = self.p;
        let s_old = self.sigma_u[j];
        let log_step = self.sig_c[j].scale() * std_normal(rng);
        let s_new = s_old * log_step.exp();
        let ss: f64 = (0..self.g).map(|g| self.u[g * p + j].powi(2)).sum();
        let gcount = self.g as f64;
        let delta = -gcount * (s_new.ln() - s_old.ln()) - 0.5 * ss * (1.0 / (s_new * s_new) - 1.0 / (s_old * s_old))
            + self.sigma_prior(s_new)
            - self.sigma_prior(s_old)
            + log_step;
        let ok = accept(rng, delta);
        self.sig_c[j].record(ok);
        if ok {
            self.sigma_u[j] = s_new;
        }
    }

    /// Rescales `sigma_u[j]` and the whole column `u[., j]` together.
    fn sigma_scaling<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let (n, p) = (self.n, self.p);
        let s_old = self.sigma_u[j];
        let log_step = self.sig_s[j].scale() * std_normal(rng);
        let c = log_step.exp();
        let s_new = s_old * c;
        let mut delta = self.sigma_prior(s_new) - self.sigma_prior(s_old) + log_step;
        for i in 0..n {
            let idx = i * p + j;
            let e = self.eta[idx] + (c - 1.0) * self.u[self.group[i] * p + j];
            let mu = inv_logit(e);
            let r_old = self.la_resid(idx, i);
            let r_new = self.la[idx] - ln_inv_logit(e) - self.ln_phi[i];
            let rs_new = self.row_sum[i] - self.mu[idx] + mu;
            delta += -0.5 * self.xi_star * (r_new * r_new - r_old * r_old)
                - 0.5 * self.xi * ((rs_new - 1.0).powi(2) - (self.row_sum[i] - 1.0).powi(2));
            self.scratch2[i] = e;
        }
        let ok = accept(rng, delta);
        self.sig_s[j].record(ok);
        if ok {
            self.sigma_u[j] = s_new;
            for g in 0..self.g {
                self.u[g * p + j] *= c;
            }
            for i in 0..n {
                self.set_eta(i, j, self.scratch2[i]);
            }
        }
    }

    /// Joint update of `sigma_u[j]` and column `j` of `u`. The new scale
    /// is either a log-scale step or a draw from its prior, chosen at
    /// random. Each `u[g, j]` is then drawn from a Gaussian approximation to
    /// its conditional, linearized at `u = 0` with ln α held fixed. The
    /// approximation only enters the proposal densities, so the move is
    /// exact. It lets the chain leave the region where a tiny scale pins
    /// every effect at zero.
    fn sigma_joint<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let (n, p, g) = (self.n, self.p, self.g);
        let s_old = self.sigma_u[j];
        // half the time the scale is drawn from its prior, so the chain can
        // jump from a collapsed scale straight to a plausible one
        let independent: bool = rng.random();
        let (s_new, scale_term) = if independent {
            let draw: f64 = Exp1.sample(rng);
            let s_new = draw * self.model.sigma_u_prior_mean;
            (s_new, 0.0)
        } else {
            let log_step = self.sig_joint[j].scale() * std_normal(rng);
            let s_new = s_old * log_step.exp();
            (s_new, self.sigma_prior(s_new) - self.sigma_prior(s_old) + log_step)
        };
        // per-group linear-Gaussian terms, independent of u and sigma
        let mut a = vec![0.0; g];
        let mut b = vec![0.0; g];
        for i in 0..n {
            let idx = i * p + j;
            let k = self.group[i];
            let e0 = self.eta[idx] - self.u[k * p + j];
            let m0 = inv_logit(e0);
            let d = 1.0 - m0;
            let s = m0 * (1.0 - m0);
            let r0 = self.la[idx] - ln_inv_logit(e0) - self.ln_phi[i];
            let rs0 = self.row_sum[i] - self.mu[idx] + m0;
            a[k] += self.xi_star * d * d + self.xi * s * s;
            b[k] += self.xi_star * d * r0 - self.xi * s * (rs0 - 1.0);
        }
        let ln_q = |u: f64, k: usize, sigma: f64| {
            let prec = a[k] + 1.0 / (sigma * sigma);
            let mean = b[k] / prec;
            0.5 * prec.ln() - 0.5 * prec * (u - mean).powi(2)
        };
        let mut u_new = vec![0.0; g];
        let mut delta = scale_term - g as f64 * (s_new.ln() - s_old.ln());
        for k in 0..g {
            let prec = a[k] + 1.0 / (s_new * s_new);
            u_new[k] = b[k] / prec + std_normal(rng) / prec.sqrt();
            let u_old = self.u[k * p + j];
            delta += -0.5 * u_new[k].powi(2) / (s_new * s_new) + 0.5 * u_old.powi(2) / (s_old * s_old);
            delta += ln_q(u_old, k, s_old) - ln_q(u_new[k], k, s_new);
        }
        for i in 0..n {
            let idx = i * p + j;
            let k = self.group[i];
            let e = self.eta[idx] - self.u[k * p + j] + u_new[k];
            let r_old = self.la_resid(idx, i);
            let r_new = self.la[idx] - ln_inv_logit(e) - self.ln_phi[i];
            let rs_new = self.row_sum[i] - self.mu[idx] + inv_logit(e);
            delta += -0.5 * self.xi_star * (r_new * r_new - r_old * r_old)
                - 0.5 * self.xi * ((rs_new - 1.0).powi(2) - (self.row_sum[i] - 1.0).powi(2));
            self.scratch2[i] = e;
        }
        let ok = accept(rng, delta);
        if !independent {
            self.sig_joint[j].record(ok);
        }
        if ok {
            self.sigma_u[j] = s_new;
            for k in 0..g {
                self.u[k * p + j] = u_new[k];
            }
            for i in 0..n {
                self.set_eta(i, j, self.scratch2[i]);
            }
        }
    }

    fn all_adaptives(&mut self) -> impl Iterator<Item = &mut Adaptive> {
        self.beta_c
            .iter_mut()
            .chain(self.beta_nc.iter_mut())
            .chain(std::iter::once(&mut self.phi_c))
            .chain(std::iter::once(&mut self.phi_nc))
            .chain(self.u_c.iter_mut())
            .chain(self.u_nc.iter_mut())
            .chain(self.sig_c.iter_mut())
            .chain(self.sig_s.iter_mut())
            .chain(self.sig_joint.iter_mut())
            .chain(self.la_step.iter_mut())
            .chain(std::iter::once(&mut self.xs_scale))
    }

    pub(crate) fn adapt(&mut self, target: f64, batch: usize) {
        self.all_adaptives().for_each(|a| a.adapt(target, batch));
    }

    pub(crate) fn reset_counts(&mut self) {
        self.all_adaptives().for_each(Adaptive::reset_counts);
    }

    pub(crate) fn acceptance(&self) -> BlockAcceptance {
        let rate = |v: &[&Adaptive]| {
            let (a, t) = v.iter().fold((0u64, 0u64), |(a, t), x| (a + x.acc, t + x.tries));
            (t > 0).then(|| a as f64 / t as f64)
        };
        let beta: Vec<&Adaptive> = self.beta_c.iter().chain(&self.beta_nc).collect();
        let phi = [&self.phi_c, &self.phi_nc];
        let u: Vec<&Adaptive> = self.u_c.iter().chain(&self.u_nc).collect();
        let sig: Vec<&Adaptive> = self.sig_c.iter().chain(&self.sig_s).chain(&self.sig_joint).collect();
        let la: Vec<&Adaptive> = self.la_step.iter().chain(std::iter::once(&self.xs_scale)).collect();
        let all: Vec<&Adaptive> = beta.iter().chain(&phi).chain(&u).chain(&sig).chain(&la).copied().collect();
        BlockAcceptance {
            beta: rate(&beta),
            beta_phi: rate(&phi),
            log_alpha: rate(&la),
            random_effects: rate(&u),
            sigma_u: rate(&sig),
            overall: rate(&all),
        }
    }

    pub(crate) fn draw(&self) -> Draw {
        let (n, p, q) = (self.n, self.p, self.q);
        let beta = DMatrix::from_fn(q, p, |k, j| self.beta[k * p + j]);
        let beta_phi = DVector::from_column_slice(&self.beta_phi);
        let mu = DMatrix::from_fn(n, p, |i, j| self.mu[i * p + j]);
        let phi = DVector::from_iterator(n, self.ln_phi.iter().map(|v| v.exp()));
        let (mu_adj, alpha_adj) = apply_corrections(&mu, &phi).unwrap_or_else(|_| {
            // Means can round to exactly 0 or 1 far in the tails; clamp and retry.
            let clamped = mu.map(|m| m.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
            apply_corrections(&clamped, &phi.map(|v| v.clamp(f64::MIN_POSITIVE, f64::MAX)))
                .expect("clamped inputs are valid")
        });
        Draw {
            beta,
            beta_phi,
            u: self.re.then(|| DMatrix::from_fn(self.g, p, |g, j| self.u[g * p + j])),
            sigma_u: self.re.then(|| self.sigma_u.clone()),
            log_alpha: DMatrix::from_fn(n, p, |i, j| self.la[i * p + j]),
            xi: self.xi,
            xi_star: self.xi_star,
            mu_adj,
            alpha_adj,
        }
    }
}

pub(crate) fn run_chain<R: Rng + ?Sized>(chain: &mut Chain<'_>, cfg: &SamplerConfig, rng: &mut R) -> Vec<Draw> {
    let mut draws = Vec::with_capacity(cfg.retained_per_chain());
    let mut batch = 0;
    for it in 0..cfg.n_iter {
        chain.sweep(rng);
        if it < cfg.n_burnin {
            if (it + 1) % cfg.adapt_window == 0 {
                chain.adapt(cfg.target_accept, batch);
                batch += 1;
            }
            if it + 1 == cfg.n_burnin {
                chain.reset_counts();
            }
        } else if (it - cfg.n_burnin + 1) % cfg.thin == 0 {
            draws.push(chain.draw());
        }
    }
    draws
}
