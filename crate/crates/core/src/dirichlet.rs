//! The Dirichlet distribution on the unit simplex.
//!
//! Densities use the standard normalizing constant `Γ(α₀) / ∏ Γ(αᵢ)`.
//! Sampling works on the log scale throughout: small concentration
//! parameters routinely produce components far below `f64::MIN_POSITIVE`,
//! and a [`Composition`] built from a draw keeps the exact log-components.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::seeding::rng_from_seed;
use crate::special::{inv_psi, ln_gamma, psi};

/// Smallest component accepted by [`Composition::new`].
pub const MIN_PART: f64 = 1e-12;

/// Replacement value used by [`Composition::with_zero_replacement`].
pub const ZERO_REPLACEMENT: f64 = 1e-6;

const SUM_TOL: f64 = 1e-9;

/// A strictly positive point on the unit simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    parts: Vec<f64>,
    log_parts: Vec<f64>,
}

impl Composition {
    /// Validates proportions that already sum to one.
    pub fn new(parts: Vec<f64>) -> Result<Self> {
        if parts.len() < 2 {
            return Err(Error::domain("a composition needs at least two parts"));
        }
        if let Some((j, v)) = parts
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < MIN_PART)
        {
            return Err(Error::domain(format!(
                "composition part {} is {v}; parts must be finite and at least {MIN_PART}",
                j + 1
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::domain(format!("composition sums to {sum}, not 1")));
        }
        let log_parts = parts.iter().map(|v| v.ln()).collect();
        Ok(Self { parts, log_parts })
    }

    /// Closes positive values to sum to one, then validates.
    pub fn closure(values: &[f64]) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::domain(format!("cannot close values summing to {sum}")));
        }
        Self::new(values.iter().map(|v| v / sum).collect())
    }

    /// Builds a composition from unnormalized log-components.
    ///
    /// The normalized log-components are kept exactly, so parts that
    /// underflow in linear scale still carry their true value.
    pub fn from_log_parts(log_values: &[f64]) -> Result<Self> {
        if log_values.len() < 2 {
            return Err(Error::domain("a composition needs at least two parts"));
        }
        if log_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("log-components must be finite"));
        }
        let lse = log_sum_exp(log_values);
        let log_parts: Vec<f64> = log_values.iter().map(|v| v - lse).collect();
        let parts = log_parts.iter().map(|v| v.exp()).collect();
        Ok(Self { parts, log_parts })
    }

    /// Multiplicative replacement of parts below [`ZERO_REPLACEMENT`].
    ///
    /// Small parts are set to `ZERO_REPLACEMENT` and the remaining parts are
    /// shrunk proportionally so the result still sums to one. Returns the
    /// composition and the number of replaced parts.
    pub fn with_zero_replacement(raw: &[f64]) -> Result<(Self, usize)> {
        let sum: f64 = raw.iter().sum();
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) || !(sum > 0.0) {
            return Err(Error::domain("zero replacement needs non-negative values with a positive sum"));
        }
        let closed: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let small = closed.iter().filter(|v| **v < ZERO_REPLACEMENT).count();
        if small == 0 {
            return Ok((Self::new(closed)?, 0));
        }
        if small == closed.len() {
            return Err(Error::domain("every part is below the replacement threshold"));
        }
        let big_mass: f64 = closed.iter().filter(|v| **v >= ZERO_REPLACEMENT).sum();
        let keep = (1.0 - small as f64 * ZERO_REPLACEMENT) / big_mass;
        let out = closed
            .iter()
            .map(|&v| if v < ZERO_REPLACEMENT { ZERO_REPLACEMENT } else { v * keep })
            .collect();
        Ok((Self::new(out)?, small))
    }

    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    pub fn log_parts(&self) -> &[f64] {
        &self.log_parts
    }

    pub fn dim(&self) -> usize {
        self.parts.len()
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Concentration parameters of a Dirichlet distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    alpha0: f64,
}

/// Mean vector and covariance matrix of a Dirichlet distribution.
#[derive(Debug, Clone)]
pub struct MomentSummary {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::domain("a Dirichlet needs at least two components"));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::domain(format!("concentration {a} is not a positive finite number")));
        }
        let alpha0 = alpha.iter().sum();
        Ok(Self { alpha, alpha0 })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn log_density(&self, y: &Composition) -> Result<f64> {
        if y.dim() != self.dim() {
            return Err(Error::dim(format!(
                "composition has {} parts, distribution has {}",
                y.dim(),
                self.dim()
            )));
        }
        Ok(dirichlet_log_density(&self.alpha, y.log_parts()))
    }

    pub fn moments(&self) -> MomentSummary {
        let a0 = self.alpha0;
        let p = self.dim();
        let mean: Vec<f64> = self.alpha.iter().map(|a| a / a0).collect();
        let denom = a0 * a0 * (1.0 + a0);
        let covariance = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                self.alpha[i] * (a0 - self.alpha[i]) / denom
            } else {
                -self.alpha[i] * self.alpha[j] / denom
            }
        });
        MomentSummary { mean, covariance }
    }

    /// `n` independent draws, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Composition> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| self.sample_one(&mut rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Composition {
        let mut logs = vec![0.0; self.dim()];
        sample_log_gammas(&self.alpha, rng, &mut logs);
        Composition::from_log_parts(&logs).expect("log-gamma variates are finite")
    }

    /// Marginal over the 0-based `subset`, with the remaining mass aggregated
    /// into one trailing component.
    pub fn marginal(&self, subset: &[usize]) -> Result<Self> {
        if subset.is_empty() || subset.len() >= self.dim() {
            return Err(Error::domain("marginal subset must be non-empty and proper"));
        }
        let mut seen = vec![false; self.dim()];
        for &i in subset {
            if i >= self.dim() || seen[i] {
                return Err(Error::domain(format!("invalid or repeated index {i} in subset")));
            }
            seen[i] = true;
        }
        let mut alpha: Vec<f64> = subset.iter().map(|&i| self.alpha[i]).collect();
        let rest: f64 = (0..self.dim()).filter(|i| !seen[*i]).map(|i| self.alpha[i]).sum();
        alpha.push(rest);
        Self::new(alpha)
    }
}

/// Dirichlet log-density from concentrations and log-components.
#[inline]
pub(crate) fn dirichlet_log_density(alpha: &[f64], log_y: &[f64]) -> f64 {
    let mut a0 = 0.0;
    let mut acc = 0.0;
    for (&a, &ly) in alpha.iter().zip(log_y) {
        a0 += a;
        acc += (a - 1.0) * ly - ln_gamma(a);
    }
    acc + ln_gamma(a0)
}

/// Fills `out` with log-Gamma(αⱼ, 1) variates.
///
/// Shapes below one use `G(a) = G(a + 1) · U^{1/a}` evaluated on the log
/// scale, which stays finite where the linear-scale product underflows.
pub(crate) fn sample_log_gammas<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R, out: &mut [f64]) {
    for (o, &a) in out.iter_mut().zip(alpha) {
        *o = if a >= 1.0 {
            Gamma::new(a, 1.0).expect("positive shape").sample(rng).ln()
        } else {
            let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng).ln();
            let u: f64 = 1.0 - rng.random::<f64>();
            g + u.ln() / a
        };
    }
}

/// Total log-likelihood of `sample` under `params`.
pub fn log_likelihood(sample: &[Composition], params: &DirichletParams) -> Result<f64> {
    sample.iter().map(|y| params.log_density(y)).sum()
}

fn check_sample(sample: &[Composition]) -> Result<usize> {
    if sample.len() < 2 {
        return Err(Error::DegenerateData("need at least two compositions".into()));
    }
    let p = sample[0].dim();
    if sample.iter().any(|y| y.dim() != p) {
        return Err(Error::dim("compositions in a sample must have equal length"));
    }
    Ok(p)
}

/// Method-of-moments fit.
///
/// The mean comes from the per-component sample means; the precision α₀ is
/// taken from the first component alone through `Var(Y₁) = μ₁(1−μ₁)/(α₀+1)`.
/// Averaging that relation over all components is a common alternative.
pub fn fit_moments(sample: &[Composition]) -> Result<DirichletParams> {
    let p = check_sample(sample)?;
    let n = sample.len() as f64;
    let mut mean = vec![0.0; p];
    for y in sample {
        for (m, v) in mean.iter_mut().zip(y.parts()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let var1 = sample
        .iter()
        .map(|y| (y.parts()[0] - mean[0]).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    if !(var1 > 0.0) {
        return Err(Error::DegenerateData("first component has zero sample variance".into()));
    }
    let alpha0 = mean[0] * (1.0 - mean[0]) / var1 - 1.0;
    if !(alpha0 > 0.0) {
        return Err(Error::DegenerateData(format!(
            "sample variance {var1} is too large for a Dirichlet with mean {}",
            mean[0]
        )));
    }
    DirichletParams::new(mean.iter().map(|m| m * alpha0).collect())
}

/// Maximum-likelihood fit by the fixed-point iteration
/// `ψ(αⱼ) ← ψ(α₀) + mean(ln yⱼ)`, started at the moments estimate.
pub fn fit_ml(sample: &[Composition], tol: f64, max_iter: usize) -> Result<DirichletParams> {
    let p = check_sample(sample)?;
    let n = sample.len() as f64;
    let mut mean_log = vec![0.0; p];
    for y in sample {
        for (m, v) in mean_log.iter_mut().zip(y.log_parts()) {
            *m += v;
        }
    }
    mean_log.iter_mut().for_each(|m| *m /= n);

    let mut alpha = fit_moments(sample)?.alpha;
    for _ in 0..max_iter {
        let psi0 = psi(alpha.iter().sum());
        let mut delta: f64 = 0.0;
        for (a, ml) in alpha.iter_mut().zip(&mean_log) {
            let next = inv_psi(psi0 + ml);
            delta = delta.max((next - *a).abs());
            *a = next;
        }
        if delta < tol {
            return DirichletParams::new(alpha);
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        message: "Dirichlet fixed-point iteration".into(),
        last: alpha,
    })
}

/// Default tolerance and iteration cap for [`fit_ml`].
pub const FIT_ML_TOL: f64 = 1e-10;
pub const FIT_ML_MAX_ITER: usize = 1000;

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(v: &[f64]) -> Composition {
        Composition::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_density() {
        let d = DirichletParams::new(vec![1.0, 1.0, 1.0]).unwrap();
        let y = comp(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!((d.log_density(&y).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn beta_case_density() {
        let d = DirichletParams::new(vec![2.0, 1.0]).unwrap();
        let y = comp(&[0.75, 0.25]);
        assert!((d.log_density(&y).unwrap() - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn density_matches_high_precision_reference() {
        // mpmath, 40 digits: lnΓ(10) − lnΓ(2) − lnΓ(3) − lnΓ(5) + Σ(αᵢ−1) ln yᵢ
        let d = DirichletParams::new(vec![2.0, 3.0, 5.0]).unwrap();
        let y = comp(&[0.2, 0.3, 0.5]);
        assert!((d.log_density(&y).unwrap() - 2.1406542258478250846).abs() < 1e-11);
    }

    #[test]
    fn density_integrates_to_one_on_the_segment() {
        // Composite Simpson on (0,1) for a Beta-shaped case with finite endpoints.
        let d = DirichletParams::new(vec![2.5, 1.7]).unwrap();
        let m = 20_000;
        let h = 1.0 / m as f64;
        let f = |t: f64| {
            if t <= 0.0 || t >= 1.0 {
                return 0.0;
            }
            let y = Composition::from_log_parts(&[t.ln(), (1.0 - t).ln()]).unwrap();
            d.log_density(&y).unwrap().exp()
        };
        let mut s = f(0.0) + f(1.0);
        for k in 1..m {
            s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_moments() {
        let m = DirichletParams::new(vec![1.0, 1.0, 1.0]).unwrap().moments();
        for i in 0..3 {
            assert!((m.mean[i] - 1.0 / 3.0).abs() < 1e-15);
            for j in 0..3 {
                let want = if i == j { 1.0 / 18.0 } else { -1.0 / 36.0 };
                assert!((m.covariance[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn moment_invariants() {
        let m = DirichletParams::new(vec![2.0, 3.0, 5.0]).unwrap().moments();
        assert_eq!(m.mean, vec![0.2, 0.3, 0.5]);
        assert!((m.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert!(m.covariance.row(i).sum().abs() < 1e-10);
            assert!(m.covariance[(i, i)] > 0.0);
            for j in 0..3 {
                if i != j {
                    assert!(m.covariance[(i, j)] < 0.0);
                }
            }
        }
    }

    #[test]
    fn scaling_keeps_mean_and_shrinks_variance() {
        let base = DirichletParams::new(vec![0.4, 1.3, 2.2]).unwrap();
        for c in [1.5, 3.0, 40.0] {
            let scaled = DirichletParams::new(base.alpha().iter().map(|a| a * c).collect()).unwrap();
            let (a, b) = (base.moments(), scaled.moments());
            for i in 0..3 {
                assert!((a.mean[i] - b.mean[i]).abs() < 1e-14);
                assert!(b.covariance[(i, i)] < a.covariance[(i, i)]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let d = DirichletParams::new(vec![1.0, 1.0]).unwrap();
        let a = d.sample(100_000, 11);
        assert_eq!(a, d.sample(100_000, 11));
        let m = a.iter().map(|y| y.parts()[0]).sum::<f64>() / a.len() as f64;
        assert!((m - 0.5).abs() < 0.005);

        let d = DirichletParams::new(vec![2.0, 3.0, 5.0]).unwrap();
        let draws = d.sample(100_000, 12);
        for (j, want) in [0.2, 0.3, 0.5].iter().enumerate() {
            let m = draws.iter().map(|y| y.parts()[j]).sum::<f64>() / draws.len() as f64;
            assert!((m - want).abs() < 0.005);
        }
    }

    #[test]
    fn tiny_concentrations_keep_finite_logs() {
        let d = DirichletParams::new(vec![0.004, 0.01, 5.0]).unwrap();
        for y in d.sample(2_000, 3) {
            assert!(y.log_parts().iter().all(|v| v.is_finite()));
            assert!((y.parts().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn marginals() {
        let d = DirichletParams::new(vec![2.0, 3.0, 5.0]).unwrap();
        assert_eq!(d.marginal(&[0]).unwrap().alpha(), &[2.0, 8.0]);
        assert_eq!(d.marginal(&[0, 1]).unwrap().alpha(), &[2.0, 3.0, 5.0]);
        assert!(d.marginal(&[]).is_err());
        assert!(d.marginal(&[0, 1, 2]).is_err());
        let full = d.moments();
        let m = d.marginal(&[1]).unwrap().moments();
        assert!((m.mean[0] - full.mean[1]).abs() < 1e-15);
        assert!((m.covariance[(0, 0)] - full.covariance[(1, 1)]).abs() < 1e-15);
    }

    #[test]
    fn moments_fit() {
        let d = DirichletParams::new(vec![2.0, 3.0, 5.0]).unwrap();
        let s = d.sample(10_000, 5);
        let fit = fit_moments(&s).unwrap();
        for (a, t) in fit.alpha().iter().zip([2.0, 3.0, 5.0]) {
            assert!((a - t).abs() / t < 0.10, "{a} vs {t}");
        }
        let n = s.len() as f64;
        for j in 0..3 {
            let m = s.iter().map(|y| y.parts()[j]).sum::<f64>() / n;
            assert!((fit.alpha()[j] / fit.alpha0() - m).abs() < 1e-14);
        }
        let same = vec![comp(&[0.2, 0.8]); 5];
        assert!(matches!(fit_moments(&same), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn ml_fit_beats_moments_and_zeroes_gradient() {
        let d = DirichletParams::new(vec![2.0, 3.0, 5.0]).unwrap();
        let s = d.sample(10_000, 6);
        let ml = fit_ml(&s, FIT_ML_TOL, FIT_ML_MAX_ITER).unwrap();
        let mm = fit_moments(&s).unwrap();
        for (a, t) in ml.alpha().iter().zip([2.0, 3.0, 5.0]) {
            assert!((a - t).abs() / t < 0.05);
        }
        assert!(log_likelihood(&s, &ml).unwrap() >= log_likelihood(&s, &mm).unwrap());

        // central finite differences of the mean log-likelihood
        let n = s.len() as f64;
        let mean_ll = |alpha: &[f64]| {
            log_likelihood(&s, &DirichletParams::new(alpha.to_vec()).unwrap()).unwrap() / n
        };
        for j in 0..3 {
            let h = 1e-5 * ml.alpha()[j];
            let mut up = ml.alpha().to_vec();
            let mut dn = ml.alpha().to_vec();
            up[j] += h;
            dn[j] -= h;
            let g = (mean_ll(&up) - mean_ll(&dn)) / (2.0 * h);
            assert!(g.abs() < 1e-6, "gradient component {j} = {g}");
        }
    }

    #[test]
    fn ml_fit_reports_non_convergence() {
        let s = DirichletParams::new(vec![2.0, 3.0]).unwrap().sample(200, 1);
        match fit_ml(&s, 0.0, 3) {
            Err(Error::Convergence { iterations, last, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(last.len(), 2);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn composition_validation() {
        assert!(Composition::new(vec![0.5, 0.5]).is_ok());
        assert!(Composition::new(vec![0.0, 1.0]).is_err());
        assert!(Composition::new(vec![1e-13, 1.0 - 1e-13]).is_err());
        assert!(Composition::new(vec![0.5, 0.6]).is_err());
        let (c, k) = Composition::with_zero_replacement(&[0.0, 0.3, 0.7]).unwrap();
        assert_eq!(k, 1);
        assert_eq!(c.parts()[0], ZERO_REPLACEMENT);
        assert!((c.parts().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((c.parts()[1] / c.parts()[2] - 0.3 / 0.7).abs() < 1e-12);
    }
}
