//! Posterior summaries and convergence diagnostics.

use nalgebra::DMatrix;
use serde::Serialize;

use super::{dump::parameter_names, flatten_draw, PosteriorChain};
use crate::error::{Error, Result};

/// Fewest pooled draws `summarize` accepts.
pub const MIN_DRAWS: usize = 100;

#[derive(Debug, Clone, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    /// Doubled posterior tail probability; regression coefficients only.
    pub p_value: Option<f64>,
    pub rhat: Option<f64>,
    pub ess: f64,
}

/// Per-observation summaries of the corrected means, each n×P.
#[derive(Debug, Clone)]
pub struct ObservationIntervals {
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub parameters: Vec<ParameterSummary>,
    pub mu: ObservationIntervals,
    pub n_draws: usize,
    /// Smallest nonzero p-value the draws can resolve.
    pub p_resolution: f64,
    pub warnings: Vec<String>,
}

impl FitSummary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Type-7 sample quantile of sorted data.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `2·min(Pr(x > 0), Pr(x < 0))`, capped at 1.
pub fn tail_p_value(draws: &[f64]) -> f64 {
    let n = draws.len() as f64;
    let pos = draws.iter().filter(|v| **v > 0.0).count() as f64 / n;
    let neg = draws.iter().filter(|v| **v < 0.0).count() as f64 / n;
    (2.0 * pos.min(neg)).min(1.0)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Potential scale reduction with each chain split in half. `None` when the
/// draws are constant or too short.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .collect();
    let len = halves.iter().map(|h| h.len()).min()?;
    if len < 2 {
        return None;
    }
    let stats: Vec<(f64, f64)> = halves.iter().map(|h| mean_var(&h[..len])).collect();
    let m = stats.len() as f64;
    let n = len as f64;
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
    let b = n * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w <= 0.0 {
        return None;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

fn autocovariance(x: &[f64], lag: usize, mean: f64) -> f64 {
    let n = x.len();
    (0..n - lag).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum::<f64>() / n as f64
}

/// Effective sample size summed over chains, each from Geyer's initial
/// positive sequence of autocorrelation pairs.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    chains
        .iter()
        .map(|c| {
            let n = c.len();
            if n < 4 {
                return n as f64;
            }
            let mean = c.iter().sum::<f64>() / n as f64;
            let c0 = autocovariance(c, 0, mean);
            if c0 <= 0.0 {
                return n as f64;
            }
            let mut tau = -1.0;
            let mut k = 0;
            while 2 * k + 1 < n {
                let pair = (autocovariance(c, 2 * k, mean) + autocovariance(c, 2 * k + 1, mean)) / c0;
                if pair <= 0.0 {
                    break;
                }
                tau += 2.0 * pair;
                k += 1;
            }
            n as f64 / tau.max(1.0 / n as f64)
        })
        .sum()
}

/// Pools retained draws across chains.
pub fn summarize(chains: &[PosteriorChain]) -> Result<FitSummary> {
    let n_draws: usize = chains.iter().map(|c| c.draws.len()).sum();
    if chains.is_empty() || n_draws < MIN_DRAWS {
        return Err(Error::Diagnostics(format!("need at least {MIN_DRAWS} retained draws, got {n_draws}")));
    }
    let first = chains
        .iter()
        .flat_map(|c| c.draws.first())
        .next()
        .expect("at least one draw");
    let (q, p) = first.beta.shape();
    let r = first.beta_phi.len();
    let groups = first.u.as_ref().map(|u| u.nrows());
    let names = parameter_names(q, p, r, groups);
    let n_coef = q * p + r;

    // per chain, per parameter
    let traces: Vec<Vec<Vec<f64>>> = chains
        .iter()
        .map(|c| {
            let mut t = vec![Vec::with_capacity(c.draws.len()); names.len()];
            for d in &c.draws {
                for (k, v) in flatten_draw(d).into_iter().enumerate() {
                    t[k].push(v);
                }
            }
            t
        })
        .collect();

    let mut warnings: Vec<String> = chains.iter().flat_map(|c| c.warnings.clone()).collect();
    let mut parameters = Vec::with_capacity(names.len());
    let mut high_rhat: Vec<(&str, f64)> = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = traces.iter().map(|t| t[k].clone()).collect();
        let mut pooled: Vec<f64> = per_chain.concat();
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let p_value = (k < n_coef).then(|| tail_p_value(&pooled));
        pooled.sort_by(f64::total_cmp);
        let rhat = split_rhat(&per_chain);
        if let Some(rh) = rhat.filter(|r| *r > 1.1) {
            high_rhat.push((name.as_str(), rh));
        }
        parameters.push(ParameterSummary {
            name: name.clone(),
            mean,
            median: quantile(&pooled, 0.5),
            lower: quantile(&pooled, 0.025),
            upper: quantile(&pooled, 0.975),
            p_value,
            rhat,
            ess: effective_sample_size(&per_chain),
        });
    }

    if let Some((worst, rh)) = high_rhat.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)) {
        warnings.push(format!(
            "{} of {} parameters have R-hat above 1.1 (worst {worst} at {rh:.3}); consider more iterations",
            high_rhat.len(),
            names.len()
        ));
    }

    let (n, _) = first.mu_adj.shape();
    let mut mean = DMatrix::zeros(n, p);
    let mut lower = DMatrix::zeros(n, p);
    let mut upper = DMatrix::zeros(n, p);
    let mut buf = Vec::with_capacity(n_draws);
    for i in 0..n {
        for j in 0..p {
            buf.clear();
            buf.extend(chains.iter().flat_map(|c| c.draws.iter().map(|d| d.mu_adj[(i, j)])));
            mean[(i, j)] = buf.iter().sum::<f64>() / n_draws as f64;
            buf.sort_by(f64::total_cmp);
            lower[(i, j)] = quantile(&buf, 0.025);
            upper[(i, j)] = quantile(&buf, 0.975);
        }
    }

    Ok(FitSummary {
        parameters,
        mu: ObservationIntervals { mean, lower, upper },
        n_draws,
        p_resolution: 2.0 / n_draws as f64,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn quantile_type7() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert!((quantile(&x, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&x, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn p_values_by_definition() {
        let sym: Vec<f64> = (-50..=50).map(f64::from).filter(|v| *v != 0.0).collect();
        assert!((tail_p_value(&sym) - 1.0).abs() < 1e-12);
        assert_eq!(tail_p_value(&[0.1, 0.2, 3.0]), 0.0);
        assert!((tail_p_value(&[-1.0, 1.0, 2.0, 3.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rhat_of_identical_chains() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let c: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rh = split_rhat(&[c.clone(), c]).unwrap();
        assert!((rh - 1.0).abs() < 0.01, "{rh}");
    }

    #[test]
    fn rhat_flags_separated_chains() {
        let a: Vec<f64> = (0..200).map(|i| (i % 7) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 20.0).collect();
        assert!(split_rhat(&[a, b]).unwrap() > 2.0);
    }

    #[test]
    fn ess_of_independent_and_sticky_draws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let iid: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ess = effective_sample_size(&[iid]);
        assert!(ess > 3000.0 && ess < 5000.0, "{ess}");
        // AR(1) with rho = 0.9 has ESS about n·(1−ρ)/(1+ρ)
        let mut x = 0.0;
        let ar: Vec<f64> = (0..20000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = 0.9 * x + z;
                x
            })
            .collect();
        let ess = effective_sample_size(&[ar]);
        let want = 20000.0 * 0.1 / 1.9;
        assert!((ess / want - 1.0).abs() < 0.3, "{ess} vs {want}");
    }

    proptest! {
        #[test]
        fn interval_brackets_median(v in prop::collection::vec(-1e3f64..1e3, 2..200)) {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let (lo, med, hi) = (quantile(&s, 0.025), quantile(&s, 0.5), quantile(&s, 0.975));
            prop_assert!(lo <= med && med <= hi);
            let p = tail_p_value(&v);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
