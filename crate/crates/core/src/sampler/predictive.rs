use nalgebra::DMatrix;

use super::summary::quantile;
use super::PosteriorChain;
use crate::dirichlet::sample_log_gammas;
use crate::seeding::rng_from_seed;

/// Pooled predictive summaries per observation and component, each n×P.
#[derive(Debug, Clone)]
pub struct PredictiveDraws {
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub n_draws: usize,
}

/// One Dirichlet draw per retained state and observation at the corrected
/// concentrations, summarized by equal-tailed 95% intervals.
pub fn posterior_predictive(chains: &[PosteriorChain], seed: u64) -> PredictiveDraws {
    let draws: Vec<_> = chains.iter().flat_map(|c| &c.draws).collect();
    let (n, p) = draws.first().map_or((0, 0), |d| d.alpha_adj.shape());
    let mut rng = rng_from_seed(seed);
    let mut values = vec![Vec::with_capacity(draws.len()); n * p];
    let mut alpha = vec![0.0; p];
    let mut lg = vec![0.0; p];
    for d in &draws {
        for i in 0..n {
            alpha.iter_mut().enumerate().for_each(|(j, a)| *a = d.alpha_adj[(i, j)]);
            sample_log_gammas(&alpha, &mut rng, &mut lg);
            let m = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = lg.iter().map(|v| (v - m).exp()).sum();
            for j in 0..p {
                values[i * p + j].push(((lg[j] - m).exp()) / s);
            }
        }
    }
    let mut mean = DMatrix::zeros(n, p);
    let mut lower = DMatrix::zeros(n, p);
    let mut upper = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let v = &mut values[i * p + j];
            mean[(i, j)] = v.iter().sum::<f64>() / v.len() as f64;
            v.sort_by(f64::total_cmp);
            lower[(i, j)] = quantile(v, 0.025);
            upper[(i, j)] = quantile(v, 0.975);
        }
    }
    PredictiveDraws { mean, lower, upper, n_draws: draws.len() }
}
