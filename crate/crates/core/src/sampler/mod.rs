//! Posterior simulation for the penalized hierarchical model.
//!
//! Each chain runs adaptive random-walk Metropolis-within-Gibbs: coefficient
//! blocks and latent log-concentrations by random-walk Metropolis, the two
//! penalty precisions by exact Gamma draws. Proposal scales adapt during
//! burn-in only; the retained phase uses a fixed kernel.

mod dump;
mod kernel;
mod predictive;
mod summary;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dump::{parameter_names, write_chain_csv};
pub use predictive::{posterior_predictive, PredictiveDraws};
pub use summary::{
    effective_sample_size, quantile, split_rhat, summarize, tail_p_value, FitSummary, ObservationIntervals,
    ParameterSummary,
};

use crate::dataset::CompositionDataset;
use crate::error::{Error, Result};
use crate::model::{log_penalized_posterior, CoefficientSet, LatentState, ModelConfig};
use crate::seeding::{rng_from_seed, split_seed, with_pool};

/// Minimum post-burn-in acceptance rate before a chain is flagged.
pub const LOW_ACCEPTANCE: f64 = 0.05;

/// Blocks held at their initial values. All false for ordinary fits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrozenBlocks {
    pub beta: bool,
    pub beta_phi: bool,
    pub log_alpha: bool,
    pub xi: bool,
    pub xi_star: bool,
    pub random_effects: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Burn-in iterations; included in `n_iter`.
    pub n_burnin: usize,
    /// Total iterations per chain.
    pub n_iter: usize,
    pub thin: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub adapt_window: usize,
    pub frozen: FrozenBlocks,
    /// Add the whitened coefficient moves and the joint precision/residual
    /// rescaling to each sweep. Without them the latent concentrations
    /// and their precision mix very slowly.
    pub noncentered_moves: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 2,
            n_burnin: 2000,
            n_iter: 4000,
            thin: 2,
            seed: 1,
            target_accept: 0.4,
            adapt_window: 50,
            frozen: FrozenBlocks::default(),
            noncentered_moves: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_iter == 0 || self.thin == 0 || self.adapt_window == 0 {
            return Err(Error::Config("chain, iteration, thinning and window counts must be positive".into()));
        }
        if self.n_burnin >= self.n_iter {
            return Err(Error::Config(format!(
                "burn-in ({}) must be smaller than the total iterations ({})",
                self.n_burnin, self.n_iter
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.n_iter - self.n_burnin) / self.thin
    }
}

/// One retained state with its corrected means and concentrations.
#[derive(Debug, Clone)]
pub struct Draw {
    pub beta: DMatrix<f64>,
    pub beta_phi: DVector<f64>,
    pub u: Option<DMatrix<f64>>,
    pub sigma_u: Option<Vec<f64>>,
    pub log_alpha: DMatrix<f64>,
    pub xi: f64,
    pub xi_star: f64,
    /// Row-normalized means.
    pub mu_adj: DMatrix<f64>,
    /// `mu_adj` scaled by the drawn precision.
    pub alpha_adj: DMatrix<f64>,
}

/// Post-burn-in acceptance rates; `None` for blocks that never moved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub beta: Option<f64>,
    pub beta_phi: Option<f64>,
    pub log_alpha: Option<f64>,
    pub random_effects: Option<f64>,
    pub sigma_u: Option<f64>,
    pub overall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PosteriorChain {
    pub draws: Vec<Draw>,
    pub acceptance: BlockAcceptance,
    pub warnings: Vec<String>,
}

/// Parameters of the Gamma full conditional of a Normal precision with an
/// Exponential prior: `n` Normal terms with residual sum of squares `ss`.
/// Returns `(shape, rate)`.
pub fn gamma_conditional(n_terms: usize, ss: f64, prior_mean: f64) -> (f64, f64) {
    (n_terms as f64 / 2.0 + 1.0, 0.5 * ss + 1.0 / prior_mean)
}

/// Full conditional of `xi` given the raw mean surface (n×P).
pub fn gamma_conditional_xi(mu_rows: &DMatrix<f64>, config: &ModelConfig) -> (f64, f64) {
    let ss: f64 = mu_rows.row_iter().map(|r| (r.sum() - 1.0).powi(2)).sum();
    gamma_conditional(mu_rows.nrows(), ss, config.xi_mean(mu_rows.ncols()))
}

/// Full conditional of `xi_star` given the latent state and the raw means and
/// precisions it is centered on.
pub fn gamma_conditional_xi_star(
    latent: &LatentState,
    mu_rows: &DMatrix<f64>,
    phi: &DVector<f64>,
    config: &ModelConfig,
) -> (f64, f64) {
    let (n, p) = mu_rows.shape();
    let mut ss = 0.0;
    for i in 0..n {
        for j in 0..p {
            ss += (latent.log_alpha[(i, j)] - mu_rows[(i, j)].ln() - phi[i].ln()).powi(2);
        }
    }
    gamma_conditional(n * p, ss, config.xi_star_mean(p))
}

/// Runs `n_chains` chains from the default initialization.
pub fn run(ds: &CompositionDataset, model: &ModelConfig, cfg: &SamplerConfig) -> Result<Vec<PosteriorChain>> {
    run_from(ds, model, cfg, None)
}

/// Runs chains from an explicit starting state, or the default one.
pub fn run_from(
    ds: &CompositionDataset,
    model: &ModelConfig,
    cfg: &SamplerConfig,
    init: Option<(&CoefficientSet, &LatentState)>,
) -> Result<Vec<PosteriorChain>> {
    cfg.validate()?;
    model.validate()?;
    if model.random_effects && ds.group().is_none() {
        return Err(Error::Config("random effects are enabled but the dataset has no group column".into()));
    }
    let (coeffs, latent) = match init {
        Some((c, l)) => (c.clone(), l.clone()),
        None => kernel::default_init(ds, model),
    };
    let lp = log_penalized_posterior(ds, &coeffs, &latent, model)
        .map_err(|e| Error::Initialization(e.to_string()))?;
    if !lp.is_finite() {
        return Err(Error::Initialization(format!("log posterior at the starting point is {lp}")));
    }

    let run_one = |c: usize| -> Result<PosteriorChain> {
        let mut rng = rng_from_seed(split_seed(cfg.seed, c as u64));
        let mut start = coeffs.clone();
        if c > 0 && !cfg.frozen.beta {
            use rand_distr::{Distribution, Normal};
            let jitter = Normal::new(0.0, 0.1).expect("valid normal");
            start.beta.iter_mut().for_each(|b| *b += jitter.sample(&mut rng));
        }
        let mut chain = kernel::Chain::new(ds, model, cfg.frozen, cfg.noncentered_moves, &start, &latent);
        if !chain.is_finite_start() {
            return Err(Error::Initialization("non-finite cached state at start".into()));
        }
        let draws = kernel::run_chain(&mut chain, cfg, &mut rng);
        let acceptance = chain.acceptance();
        let mut warnings = Vec::new();
        if let Some(rate) = acceptance.overall {
            if rate < LOW_ACCEPTANCE {
                warnings.push(format!("chain {c}: overall acceptance {rate:.3} below {LOW_ACCEPTANCE}"));
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(PosteriorChain { draws, acceptance, warnings })
    };

    let chains: Vec<Result<PosteriorChain>> = if cfg.n_chains > 1 && rayon::current_thread_index().is_none() {
        with_pool(|| (0..cfg.n_chains).into_par_iter().map(run_one).collect())
    } else {
        (0..cfg.n_chains).map(run_one).collect()
    };
    chains.into_iter().collect()
}

/// Named scalar parameters of a draw in the chain-dump order.
pub fn flatten_draw(draw: &Draw) -> Vec<f64> {
    let mut v = Vec::new();
    for k in 0..draw.beta.nrows() {
        for j in 0..draw.beta.ncols() {
            v.push(draw.beta[(k, j)]);
        }
    }
    v.extend(draw.beta_phi.iter());
    v.push(draw.xi);
    v.push(draw.xi_star);
    if let Some(u) = &draw.u {
        for g in 0..u.nrows() {
            for j in 0..u.ncols() {
                v.push(u[(g, j)]);
            }
        }
    }
    if let Some(s) = &draw.sigma_u {
        v.extend(s.iter());
    }
    v
}

/// Acceptance rates keyed by block, for reporting.
pub fn acceptance_table(chains: &[PosteriorChain]) -> BTreeMap<String, Vec<Option<f64>>> {
    let mut out: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for c in chains {
        let a = &c.acceptance;
        for (k, v) in [
            ("beta", a.beta),
            ("beta_phi", a.beta_phi),
            ("log_alpha", a.log_alpha),
            ("u", a.random_effects),
            ("sigma_u", a.sigma_u),
            ("overall", a.overall),
        ] {
            out.entry(k.to_string()).or_default().push(v);
        }
    }
    out
}
