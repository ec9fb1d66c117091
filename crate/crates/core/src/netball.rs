//! Synthetic stand-in for match-tracking data: movement proportions of
//! players in seven court positions, with repeated matches per player.
//!
//! Generating model, per match of player `k` at position `pos(k)`:
//! `η_j = logit(m_{pos,j}) + u_{k,j}` with `u_{k,j} ~ N(0, player_sd²)`,
//! means `μ_j = inv_logit(η_j)` closed to sum to one, and the response
//! drawn from a Dirichlet with concentrations `phi·μ`. Player `k` plays
//! position `k mod 7` and between `min_matches` and `max_matches` matches.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_design, CompositionDataset, Term};
use crate::dirichlet::{sample_log_gammas, Composition};
use crate::error::{Error, Result};
use crate::io::Column;
use crate::links::{inv_logit, logit};
use crate::ml::{fit_ml_regression, MLConfig, MLFit};
use crate::model::ModelConfig;
use crate::plotdata::{bayes_rows, ml_rows, reference_rows, PlotRow};
use crate::reference::{logit_lm, logit_mixed, ReferenceFit};
use crate::sampler::{self, summarize, FitSummary, PosteriorChain, SamplerConfig};
use crate::seeding::{rng_from_seed, split_seed};

pub const RESPONSES: [&str; 3] = ["standing", "walking", "running"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetballConfig {
    /// Position labels with their typical movement composition.
    pub positions: Vec<(String, [f64; 3])>,
    pub players: usize,
    pub min_matches: usize,
    pub max_matches: usize,
    pub player_sd: f64,
    pub phi: f64,
}

impl Default for NetballConfig {
    fn default() -> Self {
        let pos = [
            ("GS", [0.45, 0.40, 0.15]),
            ("GA", [0.35, 0.43, 0.22]),
            ("WA", [0.25, 0.45, 0.30]),
            ("C", [0.20, 0.45, 0.35]),
            ("WD", [0.25, 0.46, 0.29]),
            ("GD", [0.33, 0.44, 0.23]),
            ("GK", [0.47, 0.39, 0.14]),
        ];
        Self {
            positions: pos.iter().map(|(l, m)| (l.to_string(), *m)).collect(),
            players: 40,
            min_matches: 1,
            max_matches: 9,
            player_sd: 0.5,
            phi: 30.0,
        }
    }
}

impl NetballConfig {
    pub fn validate(&self) -> Result<()> {
        if self.positions.len() < 2 || self.players < self.positions.len() {
            return Err(Error::Config("need at least two positions and one player per position".into()));
        }
        if self.min_matches == 0 || self.min_matches > self.max_matches {
            return Err(Error::Config("match counts must satisfy 1 ≤ min ≤ max".into()));
        }
        if !(self.player_sd >= 0.0) || !(self.phi > 0.0) {
            return Err(Error::Config("player sd must be non-negative and phi positive".into()));
        }
        for (label, m) in &self.positions {
            if m.iter().any(|v| !(*v > 0.0 && *v < 1.0)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("position {label} needs a composition inside the simplex")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NetballData {
    pub dataset: CompositionDataset,
    pub position: Vec<String>,
    pub player: Vec<String>,
    /// players × 3 generated effects.
    pub true_u: DMatrix<f64>,
}

impl NetballData {
    /// Covariate columns for writing alongside the responses.
    pub fn columns(&self) -> Vec<Column> {
        vec![
            Column::labels("position", self.position.clone()),
            Column::labels("player", self.player.clone()),
        ]
    }
}

pub fn generate(cfg: &NetballConfig, seed: u64) -> Result<NetballData> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, cfg.player_sd).map_err(|e| Error::Config(e.to_string()))?;
    let n_pos = cfg.positions.len();
    let base: Vec<[f64; 3]> = cfg
        .positions
        .iter()
        .map(|(_, m)| Ok([logit(m[0])?, logit(m[1])?, logit(m[2])?]))
        .collect::<Result<_>>()?;
    let true_u = DMatrix::from_fn(cfg.players, 3, |_, _| noise.sample(&mut rng));
    let width = cfg.players.to_string().len();
    let (mut y, mut position, mut player, mut group) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut alpha = [0.0; 3];
    let mut lg = [0.0; 3];
    for k in 0..cfg.players {
        let pos = k % n_pos;
        let matches = rng.random_range(cfg.min_matches..=cfg.max_matches);
        for _ in 0..matches {
            let mut mu = [0.0; 3];
            for j in 0..3 {
                mu[j] = inv_logit(base[pos][j] + true_u[(k, j)]);
            }
            let s: f64 = mu.iter().sum();
            for j in 0..3 {
                alpha[j] = cfg.phi * mu[j] / s;
            }
            sample_log_gammas(&alpha, &mut rng, &mut lg);
            y.push(Composition::from_log_parts(&lg)?);
            position.push(cfg.positions[pos].0.clone());
            player.push(format!("P{:0width$}", k + 1));
            group.push(k);
        }
    }
    let n = y.len();
    let mean = build_design(&[Term::factor_from_labels("position", &position)], n)?;
    let precision = build_design(&[], n)?;
    let labels = (1..=cfg.players).map(|k| format!("P{k:0width$}")).collect();
    let names = RESPONSES.iter().map(|s| s.to_string()).collect();
    let dataset = CompositionDataset::new(y, names, mean, precision, Some((group, labels)))?;
    Ok(NetballData { dataset, position, player, true_u })
}

/// The four analysis paths on one grouped dataset.
#[derive(Debug, Clone)]
pub struct NetballAnalysis {
    pub lm: Vec<ReferenceFit>,
    pub mixed: Vec<ReferenceFit>,
    pub ml: MLFit,
    pub chains: Vec<PosteriorChain>,
    pub summary: FitSummary,
    pub plot: Vec<PlotRow>,
}

impl NetballAnalysis {
    /// Posterior medians of the random-effect scales.
    pub fn sigma_u_medians(&self) -> Vec<f64> {
        (1..=3)
            .filter_map(|j| self.summary.get(&format!("sigma_u[{j}]")).map(|s| s.median))
            .collect()
    }
}

/// Runs the per-part logit LM and mixed model, the ML baseline (ignoring
/// players) and the new model with player random effects.
pub fn analyze(ds: &CompositionDataset, sampler_cfg: &SamplerConfig, ml_draws: usize, seed: u64) -> Result<NetballAnalysis> {
    let lm = logit_lm(ds)?;
    let mixed = logit_mixed(ds)?;
    let ml_cfg = MLConfig { seed: split_seed(seed, 3), ..MLConfig::default() };
    let ml = fit_ml_regression(ds, &ml_cfg)?;
    let iv = ml.intervals(ds, ml_draws, split_seed(seed, 4))?;
    let model = ModelConfig { random_effects: true, ..ModelConfig::default() };
    let sc = SamplerConfig { seed: split_seed(seed, 1), ..sampler_cfg.clone() };
    let chains = sampler::run(ds, &model, &sc)?;
    let summary = summarize(&chains)?;
    let mut plot = reference_rows(ds, &lm);
    plot.extend(reference_rows(ds, &mixed));
    plot.extend(ml_rows(ds, &ml, &iv));
    plot.extend(bayes_rows(ds, &chains));
    Ok(NetballAnalysis { lm, mixed, ml, chains, summary, plot })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_shape() {
        let d = generate(&NetballConfig::default(), 3).unwrap();
        let ds = &d.dataset;
        assert_eq!(ds.p(), 3);
        assert_eq!(ds.q(), 7);
        assert_eq!(ds.n_groups(), 40);
        assert!(ds.n() >= 40 && ds.n() <= 360);
        let mut per = vec![0usize; 40];
        ds.group().unwrap().iter().for_each(|&k| per[k] += 1);
        assert!(per.iter().all(|&c| (1..=9).contains(&c)));
        assert_eq!(d.true_u.shape(), (40, 3));
        assert_eq!(d.columns()[1].name, "player");
    }

    #[test]
    fn generator_is_reproducible() {
        let a = generate(&NetballConfig::default(), 11).unwrap();
        let b = generate(&NetballConfig::default(), 11).unwrap();
        assert_eq!(a.dataset.responses(), b.dataset.responses());
        assert_eq!(a.player, b.player);
    }

    #[test]
    fn invalid_configs() {
        let mut c = NetballConfig::default();
        c.min_matches = 0;
        assert!(c.validate().is_err());
        let mut c = NetballConfig::default();
        c.positions[0].1 = [0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn analysis_runs_all_paths() {
        let cfg = NetballConfig { players: 14, ..NetballConfig::default() };
        let d = generate(&cfg, 5).unwrap();
        let sc = SamplerConfig { n_burnin: 300, n_iter: 600, ..SamplerConfig::default() };
        let a = analyze(&d.dataset, &sc, 200, 9).unwrap();
        let methods: std::collections::BTreeSet<&str> = a.plot.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods.len(), 4);
        assert_eq!(a.plot.len(), 4 * 7 * 3);
        assert_eq!(a.sigma_u_medians().len(), 3);
        assert!(a.sigma_u_medians().iter().all(|s| *s > 0.0));
    }
}
