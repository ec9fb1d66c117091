//! Simulation scenarios and replicated comparison of the two fitting methods.
//!
//! Scenario A: one three-level factor, constant precision. Scenario B: a
//! two-level factor plus a linear covariate `x2` in both the means (third
//! dimension only, before closure) and the log precision. Truth surfaces
//! are built in the multivariate-logit form: per-dimension linear
//! predictors with the first dimension at zero, closed by softmax.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_design, default_response_names, CompositionDataset, Term};
use crate::dirichlet::{sample_log_gammas, Composition};
use crate::error::{Error, Result};
use crate::links::softmax;
use crate::metrics::{coverage, coverage_and_width, sce, FitStatistics};
use crate::ml::{fit_ml_regression, MLConfig};
use crate::model::ModelConfig;
use crate::sampler::{self, posterior_predictive, summarize, SamplerConfig};
use crate::seeding::{rng_from_seed, split_seed, with_pool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    A,
    B,
}

/// Data-generating settings for one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n_per_level: usize,
    /// Linear predictor of each dimension at each factor level, `[dim][level]`.
    /// Dimension 1 should be all zero.
    pub level_coefficients: Vec<Vec<f64>>,
    /// Per-dimension slope on `x2` (Scenario B).
    pub x2_slopes: Vec<f64>,
    pub x2_range: (f64, f64),
    /// `ln φ = a + b·x2`; Scenario A uses `b = 0`.
    pub log_phi: (f64, f64),
    pub replicates: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn scenario_a() -> Self {
        Self {
            kind: ScenarioKind::A,
            n_per_level: 20,
            level_coefficients: vec![vec![0.0; 3], vec![-0.9, 0.6, 1.2], vec![0.8, -1.0, 0.5]],
            x2_slopes: vec![0.0; 3],
            x2_range: (0.0, 0.0),
            log_phi: (0.0, 0.0),
            replicates: 100,
            seed: 1,
        }
    }

    pub fn scenario_b() -> Self {
        Self {
            kind: ScenarioKind::B,
            n_per_level: 40,
            level_coefficients: vec![vec![0.0, 0.0], vec![-0.9, 0.6], vec![1.8, -1.0]],
            x2_slopes: vec![0.0, 0.0, 0.75],
            x2_range: (4.5, 7.5),
            log_phi: (-1.0, 0.5),
            replicates: 100,
            seed: 1,
        }
    }

    /// Scenario A with `p` dimensions and level effects drawn from
    /// U(−1.5, 1.5), fixed by `coef_seed`.
    pub fn scenario_a_random(p: usize, coef_seed: u64) -> Self {
        let mut rng = rng_from_seed(coef_seed);
        let mut coefs = vec![vec![0.0; 3]];
        for _ in 1..p {
            coefs.push((0..3).map(|_| rng.random_range(-1.5..1.5)).collect());
        }
        Self {
            level_coefficients: coefs,
            x2_slopes: vec![0.0; p],
            ..Self::scenario_a()
        }
    }

    pub fn with_phi(mut self, phi: f64) -> Self {
        self.log_phi = (phi.ln(), 0.0);
        self
    }

    pub fn p(&self) -> usize {
        self.level_coefficients.len()
    }

    pub fn levels(&self) -> usize {
        self.level_coefficients.first().map_or(0, Vec::len)
    }

    pub fn n(&self) -> usize {
        self.levels() * self.n_per_level
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p < 2 || self.levels() < 1 || self.level_coefficients.iter().any(|c| c.len() != self.levels()) {
            return Err(Error::Config("level coefficients must be P ≥ 2 rows of equal length".into()));
        }
        if self.x2_slopes.len() != p {
            return Err(Error::Config(format!("{} x2 slopes for {p} dimensions", self.x2_slopes.len())));
        }
        if self.n_per_level == 0 {
            return Err(Error::Config("n_per_level must be positive".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.kind == ScenarioKind::B && self.levels() < 2 {
            return Err(Error::Config("scenario B needs at least two factor levels".into()));
        }
        Ok(())
    }

    fn x2_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.x2_range;
        let m = self.n_per_level;
        (0..m)
            .map(|k| if m == 1 { lo } else { lo + (hi - lo) * k as f64 / (m - 1) as f64 })
            .collect()
    }
}

/// One simulated dataset with its generating truth.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: CompositionDataset,
    /// n×P true means.
    pub true_mu: DMatrix<f64>,
    pub true_phi: DVector<f64>,
    pub level: Vec<usize>,
    pub x2: Option<Vec<f64>>,
}

/// True means and precisions of every row, without sampling.
pub fn truth(cfg: &ScenarioConfig) -> Result<(DMatrix<f64>, DVector<f64>, Vec<usize>, Vec<f64>)> {
    cfg.validate()?;
    let (p, n) = (cfg.p(), cfg.n());
    let grid = cfg.x2_grid();
    let mut level = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    for l in 0..cfg.levels() {
        for g in &grid {
            level.push(l);
            x2.push(if cfg.kind == ScenarioKind::B { *g } else { 0.0 });
        }
    }
    let mut mu = DMatrix::zeros(n, p);
    let mut eta = vec![0.0; p];
    for i in 0..n {
        for (j, e) in eta.iter_mut().enumerate() {
            *e = cfg.level_coefficients[j][level[i]] + cfg.x2_slopes[j] * x2[i];
        }
        for (j, m) in softmax(&eta).into_iter().enumerate() {
            mu[(i, j)] = m;
        }
    }
    let phi = DVector::from_iterator(n, x2.iter().map(|x| (cfg.log_phi.0 + cfg.log_phi.1 * x).exp()));
    Ok((mu, phi, level, x2))
}

/// Draws one dataset. Bit-reproducible from `(cfg, seed)`.
pub fn generate(cfg: &ScenarioConfig, seed: u64) -> Result<Generated> {
    let (mu, phi, level, x2) = truth(cfg)?;
    let (n, p) = mu.shape();
    let mut rng = rng_from_seed(seed);
    let mut alpha = vec![0.0; p];
    let mut lg = vec![0.0; p];
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        alpha.iter_mut().enumerate().for_each(|(j, a)| *a = mu[(i, j)] * phi[i]);
        sample_log_gammas(&alpha, &mut rng, &mut lg);
        y.push(Composition::from_log_parts(&lg)?);
    }
    let labels: Vec<String> = level.iter().map(|l| (l + 1).to_string()).collect();
    let factor = Term::factor_from_labels("level", &labels);
    let (mean, precision) = match cfg.kind {
        ScenarioKind::A => (build_design(&[factor], n)?, build_design(&[], n)?),
        ScenarioKind::B => {
            let x2t = Term::numeric("x2", x2.clone());
            (build_design(&[factor, x2t.clone()], n)?, build_design(&[x2t], n)?)
        }
    };
    let dataset = CompositionDataset::new(y, default_response_names(p), mean, precision, None)?;
    Ok(Generated {
        dataset,
        true_mu: mu,
        true_phi: phi,
        level,
        x2: (cfg.kind == ScenarioKind::B).then_some(x2),
    })
}

pub fn generate_scenario_a(cfg: &ScenarioConfig, seed: u64) -> Result<(CompositionDataset, DMatrix<f64>)> {
    let g = generate(cfg, seed)?;
    Ok((g.dataset, g.true_mu))
}

pub fn generate_scenario_b(cfg: &ScenarioConfig, seed: u64) -> Result<(CompositionDataset, DMatrix<f64>, DVector<f64>)> {
    let g = generate(cfg, seed)?;
    Ok((g.dataset, g.true_mu, g.true_phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Maximum-likelihood multivariate-logit fit.
    Baseline,
    /// Penalized-likelihood Bayesian fit.
    New,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::New => "new",
        }
    }
}

/// Settings for fitting each replicate.
#[derive(Debug, Clone, Default)]
pub struct StudySettings {
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub ml: MLConfig,
    /// Parameter draws for the baseline's simulated intervals.
    pub ml_interval_draws: usize,
}

impl StudySettings {
    pub fn new(sampler: SamplerConfig) -> Self {
        Self { sampler, model: ModelConfig::default(), ml: MLConfig::default(), ml_interval_draws: 1000 }
    }
}

/// Result of one method on one replicate.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub stats: FitStatistics,
    /// p-values keyed `response:column`, or `phi:column` for precision terms.
    pub p_values: BTreeMap<String, f64>,
    /// Posterior or fitted mean surface.
    pub estimate: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    pub results: BTreeMap<Method, std::result::Result<MethodResult, String>>,
}

fn fit_new(g: &Generated, set: &StudySettings, seed: u64) -> Result<MethodResult> {
    let ds = &g.dataset;
    let sc = SamplerConfig { seed: split_seed(seed, 1), ..set.sampler.clone() };
    let chains = sampler::run(ds, &set.model, &sc)?;
    let summary = summarize(&chains)?;
    let (cov, width) = coverage_and_width(&summary.mu.lower, &summary.mu.upper, &g.true_mu, &g.true_mu)?;
    let pred = posterior_predictive(&chains, split_seed(seed, 2));
    let y = observed_matrix(ds);
    let stats = FitStatistics {
        sce: sce(&summary.mu.mean, &g.true_mu)?,
        coverage: cov,
        std_width: width,
        predictive_coverage: coverage(&pred.lower, &pred.upper, &y),
    };
    let mut p_values = BTreeMap::new();
    let xn = &ds.mean_design().names;
    for (k, col) in xn.iter().enumerate() {
        for (j, resp) in ds.response_names().iter().enumerate() {
            if let Some(pv) = summary.get(&format!("beta[{},{}]", k + 1, j + 1)).and_then(|s| s.p_value) {
                p_values.insert(format!("{resp}:{col}"), pv);
            }
        }
    }
    for (k, col) in ds.precision_design().names.iter().enumerate() {
        if let Some(pv) = summary.get(&format!("beta_phi[{}]", k + 1)).and_then(|s| s.p_value) {
            p_values.insert(format!("phi:{col}"), pv);
        }
    }
    Ok(MethodResult { stats, p_values, estimate: summary.mu.mean })
}

fn fit_baseline(g: &Generated, set: &StudySettings, seed: u64) -> Result<MethodResult> {
    let ds = &g.dataset;
    let fit = fit_ml_regression(ds, &MLConfig { seed: split_seed(seed, 3), ..set.ml.clone() })?;
    let mu = fit.mean_surface(ds.x());
    let iv = fit.intervals(ds, set.ml_interval_draws.max(100), split_seed(seed, 4))?;
    let (cov, width) = coverage_and_width(&iv.mean_lower, &iv.mean_upper, &g.true_mu, &g.true_mu)?;
    let y = observed_matrix(ds);
    let stats = FitStatistics {
        sce: sce(&mu, &g.true_mu)?,
        coverage: cov,
        std_width: width,
        predictive_coverage: coverage(&iv.predictive_lower, &iv.predictive_upper, &y),
    };
    let p_values = fit
        .coefficients
        .iter()
        .filter_map(|c| c.p_value.map(|p| (c.name.clone(), p)))
        .collect();
    Ok(MethodResult { stats, p_values, estimate: mu })
}

fn observed_matrix(ds: &CompositionDataset) -> DMatrix<f64> {
    DMatrix::from_fn(ds.n(), ds.p(), |i, j| ds.responses()[i].parts()[j])
}

/// Generates and fits one replicate.
pub fn run_replicate(cfg: &ScenarioConfig, set: &StudySettings, methods: &[Method], index: usize) -> Result<ReplicateResult> {
    let seed = split_seed(cfg.seed, index as u64);
    let g = generate(cfg, split_seed(seed, 0))?;
    let mut results = BTreeMap::new();
    for &m in methods {
        let r = match m {
            Method::New => fit_new(&g, set, seed),
            Method::Baseline => fit_baseline(&g, set, seed),
        };
        if let Err(e) = &r {
            log::warn!("replicate {index} {}: {e}", m.label());
        }
        results.insert(m, r.map_err(|e| e.to_string()));
    }
    Ok(ReplicateResult { index, seed, results })
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_sce: f64,
    pub mean_coverage: f64,
    pub mean_std_width: f64,
    pub mean_predictive_coverage: f64,
    pub median_p_values: BTreeMap<String, f64>,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct StudySummary {
    pub methods: BTreeMap<Method, MethodSummary>,
    pub replicates: Vec<ReplicateResult>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Averages over successful replicates. Independent of replicate order.
pub fn aggregate(replicates: &[ReplicateResult], methods: &[Method]) -> BTreeMap<Method, MethodSummary> {
    let mut out = BTreeMap::new();
    for &m in methods {
        let ok: Vec<&MethodResult> = replicates
            .iter()
            .filter_map(|r| r.results.get(&m).and_then(|x| x.as_ref().ok()))
            .collect();
        let failed = replicates.len() - ok.len();
        let k = ok.len() as f64;
        // summing in replicate-index order keeps the mean independent of the input order
        let mut sorted: Vec<(usize, &MethodResult)> = replicates
            .iter()
            .filter_map(|r| r.results.get(&m).and_then(|x| x.as_ref().ok()).map(|x| (r.index, x)))
            .collect();
        sorted.sort_by_key(|(i, _)| *i);
        let mean_of = |f: fn(&FitStatistics) -> f64| {
            if sorted.is_empty() {
                f64::NAN
            } else {
                sorted.iter().map(|(_, r)| f(&r.stats)).sum::<f64>() / k
            }
        };
        let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &ok {
            for (name, p) in &r.p_values {
                by_name.entry(name.clone()).or_default().push(*p);
            }
        }
        let median_p_values = by_name.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect();
        out.insert(
            m,
            MethodSummary {
                method: m,
                mean_sce: mean_of(|s| s.sce),
                mean_coverage: mean_of(|s| s.coverage),
                mean_std_width: mean_of(|s| s.std_width),
                mean_predictive_coverage: mean_of(|s| s.predictive_coverage),
                median_p_values,
                succeeded: ok.len(),
                failed,
            },
        );
    }
    out
}

/// Runs every replicate (in parallel, up to the thread cap) and aggregates.
pub fn run_study(cfg: &ScenarioConfig, set: &StudySettings, methods: &[Method]) -> Result<StudySummary> {
    cfg.validate()?;
    set.sampler.validate()?;
    let replicates: Vec<Result<ReplicateResult>> = with_pool(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| run_replicate(cfg, set, methods, r))
            .collect()
    });
    let replicates = replicates.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(StudySummary { methods: aggregate(&replicates, methods), replicates })
}

impl StudySummary {
    fn value(&self, m: Method, f: impl Fn(&MethodSummary) -> f64) -> String {
        self.methods.get(&m).map_or_else(|| "NA".to_string(), |s| format!("{:.6}", f(s)))
    }

    /// Rows Error, Coverage, Std. Width (plus predictive coverage and
    /// replicate counts); columns Target, baseline, new.
    pub fn table_rows(&self) -> Vec<[String; 4]> {
        let row = |label: &str, target: &str, f: &dyn Fn(&MethodSummary) -> f64| {
            [
                label.to_string(),
                target.to_string(),
                self.value(Method::Baseline, f),
                self.value(Method::New, f),
            ]
        };
        vec![
            row("Error", "0", &|s| s.mean_sce),
            row("Coverage", "0.95", &|s| s.mean_coverage),
            row("Std. Width", "0", &|s| s.mean_std_width),
            row("Predictive coverage", "0.95", &|s| s.mean_predictive_coverage),
            row("Replicates fitted", "", &|s| s.succeeded as f64),
            row("Replicates failed", "0", &|s| s.failed as f64),
        ]
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["statistic", "target", "baseline", "new"])?;
        for r in self.table_rows() {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_pvalues_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["coefficient", "method", "median_p_value", "replicates"])?;
        for (m, s) in &self.methods {
            for (name, p) in &s.median_p_values {
                let count = self
                    .replicates
                    .iter()
                    .filter(|r| matches!(r.results.get(m), Some(Ok(x)) if x.p_values.contains_key(name)))
                    .count();
                w.write_record([name.clone(), m.label().to_string(), format!("{p:.6}"), count.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text version of the summary table.
    pub fn render(&self) -> String {
        let mut out = format!("{:<22}{:>10}{:>12}{:>12}\n", "", "Target", "Baseline", "New");
        for r in self.table_rows() {
            out.push_str(&format!("{:<22}{:>10}{:>12}{:>12}\n", r[0], r[1], short(&r[2]), short(&r[3])));
        }
        out
    }
}

fn short(v: &str) -> String {
    v.parse::<f64>().map_or_else(|_| v.to_string(), |x| format!("{x:.3}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_a_truth() {
        let cfg = ScenarioConfig::scenario_a();
        let (mu, phi, level, _) = truth(&cfg).unwrap();
        assert_eq!(mu.shape(), (60, 3));
        let want = [0.275322013388, 0.111937577302, 0.61274040931];
        for j in 0..3 {
            assert!((mu[(0, j)] - want[j]).abs() < 1e-10);
        }
        for i in 0..60 {
            assert!((mu.row(i).sum() - 1.0).abs() < 1e-15);
            assert_eq!(phi[i], 1.0);
        }
        assert_eq!(level[20], 1);
    }

    #[test]
    fn scenario_b_truth() {
        let cfg = ScenarioConfig::scenario_b();
        let (mu, phi, level, x2) = truth(&cfg).unwrap();
        assert_eq!(mu.shape(), (80, 3));
        assert_eq!((x2[0], x2[39]), (4.5, 7.5));
        assert!((phi[39] - 15.6426318842).abs() < 1e-9);
        for l in 0..2 {
            let rows: Vec<usize> = (0..80).filter(|&i| level[i] == l).collect();
            for w in rows.windows(2) {
                let (a, b) = (w[0], w[1]);
                assert!(mu[(b, 2)] > mu[(a, 2)]);
                assert!(mu[(b, 0)] < mu[(a, 0)] && mu[(b, 1)] < mu[(a, 1)]);
            }
        }
        for i in 0..80 {
            assert!((mu.row(i).sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = ScenarioConfig::scenario_b();
        let a = generate(&cfg, 11).unwrap();
        let b = generate(&cfg, 11).unwrap();
        let c = generate(&cfg, 12).unwrap();
        assert_eq!(a.dataset.log_y(), b.dataset.log_y());
        assert_ne!(a.dataset.log_y(), c.dataset.log_y());
        assert_eq!(a.dataset.mean_design().names, vec!["(Intercept)", "level[2]", "x2"]);
        assert_eq!(a.dataset.precision_design().names, vec!["(Intercept)", "x2"]);
        let sa = generate(&ScenarioConfig::scenario_a(), 3).unwrap();
        assert_eq!(sa.dataset.mean_design().coding, crate::dataset::Coding::CellMeans);
        for i in 0..60 {
            let alpha_sum: f64 = (0..3).map(|j| sa.true_mu[(i, j)] * sa.true_phi[i]).sum();
            assert!((alpha_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_dimension_variant_is_valid() {
        let cfg = ScenarioConfig::scenario_a_random(8, 5);
        assert_eq!(cfg.p(), 8);
        assert!(cfg.level_coefficients[1..].iter().flatten().all(|c| (-1.5..1.5).contains(c)));
        let (mu, _, _, _) = truth(&cfg).unwrap();
        for i in 0..mu.nrows() {
            assert!((mu.row(i).sum() - 1.0).abs() < 1e-14);
            assert!(mu.row(i).iter().all(|m| *m > 0.0));
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ScenarioConfig::scenario_a();
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::scenario_a();
        cfg.x2_slopes.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn aggregation_ignores_order_and_counts_failures() {
        let mk = |index: usize, sce: f64, ok: bool| {
            let r = if ok {
                Ok(MethodResult {
                    stats: FitStatistics { sce, coverage: 0.9, std_width: 0.5, predictive_coverage: 0.95 },
                    p_values: [("y2:x2".to_string(), sce / 100.0)].into_iter().collect(),
                    estimate: DMatrix::zeros(1, 1),
                })
            } else {
                Err("failed".to_string())
            };
            ReplicateResult { index, seed: 0, results: [(Method::New, r)].into_iter().collect() }
        };
        let reps = vec![mk(0, 10.0, true), mk(1, 20.0, true), mk(2, 0.0, false), mk(3, 30.0, true)];
        let a = aggregate(&reps, &[Method::New]);
        let mut rev = reps.clone();
        rev.reverse();
        let b = aggregate(&rev, &[Method::New]);
        let (sa, sb) = (&a[&Method::New], &b[&Method::New]);
        assert_eq!(sa.mean_sce, 20.0);
        assert_eq!(sa.mean_sce, sb.mean_sce);
        assert_eq!((sa.succeeded, sa.failed), (3, 1));
        assert_eq!(sa.median_p_values["y2:x2"], 0.2);
    }
}
