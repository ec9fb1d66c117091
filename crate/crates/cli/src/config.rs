//! Command options: flags merged over an optional JSON config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use dirireg::io::{ColumnRef, LoadSpec};
use dirireg::sampler::SamplerConfig;

/// Every option a command may read. All fields are optional so that a
/// config file and the command line can each supply any subset; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Comma-separated response columns (default: y1, y2, ...).
    #[arg(long, value_delimiter = ',')]
    pub response: Option<Vec<String>>,
    /// Comma-separated mean-model columns; append `:factor` to force a factor.
    #[arg(long, value_delimiter = ',')]
    pub mean_cols: Option<Vec<String>>,
    /// Comma-separated precision-model columns.
    #[arg(long, value_delimiter = ',')]
    pub precision_cols: Option<Vec<String>>,
    /// Grouping column for random effects.
    #[arg(long)]
    pub group: Option<String>,
    /// Add per-group random intercepts to the mean model.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random_effects: Option<bool>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Total iterations per chain, burn-in included.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// A, B, or a JSON scenario file.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Constant precision for scenario A.
    #[arg(long)]
    pub phi: Option<f64>,
    /// Also write the approximate per-part logit analyses to the plot data.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub reference: Option<bool>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),+) => {
        RunConfig { $($field: $flags.$field.or($file.$field)),+ }
    };
}

impl RunConfig {
    /// Flags over file values.
    pub fn merged(self, file: RunConfig) -> RunConfig {
        overlay!(
            self, file, input, response, mean_cols, precision_cols, group, random_effects, chains, iters,
            burnin, thin, seed, out, scenario, replicates, phi, reference
        )
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(dir)
    }

    pub fn input(&self) -> Result<&Path> {
        match &self.input {
            Some(p) => Ok(p),
            None => bail!("--input is required"),
        }
    }

    pub fn random_effects(&self) -> bool {
        self.random_effects.unwrap_or(false)
    }

    pub fn load_spec(&self) -> Result<LoadSpec> {
        if self.random_effects() && self.group.is_none() {
            bail!("--random-effects needs a grouping column; pass --group <column>");
        }
        let refs = |v: &Option<Vec<String>>| v.iter().flatten().filter(|s| !s.is_empty()).map(|s| ColumnRef::parse(s)).collect();
        Ok(LoadSpec {
            response: self.response.clone(),
            mean_cols: refs(&self.mean_cols),
            precision_cols: refs(&self.precision_cols),
            group: self.group.clone(),
        })
    }

    pub fn sampler(&self) -> SamplerConfig {
        let d = SamplerConfig::default();
        let n_iter = self.iters.unwrap_or(d.n_iter);
        let n_burnin = self.burnin.unwrap_or(if self.iters.is_some() { n_iter / 2 } else { d.n_burnin });
        SamplerConfig {
            n_chains: self.chains.unwrap_or(d.n_chains),
            n_iter,
            n_burnin,
            thin: self.thin.unwrap_or(d.thin),
            seed: self.seed(),
            ..d
        }
    }
}
