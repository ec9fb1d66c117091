//! Tidy per-profile interval tables for redrawing group-wise estimate plots.
//!
//! A profile is a distinct row of the mean design, e.g. one factor level.
//! Each method contributes one row per profile and response part.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dataset::{Coding, CompositionDataset};
use crate::error::Result;
use crate::links::inv_logit;
use crate::ml::{MLFit, MLIntervals};
use crate::reference::ReferenceFit;
use crate::sampler::{quantile, PosteriorChain};

pub const BAYES_LABEL: &str = "bayes-credible";
pub const ML_LABEL: &str = "ml-wald";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub group: String,
    pub dimension: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: String,
}

/// Distinct mean-design rows in order of first appearance.
#[derive(Debug, Clone)]
pub struct Profiles {
    pub labels: Vec<String>,
    /// Index of the first observation with each profile.
    pub first_row: Vec<usize>,
    /// One design row per profile.
    pub x: DMatrix<f64>,
}

pub fn profiles(ds: &CompositionDataset) -> Profiles {
    let x = ds.x();
    let design = ds.mean_design();
    let mut first_row: Vec<usize> = Vec::new();
    for i in 0..ds.n() {
        if !first_row.iter().any(|&k| x.row(k) == x.row(i)) {
            first_row.push(i);
        }
    }
    let labels = first_row
        .iter()
        .map(|&i| {
            let row = x.row(i);
            if design.coding == Coding::CellMeans {
                let k = row.iter().position(|v| *v == 1.0).unwrap_or(0);
                return design.names[k].clone();
            }
            let parts: Vec<String> = design
                .names
                .iter()
                .zip(row.iter())
                .skip(1)
                .map(|(name, v)| format!("{name}={v}"))
                .collect();
            if parts.is_empty() {
                "(all)".to_string()
            } else {
                parts.join(";")
            }
        })
        .collect();
    let x = DMatrix::from_fn(first_row.len(), x.ncols(), |r, c| x[(first_row[r], c)]);
    Profiles { labels, first_row, x }
}

/// Posterior mean and equal-tailed 95% credible interval of the corrected
/// population-level mean (random effects at zero).
pub fn bayes_rows(ds: &CompositionDataset, chains: &[PosteriorChain]) -> Vec<PlotRow> {
    let pr = profiles(ds);
    let (k, p) = (pr.x.nrows(), ds.p());
    let mut values = vec![Vec::new(); k * p];
    let mut mu = vec![0.0; p];
    for d in chains.iter().flat_map(|c| &c.draws) {
        let eta = &pr.x * &d.beta;
        for r in 0..k {
            mu.iter_mut().enumerate().for_each(|(j, m)| *m = inv_logit(eta[(r, j)]));
            let s: f64 = mu.iter().sum();
            for j in 0..p {
                values[r * p + j].push(mu[j] / s);
            }
        }
    }
    let mut rows = Vec::with_capacity(k * p);
    for r in 0..k {
        for j in 0..p {
            let v = &mut values[r * p + j];
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            v.sort_by(f64::total_cmp);
            rows.push(PlotRow {
                group: pr.labels[r].clone(),
                dimension: ds.response_names()[j].clone(),
                estimate: mean,
                lower: quantile(v, 0.025),
                upper: quantile(v, 0.975),
                method: BAYES_LABEL.into(),
            });
        }
    }
    rows
}

/// ML point estimates with the simulated Wald intervals of the first
/// observation in each profile.
pub fn ml_rows(ds: &CompositionDataset, fit: &MLFit, iv: &MLIntervals) -> Vec<PlotRow> {
    let pr = profiles(ds);
    let mu = fit.mean_surface(&pr.x);
    let mut rows = Vec::new();
    for (r, &i) in pr.first_row.iter().enumerate() {
        for (j, name) in ds.response_names().iter().enumerate() {
            rows.push(PlotRow {
                group: pr.labels[r].clone(),
                dimension: name.clone(),
                estimate: mu[(r, j)],
                lower: iv.mean_lower[(i, j)],
                upper: iv.mean_upper[(i, j)],
                method: ML_LABEL.into(),
            });
        }
    }
    rows
}

/// Back-transformed per-part estimates and 95% intervals.
pub fn reference_rows(ds: &CompositionDataset, fits: &[ReferenceFit]) -> Vec<PlotRow> {
    let pr = profiles(ds);
    let mut rows = Vec::new();
    for r in 0..pr.x.nrows() {
        let x: Vec<f64> = pr.x.row(r).iter().copied().collect();
        for f in fits {
            let (est, lo, hi) = f.interval_at(&x, 0.95);
            rows.push(PlotRow {
                group: pr.labels[r].clone(),
                dimension: ds.response_names()[f.dimension].clone(),
                estimate: est,
                lower: lo,
                upper: hi,
                method: f.kind.label().into(),
            });
        }
    }
    rows
}

pub fn write_plot_csv(path: &Path, rows: &[PlotRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["group", "dimension", "estimate", "lower", "upper", "method"])?;
    }
    w.flush()?;
    Ok(())
}
