//! Compositional datasets and design-matrix construction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dirichlet::Composition;
use crate::error::{Error, Result};
use crate::linalg::check_full_column_rank;

/// How a factor is expanded into indicator columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coding {
    /// One indicator per level, no intercept.
    CellMeans,
    /// Intercept plus indicators for every level but the first.
    Treatment,
}

impl std::fmt::Display for Coding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Coding::CellMeans => "cell-means",
            Coding::Treatment => "treatment",
        })
    }
}

/// One covariate before expansion.
#[derive(Debug, Clone)]
pub enum Term {
    Numeric { name: String, values: Vec<f64> },
    Factor { name: String, levels: Vec<String>, codes: Vec<usize> },
}

impl Term {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Term::Numeric { name: name.into(), values }
    }

    /// Factor from raw labels. Levels are sorted, numerically when every
    /// label parses as a number.
    pub fn factor_from_labels(name: impl Into<String>, labels: &[String]) -> Self {
        let mut levels: Vec<String> = labels.to_vec();
        levels.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(x), Ok(y)) => x.total_cmp(&y),
            _ => a.cmp(b),
        });
        levels.dedup();
        let codes = labels
            .iter()
            .map(|l| levels.iter().position(|v| v == l).expect("label is a level"))
            .collect();
        Term::Factor { name: name.into(), levels, codes }
    }

    pub fn len(&self) -> usize {
        match self {
            Term::Numeric { values, .. } => values.len(),
            Term::Factor { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A design matrix with column names and the factor coding used.
#[derive(Debug, Clone)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
    pub coding: Coding,
}

/// Expands terms into a design matrix.
///
/// A lone factor gets cell-means coding; anything else gets an intercept
/// with treatment-coded factors. No terms at all gives an intercept-only
/// design.
pub fn build_design(terms: &[Term], n: usize) -> Result<Design> {
    if let Some(t) = terms.iter().find(|t| t.len() != n) {
        return Err(Error::dim(format!("term has {} rows, expected {n}", t.len())));
    }
    if let [Term::Factor { name, levels, codes }] = terms {
        let matrix = DMatrix::from_fn(n, levels.len(), |i, k| (codes[i] == k) as u8 as f64);
        let names = levels.iter().map(|l| format!("{name}[{l}]")).collect();
        return Ok(Design { matrix, names, coding: Coding::CellMeans });
    }
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut names = vec!["(Intercept)".to_string()];
    for t in terms {
        match t {
            Term::Numeric { name, values } => {
                cols.push(values.clone());
                names.push(name.clone());
            }
            Term::Factor { name, levels, codes } => {
                for (k, l) in levels.iter().enumerate().skip(1) {
                    cols.push(codes.iter().map(|&c| (c == k) as u8 as f64).collect());
                    names.push(format!("{name}[{l}]"));
                }
            }
        }
    }
    let matrix = DMatrix::from_fn(n, cols.len(), |i, k| cols[k][i]);
    Ok(Design { matrix, names, coding: Coding::Treatment })
}

/// Responses with their mean and precision designs and optional grouping.
#[derive(Debug, Clone)]
pub struct CompositionDataset {
    y: Vec<Composition>,
    log_y: Vec<f64>,
    response_names: Vec<String>,
    mean_design: Design,
    precision_design: Design,
    group: Option<Vec<usize>>,
    group_labels: Vec<String>,
}

impl CompositionDataset {
    /// Validates shapes, column rank and group indexing.
    ///
    /// `group` holds 0-based indices that must cover `0..G` without gaps.
    pub fn new(
        y: Vec<Composition>,
        response_names: Vec<String>,
        mean_design: Design,
        precision_design: Design,
        group: Option<(Vec<usize>, Vec<String>)>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::DegenerateData("dataset has no rows".into()));
        }
        let p = y[0].dim();
        if y.iter().any(|c| c.dim() != p) {
            return Err(Error::dim("response rows have differing lengths"));
        }
        if response_names.len() != p {
            return Err(Error::dim(format!("{} response names for {p} parts", response_names.len())));
        }
        for (what, d) in [("mean", &mean_design), ("precision", &precision_design)] {
            if d.matrix.nrows() != n {
                return Err(Error::dim(format!("{what} design has {} rows, expected {n}", d.matrix.nrows())));
            }
            if d.matrix.ncols() == 0 || d.names.len() != d.matrix.ncols() {
                return Err(Error::dim(format!("{what} design needs at least one named column")));
            }
            check_full_column_rank(&d.matrix, &d.names)?;
        }
        let (group, group_labels) = match group {
            Some((g, labels)) => {
                if g.len() != n {
                    return Err(Error::dim(format!("group has {} entries, expected {n}", g.len())));
                }
                let count = g.iter().max().map_or(0, |m| m + 1);
                let mut seen = vec![false; count];
                g.iter().for_each(|&k| seen[k] = true);
                if seen.iter().any(|s| !s) {
                    return Err(Error::domain("group indices must cover 0..G without gaps"));
                }
                if labels.len() != count {
                    return Err(Error::dim(format!("{} group labels for {count} groups", labels.len())));
                }
                (Some(g), labels)
            }
            None => (None, Vec::new()),
        };
        let log_y = y.iter().flat_map(|c| c.log_parts().iter().copied()).collect();
        Ok(Self {
            y,
            log_y,
            response_names,
            mean_design,
            precision_design,
            group,
            group_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.y[0].dim()
    }

    pub fn q(&self) -> usize {
        self.mean_design.matrix.ncols()
    }

    pub fn r(&self) -> usize {
        self.precision_design.matrix.ncols()
    }

    pub fn responses(&self) -> &[Composition] {
        &self.y
    }

    /// Row-major n×P log-responses.
    pub fn log_y(&self) -> &[f64] {
        &self.log_y
    }

    pub fn response_names(&self) -> &[String] {
        &self.response_names
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.mean_design.matrix
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.precision_design.matrix
    }

    pub fn mean_design(&self) -> &Design {
        &self.mean_design
    }

    pub fn precision_design(&self) -> &Design {
        &self.precision_design
    }

    pub fn group(&self) -> Option<&[usize]> {
        self.group.as_deref()
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    /// The same rows with the grouping dropped.
    pub fn without_groups(&self) -> Self {
        Self { group: None, group_labels: Vec::new(), ..self.clone() }
    }

    /// The same designs and grouping with new responses.
    pub fn with_responses(&self, y: Vec<Composition>) -> Result<Self> {
        let group = self.group.clone().map(|g| (g, self.group_labels.clone()));
        Self::new(
            y,
            self.response_names.clone(),
            self.mean_design.clone(),
            self.precision_design.clone(),
            group,
        )
    }
}

/// Default response names `y1..yP`.
pub fn default_response_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("y{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn lone_factor_uses_cell_means() {
        let f = Term::factor_from_labels("pos", &labels(&["b", "a", "b", "c"]));
        let d = build_design(&[f], 4).unwrap();
        assert_eq!(d.coding, Coding::CellMeans);
        assert_eq!(d.names, labels(&["pos[a]", "pos[b]", "pos[c]"]));
        assert_eq!(d.matrix.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn mixed_terms_use_treatment_coding() {
        let f = Term::factor_from_labels("lvl", &labels(&["1", "2", "10", "2"]));
        let x = Term::numeric("x2", vec![4.5, 5.0, 6.0, 7.5]);
        let d = build_design(&[f, x], 4).unwrap();
        assert_eq!(d.coding, Coding::Treatment);
        assert_eq!(d.names, labels(&["(Intercept)", "lvl[2]", "lvl[10]", "x2"]));
        assert_eq!(d.matrix[(2, 2)], 1.0);
        let empty = build_design(&[], 3).unwrap();
        assert_eq!(empty.matrix.ncols(), 1);
    }

    #[test]
    fn constant_covariate_is_rank_deficient() {
        let n = 5;
        let y = vec![Composition::new(vec![0.3, 0.7]).unwrap(); n];
        let mean = build_design(&[Term::numeric("const", vec![2.0; n])], n).unwrap();
        let prec = build_design(&[], n).unwrap();
        match CompositionDataset::new(y, default_response_names(2), mean, prec, None) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, "const"),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn groups_must_be_contiguous() {
        let n = 3;
        let y = vec![Composition::new(vec![0.3, 0.7]).unwrap(); n];
        let d = build_design(&[], n).unwrap();
        let bad = Some((vec![0, 2, 2], labels(&["a", "b", "c"])));
        assert!(CompositionDataset::new(y.clone(), default_response_names(2), d.clone(), d.clone(), bad).is_err());
        let ok = Some((vec![0, 1, 1], labels(&["a", "b"])));
        let ds = CompositionDataset::new(y, default_response_names(2), d.clone(), d, ok).unwrap();
        assert_eq!(ds.n_groups(), 2);
        assert!(ds.without_groups().group().is_none());
    }
}
