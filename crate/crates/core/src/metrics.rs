//! Fit-quality measures on the simplex.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dirichlet::Composition;
use crate::error::{Error, Result};

fn clr_distance(la: &[f64], lb: &[f64]) -> f64 {
    let p = la.len() as f64;
    let ma = la.iter().sum::<f64>() / p;
    let mb = lb.iter().sum::<f64>() / p;
    la.iter()
        .zip(lb)
        .map(|(x, y)| ((x - ma) - (y - mb)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between centered log-ratio transforms.
pub fn aitchison_distance(a: &Composition, b: &Composition) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("compositions of length {} and {}", a.dim(), b.dim())));
    }
    Ok(clr_distance(a.log_parts(), b.log_parts()))
}

fn log_row(m: &DMatrix<f64>, i: usize, what: &str) -> Result<Vec<f64>> {
    m.row(i)
        .iter()
        .map(|v| {
            if *v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(Error::domain(format!("{what} row {} has non-positive entry {v}", i + 1)))
            }
        })
        .collect()
}

/// Sum over rows of the Aitchison distance between estimate and target.
/// Rows need not be closed; the distance is scale invariant.
pub fn sce(estimated: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    if estimated.shape() != target.shape() {
        return Err(Error::dim(format!("{:?} estimates for {:?} targets", estimated.shape(), target.shape())));
    }
    let mut total = 0.0;
    for i in 0..estimated.nrows() {
        total += clr_distance(&log_row(estimated, i, "estimate")?, &log_row(target, i, "target")?);
    }
    Ok(total)
}

/// Fraction of entries with `lower ≤ truth ≤ upper`, and the mean interval
/// width divided by `expected`.
pub fn coverage_and_width(
    lower: &DMatrix<f64>,
    upper: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    expected: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let shape = truth.shape();
    if lower.shape() != shape || upper.shape() != shape || expected.shape() != shape {
        return Err(Error::dim("interval, truth and expected matrices differ in shape"));
    }
    if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
        return Err(Error::domain("interval lower bound exceeds upper bound"));
    }
    if expected.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::domain("expected values must be positive to standardize widths"));
    }
    let n = truth.len() as f64;
    let covered = (0..truth.len())
        .filter(|&k| lower[k] <= truth[k] && truth[k] <= upper[k])
        .count() as f64;
    let width = (0..truth.len()).map(|k| (upper[k] - lower[k]) / expected[k]).sum::<f64>() / n;
    Ok((covered / n, width))
}

/// Fraction of entries inside their intervals, without widths.
pub fn coverage(lower: &DMatrix<f64>, upper: &DMatrix<f64>, values: &DMatrix<f64>) -> f64 {
    let hits = (0..values.len())
        .filter(|&k| lower[k] <= values[k] && values[k] <= upper[k])
        .count();
    hits as f64 / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitStatistics {
    pub sce: f64,
    pub coverage: f64,
    pub std_width: f64,
    pub predictive_coverage: f64,
}

impl FitStatistics {
    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("sce", self.sce),
            ("coverage", self.coverage),
            ("std_width", self.std_width),
            ("predictive_coverage", self.predictive_coverage),
        ]
    }
}

/// Flat `metric,value` CSV.
pub fn write_metrics_csv(path: &Path, rows: &[(&str, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn comp(v: &[f64]) -> Composition {
        Composition::closure(v).unwrap()
    }

    #[test]
    fn known_distances() {
        let a = comp(&[0.1, 0.9]);
        let b = comp(&[0.9, 0.1]);
        assert!(aitchison_distance(&a, &a).unwrap().abs() < 1e-15);
        // clr(a) = (-ln 3, ln 3); distance sqrt(2)·ln 9
        assert!((aitchison_distance(&a, &b).unwrap() - 3.10734479684837).abs() < 1e-12);
        let scaled = Composition::closure(&[0.3, 2.7]).unwrap();
        assert!((aitchison_distance(&scaled, &b).unwrap() - 3.10734479684837).abs() < 1e-12);
        assert!(aitchison_distance(&a, &comp(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn sce_cases() {
        let t = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.5, 0.5]);
        assert_eq!(sce(&t, &t).unwrap(), 0.0);
        let e = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.5, 0.5]);
        assert!((sce(&e, &t).unwrap() - 3.10734479684837).abs() < 1e-12);
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.5]);
        assert!(sce(&z, &t).is_err());
    }

    #[test]
    fn coverage_cases() {
        let t = DMatrix::from_row_slice(1, 3, &[0.2, 0.3, 0.5]);
        let (c, w) = coverage_and_width(&t, &t, &t, &t).unwrap();
        assert_eq!((c, w), (1.0, 0.0));
        let zeros = DMatrix::zeros(1, 3);
        let ones = DMatrix::from_element(1, 3, 1.0);
        let (c, w) = coverage_and_width(&zeros, &ones, &t, &t).unwrap();
        assert_eq!(c, 1.0);
        assert!((w - (5.0 + 10.0 / 3.0 + 2.0) / 3.0).abs() < 1e-12);
        assert!(coverage_and_width(&ones, &zeros, &t, &t).is_err());
        assert!(coverage_and_width(&zeros, &ones, &t, &zeros).is_err());
    }

    fn simplex(p: usize) -> impl Strategy<Value = Composition> {
        prop::collection::vec(0.01f64..10.0, p).prop_map(|v| Composition::closure(&v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metric_axioms((a, b, c) in (2usize..7).prop_flat_map(|p| (simplex(p), simplex(p), simplex(p)))) {
            let ab = aitchison_distance(&a, &b).unwrap();
            let ba = aitchison_distance(&b, &a).unwrap();
            let bc = aitchison_distance(&b, &c).unwrap();
            let ac = aitchison_distance(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!(aitchison_distance(&a, &a).unwrap() < 1e-12);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn permutation_equivariant(a in simplex(4), b in simplex(4), perm in Just([2usize, 0, 3, 1])) {
            let pa = Composition::closure(&perm.map(|k| a.parts()[k])).unwrap();
            let pb = Composition::closure(&perm.map(|k| b.parts()[k])).unwrap();
            let d = aitchison_distance(&a, &b).unwrap();
            prop_assert!((d - aitchison_distance(&pa, &pb).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn sce_additive(rows in prop::collection::vec((simplex(3), simplex(3)), 2..12), cut in 1usize..11) {
            let cut = cut.min(rows.len() - 1);
            let to_mat = |rs: &[(Composition, Composition)], first: bool| {
                DMatrix::from_fn(rs.len(), 3, |i, j| if first { rs[i].0.parts()[j] } else { rs[i].1.parts()[j] })
            };
            let whole = sce(&to_mat(&rows, true), &to_mat(&rows, false)).unwrap();
            let (l, r) = rows.split_at(cut);
            let parts = sce(&to_mat(l, true), &to_mat(l, false)).unwrap() + sce(&to_mat(r, true), &to_mat(r, false)).unwrap();
            prop_assert!((whole - parts).abs() < 1e-10 * (1.0 + whole));
        }
    }
}
