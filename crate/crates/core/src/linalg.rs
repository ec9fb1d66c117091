//! Small dense linear-algebra helpers over nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-9;

/// Checks that the columns of `x` are linearly independent, naming the first
/// column that is (numerically) spanned by the columns before it.
pub fn check_full_column_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(x.ncols());
    for k in 0..x.ncols() {
        let col = x.column(k).into_owned();
        let scale = col.norm();
        let mut resid = col.clone();
        for q in &basis {
            let proj = q.dot(&resid);
            resid.axpy(-proj, q, 1.0);
        }
        let rn = resid.norm();
        if scale == 0.0 || rn <= RANK_TOL * scale.max(1.0) {
            let column = names.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
            return Err(Error::RankDeficient { column });
        }
        basis.push(resid / rn);
    }
    Ok(())
}

/// Minimum-norm least-squares solution of `x b = y`.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = x.clone().svd(true, true);
    svd.solve(y, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(x.ncols()))
}

/// Inverse of a symmetric positive-definite matrix, or `None` if the Cholesky
/// factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().map(|c| c.inverse())
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().map(|c| c.l())
}
