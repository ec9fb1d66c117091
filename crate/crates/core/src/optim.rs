//! Unconstrained minimization by BFGS with a backtracking line search.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    /// Stop once the gradient max-norm falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-7, max_iter: 2000 }
    }
}

/// One line of the optimizer trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

impl Minimum {
    pub fn grad_norm(&self) -> f64 {
        self.grad.amax()
    }
}

/// Minimizes `f`, where `fg(x)` returns the value and gradient. Non-finite
/// values are treated as `+inf` so the line search backs off from them.
///
/// On failure the error's `last` field carries the final iterate.
pub fn bfgs<F>(fg: F, x0: DVector<f64>, opts: &BfgsOptions) -> std::result::Result<Minimum, (Error, Minimum)>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = fg(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut trace = Vec::new();
    let fail = |msg: String, x: DVector<f64>, f: f64, g: DVector<f64>, it: usize, trace: Vec<TraceRow>| {
        let err = Error::Convergence { iterations: it, message: msg, last: x.iter().copied().collect() };
        (err, Minimum { x, value: f, grad: g, iterations: it, trace })
    };
    if !f.is_finite() {
        return Err(fail("objective is not finite at the starting point".into(), x, f, g, 0, trace));
    }
    let mut first = true;
    for it in 0..opts.max_iter {
        let gn = g.amax();
        if gn < opts.grad_tol {
            return Ok(Minimum { x, value: f, grad: g, iterations: it, trace });
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = g.dot(&d);
        }
        if first {
            // keep the first step modest before any curvature is known
            let scale = (1.0 / d.amax()).min(1.0);
            d *= scale;
            slope *= scale;
            first = false;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &d * t;
            let (fnew, gnew) = fg(&xn);
            if fnew.is_finite() && fnew <= f + 1e-4 * t * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            return Err(fail(format!("line search failed with gradient norm {gn:.3e}"), x, f, g, it, trace));
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * (1.0 + rho * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        trace.push(TraceRow { iteration: it + 1, value: fnew, grad_norm: gnew.amax(), step: t });
        x = xn;
        f = fnew;
        g = gnew;
    }
    let gn = g.amax();
    Err(fail(format!("gradient norm {gn:.3e} after the iteration limit"), x, f, g, opts.max_iter, trace))
}

/// Central-difference Jacobian of a gradient, symmetrized. Step for
/// coordinate k is `rel·(1 + |x_k|)`.
pub fn numeric_hessian<G>(grad: G, x: &DVector<f64>, rel: f64) -> DMatrix<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut hmat = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = rel * (1.0 + x[k].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (grad(&xp) - grad(&xm)) / (2.0 * h);
        hmat.set_column(k, &col);
    }
    (&hmat + hmat.transpose()) * 0.5
}

/// Newton steps from `x` using a numeric Hessian; stops when the gradient
/// max-norm is below `tol` or no step improves `f`.
pub fn newton_polish<F>(fg: F, mut x: DVector<f64>, tol: f64, max_steps: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (mut f, mut g) = fg(&x);
    for _ in 0..max_steps {
        if g.amax() < tol {
            break;
        }
        let hess = numeric_hessian(|z| fg(z).1, &x, 1e-5);
        let Some(step) = hess.clone().cholesky().map(|c| c.solve(&g)) else {
            break;
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let xn = &x - &step * t;
            let (fnew, gnew) = fg(&xn);
            if fnew.is_finite() && fnew <= f + 1e-12 * f.abs().max(1.0) {
                x = xn;
                f = fnew;
                g = gnew;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
        (f, g)
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let m = bfgs(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &BfgsOptions::default()).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
        assert!(m.grad_norm() < 1e-7);
        assert!(!m.trace.is_empty());
    }

    #[test]
    fn reports_last_iterate_on_failure() {
        let opts = BfgsOptions { grad_tol: 1e-12, max_iter: 3 };
        match bfgs(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &opts) {
            Err((Error::Convergence { last, iterations, .. }, m)) => {
                assert_eq!(iterations, 3);
                assert_eq!(last, m.x.iter().copied().collect::<Vec<_>>());
            }
            _ => panic!("expected a convergence error"),
        }
    }

    #[test]
    fn hessian_of_quadratic() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let grad = |x: &DVector<f64>| &a * x;
        let h = numeric_hessian(grad, &DVector::from_vec(vec![0.3, -2.0]), 1e-4);
        assert!((h - &a).amax() < 1e-9);
    }
}
