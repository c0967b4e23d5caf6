//! Dense log-barrier Newton method for small smooth problems with optional
//! linear equality constraints.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, symmetrize};

/// Value, gradient and Hessian of a twice-differentiable function.
pub type Taylor2 = (f64, DVector<f64>, DMatrix<f64>);

pub trait BarrierProblem {
    fn dim(&self) -> usize;

    fn objective(&self, x: &DVector<f64>) -> Taylor2;

    /// Barrier value and derivatives, or `None` outside the domain.
    fn barrier(&self, x: &DVector<f64>) -> Option<Taylor2>;

    /// Self-concordance parameter; the duality gap after centering at `t`
    /// is `degree / t`.
    fn barrier_degree(&self) -> f64;
}

#[derive(Debug, Clone)]
pub struct BarrierOptions {
    pub t0: f64,
    pub growth: f64,
    pub gap_tol: f64,
    pub max_newton: usize,
    pub newton_tol: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            t0: 1.0,
            growth: 20.0,
            gap_tol: 1e-10,
            max_newton: 100,
            newton_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub x: DVector<f64>,
    pub t: f64,
    pub newton_iters: usize,
    /// `||E x - e||` at the returned point (0 without equalities).
    pub eq_residual: f64,
}

/// Linear equality constraints `E x = e`.
#[derive(Debug, Clone)]
pub struct Equalities {
    pub e_mat: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl Equalities {
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.e_mat * x - &self.rhs
    }
}

/// Positive definite stand-in for a symmetric matrix: unchanged when it
/// already admits a Cholesky factor, otherwise eigenvalues below a small
/// floor (relative to the largest magnitude) are raised to it.
///
/// Raising rather than reflecting negative curvature keeps long steps along
/// directions where the barrier of a nonconvex constraint bends downward;
/// the line search then controls the step length.
pub fn regularize_pd(h: &DMatrix<f64>) -> DMatrix<f64> {
    if h.clone().cholesky().is_some() {
        return h.clone();
    }
    let (vals, vecs) = sym_eigen(h);
    let floor = 1e-8 * vals.amax().max(1e-300);
    let fixed = vals.map(|v| v.max(floor));
    symmetrize(&(&vecs * DMatrix::from_diagonal(&fixed) * vecs.transpose()))
}

fn solve_newton(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq: Option<&Equalities>,
    primal_res: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let n = g.len();
    let Some(eq) = eq else {
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("Newton system is not positive definite"))?;
        return Ok(chol.solve(&(-g)));
    };
    let m = eq.e_mat.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    kkt.view_mut((0, n), (n, m)).copy_from(&eq.e_mat.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(&eq.e_mat);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    if let Some(r) = primal_res {
        rhs.rows_mut(n, m).copy_from(&(-r));
    }
    let sol = kkt
        .clone()
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()));
    let sol = match sol {
        Some(s) if (&kkt * &s - &rhs).norm() <= 1e-8 * rhs.norm().max(1.0) => s,
        _ => {
            let svd = kkt.svd(true, true);
            let smax = svd.singular_values.max();
            svd.solve(&rhs, 1e-12 * smax.max(1e-300))
                .map_err(|e| Error::numerical(format!("KKT solve failed: {e}")))?
        }
    };
    Ok(sol.rows(0, n).into_owned())
}

fn merit<P: BarrierProblem + ?Sized>(p: &P, t: f64, x: &DVector<f64>) -> Option<f64> {
    let (b, _, _) = p.barrier(x)?;
    let v = t * p.objective(x).0 + b;
    v.is_finite().then_some(v)
}

/// Minimize the problem's objective over the barrier domain (intersected
/// with the equalities, if any), starting from a strictly interior `x0`.
pub fn solve<P: BarrierProblem + ?Sized>(
    problem: &P,
    x0: DVector<f64>,
    eq: Option<&Equalities>,
    opts: &BarrierOptions,
) -> Result<BarrierSolution> {
    if x0.len() != problem.dim() {
        return Err(Error::contract("barrier start point has wrong dimension"));
    }
    if problem.barrier(&x0).is_none() {
        return Err(Error::contract("barrier start point is outside the domain"));
    }
    let eq_tol = eq.map_or(0.0, |e| 1e-12 * e.rhs.amax().max(1.0));
    let nu = problem.barrier_degree().max(1.0);
    let mut x = x0;
    let mut t = opts.t0;
    let mut iters = 0usize;
    loop {
        for _ in 0..opts.max_newton {
            iters += 1;
            let (_, g, h) = problem.objective(&x);
            let (_, bg, bh) = problem
                .barrier(&x)
                .ok_or_else(|| Error::numerical("iterate left the barrier domain"))?;
            let grad = g * t + bg;
            let hess = regularize_pd(&(h * t + bh));
            let res = eq.map(|e| e.residual(&x));
            let feasible = res.as_ref().is_none_or(|r| r.norm() <= eq_tol);
            let dx = solve_newton(&hess, &grad, eq, if feasible { None } else { res.as_ref() })?;
            if feasible {
                let decrement = -grad.dot(&dx);
                let f0 = merit(problem, t, &x).expect("interior iterate");
                // Below the second bound the merit cannot resolve the decrease.
                if decrement <= opts.newton_tol * 2.0 || decrement <= 1e-13 * f0.abs() {
                    break;
                }
                let mut s = 1.0;
                let mut moved = false;
                while s > 1e-16 {
                    let cand = &x + &dx * s;
                    if let Some(fc) = merit(problem, t, &cand) {
                        if fc <= f0 - 0.25 * s * decrement {
                            x = cand;
                            moved = true;
                            break;
                        }
                    }
                    s *= 0.5;
                }
                if !moved {
                    break;
                }
            } else {
                let mut s = 1.0;
                while s > 1e-16 && problem.barrier(&(&x + &dx * s)).is_none() {
                    s *= 0.5;
                }
                if s <= 1e-16 {
                    return Err(Error::numerical("no interior step toward the equality constraints"));
                }
                // Stay strictly inside when the full step was cut.
                let s = if s < 1.0 { 0.95 * s } else { s };
                x += &dx * s;
            }
        }
        let res = eq.map_or(0.0, |e| e.residual(&x).norm());
        if nu / t < opts.gap_tol {
            if res > eq_tol.max(1e-9) {
                return Err(Error::numerical(format!(
                    "equality constraints not reached (residual {res:.3e})"
                )));
            }
            return Ok(BarrierSolution {
                x,
                t,
                newton_iters: iters,
                eq_residual: res,
            });
        }
        t *= opts.growth;
    }
}
