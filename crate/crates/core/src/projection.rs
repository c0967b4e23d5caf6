//! Projection of the unconstrained knowledge base onto the safe set.
//!
//! The safe set `K` requires, for every constrained task, `A_t L s_t = b_t - c_t`
//! with a slack `c_t >= 0`, `||c_t|| <= c_max`, and a spectral box
//! `p I <= L^T L <= q I`. Points are projected in the Bregman divergence of
//! the quadratic regularizer, `mu2 ||L - L~||^2 + mu1 ||S - S~||^2`.
//!
//! The solve follows the classical split into a semidefinite program over
//! `X = L^T L` with `S` fixed and per-task second-order cone programs over
//! `s_t` with `L` fixed; candidates are then polished by a joint barrier
//! Newton refinement and the best feasible point is returned.

use nalgebra::{DMatrix, DVector};

use crate::barrier::{self, BarrierOptions, BarrierProblem, Equalities, Taylor2};
use crate::error::{Error, Result};
use crate::lifelong::{ThetaKind, ThetaVector};
use crate::linalg::{
    eig_range, map_spectrum, pinv, polar_factor, psd_sqrt, spectral_norm, PINV_RCOND,
};

/// Per-task polytope `A alpha <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyConstraint {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    a_pinv: DMatrix<f64>,
    rank: usize,
}

impl SafetyConstraint {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        let (a_pinv, rank) = pinv(&a, PINV_RCOND);
        Self { a, b, a_pinv, rank }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.a_pinv
    }

    pub fn pinv_norm(&self) -> f64 {
        spectral_norm(&self.a_pinv)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Slack `b - A alpha`.
    pub fn slack(&self, alpha: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * alpha
    }

    /// Largest entry of `A alpha - b`.
    pub fn max_violation(&self, alpha: &DVector<f64>) -> f64 {
        (&self.a * alpha - &self.b).max()
    }
}

/// A constraint bound to the task it belongs to.
pub type TaskConstraint<'a> = (usize, &'a SafetyConstraint);

#[derive(Debug, Clone, PartialEq)]
pub struct SlackVars {
    /// Slack per task id; `None` for unconstrained tasks.
    pub c: Vec<Option<DVector<f64>>>,
    pub c_max: f64,
}

impl SlackVars {
    pub fn new(num_tasks: usize, c_max: f64) -> Self {
        Self {
            c: vec![None; num_tasks],
            c_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBox {
    pub x: DMatrix<f64>,
    pub p: f64,
    pub q: f64,
    /// Largest `|s^T X s - a^T a|` over the equality constraints.
    pub max_eq_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionParams {
    pub mu1: f64,
    pub mu2: f64,
    pub p: f64,
    pub q: f64,
    pub c_max: f64,
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu1 > 0.0 && self.mu2 > 0.0) {
            return Err(Error::contract("mu1 and mu2 must be positive"));
        }
        if !(self.p > 0.0) || self.q < self.p {
            return Err(Error::contract("need 0 < p <= q"));
        }
        if !(self.c_max > 0.0) {
            return Err(Error::contract("c_max must be positive"));
        }
        Ok(())
    }
}

/// `mu2 ||L - L'||^2 + mu1 ||S - S'||^2`, the Bregman divergence of the
/// quadratic regularizer.
pub fn bregman_divergence(
    mu1: f64,
    mu2: f64,
    theta: &ThetaVector,
    anchor: &ThetaVector,
) -> Result<f64> {
    if theta.d != anchor.d || theta.k != anchor.k || theta.num_tasks != anchor.num_tasks {
        return Err(Error::contract("theta and anchor shapes differ"));
    }
    let dk = theta.d * theta.k;
    let diff = &theta.values - &anchor.values;
    Ok(mu2 * diff.rows(0, dk).norm_squared() + mu1 * diff.rows(dk, diff.len() - dk).norm_squared())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `(task, max_i (A L s - b)_i)` per checked task.
    pub task_violation: Vec<(usize, f64)>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `lambda_min - p`; negative when violated.
    pub lower_margin: f64,
    /// `q - lambda_max`; negative when violated.
    pub upper_margin: f64,
    pub feasible: bool,
}

impl FeasibilityReport {
    pub fn violating_tasks(&self, tol: f64) -> Vec<usize> {
        self.task_violation
            .iter()
            .filter(|(_, v)| *v > tol)
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn max_violation(&self) -> f64 {
        self.task_violation
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn check_feasible(
    theta: &ThetaVector,
    constraints: &[TaskConstraint<'_>],
    p: f64,
    q: f64,
    tol: f64,
) -> Result<FeasibilityReport> {
    let l = theta.l();
    let (lambda_min, lambda_max) = eig_range(&(l.transpose() * &l));
    let mut task_violation = Vec::with_capacity(constraints.len());
    for &(t, c) in constraints {
        if t >= theta.num_tasks || c.dim() != theta.d {
            return Err(Error::contract(format!("constraint for task {t} does not fit theta")));
        }
        task_violation.push((t, c.max_violation(&theta.alpha(t))));
    }
    let lower_margin = lambda_min - p;
    let upper_margin = q - lambda_max;
    let feasible = lower_margin >= -tol
        && upper_margin >= -tol
        && task_violation.iter().all(|(_, v)| *v <= tol);
    Ok(FeasibilityReport {
        task_violation,
        lambda_min,
        lambda_max,
        lower_margin,
        upper_margin,
        feasible,
    })
}

/// Clamp the singular values of `L` into `[sqrt(p), sqrt(q)]`.
pub fn spectral_clamp(l: &DMatrix<f64>, p: f64, q: f64) -> DMatrix<f64> {
    let gram = l.transpose() * l;
    polar_factor(l) * map_spectrum(&gram, |v| v.clamp(p, q).sqrt())
}

// ---------------------------------------------------------------------------
// Semidefinite step over X = L^T L.

fn sym_dim(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Basis index pairs `(i, j)` with `i <= j`.
fn sym_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(sym_dim(k));
    for j in 0..k {
        for i in 0..=j {
            out.push((i, j));
        }
    }
    out
}

fn sym_to_mat(x: &DVector<f64>, k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k);
    for (idx, (i, j)) in sym_pairs(k).into_iter().enumerate() {
        m[(i, j)] = x[idx];
        m[(j, i)] = x[idx];
    }
    m
}

fn mat_to_sym(m: &DMatrix<f64>) -> DVector<f64> {
    let k = m.nrows();
    DVector::from_iterator(
        sym_dim(k),
        sym_pairs(k).into_iter().map(|(i, j)| 0.5 * (m[(i, j)] + m[(j, i)])),
    )
}

/// `tr(M E_b)` for each symmetric basis element.
fn sym_inner(m: &DMatrix<f64>) -> DVector<f64> {
    let k = m.nrows();
    DVector::from_iterator(
        sym_dim(k),
        sym_pairs(k).into_iter().map(|(i, j)| {
            if i == j {
                m[(i, i)]
            } else {
                m[(i, j)] + m[(j, i)]
            }
        }),
    )
}

/// Hessian `tr(W E_a W E_b)` of `-log det` in the symmetric basis.
fn sym_logdet_hessian(w: &DMatrix<f64>) -> DMatrix<f64> {
    let pairs = sym_pairs(w.nrows());
    let n = pairs.len();
    let mut h = DMatrix::zeros(n, n);
    let basis = |i: usize, j: usize| {
        let mut e = DMatrix::zeros(w.nrows(), w.nrows());
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        e
    };
    let mats: Vec<DMatrix<f64>> = pairs.iter().map(|&(i, j)| w * basis(i, j) * w).collect();
    for a in 0..n {
        for (b, &(i, j)) in pairs.iter().enumerate().skip(a) {
            let e = basis(i, j);
            let v = (&mats[a] * e).trace();
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}

struct SdpProblem {
    k: usize,
    mu2: f64,
    norm_l_tilde: f64,
    eps: f64,
    x_ref: DVector<f64>,
    lo: f64,
    hi: f64,
}

impl SdpProblem {
    fn trace_vec(&self) -> DVector<f64> {
        sym_inner(&DMatrix::identity(self.k, self.k))
    }

    /// Frobenius weights of the symmetric basis.
    fn frob_weights(&self) -> DVector<f64> {
        DVector::from_iterator(
            sym_dim(self.k),
            sym_pairs(self.k)
                .into_iter()
                .map(|(i, j)| if i == j { 1.0 } else { 2.0 }),
        )
    }
}

impl BarrierProblem for SdpProblem {
    fn dim(&self) -> usize {
        sym_dim(self.k)
    }

    fn objective(&self, x: &DVector<f64>) -> Taylor2 {
        let tv = self.trace_vec();
        let tau = tv.dot(x).max(1e-300);
        let root = tau.sqrt();
        let w = self.frob_weights();
        let diff = x - &self.x_ref;
        let value = self.mu2 * tau - 2.0 * self.mu2 * self.norm_l_tilde * root
            + self.eps * diff.component_mul(&w).dot(&diff);
        let grad = &tv * (self.mu2 - self.mu2 * self.norm_l_tilde / root)
            + diff.component_mul(&w) * (2.0 * self.eps);
        let hess = &tv * tv.transpose() * (0.5 * self.mu2 * self.norm_l_tilde / (tau * root))
            + DMatrix::from_diagonal(&(w * (2.0 * self.eps)));
        (value, grad, hess)
    }

    fn barrier(&self, x: &DVector<f64>) -> Option<Taylor2> {
        let m = sym_to_mat(x, self.k);
        let id = DMatrix::identity(self.k, self.k);
        let lower = (&m - &id * self.lo).cholesky()?;
        let upper = (&id * self.hi - &m).cholesky()?;
        let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
            2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        };
        let yi = lower.inverse();
        let zi = upper.inverse();
        let value = -logdet(&lower) - logdet(&upper);
        let grad = -sym_inner(&yi) + sym_inner(&zi);
        let hess = sym_logdet_hessian(&yi) + sym_logdet_hessian(&zi);
        value.is_finite().then_some((value, grad, hess))
    }

    fn barrier_degree(&self) -> f64 {
        2.0 * self.k as f64
    }
}

fn box_margin(q: f64) -> f64 {
    1e-9 * q.max(1.0)
}

/// Spectral-box SDP over `X = L^T L` with `S` and the slacks fixed.
///
/// Minimizes `mu2 tr(X) - 2 mu2 ||L~||_F sqrt(tr X)` subject to
/// `s_t^T X s_t = ||A_t^+ (b_t - c_t)||^2` for each constrained task and
/// `p I <= X <= q I`. A vanishing proximal term toward the clamped
/// spectrum of `L~^T L~` breaks ties between equally good `X`.
pub fn solve_sdp_l(
    s_fixed: &DMatrix<f64>,
    slacks: &SlackVars,
    constraints: &[TaskConstraint<'_>],
    p: f64,
    q: f64,
    mu2: f64,
    l_tilde: &DMatrix<f64>,
) -> Result<SpectralBox> {
    if !(p > 0.0) || q < p {
        return Err(Error::contract(format!("need 0 < p <= q, got p={p}, q={q}")));
    }
    if !(mu2 > 0.0) {
        return Err(Error::contract("mu2 must be positive"));
    }
    let k = s_fixed.nrows();
    if l_tilde.ncols() != k {
        return Err(Error::contract("L~ and S have inconsistent latent dimension"));
    }
    // Quadratic equalities s^T X s = r, linear in the symmetric parameters.
    let mut rows: Vec<(usize, DVector<f64>, f64, f64)> = Vec::new();
    for &(t, c) in constraints {
        let st = s_fixed.column(t).into_owned();
        let s2 = st.norm_squared();
        let slack = slacks
            .c
            .get(t)
            .and_then(|c| c.clone())
            .ok_or_else(|| Error::contract(format!("no slack supplied for task {t}")))?;
        let a_t = c.pinv() * (&c.b - slack);
        let req = a_t.norm_squared();
        if !req.is_finite() || st.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite SDP data for task {t}")));
        }
        if s2 < 1e-24 {
            log::debug!("task {t} has zero coefficients; its SDP equality is skipped");
            continue;
        }
        let tol = 1e-9 * s2 * q.max(1.0);
        if req < p * s2 - tol || req > q * s2 + tol {
            return Err(Error::infeasible(
                Some(t),
                format!(
                    "required s^T X s = {req:.6e} outside [{:.6e}, {:.6e}]",
                    p * s2,
                    q * s2
                ),
            ));
        }
        let ss = &st * st.transpose();
        rows.push((t, sym_inner(&ss).map(|v| v), req, s2));
    }
    // sym_inner doubles off-diagonals, which is exactly the coefficient of x_ij.
    let x_ref_mat = map_spectrum(&(l_tilde.transpose() * l_tilde), |v| v.clamp(p, q));
    let residual_of = |x: &DMatrix<f64>| {
        rows.iter()
            .map(|(_, coef, req, _)| (coef.dot(&mat_to_sym(x)) - req).abs())
            .fold(0.0, f64::max)
    };
    if q - p <= 1e-12 * q {
        let x = DMatrix::identity(k, k) * p;
        let res = residual_of(&x);
        if res > 1e-6 {
            return Err(Error::infeasible(None, "equalities incompatible with X = pI"));
        }
        return Ok(SpectralBox {
            x,
            p,
            q,
            max_eq_residual: res,
        });
    }
    let margin = box_margin(q);
    // The objective is linear in mu2, so solve with unit weight.
    let problem = SdpProblem {
        k,
        mu2: 1.0,
        norm_l_tilde: l_tilde.norm(),
        eps: 1e-6,
        x_ref: mat_to_sym(&x_ref_mat),
        lo: p - margin,
        hi: q + margin,
    };
    let x0 = mat_to_sym(&(DMatrix::identity(k, k) * (0.5 * (p + q))));
    let eq = (!rows.is_empty()).then(|| Equalities {
        e_mat: DMatrix::from_fn(rows.len(), sym_dim(k), |r, c| rows[r].1[c]),
        rhs: DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2)),
    });
    let sol = barrier::solve(&problem, x0, eq.as_ref(), &BarrierOptions::default()).map_err(
        |e| match e {
            Error::Numerical(msg) => Error::infeasible(
                rows.first().map(|r| r.0).filter(|_| rows.len() == 1),
                format!("spectral-box equalities are jointly infeasible ({msg})"),
            ),
            other => other,
        },
    )?;
    let x = map_spectrum(&sym_to_mat(&sol.x, k), |v| v.clamp(p, q));
    let res = residual_of(&x);
    if res > 1e-6 {
        return Err(Error::infeasible(None, format!("SDP equality residual {res:.3e}")));
    }
    Ok(SpectralBox {
        x,
        p,
        q,
        max_eq_residual: res,
    })
}

/// Factor `X = L^T L` choosing the factor closest to `L_prev`.
///
/// With `R = X^{1/2}` the minimizer of `||Q R - L_prev||_F` over
/// orthonormal-column `Q` is the polar factor of `L_prev R`.
pub fn recover_l_from_x(x: &DMatrix<f64>, l_prev: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != l_prev.ncols() || l_prev.nrows() < l_prev.ncols() {
        return Err(Error::contract("X and L_prev shapes are incompatible"));
    }
    let r = psd_sqrt(x, 1e-10 * x.amax().max(1.0))?;
    let q = polar_factor(&(l_prev * &r));
    Ok(q * r)
}

// ---------------------------------------------------------------------------
// Second-order cone step over one task's coefficients.

/// `min mu1 ||s - s~||^2` with `c = b - M s > 0`, `||c|| < c_max`.
struct SocpProblem<'a> {
    m: DMatrix<f64>,
    b: &'a DVector<f64>,
    s_tilde: DVector<f64>,
    mu1: f64,
    c_max: f64,
}

fn cone_barrier(c: &DVector<f64>, c_max: f64) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    if c.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let psi = c_max * c_max - c.norm_squared();
    if psi <= 0.0 {
        return None;
    }
    let value = -c.iter().map(|v| v.ln()).sum::<f64>() - psi.ln();
    let grad = c.map(|v| -1.0 / v) + c * (2.0 / psi);
    let n = c.len();
    let hess = DMatrix::from_diagonal(&c.map(|v| 1.0 / (v * v)))
        + DMatrix::identity(n, n) * (2.0 / psi)
        + c * c.transpose() * (4.0 / (psi * psi));
    Some((value, grad, hess))
}

impl BarrierProblem for SocpProblem<'_> {
    fn dim(&self) -> usize {
        self.m.ncols()
    }

    fn objective(&self, s: &DVector<f64>) -> Taylor2 {
        let diff = s - &self.s_tilde;
        let k = s.len();
        (
            self.mu1 * diff.norm_squared(),
            diff * (2.0 * self.mu1),
            DMatrix::identity(k, k) * (2.0 * self.mu1),
        )
    }

    fn barrier(&self, s: &DVector<f64>) -> Option<Taylor2> {
        let c = self.b - &self.m * s;
        let (v, g, h) = cone_barrier(&c, self.c_max)?;
        Some((v, -self.m.transpose() * g, self.m.transpose() * h * &self.m))
    }

    fn barrier_degree(&self) -> f64 {
        self.m.nrows() as f64 + 1.0
    }
}

/// Constraints within this distance of their bound count as active.
const ACTIVE_TOL: f64 = 1e-8;

/// KKT residual at `s`. With no active constraint the barrier multipliers
/// (`barrier_grad`) are used as they are; otherwise the multipliers of the
/// active constraints are refitted by least squares, since the barrier
/// estimate is inaccurate on the boundary.
fn kkt_stationarity(
    problem: &SocpProblem<'_>,
    s: &DVector<f64>,
    g: &DVector<f64>,
    barrier_grad: DVector<f64>,
) -> f64 {
    let scale = g.norm().max(1.0);
    let c = problem.b - &problem.m * s;
    let tol = ACTIVE_TOL * problem.c_max.max(1.0);
    let mut cols: Vec<DVector<f64>> = (0..c.len())
        .filter(|&i| c[i] <= tol)
        .map(|i| problem.m.row(i).transpose())
        .collect();
    if problem.c_max * problem.c_max - c.norm_squared() <= tol * problem.c_max {
        cols.push(-problem.m.transpose() * &c * 2.0);
    }
    if cols.is_empty() {
        return (g + barrier_grad).norm() / scale;
    }
    let j = DMatrix::from_columns(&cols);
    let (j_pinv, _) = pinv(&j, PINV_RCOND);
    let lambda = -(j_pinv * g);
    let residual = (g + &j * &lambda).norm();
    let negative = lambda.iter().fold(0.0_f64, |m, &v| m.max(-v)) * j.norm();
    residual.max(negative) / scale
}

/// Phase I: `min tau` with `c_i + tau > 0`, `c_max tau + c_max^2 - ||c||^2 > 0`.
struct SocpPhaseOne<'a> {
    m: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    c_max: f64,
}

impl BarrierProblem for SocpPhaseOne<'_> {
    fn dim(&self) -> usize {
        self.m.ncols() + 1
    }

    fn objective(&self, z: &DVector<f64>) -> Taylor2 {
        let n = z.len();
        let mut g = DVector::zeros(n);
        g[n - 1] = 1.0;
        (z[n - 1], g, DMatrix::zeros(n, n))
    }

    fn barrier(&self, z: &DVector<f64>) -> Option<Taylor2> {
        let k = self.m.ncols();
        let d = self.m.nrows();
        let s = z.rows(0, k).into_owned();
        let tau = z[k];
        let c = self.b - self.m * &s;
        let shifted = c.add_scalar(tau);
        if shifted.iter().any(|&v| v <= 0.0) {
            return None;
        }
        let psi = self.c_max * tau + self.c_max * self.c_max - c.norm_squared();
        if psi <= 0.0 {
            return None;
        }
        // Jacobian of (c, tau) with respect to z.
        let mut jc = DMatrix::zeros(d, k + 1);
        jc.view_mut((0, 0), (d, k)).copy_from(&(-self.m));
        let mut value = -psi.ln();
        let mut grad = DVector::zeros(k + 1);
        let mut hess = DMatrix::zeros(k + 1, k + 1);
        for i in 0..d {
            value -= shifted[i].ln();
            let mut row = jc.row(i).transpose();
            row[k] = 1.0;
            grad -= &row / shifted[i];
            hess += &row * row.transpose() / (shifted[i] * shifted[i]);
        }
        // psi gradient: c_max e_tau + 2 M^T c on the s block.
        let mut dpsi = DVector::zeros(k + 1);
        dpsi.rows_mut(0, k).copy_from(&(self.m.transpose() * &c * 2.0));
        dpsi[k] = self.c_max;
        let mut d2psi = DMatrix::zeros(k + 1, k + 1);
        d2psi
            .view_mut((0, 0), (k, k))
            .copy_from(&(self.m.transpose() * self.m * -2.0));
        grad -= &dpsi / psi;
        hess += &dpsi * dpsi.transpose() / (psi * psi) - d2psi / psi;
        value.is_finite().then_some((value, grad, hess))
    }

    fn barrier_degree(&self) -> f64 {
        self.m.nrows() as f64 + 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocpReport {
    pub task: usize,
    /// Lagrangian gradient norm relative to the objective gradient, with
    /// multipliers fitted on the active constraints; a negative multiplier
    /// counts as a violation of the same size.
    pub stationarity: f64,
    /// Duality gap bound `nu / t`.
    pub complementarity: f64,
    pub min_slack: f64,
    /// `c_max - ||c||`.
    pub ball_margin: f64,
    /// `||A L s + c - b||`.
    pub eq_residual: f64,
}

/// Strictly interior coefficients for one task, if any exist.
fn socp_interior_start(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    c_max: f64,
    task: usize,
) -> Result<DVector<f64>> {
    let d = m.nrows();
    let k = m.ncols();
    let c0 = DVector::from_element(d, c_max / (2.0 * (d as f64).sqrt()));
    let (m_pinv, _) = pinv(m, PINV_RCOND);
    let s0 = &m_pinv * (b - &c0);
    if cone_barrier(&(b - m * &s0), c_max).is_some() {
        return Ok(s0);
    }
    let phase = SocpPhaseOne { m, b, c_max };
    let c = b - m * &s0;
    let tau0 = c
        .iter()
        .map(|v| -v)
        .fold((c.norm_squared() - c_max * c_max) / c_max, f64::max)
        .max(0.0)
        + 1.0;
    let mut z0 = DVector::zeros(k + 1);
    z0.rows_mut(0, k).copy_from(&s0);
    z0[k] = tau0;
    let opts = BarrierOptions {
        gap_tol: 1e-9 * c_max,
        ..BarrierOptions::default()
    };
    let sol = barrier::solve(&phase, z0, None, &opts)?;
    let s = sol.x.rows(0, k).into_owned();
    if sol.x[k] < -1e-10 * c_max && cone_barrier(&(b - m * &s), c_max).is_some() {
        Ok(s)
    } else {
        Err(Error::infeasible(
            Some(task),
            format!(
                "no slack with c >= 0 and ||c|| <= {c_max} (phase-one value {:.3e})",
                sol.x[k]
            ),
        ))
    }
}

/// Per-task cone programs for the coefficients with `L` fixed.
///
/// Tasks without a constraint keep `s_t = s~_t`.
pub fn solve_socp_s(
    l: &DMatrix<f64>,
    constraints: &[TaskConstraint<'_>],
    mu1: f64,
    c_max: f64,
    s_tilde: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, SlackVars, Vec<SocpReport>)> {
    if !(mu1 > 0.0) || !(c_max > 0.0) {
        return Err(Error::contract("mu1 and c_max must be positive"));
    }
    if l.ncols() != s_tilde.nrows() {
        return Err(Error::contract("L and S~ have inconsistent latent dimension"));
    }
    let mut s = s_tilde.clone();
    let mut slacks = SlackVars::new(s_tilde.ncols(), c_max);
    let mut reports = Vec::with_capacity(constraints.len());
    for &(t, con) in constraints {
        if t >= s.ncols() || con.dim() != l.nrows() {
            return Err(Error::contract(format!("constraint for task {t} does not fit")));
        }
        let m = &con.a * l;
        let s0 = socp_interior_start(&m, &con.b, c_max, t)?;
        // The minimizer does not depend on mu1, so solve with unit weight.
        let problem = SocpProblem {
            m,
            b: &con.b,
            s_tilde: s_tilde.column(t).into_owned(),
            mu1: 1.0,
            c_max,
        };
        let opts = BarrierOptions {
            gap_tol: 1e-12,
            ..BarrierOptions::default()
        };
        let sol = barrier::solve(&problem, s0, None, &opts)?;
        let st = sol.x;
        let c = &con.b - &problem.m * &st;
        let (_, g, _) = problem.objective(&st);
        let (_, bg, _) = problem.barrier(&st).expect("interior solution");
        reports.push(SocpReport {
            task: t,
            stationarity: kkt_stationarity(&problem, &st, &g, &bg / sol.t),
            complementarity: problem.barrier_degree() / sol.t,
            min_slack: c.min(),
            ball_margin: c_max - c.norm(),
            eq_residual: (&problem.m * &st + &c - &con.b).norm(),
        });
        s.set_column(t, &st);
        slacks.c[t] = Some(c);
    }
    Ok((s, slacks, reports))
}

// ---------------------------------------------------------------------------
// Joint refinement over (L, s_t).

struct JointProblem<'a> {
    d: usize,
    k: usize,
    tasks: Vec<(usize, &'a SafetyConstraint)>,
    l_tilde: DVector<f64>,
    s_tilde: Vec<DVector<f64>>,
    params: ProjectionParams,
    lo: f64,
    hi: f64,
}

impl JointProblem<'_> {
    fn split(&self, z: &DVector<f64>) -> (DMatrix<f64>, Vec<DVector<f64>>) {
        let dk = self.d * self.k;
        let l = DMatrix::from_column_slice(self.d, self.k, &z.as_slice()[..dk]);
        let s = (0..self.tasks.len())
            .map(|i| z.rows(dk + i * self.k, self.k).into_owned())
            .collect();
        (l, s)
    }

    /// Hessian of `-log det(sign (L^T L - shift I))` in vec(L) coordinates.
    fn spectral_term(&self, l: &DMatrix<f64>, w: &DMatrix<f64>, sign: f64) -> (DVector<f64>, DMatrix<f64>) {
        let (d, k) = (self.d, self.k);
        // Gradient: -2 sign L W.
        let grad = l * w * (-2.0 * sign);
        let mut hess = DMatrix::zeros(d * k, d * k);
        let lw = l * w;
        for col in 0..k {
            for row in 0..d {
                let mut e = DMatrix::zeros(d, k);
                e[(row, col)] = 1.0;
                let dy = e.transpose() * l + l.transpose() * &e;
                let dg = (&e * w) * (-2.0 * sign) + &lw * dy * w * 2.0;
                hess.set_column(col * d + row, &DVector::from_column_slice(dg.as_slice()));
            }
        }
        (DVector::from_column_slice(grad.as_slice()), crate::linalg::symmetrize(&hess))
    }
}

impl BarrierProblem for JointProblem<'_> {
    fn dim(&self) -> usize {
        self.d * self.k + self.k * self.tasks.len()
    }

    fn objective(&self, z: &DVector<f64>) -> Taylor2 {
        let dk = self.d * self.k;
        let n = self.dim();
        let mut target = DVector::zeros(n);
        target.rows_mut(0, dk).copy_from(&self.l_tilde);
        let mut weights = DVector::from_element(n, self.params.mu1);
        weights.rows_mut(0, dk).fill(self.params.mu2);
        for (i, s) in self.s_tilde.iter().enumerate() {
            target.rows_mut(dk + i * self.k, self.k).copy_from(s);
        }
        let diff = z - target;
        (
            diff.component_mul(&weights).dot(&diff),
            diff.component_mul(&weights) * 2.0,
            DMatrix::from_diagonal(&(weights * 2.0)),
        )
    }

    fn barrier(&self, z: &DVector<f64>) -> Option<Taylor2> {
        let (d, k) = (self.d, self.k);
        let dk = d * k;
        let n = self.dim();
        let (l, s) = self.split(z);
        let gram = l.transpose() * &l;
        let id = DMatrix::identity(k, k);
        let lower = (&gram - &id * self.lo).cholesky()?;
        let upper = (&id * self.hi - &gram).cholesky()?;
        let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
            2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        };
        let mut value = -logdet(&lower) - logdet(&upper);
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        let (gl, hl) = self.spectral_term(&l, &lower.inverse(), 1.0);
        let (gu, hu) = self.spectral_term(&l, &upper.inverse(), -1.0);
        grad.rows_mut(0, dk).copy_from(&(gl + gu));
        hess.view_mut((0, 0), (dk, dk)).copy_from(&(hl + hu));
        for (i, ((_, con), st)) in self.tasks.iter().zip(&s).enumerate() {
            let c = con.slack(&(&l * st));
            let (v, gc, hc) = cone_barrier(&c, self.params.c_max)?;
            value += v;
            // Jacobian of alpha = L s: [s^T (x) I_d, L].
            let mut jac = DMatrix::zeros(d, dk + k);
            for m in 0..k {
                for r in 0..d {
                    jac[(r, m * d + r)] = st[m];
                }
            }
            jac.view_mut((0, dk), (d, k)).copy_from(&l);
            let jc = -(&con.a * &jac);
            let g_local = jc.transpose() * &gc;
            let h_local = jc.transpose() * &hc * &jc;
            let off = dk + i * k;
            let idx: Vec<usize> = (0..dk).chain(off..off + k).collect();
            for (a, &ia) in idx.iter().enumerate() {
                grad[ia] += g_local[a];
                for (b, &ib) in idx.iter().enumerate() {
                    hess[(ia, ib)] += h_local[(a, b)];
                }
            }
            // Curvature of the bilinear map: -d^2 (w^T L s), w = A^T grad_c.
            let w = con.a.transpose() * &gc;
            for m in 0..k {
                for r in 0..d {
                    let (ia, ib) = (m * d + r, off + m);
                    hess[(ia, ib)] -= w[r];
                    hess[(ib, ia)] -= w[r];
                }
            }
        }
        value.is_finite().then_some((value, grad, hess))
    }

    fn barrier_degree(&self) -> f64 {
        2.0 * self.k as f64 + self.tasks.len() as f64 * (self.d as f64 + 1.0)
    }
}

// ---------------------------------------------------------------------------
// Full projection.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionStrategy {
    /// The input already lay in the safe set.
    Identity,
    /// SDP over `X`, factor recovery, then per-task cone programs.
    Alternating,
    /// Spectrally clamped, sign-flipped basis followed by the cone programs.
    MultiStart,
    /// Joint barrier refinement of one of the candidates above.
    Refined,
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub theta: ThetaVector,
    pub slacks: SlackVars,
    pub objective: f64,
    pub strategy: ProjectionStrategy,
    pub report: FeasibilityReport,
}

const FEAS_TOL: f64 = 1e-6;
const MEMBER_TOL: f64 = 1e-9;

fn slacks_of(theta: &ThetaVector, constraints: &[TaskConstraint<'_>], c_max: f64) -> SlackVars {
    let mut slacks = SlackVars::new(theta.num_tasks, c_max);
    for &(t, c) in constraints {
        slacks.c[t] = Some(c.slack(&theta.alpha(t)));
    }
    slacks
}

/// Whether `theta` lies in the safe set up to `tol`.
pub fn is_member(
    theta: &ThetaVector,
    constraints: &[TaskConstraint<'_>],
    params: &ProjectionParams,
    tol: f64,
) -> Result<bool> {
    let report = check_feasible(theta, constraints, params.p, params.q, tol)?;
    if !report.feasible {
        return Ok(false);
    }
    Ok(constraints.iter().all(|&(t, c)| {
        let slack = c.slack(&theta.alpha(t));
        slack.norm() <= params.c_max + tol
    }))
}

struct Candidate {
    l: DMatrix<f64>,
    s: DMatrix<f64>,
    strategy: ProjectionStrategy,
}

fn sign_patterns(k: usize) -> Vec<DVector<f64>> {
    if k <= 3 {
        (0..1usize << k)
            .map(|mask| {
                DVector::from_iterator(
                    k,
                    (0..k).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }),
                )
            })
            .collect()
    } else {
        vec![DVector::from_element(k, 1.0), DVector::from_element(k, -1.0)]
    }
}

/// Barrier settings for joint refinement. The coarse pass only needs to
/// reveal which basin a start falls into, so it begins far along the path.
/// The full pass starts at small `t`, where the iterate can still slide
/// along the curved lower spectral bound.
fn refine_options(coarse: bool) -> BarrierOptions {
    if coarse {
        BarrierOptions {
            t0: 1e3,
            gap_tol: 1e-4,
            max_newton: 15,
            newton_tol: 1e-3,
            ..BarrierOptions::default()
        }
    } else {
        BarrierOptions {
            t0: 1.0,
            gap_tol: 1e-10,
            max_newton: 40,
            ..BarrierOptions::default()
        }
    }
}

fn refine(
    cand: &Candidate,
    theta_tilde: &ThetaVector,
    constraints: &[TaskConstraint<'_>],
    params: &ProjectionParams,
    opts: &BarrierOptions,
) -> Result<Candidate> {
    let (d, k) = (theta_tilde.d, theta_tilde.k);
    let s_tilde = theta_tilde.s();
    let margin = box_margin(params.q);
    let scale = params.mu1.max(params.mu2);
    let problem = JointProblem {
        d,
        k,
        tasks: constraints.to_vec(),
        l_tilde: theta_tilde.values.rows(0, d * k).into_owned(),
        s_tilde: constraints
            .iter()
            .map(|&(t, _)| s_tilde.column(t).into_owned())
            .collect(),
        params: ProjectionParams {
            mu1: params.mu1 / scale,
            mu2: params.mu2 / scale,
            ..*params
        },
        lo: params.p - margin,
        hi: params.q + margin,
    };
    let mut z0 = DVector::zeros(problem.dim());
    z0.rows_mut(0, d * k)
        .copy_from(&DVector::from_column_slice(cand.l.as_slice()));
    for (i, &(t, _)) in constraints.iter().enumerate() {
        z0.rows_mut(d * k + i * k, k).copy_from(&cand.s.column(t));
    }
    let sol = barrier::solve(&problem, z0, None, opts)?;
    let (l, ss) = problem.split(&sol.x);
    let mut s = cand.s.clone();
    for (i, &(t, _)) in constraints.iter().enumerate() {
        s.set_column(t, &ss[i]);
    }
    Ok(Candidate {
        l,
        s,
        strategy: ProjectionStrategy::Refined,
    })
}

/// Basis whose product with the unchanged coefficients is closest to
/// target parameters for each constrained task, with a light pull toward
/// `L~`. Targets are the nearest safe parameters or, with `central`, the
/// parameters leaving an equal slack on every row.
fn target_basis(
    l_tilde: &DMatrix<f64>,
    s_tilde: &DMatrix<f64>,
    constraints: &[TaskConstraint<'_>],
    params: &ProjectionParams,
    central: bool,
) -> Result<DMatrix<f64>> {
    let (d, k) = (l_tilde.nrows(), l_tilde.ncols());
    let eye = DMatrix::identity(d, d);
    let mut gram = DMatrix::zeros(k, k);
    let mut cross = DMatrix::zeros(d, k);
    for &(t, con) in constraints {
        let st = s_tilde.column(t);
        let alpha = DMatrix::from_column_slice(d, 1, (l_tilde * st).as_slice());
        let target = if central {
            let c0 = DVector::from_element(d, params.c_max / (2.0 * (d as f64).sqrt()));
            con.pinv() * (&con.b - c0)
        } else {
            // The cone program with an identity basis.
            solve_socp_s(&eye, &[(0, con)], 1.0, params.c_max, &alpha)?.0.column(0).into_owned()
        };
        gram += st * st.transpose();
        cross += target * st.transpose();
    }
    let ridge = 1e-3 * (1.0 + gram.trace());
    let lhs = gram + DMatrix::identity(k, k) * ridge;
    let rhs = cross + l_tilde * ridge;
    // L lhs = rhs, with lhs symmetric positive definite.
    let chol = lhs
        .cholesky()
        .ok_or_else(|| Error::numerical("basis refit system is not positive definite"))?;
    Ok(chol.solve(&rhs.transpose()).transpose())
}

/// Bregman projection of `theta_tilde` onto the safe set of the given
/// constraints.
///
/// `anchor_prev` (the previous projected point) supplies the slacks used by
/// the SDP step. Coefficients of tasks without a constraint are kept.
pub fn project_constrained(
    theta_tilde: &ThetaVector,
    constraints: &[TaskConstraint<'_>],
    params: &ProjectionParams,
    anchor_prev: &ThetaVector,
) -> Result<ProjectionResult> {
    params.validate()?;
    let (d, k) = (theta_tilde.d, theta_tilde.k);
    for &(t, c) in constraints {
        if t >= theta_tilde.num_tasks || c.dim() != d {
            return Err(Error::contract(format!("constraint for task {t} does not fit theta")));
        }
    }
    let finish = |l: DMatrix<f64>, s: DMatrix<f64>, strategy| -> Result<ProjectionResult> {
        let theta = ThetaVector::from_parts(&l, &s, ThetaKind::Constrained);
        let report = check_feasible(&theta, constraints, params.p, params.q, FEAS_TOL)?;
        Ok(ProjectionResult {
            objective: bregman_divergence(params.mu1, params.mu2, &theta, theta_tilde)?,
            slacks: slacks_of(&theta, constraints, params.c_max),
            theta,
            strategy,
            report,
        })
    };

    if is_member(theta_tilde, constraints, params, MEMBER_TOL)? {
        return finish(theta_tilde.l(), theta_tilde.s(), ProjectionStrategy::Identity);
    }

    let l_tilde = theta_tilde.l();
    let s_tilde = theta_tilde.s();
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut first_err: Option<Error> = None;
    let note = |e: Error, first_err: &mut Option<Error>| {
        log::debug!("projection candidate failed: {e}");
        if first_err.is_none() {
            *first_err = Some(e);
        }
    };

    // Alternating SDP / cone pipeline.
    let anchor_slacks = {
        let mut sl = SlackVars::new(theta_tilde.num_tasks, params.c_max);
        for &(t, c) in constraints {
            let cand = c.slack(&anchor_prev.alpha(t));
            let valid = anchor_prev.s().column(t).norm() > 0.0
                && cand.iter().all(|&v| v >= 0.0)
                && cand.norm() <= params.c_max;
            sl.c[t] = Some(if valid {
                cand
            } else {
                DVector::from_element(d, params.c_max / (2.0 * (d as f64).sqrt()))
            });
        }
        sl
    };
    let x = match solve_sdp_l(
        &s_tilde,
        &anchor_slacks,
        constraints,
        params.p,
        params.q,
        params.mu2,
        &l_tilde,
    ) {
        Ok(b) => b.x,
        Err(e @ Error::Infeasible { .. }) => {
            log::debug!("SDP step infeasible ({e}); using the spectral box only");
            map_spectrum(&(l_tilde.transpose() * &l_tilde), |v| v.clamp(params.p, params.q))
        }
        Err(e) => return Err(e),
    };
    match recover_l_from_x(&x, &l_tilde)
        .and_then(|l| solve_socp_s(&l, constraints, params.mu1, params.c_max, &s_tilde).map(|r| (l, r)))
    {
        Ok((l, (s, _, _))) => candidates.push(Candidate {
            l,
            s,
            strategy: ProjectionStrategy::Alternating,
        }),
        Err(e) => note(e, &mut first_err),
    }

    // Multi-start: column sign flips of the clamped `L~`, which moves only
    // the coefficients, and bases refitted so that the unchanged
    // coefficients map into the safe sets.
    let clamped = spectral_clamp(&l_tilde, params.p, params.q);
    let mut starts: Vec<DMatrix<f64>> = sign_patterns(k)
        .iter()
        .map(|signs| &clamped * DMatrix::from_diagonal(&signs))
        .collect();
    for central in [false, true] {
        match target_basis(&l_tilde, &s_tilde, constraints, params, central) {
            Ok(l) => starts.push(spectral_clamp(&l, params.p, params.q)),
            Err(e) => note(e, &mut first_err),
        }
    }
    for l0 in starts {
        match solve_socp_s(&l0, constraints, params.mu1, params.c_max, &s_tilde) {
            Ok((s, _, _)) => candidates.push(Candidate {
                l: l0,
                s,
                strategy: ProjectionStrategy::MultiStart,
            }),
            Err(e) => note(e, &mut first_err),
        }
    }

    let objective_of = |c: &Candidate| {
        let th = ThetaVector::from_parts(&c.l, &c.s, ThetaKind::Constrained);
        bregman_divergence(params.mu1, params.mu2, &th, theta_tilde).unwrap_or(f64::INFINITY)
    };
    candidates.sort_by(|a, b| objective_of(a).total_cmp(&objective_of(b)));

    candidates.dedup_by(|a, b| (&a.l - &b.l).norm() + (&a.s - &b.s).norm() <= 1e-12);

    // Joint refinement in two passes: every start coarsely, since a start
    // that looks poor can lead to the best local optimum, then the two best
    // coarse results to full accuracy.
    if params.q - params.p > 1e-8 * params.q && !constraints.is_empty() {
        let refine_all = |cands: &[Candidate], coarse: bool| -> Vec<Candidate> {
            cands
                .iter()
                .filter_map(|c| {
                    refine(c, theta_tilde, constraints, params, &refine_options(coarse))
                        .map_err(|e| log::debug!("joint refinement failed: {e}"))
                        .ok()
                })
                .collect()
        };
        let started = std::time::Instant::now();
        let mut coarse = refine_all(&candidates, true);
        let coarse_time = started.elapsed();
        coarse.sort_by(|a, b| objective_of(a).total_cmp(&objective_of(b)));
        coarse.truncate(2);
        let fine = refine_all(&coarse, false);
        log::debug!(
            "refined {} starts in {coarse_time:?}, best two in {:?}",
            candidates.len(),
            started.elapsed() - coarse_time
        );
        candidates.extend(coarse);
        candidates.extend(fine);
    }

    let mut best: Option<(f64, Candidate)> = None;
    for cand in candidates {
        let th = ThetaVector::from_parts(&cand.l, &cand.s, ThetaKind::Constrained);
        if !is_member(&th, constraints, params, FEAS_TOL)? {
            continue;
        }
        let obj = objective_of(&cand);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, cand));
        }
    }
    match best {
        Some((_, c)) => finish(c.l, c.s, c.strategy),
        None => Err(first_err
            .unwrap_or_else(|| Error::infeasible(None, "no feasible projection candidate found"))),
    }
}
