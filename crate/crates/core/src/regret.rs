//! Empirical regret, the hindsight comparator, numeric bound constants and
//! the sublinear-growth check.

use nalgebra::{DMatrix, DVector};

use crate::barrier::{self, BarrierOptions, BarrierProblem, Taylor2};
use crate::error::{Error, Result};
use crate::lifelong::{alternating_optimize, init_knowledge, RoundHistory, ThetaKind, ThetaVector, UpdateMode};
use crate::policy::{max_param_norm_bound, BatchStats};
use crate::projection::{
    check_feasible, project_constrained, ProjectionParams, SafetyConstraint, TaskConstraint,
};

#[derive(Debug, Clone, PartialEq)]
pub struct RegretRecord {
    pub round: usize,
    pub task_id: usize,
    pub realized: f64,
    pub cum_realized: f64,
    pub comparator: f64,
    pub cum_comparator: f64,
    pub cum_regret: f64,
}

/// Unweighted loss of `theta` summed over every round of the history.
pub fn cumulative_loss(theta: &ThetaVector, history: &RoundHistory) -> f64 {
    history
        .entries()
        .iter()
        .map(|e| e.stats.loss(&theta.alpha(e.task_id)))
        .sum()
}

/// Per-round regret records against a fixed comparator.
pub fn empirical_regret(
    realized: &[f64],
    comparator: &ThetaVector,
    history: &RoundHistory,
    constraints: &[TaskConstraint<'_>],
    p: f64,
    q: f64,
) -> Result<Vec<RegretRecord>> {
    if realized.len() != history.len() {
        return Err(Error::contract(format!(
            "{} realized losses for {} rounds",
            realized.len(),
            history.len()
        )));
    }
    let report = check_feasible(comparator, constraints, p, q, 1e-6)?;
    if !report.feasible {
        return Err(Error::contract("comparator is not feasible"));
    }
    let mut out = Vec::with_capacity(realized.len());
    let (mut cr, mut cc) = (0.0, 0.0);
    for (j, (entry, &r)) in history.entries().iter().zip(realized).enumerate() {
        let c = entry.stats.loss(&comparator.alpha(entry.task_id));
        cr += r;
        cc += c;
        out.push(RegretRecord {
            round: j + 1,
            task_id: entry.task_id,
            realized: r,
            cum_realized: cr,
            comparator: c,
            cum_comparator: cc,
            cum_regret: cr - cc,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparatorParams {
    pub projection: ProjectionParams,
    pub k: usize,
    pub zeta: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone)]
pub struct Comparator {
    pub theta: ThetaVector,
    pub total_loss: f64,
    /// False when the alternating search hit its iteration cap.
    pub converged: bool,
    pub source: ComparatorSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparatorSource {
    Alternating,
    PerTask,
    Supplied,
}

/// `min l(alpha)` over `A alpha <= b`, `||b - A alpha|| <= c_max` for one task.
struct TaskProblem<'a> {
    stats: &'a BatchStats,
    con: &'a SafetyConstraint,
    c_max: f64,
}

impl BarrierProblem for TaskProblem<'_> {
    fn dim(&self) -> usize {
        self.stats.h.len()
    }

    fn objective(&self, a: &DVector<f64>) -> Taylor2 {
        (self.stats.loss(a), self.stats.grad(a), self.stats.gram.clone())
    }

    fn barrier(&self, a: &DVector<f64>) -> Option<Taylor2> {
        let c = self.con.slack(a);
        if c.iter().any(|&v| v <= 0.0) {
            return None;
        }
        let psi = self.c_max * self.c_max - c.norm_squared();
        if psi <= 0.0 {
            return None;
        }
        let n = c.len();
        let gc = c.map(|v| -1.0 / v) + &c * (2.0 / psi);
        let hc = DMatrix::from_diagonal(&c.map(|v| 1.0 / (v * v)))
            + DMatrix::identity(n, n) * (2.0 / psi)
            + &c * c.transpose() * (4.0 / (psi * psi));
        let value = -c.iter().map(|v| v.ln()).sum::<f64>() - psi.ln();
        let at = self.con.a.transpose();
        Some((value, -&at * gc, &at * hc * &self.con.a))
    }

    fn barrier_degree(&self) -> f64 {
        self.stats.h.len() as f64 + 1.0
    }
}

fn per_task_comparator(
    unweighted: &RoundHistory,
    constraints: &[TaskConstraint<'_>],
    params: &ComparatorParams,
    num_tasks: usize,
) -> Result<ThetaVector> {
    let d = unweighted.dim();
    let zeta = params.zeta;
    let mut s = DMatrix::zeros(d, num_tasks);
    for &(t, con) in constraints {
        let Some(stats) = unweighted.aggregate(t) else {
            continue;
        };
        if con.rank() < d {
            return Err(Error::numerical("per-task comparator needs full-rank constraints"));
        }
        let c0 = DVector::from_element(d, params.projection.c_max / (2.0 * (d as f64).sqrt()));
        let a0 = con.pinv() * (&con.b - c0);
        let problem = TaskProblem {
            stats,
            con,
            c_max: params.projection.c_max,
        };
        let opts = BarrierOptions {
            gap_tol: 1e-9,
            ..BarrierOptions::default()
        };
        let sol = barrier::solve(&problem, a0, None, &opts)?;
        s.set_column(t, &(sol.x / zeta));
    }
    let l = DMatrix::identity(d, d) * zeta;
    Ok(ThetaVector::from_parts(&l, &s, ThetaKind::Constrained))
}

/// Approximate best fixed point of the safe set in hindsight.
///
/// The result upper-bounds the true infimum, so regret measured against it
/// is a lower bound on the true regret. `supplied` candidates (for example
/// the final played point) are considered when they are feasible.
pub fn hindsight_comparator(
    history: &RoundHistory,
    constraints: &[TaskConstraint<'_>],
    params: &ComparatorParams,
    num_tasks: usize,
    supplied: &[ThetaVector],
) -> Result<Comparator> {
    if history.is_empty() {
        return Err(Error::contract("comparator needs at least one round"));
    }
    let d = history.dim();
    let pp = &params.projection;
    let mut unweighted = RoundHistory::new(d);
    for e in history.entries() {
        unweighted.push(e.task_id, e.stats.clone(), 1.0)?;
    }
    let mut best: Option<Comparator> = None;
    let mut consider = |theta: ThetaVector, source, converged| {
        let total = cumulative_loss(&theta, history);
        if total.is_finite() && best.as_ref().is_none_or(|b| total < b.total_loss) {
            best = Some(Comparator {
                theta,
                total_loss: total,
                converged,
                source,
            });
        }
    };

    for theta in supplied {
        let ok = crate::projection::is_member(theta, constraints, pp, 1e-6)?;
        if ok {
            consider(theta.clone().with_kind(ThetaKind::Constrained), ComparatorSource::Supplied, true);
        }
    }

    if params.k == d && params.zeta * params.zeta >= pp.p && params.zeta * params.zeta <= pp.q {
        match per_task_comparator(&unweighted, constraints, params, num_tasks) {
            Ok(theta) => consider(theta, ComparatorSource::PerTask, true),
            Err(e) => log::warn!("per-task comparator failed: {e}"),
        }
    }

    // Alternating minimization of the unregularized loss, then projection.
    let mu = 1e-6;
    let mut kb = init_knowledge(d, params.k, params.zeta, pp.p, pp.q, num_tasks, mu, mu)?;
    let mut anchor = kb.theta(ThetaKind::Constrained);
    let mut prev = f64::INFINITY;
    let mut converged = false;
    for _ in 0..params.max_iters.max(1) {
        let (next, _) = alternating_optimize(&kb, &unweighted, 50, UpdateMode::ClosedForm)?;
        let proj = match project_constrained(&next.theta(ThetaKind::Unconstrained), constraints, pp, &anchor) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("comparator projection failed: {e}");
                break;
            }
        };
        let total = cumulative_loss(&proj.theta, history);
        kb.set_theta(&proj.theta)?;
        anchor = proj.theta.clone();
        let improved = prev - total;
        if total < prev {
            consider(proj.theta, ComparatorSource::Alternating, true);
        }
        if improved.abs() <= 1e-6 * total.abs().max(1.0) || improved < 0.0 {
            converged = true;
            break;
        }
        prev = total;
    }
    let mut out = best.ok_or_else(|| Error::numerical("no feasible comparator found"))?;
    if out.source == ComparatorSource::Alternating {
        out.converged = converged;
    }
    if !out.converged {
        log::warn!("hindsight comparator did not converge; best point returned");
    }
    Ok(out)
}

/// Ingredients of the bound constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub horizon: usize,
    pub n_traj: usize,
    pub sigma: f64,
    /// Bound on the Euclidean norm of an action.
    pub u_max: f64,
    pub phi_max: f64,
    pub p: f64,
    pub q: f64,
    /// Policy parameter dimension.
    pub d: usize,
    pub c_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma5: f64,
    pub delta_l: f64,
    /// Largest `||A^+|| (||b|| + c_max)`.
    pub m1: f64,
    /// Largest `||A^+||^2 (||b||^2 + c_max^2)`.
    pub m2: f64,
    /// Largest `||A^+||^2 (||b|| + c_max)^2`.
    pub m3: f64,
    pub observed: usize,
}

impl BoundConstants {
    /// Right-hand side of the linearized-loss norm bound.
    pub fn fhat_bound(&self) -> f64 {
        self.gamma1 * (1.0 + self.gamma2) + self.delta_l
    }
}

/// Evaluate the bound constants for the constraints of tasks observed
/// before the current round.
///
/// The likelihood-gradient factor uses `M / sigma^2`, matching the bound on
/// the policy gradient it is built from.
pub fn bound_constants<'a>(
    inputs: &BoundInputs,
    prev_constraints: impl IntoIterator<Item = &'a SafetyConstraint>,
    delta_l: f64,
) -> BoundConstants {
    let cons: Vec<&SafetyConstraint> = prev_constraints.into_iter().collect();
    let (m1, _) = max_param_norm_bound(cons.iter().copied(), inputs.c_max);
    let mut m2: f64 = 0.0;
    let mut m3: f64 = 0.0;
    for c in &cons {
        let an2 = c.pinv_norm().powi(2);
        let bn = c.b.norm();
        m2 = m2.max(an2 * (bn * bn + inputs.c_max * inputs.c_max));
        m3 = m3.max(an2 * (bn + inputs.c_max).powi(2));
    }
    let d = inputs.d as f64;
    let (p, q) = (inputs.p, inputs.q);
    let grad_alpha = inputs.horizon as f64 / (inputs.sigma * inputs.sigma)
        * (inputs.u_max + m1 * inputs.phi_max)
        * inputs.phi_max;
    let gamma1 = grad_alpha * (d / p * (2.0 * q).sqrt() * m2.sqrt() + (q * d).sqrt());
    let observed = cons.len();
    let gamma2 = (q * d).sqrt() + (observed as f64).sqrt() * (1.0 + m3 / (p * p)).sqrt();
    let gamma3 = 4.0 * gamma1 * gamma1 + 2.0 * delta_l * delta_l;
    let gamma5 = 8.0 * d / (p * p) * q * gamma1 * gamma1 * m3;
    BoundConstants {
        gamma1,
        gamma2,
        gamma3,
        gamma5,
        delta_l,
        m1,
        m2,
        m3,
        observed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublinearVerdict {
    pub pass: bool,
    /// Least-squares slope of log regret against log R (NaN if undefined).
    pub exponent: f64,
    /// `regret / sqrt(R)` per sweep point, after clamping.
    pub sqrt_ratios: Vec<f64>,
    /// `regret / R` per sweep point, after clamping.
    pub linear_ratios: Vec<f64>,
    /// Sweep points whose regret was negative and clamped to zero.
    pub clamped: Vec<usize>,
}

/// Check that regret grows like `sqrt(R)`.
///
/// Passes when `regret / sqrt(R)` stays within `tolerance_factor` (max over
/// min, with a positive min) and `regret / R` strictly decreases.
pub fn check_sublinear(curve: &[(usize, f64)], tolerance_factor: f64) -> Result<SublinearVerdict> {
    if curve.len() < 3 {
        return Err(Error::contract("need at least three sweep points"));
    }
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) || curve[0].0 == 0 {
        return Err(Error::contract("sweep rounds must be positive and increasing"));
    }
    if curve.iter().any(|(_, r)| !r.is_finite()) {
        return Err(Error::contract("regret values must be finite"));
    }
    let mut clamped = Vec::new();
    let vals: Vec<(f64, f64)> = curve
        .iter()
        .map(|&(r, reg)| {
            if reg < 0.0 {
                clamped.push(r);
            }
            (r as f64, reg.max(0.0))
        })
        .collect();
    let sqrt_ratios: Vec<f64> = vals.iter().map(|(r, g)| g / r.sqrt()).collect();
    let linear_ratios: Vec<f64> = vals.iter().map(|(r, g)| g / r).collect();
    let lo = sqrt_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sqrt_ratios.iter().cloned().fold(0.0, f64::max);
    let flat = lo > 0.0 && hi / lo <= tolerance_factor;
    let decreasing = linear_ratios.windows(2).all(|w| w[1] < w[0]);
    let pts: Vec<(f64, f64)> = vals
        .iter()
        .filter(|(_, g)| *g > 0.0)
        .map(|(r, g)| (r.ln(), g.ln()))
        .collect();
    let exponent = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };
    Ok(SublinearVerdict {
        pass: flat && decreasing,
        exponent,
        sqrt_ratios,
        linear_ratios,
        clamped,
    })
}
