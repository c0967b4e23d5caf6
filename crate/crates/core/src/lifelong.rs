//! Shared knowledge base, the regularized multi-task objective and its
//! alternating minimization.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::linalg::{eig_range, map_spectrum, solve_spd, symmetrize, unvec, vec_of};
use crate::policy::{BatchStats, FeatureMap};

/// Shared latent basis `L` (d x k) and per-task coefficients `S` (k x T).
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub l: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub mu1: f64,
    pub mu2: f64,
    pub p: f64,
    pub q: f64,
}

impl KnowledgeBase {
    pub fn d(&self) -> usize {
        self.l.nrows()
    }

    pub fn k(&self) -> usize {
        self.l.ncols()
    }

    pub fn num_tasks(&self) -> usize {
        self.s.ncols()
    }

    /// Policy parameters `L s_t` of a task.
    pub fn alpha(&self, task: usize) -> DVector<f64> {
        &self.l * self.s.column(task)
    }

    pub fn regularizer(&self) -> f64 {
        self.mu1 * self.s.norm_squared() + self.mu2 * self.l.norm_squared()
    }

    pub fn theta(&self, kind: ThetaKind) -> ThetaVector {
        ThetaVector::from_parts(&self.l, &self.s, kind)
    }

    /// Replace `L` and `S` by the contents of `theta`.
    pub fn set_theta(&mut self, theta: &ThetaVector) -> Result<()> {
        if theta.d != self.d() || theta.k != self.k() || theta.num_tasks != self.num_tasks() {
            return Err(Error::contract("theta shape does not match knowledge base"));
        }
        self.l = theta.l();
        self.s = theta.s();
        Ok(())
    }
}

/// `L = diag_k(zeta)` (zero-padded), `S = 0`.
pub fn init_knowledge(
    d: usize,
    k: usize,
    zeta: f64,
    p: f64,
    q: f64,
    num_tasks: usize,
    mu1: f64,
    mu2: f64,
) -> Result<KnowledgeBase> {
    if k < 1 || d < k {
        return Err(Error::Config(format!("need d >= k >= 1, got d={d}, k={k}")));
    }
    if !(p > 0.0) || q < p {
        return Err(Error::Config(format!("need 0 < p <= q, got p={p}, q={q}")));
    }
    let z2 = zeta * zeta;
    if z2 < p || z2 > q {
        return Err(Error::Config(format!(
            "zeta^2 = {z2} lies outside [p, q] = [{p}, {q}]"
        )));
    }
    if !(mu1 > 0.0) || !(mu2 > 0.0) {
        return Err(Error::Config("mu1 and mu2 must be positive".into()));
    }
    let mut l = DMatrix::zeros(d, k);
    for i in 0..k {
        l[(i, i)] = zeta;
    }
    Ok(KnowledgeBase {
        l,
        s: DMatrix::zeros(k, num_tasks),
        mu1,
        mu2,
        p,
        q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaKind {
    Unconstrained,
    Constrained,
}

/// Flattened `[vec(L); vec(S)]`, both column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub values: DVector<f64>,
    pub d: usize,
    pub k: usize,
    pub num_tasks: usize,
    pub kind: ThetaKind,
}

impl ThetaVector {
    pub fn from_parts(l: &DMatrix<f64>, s: &DMatrix<f64>, kind: ThetaKind) -> Self {
        let (d, k) = l.shape();
        let num_tasks = s.ncols();
        let mut values = DVector::zeros(d * k + k * num_tasks);
        values.rows_mut(0, d * k).copy_from(&vec_of(l));
        values.rows_mut(d * k, k * num_tasks).copy_from(&vec_of(s));
        Self {
            values,
            d,
            k,
            num_tasks,
            kind,
        }
    }

    pub fn from_values(
        values: DVector<f64>,
        d: usize,
        k: usize,
        num_tasks: usize,
        kind: ThetaKind,
    ) -> Result<Self> {
        if values.len() != d * k + k * num_tasks {
            return Err(Error::contract(format!(
                "theta has {} entries, expected {}",
                values.len(),
                d * k + k * num_tasks
            )));
        }
        Ok(Self {
            values,
            d,
            k,
            num_tasks,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l(&self) -> DMatrix<f64> {
        unvec(&self.values.as_slice()[..self.d * self.k], self.d, self.k)
    }

    pub fn s(&self) -> DMatrix<f64> {
        unvec(
            &self.values.as_slice()[self.d * self.k..],
            self.k,
            self.num_tasks,
        )
    }

    /// Index range of task `t`'s coefficients inside `values`.
    pub fn task_range(&self, t: usize) -> std::ops::Range<usize> {
        let start = self.d * self.k + t * self.k;
        start..start + self.k
    }

    pub fn alpha(&self, t: usize) -> DVector<f64> {
        self.l() * DVector::from_column_slice(&self.values.as_slice()[self.task_range(t)])
    }

    pub fn with_kind(mut self, kind: ThetaKind) -> Self {
        self.kind = kind;
        self
    }
}

/// Quadratic regularizer `mu2 ||L||^2 + mu1 ||S||^2` on a flat theta.
pub fn omega0(theta: &ThetaVector, mu1: f64, mu2: f64) -> f64 {
    let dk = theta.d * theta.k;
    let (l, s) = theta.values.as_slice().split_at(dk);
    mu2 * l.iter().map(|v| v * v).sum::<f64>() + mu1 * s.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct RoundEntry {
    pub task_id: usize,
    pub stats: BatchStats,
    pub eta: f64,
}

/// Observed rounds with per-task aggregated (eta-weighted) statistics.
#[derive(Debug, Clone)]
pub struct RoundHistory {
    d: usize,
    entries: Vec<RoundEntry>,
    aggregates: BTreeMap<usize, BatchStats>,
}

impl RoundHistory {
    /// Empty history over parameters of dimension `d`.
    pub fn new(d: usize) -> Self {
        Self {
            d,
            entries: Vec::new(),
            aggregates: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RoundEntry] {
        &self.entries
    }

    /// Observed task ids in increasing order.
    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.aggregates.keys().copied()
    }

    pub fn is_observed(&self, task: usize) -> bool {
        self.aggregates.contains_key(&task)
    }

    /// Sum of `eta_j * stats_j` over the rounds of `task`.
    pub fn aggregate(&self, task: usize) -> Option<&BatchStats> {
        self.aggregates.get(&task)
    }

    pub fn push(&mut self, task_id: usize, stats: BatchStats, eta: f64) -> Result<()> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::contract(format!("round weight must be positive, got {eta}")));
        }
        if stats.h.len() != self.d {
            return Err(Error::contract("batch statistics have the wrong dimension"));
        }
        self.aggregates
            .entry(task_id)
            .or_insert_with(|| BatchStats::zeros(self.d))
            .add_scaled(eta, &stats);
        self.entries.push(RoundEntry {
            task_id,
            stats,
            eta,
        });
        Ok(())
    }

    pub fn push_batch(
        &mut self,
        task_id: usize,
        trajs: &[Trajectory],
        weights: Option<&[f64]>,
        sigma: f64,
        fmap: &FeatureMap,
        eta: f64,
    ) -> Result<()> {
        if fmap.dim() != self.d {
            return Err(Error::contract("feature map does not match history dimension"));
        }
        let stats = BatchStats::from_batch(trajs, weights, sigma, fmap)?;
        self.push(task_id, stats, eta)
    }

    fn check_kb(&self, kb: &KnowledgeBase) -> Result<()> {
        if kb.d() != self.d {
            return Err(Error::contract("knowledge base and history dimensions differ"));
        }
        if let Some(&t) = self.aggregates.keys().next_back() {
            if t >= kb.num_tasks() {
                return Err(Error::contract(format!("task {t} outside knowledge base")));
            }
        }
        Ok(())
    }
}

/// `sum_j eta_j l_{t_j}(L s_{t_j}) + mu1 ||S||^2 + mu2 ||L||^2`.
pub fn objective_e_r(kb: &KnowledgeBase, history: &RoundHistory) -> Result<f64> {
    history.check_kb(kb)?;
    let mut total = kb.regularizer();
    for (&t, agg) in &history.aggregates {
        total += agg.loss(&kb.alpha(t));
    }
    Ok(total)
}

/// Gradients of the objective with respect to `L` and `S`.
pub fn objective_gradient(
    kb: &KnowledgeBase,
    history: &RoundHistory,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    history.check_kb(kb)?;
    let mut gl = &kb.l * (2.0 * kb.mu2);
    let mut gs = &kb.s * (2.0 * kb.mu1);
    for (&t, agg) in &history.aggregates {
        let g_alpha = agg.grad(&kb.alpha(t));
        gl += &g_alpha * kb.s.column(t).transpose();
        gs.set_column(t, &(gs.column(t) + kb.l.transpose() * &g_alpha));
    }
    Ok((gl, gs))
}

/// System `(Z_L, v_L)` whose solution minimizes the objective over `vec(L)`.
pub fn l_system(
    history: &RoundHistory,
    s: &DMatrix<f64>,
    mu2: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = history.d;
    let k = s.nrows();
    let dk = d * k;
    let mut z = DMatrix::identity(dk, dk) * (2.0 * mu2);
    let mut v = DVector::zeros(dk);
    for (&t, agg) in &history.aggregates {
        let st = s.column(t);
        for a in 0..k {
            v.rows_mut(a * d, d).axpy(st[a], &agg.h, 1.0);
            for b in 0..k {
                let w = st[a] * st[b];
                if w != 0.0 {
                    let mut block = z.view_mut((a * d, b * d), (d, d));
                    block += &agg.gram * w;
                }
            }
        }
    }
    (z, v)
}

pub fn update_l_closed_form(
    history: &RoundHistory,
    s: &DMatrix<f64>,
    mu2: f64,
) -> Result<DMatrix<f64>> {
    if !(mu2 > 0.0) {
        return Err(Error::contract("mu2 must be positive"));
    }
    let (z, v) = l_system(history, s, mu2);
    let x = solve_spd(&z, &v)?;
    Ok(unvec(x.as_slice(), history.d, s.nrows()))
}

/// System `(Z_s, v_s)` for one observed task's coefficients.
pub fn s_system(
    agg: &BatchStats,
    l: &DMatrix<f64>,
    mu1: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = l.ncols();
    let z = l.transpose() * &agg.gram * l + DMatrix::identity(k, k) * (2.0 * mu1);
    let v = l.transpose() * &agg.h;
    (z, v)
}

/// Closed-form coefficient update; unobserved columns are zero.
pub fn update_s_closed_form(
    history: &RoundHistory,
    l: &DMatrix<f64>,
    mu1: f64,
    num_tasks: usize,
) -> Result<DMatrix<f64>> {
    if !(mu1 > 0.0) {
        return Err(Error::contract("mu1 must be positive"));
    }
    let mut s = DMatrix::zeros(l.ncols(), num_tasks);
    for (&t, agg) in &history.aggregates {
        if t >= num_tasks {
            return Err(Error::contract(format!("task {t} outside coefficient matrix")));
        }
        let (z, v) = s_system(agg, l, mu1);
        s.set_column(t, &solve_spd(&z, &v)?);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    ClosedForm,
    EReinforce,
    ENac,
}

/// Step-size constant of the decaying `c / j` schedule.
pub const RATE_CONSTANT: f64 = 0.9;
const MONOTONE_TOL: f64 = 1e-9;
const GAUGE_COND: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct AlternationTrace {
    /// Objective before the first and after every inner iteration.
    pub objective: Vec<f64>,
}

fn gradient_l_step(
    kb: &KnowledgeBase,
    history: &RoundHistory,
    mode: UpdateMode,
    rate: f64,
) -> Result<DMatrix<f64>> {
    let (z, v) = l_system(history, &kb.s, kb.mu2);
    let x = vec_of(&kb.l);
    let grad = &z * &x - v;
    let step = match mode {
        UpdateMode::ENac => solve_spd(&z, &grad)? * rate,
        _ => grad * (rate / eig_range(&z).1),
    };
    Ok(unvec((x - step).as_slice(), kb.d(), kb.k()))
}

fn gradient_s_step(
    kb: &KnowledgeBase,
    history: &RoundHistory,
    mode: UpdateMode,
    rate: f64,
) -> Result<DMatrix<f64>> {
    let mut s = kb.s.clone();
    for (&t, agg) in &history.aggregates {
        let (z, v) = s_system(agg, &kb.l, kb.mu1);
        let col = kb.s.column(t).into_owned();
        let grad = &z * &col - v;
        let step = match mode {
            UpdateMode::ENac => solve_spd(&z, &grad)? * rate,
            _ => grad * (rate / eig_range(&z).1),
        };
        s.set_column(t, &(col - step));
    }
    Ok(s)
}

/// Exact minimizer of the regularizer over reparametrizations
/// `L -> L A`, `S -> A^{-1} S`, which leave every `L s_t` and hence every
/// loss unchanged.
///
/// With `P = A A^T` the regularizer is `mu2 tr(L^T L P) + mu1 tr(S S^T P^{-1})`,
/// minimized by the geometric mean of `(L^T L)^{-1}` and `(mu1/mu2) S S^T`.
/// Returns `None` when either Gram matrix is too ill-conditioned.
pub fn balance_gauge(l: &DMatrix<f64>, s: &DMatrix<f64>, mu1: f64, mu2: f64) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let gl = symmetrize(&(l.transpose() * l));
    let gs = symmetrize(&(s * s.transpose())) * (mu1 / mu2);
    for g in [&gl, &gs] {
        let (lo, hi) = eig_range(g);
        if !(lo > GAUGE_COND * hi) {
            return None;
        }
    }
    let gl_half = map_spectrum(&gl, f64::sqrt);
    let gl_inv_half = map_spectrum(&gl, |v| 1.0 / v.sqrt());
    let mid = map_spectrum(&symmetrize(&(&gl_half * &gs * &gl_half)), f64::sqrt);
    let p = symmetrize(&(&gl_inv_half * mid * &gl_inv_half));
    let a = map_spectrum(&p, f64::sqrt);
    let a_inv = map_spectrum(&p, |v| 1.0 / v.sqrt());
    let (l2, s2) = (l * a, a_inv * s);
    (l2.iter().chain(s2.iter()).all(|v| v.is_finite())).then_some((l2, s2))
}

/// Alternate `L` and `S` updates `inner_iters` times.
///
/// Gradient modes take steps of size `c / j` (iteration `j`) scaled by the
/// curvature of each block; the natural variant preconditions with the
/// regularized Fisher metric of the block.
pub fn alternating_optimize(
    kb: &KnowledgeBase,
    history: &RoundHistory,
    inner_iters: usize,
    mode: UpdateMode,
) -> Result<(KnowledgeBase, AlternationTrace)> {
    if inner_iters < 1 {
        return Err(Error::contract("inner_iters must be at least 1"));
    }
    history.check_kb(kb)?;
    let mut cur = kb.clone();
    let mut objective = vec![objective_e_r(&cur, history)?];
    for j in 1..=inner_iters {
        let rate = RATE_CONSTANT / j as f64;
        cur.l = match mode {
            UpdateMode::ClosedForm => update_l_closed_form(history, &cur.s, cur.mu2)?,
            _ => gradient_l_step(&cur, history, mode, rate)?,
        };
        let mid = objective_e_r(&cur, history)?;
        cur.s = match mode {
            UpdateMode::ClosedForm => {
                update_s_closed_form(history, &cur.l, cur.mu1, cur.num_tasks())?
            }
            _ => gradient_s_step(&cur, history, mode, rate)?,
        };
        if let Some((l, s)) = balance_gauge(&cur.l, &cur.s, cur.mu1, cur.mu2) {
            let before = cur.regularizer();
            let (old_l, old_s) = (std::mem::replace(&mut cur.l, l), std::mem::replace(&mut cur.s, s));
            if cur.regularizer() > before {
                cur.l = old_l;
                cur.s = old_s;
            }
        }
        let after = objective_e_r(&cur, history)?;
        let prev = *objective.last().expect("nonempty");
        let tol = MONOTONE_TOL * prev.abs().max(1.0);
        if mid > prev + tol || after > mid + tol {
            if mode == UpdateMode::ClosedForm {
                return Err(Error::Invariant(format!(
                    "objective increased at inner iteration {j}: {prev} -> {mid} -> {after}"
                )));
            }
            log::warn!("objective increased at inner iteration {j}: {prev} -> {after}");
        }
        objective.push(after);
    }
    Ok((cur, AlternationTrace { objective }))
}

/// Affine model `f^T [theta; 1]` of a loss around an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedLoss {
    pub fhat: DVector<f64>,
    pub anchor: ThetaVector,
}

impl LinearizedLoss {
    pub fn evaluate(&self, theta: &ThetaVector) -> f64 {
        let n = theta.len();
        self.fhat.rows(0, n).dot(&theta.values) + self.fhat[n]
    }

    /// Gradient part of the linearization.
    pub fn gradient(&self) -> DVector<f64> {
        self.fhat.rows(0, self.fhat.len() - 1).into_owned()
    }
}

/// Linearize a loss given its value and gradient at the anchor.
pub fn linearize_loss(
    value: f64,
    grad: &DVector<f64>,
    anchor: &ThetaVector,
) -> Result<LinearizedLoss> {
    if grad.len() != anchor.len() {
        return Err(Error::contract("gradient and anchor dimensions differ"));
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite loss or gradient in linearization"));
    }
    let mut fhat = DVector::zeros(grad.len() + 1);
    fhat.rows_mut(0, grad.len()).copy_from(grad);
    fhat[grad.len()] = value - grad.dot(&anchor.values);
    Ok(LinearizedLoss {
        fhat,
        anchor: anchor.clone(),
    })
}

/// Value and theta-gradient of one task's loss `l_t(L s_t)`.
pub fn task_loss_theta(
    stats: &BatchStats,
    theta: &ThetaVector,
    task: usize,
) -> Result<(f64, DVector<f64>)> {
    if task >= theta.num_tasks {
        return Err(Error::contract(format!("task {task} outside theta")));
    }
    let l = theta.l();
    let st = DVector::from_column_slice(&theta.values.as_slice()[theta.task_range(task)]);
    let alpha = &l * &st;
    let g_alpha = stats.grad(&alpha);
    let mut grad = DVector::zeros(theta.len());
    let gl = &g_alpha * st.transpose();
    grad.rows_mut(0, theta.d * theta.k).copy_from(&vec_of(&gl));
    let range = theta.task_range(task);
    grad.rows_mut(range.start, theta.k)
        .copy_from(&(l.transpose() * &g_alpha));
    Ok((stats.loss(&alpha), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stats<R: Rng>(rng: &mut R, d: usize) -> BatchStats {
        let m = DMatrix::from_fn(d + 2, d, |_, _| rng.random_range(-1.0..1.0));
        BatchStats {
            gram: m.transpose() * m,
            h: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            sq: rng.random_range(0.5..2.0),
            cst: 0.3,
            max_weight: 1.0,
        }
    }

    #[test]
    fn init_examples() {
        let kb = init_knowledge(3, 2, 1.0, 0.5, 2.0, 4, 0.1, 0.5).unwrap();
        assert_eq!(
            kb.l,
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        );
        assert_eq!(kb.s, DMatrix::zeros(2, 4));
        let (lo, hi) = eig_range(&(kb.l.transpose() * &kb.l));
        assert_eq!((lo, hi), (1.0, 1.0));
        let h = RoundHistory::new(3);
        assert!((objective_e_r(&kb, &h).unwrap() - 1.0).abs() < 1e-15);
        let one = init_knowledge(1, 1, 1.0, 1.0, 1.0, 1, 1.0, 1.0).unwrap();
        assert_eq!(one.l[(0, 0)], 1.0);
        assert!(matches!(
            init_knowledge(3, 2, 2.0, 0.5, 2.0, 1, 1.0, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn theta_roundtrip_and_slices() {
        let l = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let s = DMatrix::from_row_slice(1, 3, &[3.0, 4.0, 5.0]);
        let th = ThetaVector::from_parts(&l, &s, ThetaKind::Constrained);
        assert_eq!(th.values.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(th.task_range(1), 3..4);
        assert_eq!(th.l(), l);
        assert_eq!(th.s(), s);
        assert_eq!(th.alpha(2), DVector::from_column_slice(&[5.0, 10.0]));
    }

    #[test]
    fn empty_history_gives_zero_l() {
        let h = RoundHistory::new(3);
        let l = update_l_closed_form(&h, &DMatrix::from_element(2, 2, 1.0), 0.5).unwrap();
        assert_eq!(l, DMatrix::zeros(3, 2));
        let s = update_s_closed_form(&h, &DMatrix::identity(3, 2), 0.5, 2).unwrap();
        assert_eq!(s, DMatrix::zeros(2, 2));
    }

    #[test]
    fn closed_forms_are_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, k, t) = (4, 2, 3);
        let mut h = RoundHistory::new(d);
        for task in 0..2 {
            h.push(task, random_stats(&mut rng, d), 0.5).unwrap();
        }
        let mut kb = init_knowledge(d, k, 1.0, 0.1, 10.0, t, 0.1, 0.2).unwrap();
        kb.s = DMatrix::from_fn(k, t, |_, c| if c < 2 { rng.random_range(-1.0..1.0) } else { 0.0 });
        kb.l = update_l_closed_form(&h, &kb.s, kb.mu2).unwrap();
        let (gl, _) = objective_gradient(&kb, &h).unwrap();
        assert!(gl.norm() < 1e-10);
        kb.s = update_s_closed_form(&h, &kb.l, kb.mu1, t).unwrap();
        let (_, gs) = objective_gradient(&kb, &h).unwrap();
        assert!(gs.norm() < 1e-10);
        assert_eq!(kb.s.column(2).norm(), 0.0);
    }

    #[test]
    fn alternation_is_monotone_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 3;
        let mut h = RoundHistory::new(d);
        h.push(0, random_stats(&mut rng, d), 1.0).unwrap();
        h.push(1, random_stats(&mut rng, d), 1.0).unwrap();
        let kb = init_knowledge(d, 2, 1.0, 0.1, 10.0, 2, 0.05, 0.05).unwrap();
        for mode in [UpdateMode::ClosedForm, UpdateMode::EReinforce, UpdateMode::ENac] {
            let (_, trace) = alternating_optimize(&kb, &h, 15, mode).unwrap();
            for w in trace.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{mode:?}: {:?}", trace.objective);
            }
        }
    }

    #[test]
    fn linearization_is_exact_at_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats = random_stats(&mut rng, 3);
        let l = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let s = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let th = ThetaVector::from_parts(&l, &s, ThetaKind::Unconstrained);
        let (val, grad) = task_loss_theta(&stats, &th, 1).unwrap();
        let lin = linearize_loss(val, &grad, &th).unwrap();
        assert!((lin.evaluate(&th) - val).abs() < 1e-10);
        let flat = linearize_loss(2.5, &DVector::zeros(th.len()), &th).unwrap();
        assert_eq!(flat.fhat[th.len()], 2.5);
        assert_eq!(flat.gradient().norm(), 0.0);
    }
}
