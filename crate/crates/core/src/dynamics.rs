//! Benchmark dynamical systems, task-family generation and trajectory rollouts.
//!
//! Three systems are simulated with an explicit Euler integrator:
//!
//! - a spring-mass-damper driven by a scalar force toward a goal state,
//! - a cart-pole balanced around the upright position,
//! - a six-state quadrotor attitude model driven by four rotor-speed
//!   deviations from hover.
//!
//! Each task carries a safety polytope over its policy parameters, seeded
//! around a linear-quadratic regulator computed for that task.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::policy::{FeatureMap, GaussianPolicy};
use crate::projection::SafetyConstraint;

const GRAVITY: f64 = 9.81;
/// Nominal airframe mass used to derive the hover rotor speed.
const QUAD_MASS: f64 = 0.65;
/// Weight on the action in the quadratic regulator cost.
pub const ACTION_COST: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    SimpleMass,
    CartPole,
    Quadrotor,
}

impl Domain {
    pub fn state_dim(self) -> usize {
        match self {
            Domain::SimpleMass => 2,
            Domain::CartPole => 4,
            Domain::Quadrotor => 6,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Domain::SimpleMass | Domain::CartPole => 1,
            Domain::Quadrotor => 4,
        }
    }

    /// Default per-component action clip.
    pub fn default_u_max(self) -> f64 {
        match self {
            Domain::SimpleMass | Domain::CartPole => 10.0,
            Domain::Quadrotor => 100.0,
        }
    }

    /// Default declared bound on the feature norm.
    pub fn default_phi_max(self) -> f64 {
        match self {
            Domain::SimpleMass | Domain::CartPole => 100.0,
            Domain::Quadrotor => 500.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::SimpleMass => "simple_mass",
            Domain::CartPole => "cart_pole",
            Domain::Quadrotor => "quadrotor",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple_mass" => Ok(Domain::SimpleMass),
            "cart_pole" => Ok(Domain::CartPole),
            "quadrotor" => Ok(Domain::Quadrotor),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// Physical parameters of one system instance.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemParams {
    SimpleMass {
        spring_k: f64,
        damping_d: f64,
        mass_m: f64,
        /// Goal (position, velocity).
        goal: (f64, f64),
    },
    CartPole {
        cart_mass: f64,
        pole_mass: f64,
        /// Half-length of the pole (pivot to centre of mass).
        pole_length: f64,
        damping: f64,
    },
    Quadrotor {
        inertia_xx: f64,
        inertia_yy: f64,
        inertia_zz: f64,
        thrust_factor: f64,
        drag_factor: f64,
        rod_length: f64,
    },
}

impl SystemParams {
    pub fn domain(&self) -> Domain {
        match self {
            SystemParams::SimpleMass { .. } => Domain::SimpleMass,
            SystemParams::CartPole { .. } => Domain::CartPole,
            SystemParams::Quadrotor { .. } => Domain::Quadrotor,
        }
    }

    /// Nominal quadrotor parameters around which task inertias are varied.
    pub fn nominal_quadrotor() -> Self {
        SystemParams::Quadrotor {
            inertia_xx: 7.5e-3,
            inertia_yy: 7.5e-3,
            inertia_zz: 1.3e-2,
            thrust_factor: 3.13e-5,
            drag_factor: 7.5e-7,
            rod_length: 0.23,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::contract(format!("{name} must be positive, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::contract(format!("{name} must be nonnegative, got {v}")))
            }
        };
        match *self {
            SystemParams::SimpleMass {
                spring_k,
                damping_d,
                mass_m,
                goal,
            } => {
                nonneg("spring constant", spring_k)?;
                nonneg("damping", damping_d)?;
                positive("mass", mass_m)?;
                if !goal.0.is_finite() || !goal.1.is_finite() {
                    return Err(Error::contract("goal must be finite"));
                }
            }
            SystemParams::CartPole {
                cart_mass,
                pole_mass,
                pole_length,
                damping,
            } => {
                positive("cart mass", cart_mass)?;
                positive("pole mass", pole_mass)?;
                positive("pole length", pole_length)?;
                nonneg("damping", damping)?;
            }
            SystemParams::Quadrotor {
                inertia_xx,
                inertia_yy,
                inertia_zz,
                thrust_factor,
                drag_factor,
                rod_length,
            } => {
                positive("inertia_xx", inertia_xx)?;
                positive("inertia_yy", inertia_yy)?;
                positive("inertia_zz", inertia_zz)?;
                positive("thrust factor", thrust_factor)?;
                nonneg("drag factor", drag_factor)?;
                positive("rod length", rod_length)?;
            }
        }
        Ok(())
    }

    /// Target state of the regulator cost.
    pub fn goal_state(&self) -> DVector<f64> {
        match *self {
            SystemParams::SimpleMass { goal, .. } => DVector::from_vec(vec![goal.0, goal.1]),
            _ => DVector::zeros(self.domain().state_dim()),
        }
    }

    /// Equilibrium (state, action) the reference regulator linearizes around.
    pub fn equilibrium(&self) -> (DVector<f64>, DVector<f64>) {
        match *self {
            SystemParams::SimpleMass { spring_k, goal, .. } => (
                DVector::from_vec(vec![goal.0, 0.0]),
                DVector::from_vec(vec![spring_k * goal.0]),
            ),
            _ => {
                let dom = self.domain();
                (DVector::zeros(dom.state_dim()), DVector::zeros(dom.action_dim()))
            }
        }
    }

    /// Continuous-time state derivative.
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match *self {
            SystemParams::SimpleMass {
                spring_k,
                damping_d,
                mass_m,
                ..
            } => {
                let acc = (u[0] - spring_k * x[0] - damping_d * x[1]) / mass_m;
                DVector::from_vec(vec![x[1], acc])
            }
            SystemParams::CartPole {
                cart_mass,
                pole_mass,
                pole_length,
                damping,
            } => {
                let (xd, th, thd) = (x[1], x[2], x[3]);
                let total = cart_mass + pole_mass;
                let (s, c) = th.sin_cos();
                let temp = (u[0] - damping * xd + pole_mass * pole_length * thd * thd * s) / total;
                let th_acc = (GRAVITY * s - c * temp)
                    / (pole_length * (4.0 / 3.0 - pole_mass * c * c / total));
                let x_acc = temp - pole_mass * pole_length * th_acc * c / total;
                DVector::from_vec(vec![xd, x_acc, thd, th_acc])
            }
            SystemParams::Quadrotor {
                inertia_xx,
                inertia_yy,
                inertia_zz,
                thrust_factor,
                drag_factor,
                rod_length,
            } => {
                let hover = (QUAD_MASS * GRAVITY / (4.0 * thrust_factor)).sqrt();
                let w2: Vec<f64> = (0..4).map(|i| (hover + u[i]).powi(2)).collect();
                let tau_roll = rod_length * thrust_factor * (w2[3] - w2[1]);
                let tau_pitch = rod_length * thrust_factor * (w2[2] - w2[0]);
                let tau_yaw = drag_factor * (w2[1] + w2[3] - w2[0] - w2[2]);
                let (phi, theta) = (x[0], x[1]);
                let (p, q, r) = (x[3], x[4], x[5]);
                let (sphi, cphi) = phi.sin_cos();
                let (ttheta, ctheta) = (theta.tan(), theta.cos());
                DVector::from_vec(vec![
                    p + sphi * ttheta * q + cphi * ttheta * r,
                    cphi * q - sphi * r,
                    (sphi * q + cphi * r) / ctheta,
                    ((inertia_yy - inertia_zz) * q * r + tau_roll) / inertia_xx,
                    ((inertia_zz - inertia_xx) * p * r + tau_pitch) / inertia_yy,
                    ((inertia_xx - inertia_yy) * p * q + tau_yaw) / inertia_zz,
                ])
            }
        }
    }
}

/// One explicit-Euler step of the system dynamics.
pub fn step(
    system: &SystemParams,
    state: &DVector<f64>,
    action: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let dom = system.domain();
    if !(dt > 0.0) {
        return Err(Error::contract(format!("dt must be positive, got {dt}")));
    }
    if state.len() != dom.state_dim() || action.len() != dom.action_dim() {
        return Err(Error::contract(format!(
            "{dom} expects state dim {} and action dim {}, got {} and {}",
            dom.state_dim(),
            dom.action_dim(),
            state.len(),
            action.len()
        )));
    }
    Ok(state + system.derivative(state, action) * dt)
}

/// Quadratic regulator cost of landing in `next` after applying `action`.
pub fn step_cost(goal: &DVector<f64>, next: &DVector<f64>, action: &DVector<f64>) -> f64 {
    (next - goal).norm_squared() + ACTION_COST * action.norm_squared()
}

/// One rolled-out episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Mean per-step cost of a trajectory.
pub fn trajectory_cost(traj: &Trajectory) -> Result<f64> {
    if traj.costs.is_empty() {
        return Err(Error::contract("trajectory has no costs"));
    }
    Ok(traj.costs.iter().sum::<f64>() / traj.costs.len() as f64)
}

/// One MDP instance of a task family.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    pub system: SystemParams,
    pub constraint: SafetyConstraint,
    pub sigma: f64,
    pub horizon: usize,
    pub dt: f64,
    pub u_max: f64,
    /// Centre and half-widths of the uniform initial-state distribution.
    pub init_center: DVector<f64>,
    pub init_spread: DVector<f64>,
    /// Policy parameters of the task's reference regulator (affine features).
    pub reference_alpha: DVector<f64>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.horizon < 1 {
            return Err(Error::contract("horizon must be at least 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::contract("policy sigma must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::contract("dt must be positive"));
        }
        let n = self.system.domain().state_dim();
        if self.init_center.len() != n || self.init_spread.len() != n {
            return Err(Error::contract("initial-state distribution has wrong dimension"));
        }
        Ok(())
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.init_center.len(),
            self.init_center
                .iter()
                .zip(self.init_spread.iter())
                .map(|(&c, &w)| if w > 0.0 { c + rng.random_range(-w..=w) } else { c }),
        )
    }
}

/// Roll out one episode of `task` under `policy`.
///
/// Actions are sampled from the Gaussian policy and clipped to the action
/// box before being applied and recorded.
pub fn rollout<R: Rng + ?Sized>(
    task: &TaskSpec,
    policy: &GaussianPolicy,
    fmap: &FeatureMap,
    rng: &mut R,
) -> Result<Trajectory> {
    if policy.alpha.len() != fmap.dim() {
        return Err(Error::contract(format!(
            "policy has {} parameters, feature map expects {}",
            policy.alpha.len(),
            fmap.dim()
        )));
    }
    let dom = task.system.domain();
    if fmap.state_dim() != dom.state_dim() || fmap.action_dim() != dom.action_dim() {
        return Err(Error::contract("feature map does not match the task's system"));
    }
    let goal = task.system.goal_state();
    let m = task.horizon;
    let mut states = Vec::with_capacity(m + 1);
    let mut actions = Vec::with_capacity(m);
    let mut costs = Vec::with_capacity(m);
    let mut x = task.sample_initial(rng);
    for step_idx in 0..m {
        fmap.check_bound(&x, step_idx)?;
        let mean = policy.mean_action(&x, fmap);
        let u = DVector::from_iterator(
            mean.len(),
            mean.iter().map(|&mu| {
                let z: f64 = rng.sample(StandardNormal);
                (mu + policy.sigma * z).clamp(-task.u_max, task.u_max)
            }),
        );
        let next = step(&task.system, &x, &u, task.dt)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: step_idx });
        }
        costs.push(step_cost(&goal, &next, &u));
        states.push(std::mem::replace(&mut x, next));
        actions.push(u);
    }
    states.push(x);
    Ok(Trajectory {
        states,
        actions,
        costs,
    })
}

/// Linearize `step` around an equilibrium by central differences.
pub fn linearize(
    system: &SystemParams,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = x0.len();
    let m = u0.len();
    let h = 1e-6;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for j in 0..n {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (step(system, &xp, u0, dt)? - step(system, &xm, u0, dt)?) / (2.0 * h);
        a.set_column(j, &col);
    }
    for j in 0..m {
        let mut up = u0.clone();
        let mut um = u0.clone();
        up[j] += h;
        um[j] -= h;
        let col = (step(system, x0, &up, dt)? - step(system, x0, &um, dt)?) / (2.0 * h);
        b.set_column(j, &col);
    }
    Ok((a, b))
}

/// Infinite-horizon discrete LQR gain `K` (control law `u = -K x`).
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..200_000 {
        let btp = b.transpose() * &p;
        let gain = (r + &btp * b)
            .lu()
            .solve(&(&btp * a))
            .ok_or_else(|| Error::numerical("Riccati gain solve failed"))?;
        let next = q + a.transpose() * &p * (a - b * &gain);
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).norm();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("Riccati iteration diverged"));
        }
        if delta <= 1e-11 * p.norm().max(1.0) {
            let btp = b.transpose() * &p;
            return (r + &btp * b)
                .lu()
                .solve(&(&btp * a))
                .ok_or_else(|| Error::numerical("Riccati gain solve failed"));
        }
    }
    Err(Error::numerical("Riccati iteration did not converge"))
}

/// Reference regulator as affine-feature policy parameters.
///
/// Each action block holds `[-K_a, u_eq_a + K_a x_eq]` so that the block
/// mean at state `x` equals `u_eq_a - K_a (x - x_eq)`.
pub fn reference_alpha(system: &SystemParams, dt: f64) -> Result<DVector<f64>> {
    let (x_eq, u_eq) = system.equilibrium();
    let (a, b) = linearize(system, &x_eq, &u_eq, dt)?;
    let n = x_eq.len();
    let m = u_eq.len();
    let q = DMatrix::identity(n, n);
    let r = DMatrix::identity(m, m) * ACTION_COST;
    let k = dlqr(&a, &b, &q, &r)?;
    let dphi = n + 1;
    let mut alpha = DVector::zeros(dphi * m);
    for ai in 0..m {
        let row = k.row(ai);
        for j in 0..n {
            alpha[ai * dphi + j] = -row[j];
        }
        alpha[ai * dphi + n] = u_eq[ai] + (row * &x_eq)[0];
    }
    Ok(alpha)
}

/// Settings shared by every task of a generated family.
#[derive(Debug, Clone)]
pub struct TaskFamilyConfig {
    pub sigma: f64,
    pub horizon: usize,
    pub dt: f64,
    pub u_max: Option<f64>,
    pub c_max: f64,
    /// Slack left at the reference parameters; `None` uses `c_max / (2 sqrt(d))`.
    pub constraint_margin: Option<f64>,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            horizon: 150,
            dt: 0.01,
            u_max: None,
            c_max: 1.0,
            constraint_margin: None,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

fn sample_system<R: Rng + ?Sized>(domain: Domain, rng: &mut R) -> SystemParams {
    match domain {
        Domain::SimpleMass => SystemParams::SimpleMass {
            spring_k: uniform(rng, 1.0, 10.0),
            damping_d: uniform(rng, 0.1, 1.0),
            mass_m: uniform(rng, 0.5, 5.0),
            goal: (uniform(rng, -1.0, 1.0), 0.0),
        },
        Domain::CartPole => SystemParams::CartPole {
            cart_mass: uniform(rng, 0.5, 2.0),
            pole_mass: uniform(rng, 0.05, 0.5),
            pole_length: uniform(rng, 0.3, 1.0),
            damping: uniform(rng, 0.05, 0.5),
        },
        Domain::Quadrotor => match SystemParams::nominal_quadrotor() {
            SystemParams::Quadrotor {
                inertia_xx,
                inertia_yy,
                inertia_zz,
                thrust_factor,
                drag_factor,
                rod_length,
            } => SystemParams::Quadrotor {
                inertia_xx: inertia_xx * uniform(rng, 0.5, 1.5),
                inertia_yy: inertia_yy * uniform(rng, 0.5, 1.5),
                inertia_zz: inertia_zz * uniform(rng, 0.5, 1.5),
                thrust_factor,
                drag_factor,
                rod_length,
            },
            _ => unreachable!(),
        },
    }
}

fn initial_spread(domain: Domain) -> DVector<f64> {
    match domain {
        Domain::SimpleMass => DVector::from_vec(vec![1.0, 0.5]),
        Domain::CartPole => DVector::from_vec(vec![0.1, 0.05, 0.1, 0.05]),
        Domain::Quadrotor => DVector::from_element(6, 0.1),
    }
}

/// Safety box around the reference parameters.
///
/// Row `i` of `A` is `-sign(alpha_ref_i) e_i`, so the constraint demands each
/// gain to be at least as strong as the reference minus `margin`; the
/// reference sits strictly inside with slack `margin` in every row.
pub fn seeded_constraint(reference: &DVector<f64>, margin: f64) -> SafetyConstraint {
    let d = reference.len();
    let signs: Vec<f64> = reference
        .iter()
        .map(|&v| if v > 0.0 { -1.0 } else { 1.0 })
        .collect();
    let a = DMatrix::from_diagonal(&DVector::from_vec(signs));
    let b = &a * reference + DVector::from_element(d, margin);
    SafetyConstraint::new(a, b)
}

/// Generate `count` tasks of `domain` with seeded parameter draws.
pub fn generate_tasks<R: Rng + ?Sized>(
    domain: Domain,
    count: usize,
    family: &TaskFamilyConfig,
    rng: &mut R,
) -> Result<Vec<TaskSpec>> {
    if count < 1 {
        return Err(Error::Config("task count must be at least 1".into()));
    }
    let d = (domain.state_dim() + 1) * domain.action_dim();
    let margin = family
        .constraint_margin
        .unwrap_or(family.c_max / (2.0 * (d as f64).sqrt()));
    let mut tasks = Vec::with_capacity(count);
    for task_id in 0..count {
        let system = sample_system(domain, rng);
        let reference = reference_alpha(&system, family.dt)?;
        let constraint = seeded_constraint(&reference, margin);
        let task = TaskSpec {
            task_id,
            init_center: system.goal_state(),
            init_spread: initial_spread(domain),
            system,
            constraint,
            sigma: family.sigma,
            horizon: family.horizon,
            dt: family.dt,
            u_max: family.u_max.unwrap_or(domain.default_u_max()),
            reference_alpha: reference,
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn mass(k: f64, d: f64, m: f64) -> SystemParams {
        SystemParams::SimpleMass {
            spring_k: k,
            damping_d: d,
            mass_m: m,
            goal: (0.0, 0.0),
        }
    }

    #[test]
    fn euler_step_simple_mass() {
        let next = step(&mass(1.0, 0.0, 1.0), &v(&[1.0, 0.0]), &v(&[0.0]), 0.01).unwrap();
        assert_eq!(next[0], 1.0);
        assert!((next[1] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn euler_step_matches_hand_evaluation() {
        // Acceleration (1 - 2*0.5 - 0.5*1)/2 = -0.25.
        let next = step(&mass(2.0, 0.5, 2.0), &v(&[0.5, 1.0]), &v(&[1.0]), 0.1).unwrap();
        let acc = (1.0 - 2.0 * 0.5 - 0.5 * 1.0) / 2.0;
        assert!((next[0] - (0.5 + 0.1 * 1.0)).abs() < 1e-15);
        assert!((next[1] - (1.0 + 0.1 * acc)).abs() < 1e-15);
    }

    #[test]
    fn cart_pole_upright_is_fixed_point() {
        let sys = SystemParams::CartPole {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_length: 0.5,
            damping: 0.1,
        };
        for dt in [1e-3, 0.01, 0.5] {
            let next = step(&sys, &DVector::zeros(4), &v(&[0.0]), dt).unwrap();
            assert_eq!(next, DVector::zeros(4));
        }
    }

    #[test]
    fn quadrotor_hover_is_fixed_point() {
        let sys = SystemParams::nominal_quadrotor();
        let next = step(&sys, &DVector::zeros(6), &DVector::zeros(4), 0.01).unwrap();
        assert!(next.norm() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = step(&mass(1.0, 0.0, 1.0), &v(&[1.0]), &v(&[0.0]), 0.01);
        assert!(matches!(err, Err(Error::Contract(_))));
        let err = step(&mass(1.0, 0.0, 1.0), &v(&[1.0, 0.0]), &v(&[0.0]), 0.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn undamped_energy_drift_is_small() {
        let (k, m) = (1.0, 1.0);
        let sys = mass(k, 0.0, m);
        let energy = |x: &DVector<f64>| 0.5 * k * x[0] * x[0] + 0.5 * m * x[1] * x[1];
        let mut x = v(&[1.0, 0.0]);
        let e0 = energy(&x);
        for _ in 0..150 {
            x = step(&sys, &x, &v(&[0.0]), 0.01).unwrap();
        }
        assert!(((energy(&x) - e0) / e0).abs() < 0.05);
    }

    #[test]
    fn trajectory_cost_is_mean() {
        let t = Trajectory {
            states: vec![],
            actions: vec![],
            costs: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(trajectory_cost(&t).unwrap(), 2.0);
        let z = Trajectory {
            costs: vec![0.0; 3],
            ..t.clone()
        };
        assert_eq!(trajectory_cost(&z).unwrap(), 0.0);
        let empty = Trajectory {
            costs: vec![],
            ..t
        };
        assert!(trajectory_cost(&empty).is_err());
    }

    #[test]
    fn generated_tasks_are_deterministic_and_distinct() {
        let fam = TaskFamilyConfig::default();
        let a = generate_tasks(Domain::SimpleMass, 10, &fam, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_tasks(Domain::SimpleMass, 10, &fam, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.len(), 10);
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert_eq!(x.task_id, i);
            assert_eq!(x.system, y.system);
            assert_eq!(x.reference_alpha, y.reference_alpha);
        }
        let one = generate_tasks(Domain::CartPole, 1, &fam, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(generate_tasks(Domain::CartPole, 0, &fam, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn parameter_draws_respect_ranges() {
        let fam = TaskFamilyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in generate_tasks(Domain::SimpleMass, 20, &fam, &mut rng).unwrap() {
            match t.system {
                SystemParams::SimpleMass {
                    spring_k,
                    damping_d,
                    mass_m,
                    ..
                } => {
                    assert!((1.0..=10.0).contains(&spring_k));
                    assert!((0.1..=1.0).contains(&damping_d));
                    assert!((0.5..=5.0).contains(&mass_m));
                }
                _ => panic!("wrong system"),
            }
        }
        for t in generate_tasks(Domain::Quadrotor, 5, &fam, &mut rng).unwrap() {
            if let SystemParams::Quadrotor { inertia_xx, .. } = t.system {
                assert!((3.75e-3..=1.125e-2).contains(&inertia_xx));
            }
        }
    }

    #[test]
    fn reference_satisfies_its_constraint_with_margin() {
        let fam = TaskFamilyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dom in [Domain::SimpleMass, Domain::CartPole, Domain::Quadrotor] {
            for t in generate_tasks(dom, 3, &fam, &mut rng).unwrap() {
                let slack = &t.constraint.b - &t.constraint.a * &t.reference_alpha;
                assert!(slack.iter().all(|&c| c > 0.0));
                assert!(slack.norm() <= fam.c_max);
            }
        }
    }

    #[test]
    fn reference_regulator_stabilises_simple_mass() {
        let sys = SystemParams::SimpleMass {
            spring_k: 2.0,
            damping_d: 0.2,
            mass_m: 1.0,
            goal: (0.5, 0.0),
        };
        let alpha = reference_alpha(&sys, 0.01).unwrap();
        let mut x = v(&[-1.0, 0.0]);
        for _ in 0..1500 {
            let u = alpha[0] * x[0] + alpha[1] * x[1] + alpha[2];
            x = step(&sys, &x, &v(&[u]), 0.01).unwrap();
        }
        assert!((x[0] - 0.5).abs() < 1e-3, "settled at {}", x[0]);
    }
}
