//! Experiment runner: the online round loop for the safe learner and its two
//! baselines, violation accounting and CSV output.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{parse_config, DataPolicy, EtaMode, ExperimentConfig, Method};

use crate::dynamics::{generate_tasks, rollout, trajectory_cost, TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::lifelong::{
    alternating_optimize, init_knowledge, linearize_loss, task_loss_theta, KnowledgeBase,
    RoundHistory, ThetaKind, RATE_CONSTANT,
};
use crate::linalg::{eig_range, symmetrize};
use crate::policy::{
    base_learner_step, cost_weights, BaseLearner, BatchStats, FeatureMap, GaussianPolicy,
    PgGradient,
};
use crate::projection::{project_constrained, TaskConstraint};
use crate::regret::{
    bound_constants, empirical_regret, hindsight_comparator, BoundInputs, Comparator,
    ComparatorParams, RegretRecord,
};

/// Tolerance for counting a policy as satisfying its constraint.
pub const SAFETY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub task_id: usize,
    /// Loss of the played parameters on the round's batch.
    pub loss: f64,
    pub avg_cost: f64,
    /// Largest constraint violation over observed tasks after the update.
    pub max_violation: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRow {
    pub iter: usize,
    pub task_id: usize,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub round: usize,
    pub fhat_norm: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma5: f64,
    pub delta_l: f64,
    pub bound: f64,
}

impl BoundRow {
    pub fn holds(&self) -> bool {
        self.fhat_norm <= self.bound
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationRow {
    pub task_id: usize,
    pub observations_until_safe: usize,
    pub violations: usize,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub method: Method,
    pub config: ExperimentConfig,
    pub tasks: Vec<TaskSpec>,
    pub rounds: Vec<RoundRow>,
    pub regret: Vec<RegretRecord>,
    pub policy_path: Vec<PathRow>,
    /// Runtime bound checks; empty for the policy-gradient baseline.
    pub bounds: Vec<BoundRow>,
    /// Per task, whether its policy satisfied the constraint after each of
    /// its observations.
    pub feasibility: BTreeMap<usize, Vec<bool>>,
    pub knowledge: Option<KnowledgeBase>,
    /// Final policy parameters per task.
    pub final_alphas: Vec<DVector<f64>>,
    pub comparator: Comparator,
}

impl RunArtifacts {
    pub fn final_regret(&self) -> f64 {
        self.regret.last().map_or(0.0, |r| r.cum_regret)
    }

    /// Mean of the per-round average cost over the last `n` rounds.
    pub fn tail_cost(&self, n: usize) -> f64 {
        let n = n.min(self.rounds.len()).max(1);
        let tail = &self.rounds[self.rounds.len().saturating_sub(n)..];
        tail.iter().map(|r| r.avg_cost).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn total_violations(&self) -> usize {
        self.feasibility
            .values()
            .map(|v| v.iter().filter(|ok| !**ok).count())
            .sum()
    }
}

/// Observations of a task before its policy satisfies the constraint for
/// good; `sentinel` if the last observation still violates it.
pub fn observations_until_safe(pattern: &[bool], sentinel: usize) -> usize {
    match pattern.iter().rposition(|ok| !ok) {
        None => 1,
        Some(i) if i + 1 == pattern.len() => sentinel,
        Some(i) => i + 2,
    }
}

/// Per observed task, the observation count until safe (sentinel `R + 1`).
pub fn violations_until_safe(artifacts: &RunArtifacts) -> Vec<ViolationRow> {
    let sentinel = artifacts.config.rounds + 1;
    artifacts
        .feasibility
        .iter()
        .map(|(&task_id, pattern)| ViolationRow {
            task_id,
            observations_until_safe: observations_until_safe(pattern, sentinel),
            violations: pattern.iter().filter(|ok| !**ok).count(),
        })
        .collect()
}

struct Setup {
    tasks: Vec<TaskSpec>,
    fmap: FeatureMap,
    rollout_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
}

fn setup(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let mut task_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tasks = generate_tasks(config.domain, config.num_tasks, &config.family(), &mut task_rng)?;
    let mut rollout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    rollout_rng.set_stream(1);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(2);
    let dom = config.domain;
    Ok(Setup {
        tasks,
        fmap: FeatureMap::affine(dom.state_dim(), dom.action_dim(), config.feature_bound()),
        rollout_rng,
        sample_rng,
    })
}

struct Batch {
    stats: BatchStats,
    avg_cost: f64,
}

fn collect_batch(
    config: &ExperimentConfig,
    setup: &mut Setup,
    task: usize,
    alpha: &DVector<f64>,
    count: usize,
) -> Result<Batch> {
    let spec = &setup.tasks[task];
    let data_alpha = match config.data_policy {
        DataPolicy::OnPolicy => alpha.clone(),
        DataPolicy::Reference => spec.reference_alpha.clone(),
    };
    let policy = GaussianPolicy::new(data_alpha, config.sigma)?;
    let trajs: Vec<Trajectory> = (0..count)
        .map(|_| rollout(spec, &policy, &setup.fmap, &mut setup.rollout_rng))
        .collect::<Result<_>>()?;
    let costs: Vec<f64> = trajs.iter().map(trajectory_cost).collect::<Result<_>>()?;
    let weights = if config.cost_weighted {
        Some(cost_weights(&costs, config.cost_temperature)?)
    } else {
        None
    };
    let stats = BatchStats::from_batch(&trajs, weights.as_deref(), config.sigma, &setup.fmap)?;
    Ok(Batch {
        stats,
        avg_cost: costs.iter().sum::<f64>() / costs.len() as f64,
    })
}

fn observed_constraints<'a>(tasks: &'a [TaskSpec], history: &RoundHistory) -> Vec<TaskConstraint<'a>> {
    history
        .observed()
        .map(|t| (t, &tasks[t].constraint))
        .collect()
}

fn max_violation(tasks: &[TaskSpec], history: &RoundHistory, alpha_of: impl Fn(usize) -> DVector<f64>) -> f64 {
    history
        .observed()
        .map(|t| tasks[t].constraint.max_violation(&alpha_of(t)))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn bound_inputs(config: &ExperimentConfig, fmap: &FeatureMap) -> BoundInputs {
    BoundInputs {
        horizon: config.horizon,
        n_traj: config.n_traj,
        sigma: config.sigma,
        u_max: config.action_clip() * (fmap.action_dim() as f64).sqrt(),
        phi_max: fmap.phi_max,
        p: config.p,
        q: config.q,
        d: fmap.dim(),
        c_max: config.c_max,
    }
}

fn comparator_params(config: &ExperimentConfig) -> ComparatorParams {
    ComparatorParams {
        projection: config.projection_params(),
        k: config.latent_dim(),
        zeta: config.zeta,
        max_iters: 20,
    }
}

fn sample_task(setup: &mut Setup) -> usize {
    let n = setup.tasks.len();
    setup.sample_rng.random_range(0..n)
}

/// Safe lifelong learning, or its unconstrained variant when `project` is
/// false.
fn run_lifelong(config: &ExperimentConfig, project: bool) -> Result<RunArtifacts> {
    let mut setup = setup(config)?;
    let d = setup.fmap.dim();
    let k = config.latent_dim();
    let params = config.projection_params();
    let mut kb = init_knowledge(d, k, config.zeta, config.p, config.q, config.num_tasks, config.mu1, config.mu2)?;
    let mut history = RoundHistory::new(d);
    let eta = config.eta_value();
    let inputs = bound_inputs(config, &setup.fmap);
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut realized = Vec::with_capacity(config.rounds);
    let mut path = Vec::with_capacity(config.rounds);
    let mut bounds = Vec::with_capacity(config.rounds);
    let mut feasibility: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    let mut max_abs_loss: f64 = 0.0;

    for j in 1..=config.rounds {
        let step = |e: Error| e.in_round(j);
        let t = sample_task(&mut setup);
        let theta_hat = kb.theta(ThetaKind::Constrained);
        let alpha = kb.alpha(t);
        let batch = collect_batch(config, &mut setup, t, &alpha, config.n_traj).map_err(step)?;
        let loss = batch.stats.loss(&alpha);
        realized.push(loss);

        let (value, grad) = task_loss_theta(&batch.stats, &theta_hat, t).map_err(step)?;
        let fhat = linearize_loss(value, &grad, &theta_hat).map_err(step)?;
        max_abs_loss = max_abs_loss.max(value.abs());
        let prev: Vec<_> = history.observed().map(|s| &setup.tasks[s].constraint).collect();
        let consts = bound_constants(&inputs, prev, 1.5 * max_abs_loss);
        bounds.push(BoundRow {
            round: j,
            fhat_norm: fhat.fhat.norm(),
            gamma1: consts.gamma1,
            gamma2: consts.gamma2,
            gamma3: consts.gamma3,
            gamma5: consts.gamma5,
            delta_l: consts.delta_l,
            bound: consts.fhat_bound(),
        });

        history.push(t, batch.stats, eta).map_err(step)?;
        let (updated, _) = alternating_optimize(&kb, &history, config.inner_iters, config.mode).map_err(step)?;
        if project {
            let started = std::time::Instant::now();
            let constraints = observed_constraints(&setup.tasks, &history);
            let proj = project_constrained(
                &updated.theta(ThetaKind::Unconstrained),
                &constraints,
                &params,
                &theta_hat,
            )
            .map_err(step)?;
            log::debug!("round {j}: projection {:?} in {:?}", proj.strategy, started.elapsed());
            kb = updated;
            kb.set_theta(&proj.theta).map_err(step)?;
        } else {
            kb = updated;
        }

        let new_alpha = kb.alpha(t);
        let ok = setup.tasks[t].constraint.max_violation(&new_alpha) <= SAFETY_TOL;
        feasibility.entry(t).or_default().push(ok);
        let (lambda_min, lambda_max) = eig_range(&symmetrize(&(kb.l.transpose() * &kb.l)));
        rounds.push(RoundRow {
            round: j,
            task_id: t,
            loss,
            avg_cost: batch.avg_cost,
            max_violation: max_violation(&setup.tasks, &history, |s| kb.alpha(s)),
            lambda_min,
            lambda_max,
        });
        path.push(PathRow {
            iter: j,
            task_id: t,
            alpha: new_alpha.iter().copied().collect(),
        });
    }

    let final_theta = kb.theta(ThetaKind::Constrained);
    let constraints = observed_constraints(&setup.tasks, &history);
    let supplied = if project { vec![final_theta] } else { Vec::new() };
    let started = std::time::Instant::now();
    let comparator = hindsight_comparator(&history, &constraints, &comparator_params(config), config.num_tasks, &supplied)?;
    log::debug!("comparator {:?} in {:?}", comparator.source, started.elapsed());
    let regret = empirical_regret(&realized, &comparator.theta, &history, &constraints, config.p, config.q)?;
    let final_alphas = (0..config.num_tasks).map(|t| kb.alpha(t)).collect();
    Ok(RunArtifacts {
        method: if project { Method::Safe } else { Method::MtlUnconstrained },
        config: config.clone(),
        tasks: setup.tasks,
        rounds,
        regret,
        policy_path: path,
        bounds,
        feasibility,
        knowledge: Some(kb),
        final_alphas,
        comparator,
    })
}

/// Safe lifelong policy search: per round, sample a task, roll out the
/// current policy, refit the shared basis and coefficients, and project onto
/// the safe set.
pub fn run_safe_lifelong(config: &ExperimentConfig) -> Result<RunArtifacts> {
    run_lifelong(config, true)
}

/// Lifelong learning with the projection step skipped.
pub fn run_baseline_unconstrained_mtl(config: &ExperimentConfig) -> Result<RunArtifacts> {
    run_lifelong(config, false)
}

/// Independent per-task policy gradient with `extra_traj` additional
/// rollouts per round and no projection.
pub fn run_baseline_pg(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let mut setup = setup(config)?;
    let d = setup.fmap.dim();
    let kind = match config.mode {
        crate::lifelong::UpdateMode::EReinforce => BaseLearner::EReinforce,
        _ => BaseLearner::ENac,
    };
    let mut alphas = vec![DVector::zeros(d); config.num_tasks];
    let mut history = RoundHistory::new(d);
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut realized = Vec::with_capacity(config.rounds);
    let mut path = Vec::with_capacity(config.rounds);
    let mut feasibility: BTreeMap<usize, Vec<bool>> = BTreeMap::new();

    for j in 1..=config.rounds {
        let step = |e: Error| e.in_round(j);
        let t = sample_task(&mut setup);
        let alpha = alphas[t].clone();
        let count = config.n_traj + config.extra_traj;
        let batch = collect_batch(config, &mut setup, t, &alpha, count).map_err(step)?;
        let loss = batch.stats.loss(&alpha);
        realized.push(loss);
        let gradient = PgGradient {
            grad: batch.stats.grad(&alpha),
            fisher: Some(batch.stats.gram.clone()),
        };
        let rate = match kind {
            BaseLearner::ENac => RATE_CONSTANT,
            BaseLearner::EReinforce => RATE_CONSTANT / eig_range(&batch.stats.gram).1.max(1e-300),
        };
        alphas[t] = base_learner_step(kind, &alpha, &gradient, rate).map_err(step)?;
        history.push(t, batch.stats, 1.0).map_err(step)?;

        let ok = setup.tasks[t].constraint.max_violation(&alphas[t]) <= SAFETY_TOL;
        feasibility.entry(t).or_default().push(ok);
        rounds.push(RoundRow {
            round: j,
            task_id: t,
            loss,
            avg_cost: batch.avg_cost,
            max_violation: max_violation(&setup.tasks, &history, |s| alphas[s].clone()),
            lambda_min: f64::NAN,
            lambda_max: f64::NAN,
        });
        path.push(PathRow {
            iter: j,
            task_id: t,
            alpha: alphas[t].iter().copied().collect(),
        });
    }

    let constraints = observed_constraints(&setup.tasks, &history);
    let comparator = hindsight_comparator(&history, &constraints, &comparator_params(config), config.num_tasks, &[])?;
    let regret = empirical_regret(&realized, &comparator.theta, &history, &constraints, config.p, config.q)?;
    Ok(RunArtifacts {
        method: Method::Pg,
        config: config.clone(),
        tasks: setup.tasks,
        rounds,
        regret,
        policy_path: path,
        bounds: Vec::new(),
        feasibility,
        knowledge: None,
        final_alphas: alphas,
        comparator,
    })
}

pub fn run_method(config: &ExperimentConfig, method: Method) -> Result<RunArtifacts> {
    match method {
        Method::Safe => run_safe_lifelong(config),
        Method::Pg => run_baseline_pg(config),
        Method::MtlUnconstrained => run_baseline_unconstrained_mtl(config),
    }
}

fn float(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.8e}");
}

pub fn rounds_csv(a: &RunArtifacts) -> String {
    let mut out = String::from("round,task_id,loss,avg_cost,max_violation,lambda_min_LtL,lambda_max_LtL\n");
    for r in &a.rounds {
        let _ = write!(out, "{},{},", r.round, r.task_id);
        for (i, v) in [r.loss, r.avg_cost, r.max_violation, r.lambda_min, r.lambda_max].into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            float(&mut out, v);
        }
        out.push('\n');
    }
    out
}

pub fn regret_csv(a: &RunArtifacts) -> String {
    let mut out = String::from("round,realized,comparator,cum_regret\n");
    for r in &a.regret {
        let _ = write!(out, "{},", r.round);
        float(&mut out, r.realized);
        out.push(',');
        float(&mut out, r.comparator);
        out.push(',');
        float(&mut out, r.cum_regret);
        out.push('\n');
    }
    out
}

pub fn violations_csv(a: &RunArtifacts) -> String {
    let mut out = String::from("task_id,observations_until_safe\n");
    for v in violations_until_safe(a) {
        let _ = writeln!(out, "{},{}", v.task_id, v.observations_until_safe);
    }
    out
}

pub fn policy_path_csv(a: &RunArtifacts) -> String {
    let d = a.final_alphas.first().map_or(0, |v| v.len());
    let mut out = String::from("iter,task_id");
    for i in 0..d {
        let _ = write!(out, ",alpha_{i}");
    }
    out.push('\n');
    for r in &a.policy_path {
        let _ = write!(out, "{},{}", r.iter, r.task_id);
        for &v in &r.alpha {
            out.push(',');
            float(&mut out, v);
        }
        out.push('\n');
    }
    out
}

pub fn bounds_csv(a: &RunArtifacts) -> String {
    let mut out = String::from("round,fhat_norm,gamma1,gamma2,gamma3,gamma5,delta_l,bound\n");
    for b in &a.bounds {
        let _ = write!(out, "{}", b.round);
        for v in [b.fhat_norm, b.gamma1, b.gamma2, b.gamma3, b.gamma5, b.delta_l, b.bound] {
            out.push(',');
            float(&mut out, v);
        }
        out.push('\n');
    }
    out
}

/// Files written by [`write_artifacts`], in order.
pub const ARTIFACT_FILES: [&str; 6] = [
    "rounds.csv",
    "regret.csv",
    "violations.csv",
    "policy_path.csv",
    "bounds.csv",
    "config.echo",
];

pub fn write_artifacts(a: &RunArtifacts, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let contents = [
        rounds_csv(a),
        regret_csv(a),
        violations_csv(a),
        policy_path_csv(a),
        bounds_csv(a),
        a.config.echo(),
    ];
    for (name, body) in ARTIFACT_FILES.iter().zip(contents) {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_definition() {
        assert_eq!(observations_until_safe(&[false, false, true, true], 9), 3);
        assert_eq!(observations_until_safe(&[true, true], 9), 1);
        assert_eq!(observations_until_safe(&[true, false], 9), 9);
        assert_eq!(observations_until_safe(&[false, true, false, true], 9), 4);
    }
}
