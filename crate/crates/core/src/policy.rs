//! Gaussian linear policies, their likelihood losses and the base learners.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::projection::SafetyConstraint;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// State features, optionally with a constant bias, stacked once per action
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    state_dim: usize,
    action_dim: usize,
    bias: bool,
    pub phi_max: f64,
}

impl FeatureMap {
    /// Raw state followed by a constant 1.
    pub fn affine(state_dim: usize, action_dim: usize, phi_max: f64) -> Self {
        Self {
            state_dim,
            action_dim,
            bias: true,
            phi_max,
        }
    }

    /// Raw state only.
    pub fn linear(state_dim: usize, action_dim: usize, phi_max: f64) -> Self {
        Self {
            state_dim,
            action_dim,
            bias: false,
            phi_max,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Features per action dimension.
    pub fn block_dim(&self) -> usize {
        self.state_dim + usize::from(self.bias)
    }

    /// Total parameter dimension `d`.
    pub fn dim(&self) -> usize {
        self.block_dim() * self.action_dim
    }

    pub fn phi(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.block_dim());
        out.rows_mut(0, self.state_dim).copy_from(x);
        if self.bias {
            out[self.state_dim] = 1.0;
        }
        out
    }

    /// Errors when the feature norm at `x` exceeds the declared bound.
    pub fn check_bound(&self, x: &DVector<f64>, step: usize) -> Result<()> {
        let norm = self.phi(x).norm();
        if norm > self.phi_max || !norm.is_finite() {
            return Err(Error::FeatureBound {
                step,
                norm,
                bound: self.phi_max,
            });
        }
        Ok(())
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim || u.len() != self.action_dim {
            return Err(Error::contract(format!(
                "state/action dims {}/{} do not match feature map {}/{}",
                x.len(),
                u.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub alpha: DVector<f64>,
    pub sigma: f64,
}

impl GaussianPolicy {
    pub fn new(alpha: DVector<f64>, sigma: f64) -> Result<Self> {
        let p = Self { alpha, sigma };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::contract(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("policy parameters must be finite"));
        }
        Ok(())
    }

    /// Mean action `alpha_a^T phi(x)` for every action dimension.
    pub fn mean_action(&self, x: &DVector<f64>, fmap: &FeatureMap) -> DVector<f64> {
        let phi = fmap.phi(x);
        let b = fmap.block_dim();
        DVector::from_iterator(
            fmap.action_dim(),
            (0..fmap.action_dim()).map(|a| self.alpha.rows(a * b, b).dot(&phi)),
        )
    }
}

/// Gaussian log-density of `u` at state `x`, summed over action dimensions.
pub fn log_pi(
    policy: &GaussianPolicy,
    u: &DVector<f64>,
    x: &DVector<f64>,
    fmap: &FeatureMap,
) -> Result<f64> {
    policy.validate()?;
    fmap.check_dims(x, u)?;
    if policy.alpha.len() != fmap.dim() {
        return Err(Error::contract("policy dimension does not match feature map"));
    }
    let var = policy.sigma * policy.sigma;
    let mean = policy.mean_action(x, fmap);
    let norm = HALF_LN_2PI + policy.sigma.ln();
    Ok((u - mean)
        .iter()
        .map(|r| -norm - r * r / (2.0 * var))
        .sum())
}

/// Likelihood-loss sufficient statistics of a weighted trajectory batch.
///
/// The loss is the quadratic `cst + sq + alpha^T G alpha / 2 - h^T alpha`,
/// and `G` coincides with the empirical Fisher matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub gram: DMatrix<f64>,
    pub h: DVector<f64>,
    pub sq: f64,
    pub cst: f64,
    /// Largest per-trajectory weight.
    pub max_weight: f64,
}

impl BatchStats {
    pub fn zeros(d: usize) -> Self {
        Self {
            gram: DMatrix::zeros(d, d),
            h: DVector::zeros(d),
            sq: 0.0,
            cst: 0.0,
            max_weight: 0.0,
        }
    }

    /// Accumulate the statistics of a batch; `weights` defaults to all ones.
    pub fn from_batch(
        trajs: &[Trajectory],
        weights: Option<&[f64]>,
        sigma: f64,
        fmap: &FeatureMap,
    ) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::contract("trajectory batch is empty"));
        }
        if !(sigma > 0.0) {
            return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
        }
        if let Some(w) = weights {
            if w.len() != trajs.len() {
                return Err(Error::contract("one weight per trajectory required"));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::contract("trajectory weights must be finite and nonnegative"));
            }
        }
        let d = fmap.dim();
        let b = fmap.block_dim();
        let n = trajs.len() as f64;
        let var = sigma * sigma;
        let norm = HALF_LN_2PI + sigma.ln();
        // Per-block Gram of phi; the full Gram is block diagonal with copies.
        let mut phi_gram = DMatrix::zeros(b, b);
        let mut h = DVector::zeros(d);
        let mut sq = 0.0;
        let mut cst = 0.0;
        let mut max_weight: f64 = 0.0;
        for (i, traj) in trajs.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            max_weight = max_weight.max(w);
            if traj.states.len() < traj.actions.len() {
                return Err(Error::contract("trajectory has fewer states than actions"));
            }
            for (x, u) in traj.states.iter().zip(&traj.actions) {
                fmap.check_dims(x, u)?;
                let phi = fmap.phi(x);
                phi_gram.ger(w, &phi, &phi, 1.0);
                for a in 0..fmap.action_dim() {
                    h.rows_mut(a * b, b).axpy(w * u[a], &phi, 1.0);
                }
                sq += w * u.norm_squared();
                cst += w * norm * fmap.action_dim() as f64;
            }
        }
        let mut gram = DMatrix::zeros(d, d);
        for a in 0..fmap.action_dim() {
            gram.view_mut((a * b, a * b), (b, b)).copy_from(&phi_gram);
        }
        Ok(Self {
            gram: gram / (n * var),
            h: h / (n * var),
            sq: sq / (2.0 * n * var),
            cst: cst / n,
            max_weight,
        })
    }

    pub fn loss(&self, alpha: &DVector<f64>) -> f64 {
        self.cst + self.sq + 0.5 * (&self.gram * alpha).dot(alpha) - self.h.dot(alpha)
    }

    pub fn grad(&self, alpha: &DVector<f64>) -> DVector<f64> {
        &self.gram * alpha - &self.h
    }

    /// `self += w * other`.
    pub fn add_scaled(&mut self, w: f64, other: &BatchStats) {
        self.gram += &other.gram * w;
        self.h += &other.h * w;
        self.sq += w * other.sq;
        self.cst += w * other.cst;
        self.max_weight = self.max_weight.max(other.max_weight);
    }
}

/// Cost-based trajectory weights `exp(-(C - C_min) / (temp * spread))`.
///
/// The best trajectory always receives weight 1.
pub fn cost_weights(costs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::contract("cost temperature must be positive"));
    }
    if costs.is_empty() {
        return Err(Error::contract("no trajectory costs"));
    }
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    let spread = (mean - min).max(1e-12);
    Ok(costs
        .iter()
        .map(|c| (-(c - min) / (temperature * spread)).exp())
        .collect())
}

fn checked_stats(
    policy: &GaussianPolicy,
    trajs: &[Trajectory],
    fmap: &FeatureMap,
) -> Result<BatchStats> {
    policy.validate()?;
    if policy.alpha.len() != fmap.dim() {
        return Err(Error::contract("policy dimension does not match feature map"));
    }
    BatchStats::from_batch(trajs, None, policy.sigma, fmap)
}

/// Negative mean (over trajectories) of summed per-step log-likelihoods.
pub fn task_loss(policy: &GaussianPolicy, trajs: &[Trajectory], fmap: &FeatureMap) -> Result<f64> {
    Ok(checked_stats(policy, trajs, fmap)?.loss(&policy.alpha))
}

/// Analytic gradient of [`task_loss`] with respect to the policy parameters.
pub fn grad_alpha_loss(
    policy: &GaussianPolicy,
    trajs: &[Trajectory],
    fmap: &FeatureMap,
) -> Result<DVector<f64>> {
    Ok(checked_stats(policy, trajs, fmap)?.grad(&policy.alpha))
}

/// Empirical Fisher information of the batch.
pub fn fisher_matrix(
    policy: &GaussianPolicy,
    trajs: &[Trajectory],
    fmap: &FeatureMap,
) -> Result<DMatrix<f64>> {
    Ok(checked_stats(policy, trajs, fmap)?.gram)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseLearner {
    EReinforce,
    ENac,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgGradient {
    pub grad: DVector<f64>,
    pub fisher: Option<DMatrix<f64>>,
}

/// Tikhonov term added to the Fisher matrix before inversion.
pub fn fisher_regularization(fisher: &DMatrix<f64>) -> f64 {
    1e-6 * fisher.trace() / fisher.nrows().max(1) as f64
}

/// Natural-gradient direction `(F + eps I)^{-1} g`.
pub fn natural_direction(fisher: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let d = grad.len();
    if fisher.shape() != (d, d) {
        return Err(Error::contract("Fisher matrix has wrong shape"));
    }
    let eps = fisher_regularization(fisher);
    let reg = fisher + DMatrix::identity(d, d) * eps;
    if let Some(chol) = reg.clone().cholesky() {
        let x = chol.solve(grad);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    Err(Error::numerical("regularized Fisher matrix is singular"))
}

/// One gradient step of the chosen base learner.
pub fn base_learner_step(
    kind: BaseLearner,
    alpha: &DVector<f64>,
    gradient: &PgGradient,
    rate: f64,
) -> Result<DVector<f64>> {
    if !(rate > 0.0) {
        return Err(Error::contract(format!("rate must be positive, got {rate}")));
    }
    if gradient.grad.len() != alpha.len() {
        return Err(Error::contract("gradient dimension does not match parameters"));
    }
    let dir = match kind {
        BaseLearner::EReinforce => gradient.grad.clone(),
        BaseLearner::ENac => {
            let fisher = gradient
                .fisher
                .as_ref()
                .ok_or_else(|| Error::contract("natural step requires a Fisher matrix"))?;
            natural_direction(fisher, &gradient.grad)?
        }
    };
    Ok(alpha - dir * rate)
}

/// Largest `||A^+|| (||b|| + c_max)` over the constraints, with the ids of
/// rank-deficient constraints.
pub fn max_param_norm_bound<'a>(
    constraints: impl IntoIterator<Item = &'a SafetyConstraint>,
    c_max: f64,
) -> (f64, Vec<usize>) {
    let mut best: f64 = 0.0;
    let mut deficient = Vec::new();
    for (i, c) in constraints.into_iter().enumerate() {
        best = best.max(c.pinv_norm() * (c.b.norm() + c_max));
        if c.rank() < c.a.ncols() {
            deficient.push(i);
        }
    }
    (best, deficient)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBound {
    pub value: f64,
    /// Positions (in the given constraint list) of rank-deficient `A`.
    pub rank_deficient: Vec<usize>,
}

/// Bound on the norm of the likelihood gradient at any feasible parameter.
///
/// `u_max` is a bound on the Euclidean norm of an action vector.
pub fn lemma1_grad_bound<'a>(
    horizon: usize,
    sigma: f64,
    constraints: impl IntoIterator<Item = &'a SafetyConstraint>,
    c_max: f64,
    u_max: f64,
    phi_max: f64,
) -> Result<GradBound> {
    if !(sigma > 0.0) {
        return Err(Error::contract("sigma must be positive"));
    }
    let (m1, rank_deficient) = max_param_norm_bound(constraints, c_max);
    let value = horizon as f64 / (sigma * sigma) * (u_max + m1 * phi_max) * phi_max;
    Ok(GradBound {
        value,
        rank_deficient,
    })
}
