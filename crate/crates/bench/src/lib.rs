//! Random projection and update instances shared by the benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safe_lifelong::dynamics::seeded_constraint;
use safe_lifelong::policy::BatchStats;
use safe_lifelong::projection::TaskConstraint;
use safe_lifelong::{ProjectionParams, RoundHistory, SafetyConstraint, ThetaKind, ThetaVector};

pub struct Instance {
    pub params: ProjectionParams,
    pub theta_tilde: ThetaVector,
    pub constraints: Vec<SafetyConstraint>,
    pub history: RoundHistory,
}

impl Instance {
    /// `tasks` observed tasks in dimension `d` with a `k`-dimensional basis.
    pub fn new(d: usize, k: usize, tasks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, r: f64| {
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-r..r))
        };
        let params = ProjectionParams { mu1: 1e-3, mu2: 1e-3, p: 0.1, q: 10.0, c_max: 1.0 };
        let l = uniform(d, k, 1.0);
        let s = uniform(k, tasks, 2.0);
        let margin = params.c_max / (2.0 * (d as f64).sqrt());
        let constraints = (0..tasks)
            .map(|_| {
                // A reference in the range of `L` keeps every task reachable.
                let reference = &l * uniform(k, 1, 1.0).column(0);
                seeded_constraint(&reference, margin)
            })
            .collect();
        let mut history = RoundHistory::new(d);
        for t in 0..tasks {
            let m = uniform(d + 2, d, 1.0);
            let h = uniform(d, 1, 1.0).column(0).into_owned();
            let stats = BatchStats { gram: m.transpose() * m, h, sq: 1.0, cst: 0.0, max_weight: 1.0 };
            history.push(t, stats, 0.1).expect("valid round");
        }
        Self {
            params,
            theta_tilde: ThetaVector::from_parts(&l, &s, ThetaKind::Unconstrained),
            constraints,
            history,
        }
    }

    pub fn task_constraints(&self) -> Vec<TaskConstraint<'_>> {
        self.constraints.iter().enumerate().collect()
    }
}
