//! Projection against brute force on instances small enough to enumerate.
//! With `k = 1` and `L` fixed, every task's coefficient problem is a 1-D
//! clamp, so a grid over `L` alone gives the global optimum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safe_lifelong::linalg::eig_range;
use safe_lifelong::projection::{bregman_divergence, check_feasible, project_constrained};
use safe_lifelong::{ProjectionParams, SafetyConstraint, ThetaKind, ThetaVector};

/// Interval of `s` with `c = b - m s >= 0` and `||c|| <= c_max`.
fn s_interval(m: &DVector<f64>, b: &DVector<f64>, c_max: f64) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..m.len() {
        if m[i] > 0.0 {
            hi = hi.min(b[i] / m[i]);
        } else if m[i] < 0.0 {
            lo = lo.max(b[i] / m[i]);
        } else if b[i] < 0.0 {
            return None;
        }
    }
    let (qa, qb, qc) = (m.norm_squared(), -2.0 * b.dot(m), b.norm_squared() - c_max * c_max);
    if qa > 0.0 {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        lo = lo.max((-qb - disc.sqrt()) / (2.0 * qa));
        hi = hi.min((-qb + disc.sqrt()) / (2.0 * qa));
    } else if qc > 0.0 {
        return None;
    }
    (lo <= hi).then_some((lo, hi))
}

/// Optimal divergence for a fixed `L` (d x 1), or `None` if infeasible.
fn value_at(
    l: &DVector<f64>,
    l_tilde: &DVector<f64>,
    s_tilde: &[f64],
    cons: &[SafetyConstraint],
    params: &ProjectionParams,
) -> Option<f64> {
    let mut v = params.mu2 * (l - l_tilde).norm_squared();
    for (t, con) in cons.iter().enumerate() {
        let (lo, hi) = s_interval(&(&con.a * l), &con.b, params.c_max)?;
        let s = s_tilde[t].clamp(lo, hi);
        v += params.mu1 * (s - s_tilde[t]).powi(2);
    }
    Some(v)
}

/// Zooming polar grid over `L` with `p <= ||L||^2 <= q`.
fn grid_optimum(
    d: usize,
    l_tilde: &DVector<f64>,
    s_tilde: &[f64],
    cons: &[SafetyConstraint],
    params: &ProjectionParams,
) -> f64 {
    let (r0, r1) = (params.p.sqrt(), params.q.sqrt());
    let point = |r: f64, ang: f64| {
        if d == 1 {
            DVector::from_element(1, if ang < std::f64::consts::PI { r } else { -r })
        } else {
            DVector::from_vec(vec![r * ang.cos(), r * ang.sin()])
        }
    };
    let n = 300;
    let tau = 2.0 * std::f64::consts::PI;
    let (mut rr, mut aa) = ((r0, r1), (0.0, tau));
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..8 {
        for i in 0..=n {
            let r = rr.0 + (rr.1 - rr.0) * i as f64 / n as f64;
            for j in 0..=n {
                let a = aa.0 + (aa.1 - aa.0) * j as f64 / n as f64;
                if let Some(v) = value_at(&point(r, a), l_tilde, s_tilde, cons, params) {
                    if v < best.0 {
                        best = (v, r, a);
                    }
                }
            }
        }
        let (wr, wa) = ((rr.1 - rr.0) / 8.0, (aa.1 - aa.0) / 8.0);
        rr = ((best.1 - wr).max(r0), (best.1 + wr).min(r1));
        aa = (best.2 - wa, best.2 + wa);
    }
    best.0
}

fn check(d: usize, tasks: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ProjectionParams {
        mu1: rng.random_range(0.3..2.0),
        mu2: rng.random_range(0.3..2.0),
        p: 0.25,
        q: 4.0,
        c_max: 1.0,
    };
    let cons: Vec<SafetyConstraint> = (0..tasks)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |i, j| {
                f64::from(u8::from(i == j)) + rng.random_range(-0.5..0.5)
            });
            SafetyConstraint::new(a, DVector::from_fn(d, |_, _| rng.random_range(0.05..0.5)))
        })
        .collect();
    let l_tilde = DVector::from_fn(d, |_, _| rng.random_range(-2.5..2.5));
    let s_tilde: Vec<f64> = (0..tasks).map(|_| rng.random_range(-3.0..3.0)).collect();
    let theta_tilde = ThetaVector::from_parts(
        &DMatrix::from_column_slice(d, 1, l_tilde.as_slice()),
        &DMatrix::from_row_slice(1, tasks, &s_tilde),
        ThetaKind::Unconstrained,
    );
    let refs: Vec<(usize, &SafetyConstraint)> = cons.iter().enumerate().collect();
    let res = project_constrained(&theta_tilde, &refs, &params, &theta_tilde).unwrap();
    let rep = check_feasible(&res.theta, &refs, params.p, params.q, 1e-6).unwrap();
    assert!(rep.feasible, "seed {seed}: projection infeasible {rep:?}");
    let l = res.theta.l();
    let (lo, hi) = eig_range(&(l.transpose() * &l));
    assert!(lo >= params.p - 1e-6 && hi <= params.q + 1e-6);
    let got = bregman_divergence(params.mu1, params.mu2, &res.theta, &theta_tilde).unwrap();
    let grid = grid_optimum(d, &l_tilde, &s_tilde, &cons, &params);
    assert!(got <= grid + 1e-3, "seed {seed} d={d}: projection {got} vs grid {grid}");
}

#[test]
fn scalar_basis_two_tasks_matches_grid() {
    for seed in 0..15 {
        check(1, 2, seed);
    }
}

#[test]
fn planar_basis_one_task_matches_grid() {
    for seed in 100..115 {
        check(2, 1, seed);
    }
}

#[test]
fn planar_basis_two_tasks_matches_grid() {
    for seed in 200..210 {
        check(2, 2, seed);
    }
}

#[test]
fn one_dimensional_hand_solution() {
    // d = k = 1, A = [1], b = [0], c_max large: alpha = l s must be <= 0.
    let params = ProjectionParams { mu1: 1.0, mu2: 1.0, p: 0.25, q: 4.0, c_max: 100.0 };
    let con = SafetyConstraint::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1));
    let theta_tilde = ThetaVector::from_parts(
        &DMatrix::from_element(1, 1, 1.0),
        &DMatrix::from_element(1, 1, 0.5),
        ThetaKind::Unconstrained,
    );
    let res = project_constrained(&theta_tilde, &[(0, &con)], &params, &theta_tilde).unwrap();
    // With l kept at 1 the best s is 0 (cost 0.25). Flipping l is costlier,
    // so the optimum is (l, s) = (1, 0).
    let (l, s) = (res.theta.l()[(0, 0)], res.theta.s()[(0, 0)]);
    assert!((l - 1.0).abs() < 1e-6 && s.abs() < 1e-6, "l={l}, s={s}");
    assert!((res.objective - 0.25).abs() < 1e-6);
}
