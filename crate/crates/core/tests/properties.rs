use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use safe_lifelong::dynamics::trajectory_cost;
use safe_lifelong::harness::observations_until_safe;
use safe_lifelong::lifelong::{objective_e_r, omega0};
use safe_lifelong::linalg::{eig_range, vec_of};
use safe_lifelong::policy::{fisher_matrix, task_loss, BatchStats};
use safe_lifelong::projection::{is_member, project_constrained, recover_l_from_x};
use safe_lifelong::regret::{bound_constants, cumulative_loss, empirical_regret, BoundInputs};
use safe_lifelong::{
    FeatureMap, GaussianPolicy, KnowledgeBase, ProjectionParams, RoundHistory, SafetyConstraint,
    ThetaKind, ThetaVector, Trajectory,
};

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-range..range, rows * cols)
        .prop_map(move |v| DMatrix::from_column_slice(rows, cols, &v))
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..4).prop_flat_map(|(d, t)| (Just(d), 1..=d, Just(t)))
}

fn stats(d: usize) -> impl Strategy<Value = BatchStats> {
    (matrix(d + 2, d, 1.0), prop::collection::vec(-1.0..1.0f64, d), 0.1..2.0f64).prop_map(
        move |(m, h, sq)| BatchStats {
            gram: m.transpose() * m,
            h: DVector::from_vec(h),
            sq,
            cst: 0.2,
            max_weight: 1.0,
        },
    )
}

fn batch(n: usize, da: usize) -> impl Strategy<Value = Vec<Trajectory>> {
    let traj = (1usize..5).prop_flat_map(move |len| {
        (
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, n), len + 1),
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, da), len),
        )
            .prop_map(|(xs, us)| Trajectory {
                costs: vec![0.0; us.len()],
                states: xs.into_iter().map(DVector::from_vec).collect(),
                actions: us.into_iter().map(DVector::from_vec).collect(),
            })
    });
    prop::collection::vec(traj, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn theta_round_trip_is_exact(
        (l, s) in dims().prop_flat_map(|(d, k, t)| (matrix(d, k, 5.0), matrix(k, t, 5.0)))
    ) {
        let th = ThetaVector::from_parts(&l, &s, ThetaKind::Unconstrained);
        prop_assert_eq!(th.l(), l.clone());
        prop_assert_eq!(th.s(), s.clone());
        let back = ThetaVector::from_values(th.values.clone(), l.nrows(), l.ncols(), s.ncols(), th.kind).unwrap();
        prop_assert_eq!(back.values, th.values.clone());
        for t in 0..s.ncols() {
            prop_assert!((th.alpha(t) - &l * s.column(t)).norm() <= 1e-12 * (1.0 + th.values.norm()));
        }
    }

    #[test]
    fn kronecker_vec_identity(a in matrix(2, 2, 3.0), x in matrix(2, 2, 3.0), b in matrix(2, 2, 3.0)) {
        let lhs = vec_of(&(&a * &x * &b));
        let rhs = b.transpose().kronecker(&a) * vec_of(&x);
        prop_assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn task_loss_is_convex_and_fisher_psd(
        (trajs, a0, a1, lam) in batch(2, 1).prop_flat_map(|b| (
            Just(b),
            prop::collection::vec(-2.0..2.0f64, 3),
            prop::collection::vec(-2.0..2.0f64, 3),
            0.0..1.0f64,
        ))
    ) {
        let fmap = FeatureMap::affine(2, 1, 10.0);
        let loss = |a: &DVector<f64>| task_loss(&GaussianPolicy::new(a.clone(), 0.5).unwrap(), &trajs, &fmap).unwrap();
        let (a0, a1) = (DVector::from_vec(a0), DVector::from_vec(a1));
        let mid = &a0 * lam + &a1 * (1.0 - lam);
        prop_assert!(loss(&mid) <= lam * loss(&a0) + (1.0 - lam) * loss(&a1) + 1e-9);
        let f = fisher_matrix(&GaussianPolicy::new(a0, 0.5).unwrap(), &trajs, &fmap).unwrap();
        prop_assert_eq!(f.clone(), f.transpose());
        prop_assert!(eig_range(&f).0 >= -1e-10);
    }

    #[test]
    fn trajectory_cost_ignores_order(costs in prop::collection::vec(0.0..10.0f64, 1..20), seed in any::<u64>()) {
        let traj = |c: Vec<f64>| Trajectory {
            states: vec![DVector::zeros(1); c.len() + 1],
            actions: vec![DVector::zeros(1); c.len()],
            costs: c,
        };
        let mut shuffled = costs.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_mul(i + 7) % n);
        }
        let a = trajectory_cost(&traj(costs)).unwrap();
        let b = trajectory_cost(&traj(shuffled)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn bound_constants_are_monotone(
        a in matrix(2, 2, 2.0),
        b in prop::collection::vec(0.1..2.0f64, 2),
        c_max in 0.1..3.0f64,
        scale in 1.0..4.0f64,
    ) {
        prop_assume!(a.clone().svd(false, false).singular_values.min() > 1e-2);
        let inputs = BoundInputs { horizon: 10, n_traj: 5, sigma: 0.5, u_max: 2.0, phi_max: 3.0, p: 0.5, q: 4.0, d: 2, c_max };
        let con = SafetyConstraint::new(a.clone(), DVector::from_vec(b.clone()));
        let bigger_b = SafetyConstraint::new(a, DVector::from_vec(b) * scale);
        let base = bound_constants(&inputs, [&con], 1.0);
        let more_c = bound_constants(&BoundInputs { c_max: c_max * 2.0, ..inputs }, [&con], 1.0);
        let more_b = bound_constants(&inputs, [&bigger_b], 1.0);
        let more_tasks = bound_constants(&inputs, [&con, &con], 1.0);
        for other in [&more_c, &more_b, &more_tasks] {
            prop_assert!(other.gamma1 >= base.gamma1 * (1.0 - 1e-12));
            prop_assert!(other.gamma2 >= base.gamma2 * (1.0 - 1e-12));
            prop_assert!(other.gamma3 >= base.gamma3 * (1.0 - 1e-12));
            prop_assert!(other.gamma5 >= base.gamma5 * (1.0 - 1e-12));
        }
        for g in [base.gamma1, base.gamma2, base.gamma3, base.gamma5] {
            prop_assert!(g >= 0.0);
        }
    }

    #[test]
    fn objective_is_weighted_losses_plus_regularizer(
        (l, s, rounds) in dims().prop_flat_map(|(d, k, t)| (
            matrix(d, k, 2.0),
            matrix(k, t, 2.0),
            prop::collection::vec((0..t, stats(d)), 1..6),
        )),
        mu1 in 0.01..2.0f64,
        mu2 in 0.01..2.0f64,
    ) {
        let eta = 1.0 / (rounds.len() as f64).sqrt();
        let mut hist = RoundHistory::new(l.nrows());
        for (t, st) in &rounds {
            hist.push(*t, st.clone(), eta).unwrap();
        }
        let kb = KnowledgeBase { l: l.clone(), s: s.clone(), mu1, mu2, p: 0.1, q: 10.0 };
        let theta = ThetaVector::from_parts(&l, &s, ThetaKind::Unconstrained);
        let direct: f64 = rounds.iter().map(|(t, st)| eta * st.loss(&(&l * s.column(*t)))).sum::<f64>()
            + mu2 * l.norm_squared() + mu1 * s.norm_squared();
        let got = objective_e_r(&kb, &hist).unwrap();
        prop_assert!((got - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        prop_assert!((omega0(&theta, mu1, mu2) - kb.regularizer()).abs() <= 1e-12 * kb.regularizer().max(1.0));
        let unweighted: f64 = rounds.iter().map(|(t, st)| st.loss(&(&l * s.column(*t)))).sum();
        prop_assert!((cumulative_loss(&theta, &hist) - unweighted).abs() <= 1e-9 * unweighted.abs().max(1.0));
    }

    #[test]
    fn regret_records_are_prefix_sums(
        (rounds, realized) in prop::collection::vec((0..3usize, stats(2)), 1..8)
            .prop_flat_map(|r| { let n = r.len(); (Just(r), prop::collection::vec(-5.0..5.0f64, n)) })
    ) {
        let mut hist = RoundHistory::new(2);
        for (t, st) in &rounds {
            hist.push(*t, st.clone(), 1.0).unwrap();
        }
        let l = DMatrix::identity(2, 2);
        let s = DMatrix::from_fn(2, 3, |i, j| 0.1 * (i + j) as f64);
        let comp = ThetaVector::from_parts(&l, &s, ThetaKind::Constrained);
        let recs = empirical_regret(&realized, &comp, &hist, &[], 0.5, 2.0).unwrap();
        prop_assert_eq!(recs.len(), rounds.len());
        let (mut cr, mut cc) = (0.0, 0.0);
        for (j, rec) in recs.iter().enumerate() {
            let want = rounds[j].1.loss(&comp.alpha(rounds[j].0));
            prop_assert!((rec.comparator - want).abs() <= 1e-12 * want.abs().max(1.0));
            cr += realized[j];
            cc += want;
            prop_assert!((rec.cum_realized - cr).abs() < 1e-9);
            prop_assert!((rec.cum_comparator - cc).abs() < 1e-9 * cc.abs().max(1.0));
            prop_assert!((rec.cum_regret - (cr - cc)).abs() < 1e-9 * cc.abs().max(1.0));
        }
    }

    #[test]
    fn recovery_reproduces_x(m in matrix(2, 2, 1.0), l_prev in matrix(3, 2, 2.0), shift in 0.1..1.0f64) {
        let x = m.transpose() * &m + DMatrix::identity(2, 2) * shift;
        let l = recover_l_from_x(&x, &l_prev).unwrap();
        prop_assert!((l.transpose() * &l - x).norm() < 1e-8);
    }

    #[test]
    fn projecting_a_feasible_point_is_identity(
        l in matrix(2, 2, 1.0),
        s in matrix(2, 2, 0.3),
        b in prop::collection::vec(0.2..0.6f64, 2),
    ) {
        let (lo, hi) = eig_range(&(l.transpose() * &l));
        prop_assume!(lo > 0.3 && hi < 3.0);
        let params = ProjectionParams { mu1: 1.0, mu2: 1.0, p: 0.25, q: 4.0, c_max: 2.0 };
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(b);
        let theta = ThetaVector::from_parts(&l, &s, ThetaKind::Unconstrained);
        let con = SafetyConstraint::new(a, &b + (&l * s.column(0)) + DVector::from_element(2, 0.1));
        let cons = [(0, &con)];
        prop_assert!(is_member(&theta, &cons, &params, 0.0).unwrap());
        let res = project_constrained(&theta, &cons, &params, &theta).unwrap();
        prop_assert!((res.theta.values - &theta.values).norm() < 1e-8);
    }
}

#[test]
fn observations_until_safe_examples() {
    assert_eq!(observations_until_safe(&[true, true], 99), 1);
    assert_eq!(observations_until_safe(&[false, false, true, true], 99), 3);
    assert_eq!(observations_until_safe(&[true, false], 99), 99);
    assert_eq!(observations_until_safe(&[], 99), 1);
}
