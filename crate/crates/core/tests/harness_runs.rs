use safe_lifelong::dynamics::Domain;
use safe_lifelong::harness::{
    bounds_csv, parse_config, policy_path_csv, regret_csv, rounds_csv, run_method, violations_csv,
    violations_until_safe, write_artifacts, ExperimentConfig, Method, RunArtifacts, ARTIFACT_FILES,
};
use safe_lifelong::projection::check_feasible;
use safe_lifelong::ThetaKind;

fn small(rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(Domain::SimpleMass, rounds);
    cfg.num_tasks = 3;
    cfg.horizon = 30;
    cfg.n_traj = 3;
    cfg.extra_traj = 0;
    cfg.seed = 11;
    cfg
}

fn csvs(a: &RunArtifacts) -> [String; 5] {
    [rounds_csv(a), regret_csv(a), violations_csv(a), policy_path_csv(a), bounds_csv(a)]
}

#[test]
fn one_round_snapshot_is_feasible() {
    let a = run_method(&small(1), Method::Safe).unwrap();
    let kb = a.knowledge.as_ref().unwrap();
    let cons: Vec<_> = a.feasibility.keys().map(|&t| (t, &a.tasks[t].constraint)).collect();
    assert_eq!(cons.len(), 1);
    let report = check_feasible(&kb.theta(ThetaKind::Constrained), &cons, kb.p, kb.q, 1e-6).unwrap();
    assert!(report.feasible, "{report:?}");
    assert!(violations_until_safe(&a).iter().all(|v| v.observations_until_safe == 1));
}

#[test]
fn tables_have_one_row_per_round() {
    let r = 12;
    for method in [Method::Safe, Method::Pg, Method::MtlUnconstrained] {
        let a = run_method(&small(r), method).unwrap();
        assert_eq!(a.rounds.len(), r, "{method:?}");
        assert_eq!(a.regret.len(), r, "{method:?}");
        assert_eq!(a.policy_path.len(), r, "{method:?}");
        assert_eq!(regret_csv(&a).lines().count(), r + 1);
        let mut cum = 0.0;
        for rec in &a.regret {
            cum += rec.realized - rec.comparator;
            assert!((rec.cum_regret - cum).abs() <= 1e-9 * cum.abs().max(1.0));
        }
    }
}

#[test]
fn safe_runs_never_violate() {
    let a = run_method(&small(15), Method::Safe).unwrap();
    assert_eq!(a.total_violations(), 0);
    assert!(a.rounds.iter().all(|r| r.max_violation <= 1e-6));
    assert!(violations_until_safe(&a).iter().all(|v| v.observations_until_safe == 1));
}

#[test]
fn loose_constraints_are_safe_for_every_method() {
    let mut cfg = small(10);
    cfg.constraint_margin = Some(1e4);
    cfg.c_max = 1e6;
    for method in [Method::Safe, Method::Pg, Method::MtlUnconstrained] {
        let a = run_method(&cfg, method).unwrap();
        let rows = violations_until_safe(&a);
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|v| v.observations_until_safe == 1), "{method:?}: {rows:?}");
    }
}

#[test]
fn runs_are_deterministic() {
    for method in [Method::Safe, Method::Pg, Method::MtlUnconstrained] {
        let a = run_method(&small(6), method).unwrap();
        let b = run_method(&small(6), method).unwrap();
        assert_eq!(csvs(&a), csvs(&b), "{method:?}");
    }
}

#[test]
fn seed_changes_the_run() {
    let a = run_method(&small(6), Method::Pg).unwrap();
    let mut cfg = small(6);
    cfg.seed += 1;
    let b = run_method(&cfg, Method::Pg).unwrap();
    assert_ne!(rounds_csv(&a), rounds_csv(&b));
}

#[test]
fn zero_extra_trajectories_is_the_base_protocol() {
    let base = small(8);
    let mut explicit = small(8);
    explicit.set("extra_traj", "0").unwrap();
    let a = run_method(&base, Method::Pg).unwrap();
    let b = run_method(&explicit, Method::Pg).unwrap();
    assert_eq!(csvs(&a), csvs(&b));
    let mut more = small(8);
    more.extra_traj = 5;
    let c = run_method(&more, Method::Pg).unwrap();
    assert_ne!(rounds_csv(&a), rounds_csv(&c));
}

#[test]
fn unprojected_methods_leave_the_tight_safe_set() {
    let mut cfg = small(40);
    cfg.constraint_margin = Some(0.0);
    for method in [Method::Pg, Method::MtlUnconstrained] {
        let a = run_method(&cfg, method).unwrap();
        assert!(a.total_violations() > 0, "{method:?}");
    }
    let safe = run_method(&cfg, Method::Safe).unwrap();
    assert_eq!(safe.total_violations(), 0);
}

#[test]
fn config_file_and_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.cfg");
    std::fs::write(&path, "# minimal\ndomain = simple_mass\nrounds = 4\nnum_tasks = 2\nhorizon = 20\n").unwrap();
    let cfg = parse_config(&path).unwrap();
    assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap().echo(), cfg.echo());

    let a = run_method(&cfg, Method::Safe).unwrap();
    let out = dir.path().join("out");
    write_artifacts(&a, &out).unwrap();
    for name in ARTIFACT_FILES {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert_eq!(std::fs::read_to_string(out.join("rounds.csv")).unwrap(), rounds_csv(&a));
    assert_eq!(std::fs::read_to_string(out.join("config.echo")).unwrap(), cfg.echo());
    let reparsed = parse_config(&out.join("config.echo")).unwrap();
    assert_eq!(reparsed.echo(), cfg.echo());

    std::fs::write(&path, "domain = simple_mass\nrounds = 4\nsigma = wide\n").unwrap();
    let err = parse_config(&path).unwrap_err().to_string();
    assert!(err.contains("sigma") && err.contains('3'), "{err}");
}
