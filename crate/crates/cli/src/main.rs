use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use safe_lifelong::harness::{self, parse_config, ExperimentConfig, Method};
use safe_lifelong::lifelong::{ThetaKind, ThetaVector};
use safe_lifelong::projection::{check_feasible, project_constrained, ProjectionParams};
use safe_lifelong::regret::check_sublinear;
use safe_lifelong::{Error, Result, SafetyConstraint};

#[derive(Parser)]
#[command(name = "safe-lifelong", version, about = "Safe lifelong policy-gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method and write its CSV artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "safe")]
        method: String,
    },
    /// Run the safe learner once per value of one config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "safe")]
        method: String,
    },
    /// Check sublinear regret growth across finished runs.
    RegretCheck {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        tolerance: f64,
    },
    /// Project a small infeasible point and print the feasibility report.
    ProjectDemo,
}

fn run_one(config: &ExperimentConfig, method: Method, out: &Path) -> Result<()> {
    let art = harness::run_method(config, method)?;
    harness::write_artifacts(&art, out)?;
    let safe = art.feasibility.len();
    println!(
        "{}: {} rounds, final cumulative regret {:.6e}, tail cost {:.6e}, {} violations over {} tasks -> {}",
        method.name(),
        art.rounds.len(),
        art.final_regret(),
        art.tail_cost(20),
        art.total_violations(),
        safe,
        out.display()
    );
    Ok(())
}

fn run(config: &Path, out: &Path, seed: Option<u64>, method: &str) -> Result<()> {
    let mut cfg = parse_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let method: Method = method.parse()?;
    if cfg.baselines && method == Method::Safe {
        for m in [Method::Safe, Method::Pg, Method::MtlUnconstrained] {
            run_one(&cfg, m, &out.join(m.name()))?;
        }
        Ok(())
    } else {
        run_one(&cfg, method, out)
    }
}

fn sweep(config: &Path, out: &Path, param: &str, values: &str, method: &str) -> Result<()> {
    let base = parse_config(config)?;
    let method: Method = method.parse()?;
    for value in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let mut cfg = base.clone();
        cfg.set(param, value)?;
        cfg.validate()?;
        run_one(&cfg, method, &out.join(format!("{param}={value}")))?;
    }
    Ok(())
}

/// Final cumulative regret and round count of a run directory.
fn read_run(dir: &Path) -> Result<(usize, f64)> {
    let path = dir.join("regret.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let last = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .last()
        .ok_or_else(|| Error::Config(format!("{} has no rows", path.display())))?;
    let cols: Vec<&str> = last.split(',').collect();
    let bad = || Error::Config(format!("malformed row in {}", path.display()));
    if cols.len() != 4 {
        return Err(bad());
    }
    let round = cols[0].parse().map_err(|_| bad())?;
    let regret = cols[3].parse().map_err(|_| bad())?;
    Ok((round, regret))
}

fn regret_check(runs: &[PathBuf], tolerance: f64) -> Result<bool> {
    let mut curve: Vec<(usize, f64)> = runs.iter().map(|d| read_run(d)).collect::<Result<_>>()?;
    curve.sort_by_key(|p| p.0);
    let verdict = check_sublinear(&curve, tolerance)?;
    for (i, (r, g)) in curve.iter().enumerate() {
        println!(
            "R={r} regret={g:.6e} regret/sqrt(R)={:.6e} regret/R={:.6e}",
            verdict.sqrt_ratios[i], verdict.linear_ratios[i]
        );
    }
    if !verdict.clamped.is_empty() {
        println!("negative regret clamped at R in {:?}", verdict.clamped);
    }
    println!(
        "exponent {:.4} -> {}",
        verdict.exponent,
        if verdict.pass { "PASS" } else { "FAIL" }
    );
    Ok(verdict.pass)
}

fn project_demo() -> Result<()> {
    // Two tasks in two dimensions, both requiring alpha >= 1 componentwise.
    let a = -DMatrix::<f64>::identity(2, 2);
    let b = DVector::from_element(2, -1.0);
    let con = SafetyConstraint::new(a, b);
    let constraints = [(0, &con), (1, &con)];
    let params = ProjectionParams {
        mu1: 1.0,
        mu2: 1.0,
        p: 0.5,
        q: 4.0,
        c_max: 2.0,
    };
    let l = DMatrix::<f64>::identity(2, 2);
    let s = DMatrix::from_row_slice(2, 2, &[0.2, 1.5, -0.3, 0.4]);
    let theta = ThetaVector::from_parts(&l, &s, ThetaKind::Unconstrained);
    let before = check_feasible(&theta, &constraints, params.p, params.q, 1e-6)?;
    println!("before: feasible={} max violation {:.3e}", before.feasible, before.max_violation());
    let anchor = theta.clone().with_kind(ThetaKind::Constrained);
    let res = project_constrained(&theta, &constraints, &params, &anchor)?;
    let r = &res.report;
    println!("strategy: {:?}", res.strategy);
    println!("objective: {:.6e}", res.objective);
    for &(t, v) in &r.task_violation {
        println!("task {t}: max(A alpha - b) = {v:.3e}");
    }
    println!(
        "lambda(L^T L) in [{:.6}, {:.6}], box [{}, {}]",
        r.lambda_min, r.lambda_max, params.p, params.q
    );
    println!("feasible: {}", r.feasible);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            config,
            out,
            seed,
            method,
        } => run(config, out, *seed, method).map(|_| true),
        Command::Sweep {
            config,
            out,
            param,
            values,
            method,
        } => sweep(config, out, param, values, method).map(|_| true),
        Command::RegretCheck { runs, tolerance } => regret_check(runs, *tolerance),
        Command::ProjectDemo => project_demo().map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
