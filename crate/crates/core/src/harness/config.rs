//! Experiment configuration: a flat `key = value` text format with `#`
//! comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dynamics::{Domain, TaskFamilyConfig};
use crate::error::{Error, Result};
use crate::lifelong::UpdateMode;
use crate::projection::ProjectionParams;

/// Round weights in the lifelong objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaMode {
    /// `1 / sqrt(R)` for every round.
    Theorem,
    Fixed(f64),
}

/// Which policy generates the rollouts used for learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataPolicy {
    /// The learner's current policy.
    OnPolicy,
    /// The task's fixed reference regulator.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Safe,
    Pg,
    MtlUnconstrained,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Safe => "safe",
            Method::Pg => "pg",
            Method::MtlUnconstrained => "mtl-unconstrained",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safe" => Ok(Method::Safe),
            "pg" => Ok(Method::Pg),
            "mtl-unconstrained" => Ok(Method::MtlUnconstrained),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub domain: Domain,
    pub rounds: usize,
    pub num_tasks: usize,
    /// Latent dimension; `None` means the policy dimension.
    pub k: Option<usize>,
    pub mu1: f64,
    pub mu2: f64,
    pub p: f64,
    pub q: f64,
    pub zeta: f64,
    pub c_max: f64,
    pub sigma: f64,
    pub n_traj: usize,
    pub horizon: usize,
    pub dt: f64,
    pub inner_iters: usize,
    pub mode: UpdateMode,
    pub eta: EtaMode,
    /// Also run both baselines when running the safe learner from the CLI.
    pub baselines: bool,
    /// Additional trajectories per round for the vanilla policy-gradient baseline.
    pub extra_traj: usize,
    pub seed: u64,
    pub u_max: Option<f64>,
    pub phi_max: Option<f64>,
    pub cost_weighted: bool,
    pub cost_temperature: f64,
    pub constraint_margin: Option<f64>,
    pub data_policy: DataPolicy,
}

/// Keys in echo order.
pub const KEYS: [&str; 26] = [
    "domain",
    "rounds",
    "num_tasks",
    "k",
    "mu1",
    "mu2",
    "p",
    "q",
    "zeta",
    "c_max",
    "sigma",
    "n_traj",
    "horizon",
    "dt",
    "inner_iters",
    "mode",
    "eta",
    "baselines",
    "extra_traj",
    "seed",
    "u_max",
    "phi_max",
    "cost_weighted",
    "cost_temperature",
    "constraint_margin",
    "data_policy",
];

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for key `{key}`"))
}

fn mode_name(mode: UpdateMode) -> &'static str {
    match mode {
        UpdateMode::ClosedForm => "closed_form",
        UpdateMode::EReinforce => "ereinforce",
        UpdateMode::ENac => "enac",
    }
}

impl ExperimentConfig {
    /// Defaults for every key except the two required ones.
    pub fn new(domain: Domain, rounds: usize) -> Self {
        Self {
            domain,
            rounds,
            num_tasks: 10,
            k: None,
            mu1: 1e-3,
            mu2: 1e-3,
            p: 0.1,
            q: 10.0,
            zeta: 1.0,
            c_max: 1.0,
            sigma: 0.1,
            n_traj: 10,
            horizon: 150,
            dt: 0.01,
            inner_iters: 10,
            mode: UpdateMode::ClosedForm,
            eta: EtaMode::Theorem,
            baselines: false,
            extra_traj: 50,
            seed: 0,
            u_max: None,
            phi_max: None,
            cost_weighted: false,
            cost_temperature: 1.0,
            constraint_margin: None,
            data_policy: DataPolicy::OnPolicy,
        }
    }

    /// Policy parameter dimension of the domain with affine features.
    pub fn policy_dim(&self) -> usize {
        (self.domain.state_dim() + 1) * self.domain.action_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.k.unwrap_or_else(|| self.policy_dim())
    }

    pub fn action_clip(&self) -> f64 {
        self.u_max.unwrap_or_else(|| self.domain.default_u_max())
    }

    pub fn feature_bound(&self) -> f64 {
        self.phi_max.unwrap_or_else(|| self.domain.default_phi_max())
    }

    pub fn margin(&self) -> f64 {
        self.constraint_margin
            .unwrap_or_else(|| self.c_max / (2.0 * (self.policy_dim() as f64).sqrt()))
    }

    pub fn eta_value(&self) -> f64 {
        match self.eta {
            EtaMode::Theorem => 1.0 / (self.rounds as f64).sqrt(),
            EtaMode::Fixed(v) => v,
        }
    }

    pub fn family(&self) -> TaskFamilyConfig {
        TaskFamilyConfig {
            sigma: self.sigma,
            horizon: self.horizon,
            dt: self.dt,
            u_max: Some(self.action_clip()),
            c_max: self.c_max,
            constraint_margin: Some(self.margin()),
        }
    }

    pub fn projection_params(&self) -> ProjectionParams {
        ProjectionParams {
            mu1: self.mu1,
            mu2: self.mu2,
            p: self.p,
            q: self.q,
            c_max: self.c_max,
        }
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key, value).map_err(Error::Config)
    }

    fn set_raw(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let auto = value == "auto";
        match key {
            "domain" => self.domain = value.parse().map_err(|e: Error| e.to_string())?,
            "rounds" => self.rounds = num(key, value)?,
            "num_tasks" => self.num_tasks = num(key, value)?,
            "k" => self.k = if auto { None } else { Some(num(key, value)?) },
            "mu1" => self.mu1 = num(key, value)?,
            "mu2" => self.mu2 = num(key, value)?,
            "p" => self.p = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "zeta" => self.zeta = num(key, value)?,
            "c_max" => self.c_max = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "n_traj" => self.n_traj = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "inner_iters" => self.inner_iters = num(key, value)?,
            "mode" => {
                self.mode = match value {
                    "closed_form" => UpdateMode::ClosedForm,
                    "ereinforce" => UpdateMode::EReinforce,
                    "enac" => UpdateMode::ENac,
                    _ => return Err(format!("invalid value `{value}` for key `mode`")),
                }
            }
            "eta" => {
                self.eta = if value == "theorem" {
                    EtaMode::Theorem
                } else {
                    EtaMode::Fixed(num(key, value)?)
                }
            }
            "baselines" => self.baselines = num(key, value)?,
            "extra_traj" => self.extra_traj = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "u_max" => self.u_max = if auto { None } else { Some(num(key, value)?) },
            "phi_max" => self.phi_max = if auto { None } else { Some(num(key, value)?) },
            "cost_weighted" => self.cost_weighted = num(key, value)?,
            "cost_temperature" => self.cost_temperature = num(key, value)?,
            "constraint_margin" => {
                self.constraint_margin = if auto { None } else { Some(num(key, value)?) }
            }
            "data_policy" => {
                self.data_policy = match value {
                    "on_policy" => DataPolicy::OnPolicy,
                    "reference" => DataPolicy::Reference,
                    _ => return Err(format!("invalid value `{value}` for key `data_policy`")),
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rounds < 1 {
            return fail("rounds must be at least 1".into());
        }
        if self.num_tasks < 1 {
            return fail("num_tasks must be at least 1".into());
        }
        if self.n_traj < 1 {
            return fail("n_traj must be at least 1".into());
        }
        if self.horizon < 1 || self.inner_iters < 1 {
            return fail("horizon and inner_iters must be at least 1".into());
        }
        let d = self.policy_dim();
        let k = self.latent_dim();
        if k < 1 || k > d {
            return fail(format!("k must lie in [1, {d}], got {k}"));
        }
        let positive = [
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("p", self.p),
            ("zeta", self.zeta),
            ("c_max", self.c_max),
            ("sigma", self.sigma),
            ("dt", self.dt),
            ("cost_temperature", self.cost_temperature),
            ("u_max", self.action_clip()),
            ("phi_max", self.feature_bound()),
            ("eta", self.eta_value()),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.q >= self.p) || !self.q.is_finite() {
            return fail(format!("need p <= q, got p={}, q={}", self.p, self.q));
        }
        let z2 = self.zeta * self.zeta;
        if z2 < self.p || z2 > self.q {
            return fail(format!("zeta^2 = {z2} lies outside [p, q]"));
        }
        if !(self.margin() >= 0.0) {
            return fail("constraint_margin must be nonnegative".into());
        }
        Ok(())
    }

    /// Parse configuration text; `domain` and `rounds` are required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new(Domain::SimpleMass, 0);
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|s| s == key) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.set_raw(key, value)
                .map_err(|message| Error::Parse { line, message })?;
            seen.push(key.to_string());
        }
        for required in ["domain", "rounds"] {
            if !seen.iter().any(|s| s == required) {
                return Err(Error::Config(format!("missing required key `{required}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolved configuration, one `key = value` line per key.
    pub fn echo(&self) -> String {
        let eta = match self.eta {
            EtaMode::Theorem => "theorem".to_string(),
            EtaMode::Fixed(v) => v.to_string(),
        };
        let data = match self.data_policy {
            DataPolicy::OnPolicy => "on_policy",
            DataPolicy::Reference => "reference",
        };
        let values: [String; 26] = [
            self.domain.name().into(),
            self.rounds.to_string(),
            self.num_tasks.to_string(),
            self.latent_dim().to_string(),
            self.mu1.to_string(),
            self.mu2.to_string(),
            self.p.to_string(),
            self.q.to_string(),
            self.zeta.to_string(),
            self.c_max.to_string(),
            self.sigma.to_string(),
            self.n_traj.to_string(),
            self.horizon.to_string(),
            self.dt.to_string(),
            self.inner_iters.to_string(),
            mode_name(self.mode).into(),
            eta,
            self.baselines.to_string(),
            self.extra_traj.to_string(),
            self.seed.to_string(),
            self.action_clip().to_string(),
            self.feature_bound().to_string(),
            self.cost_weighted.to_string(),
            self.cost_temperature.to_string(),
            self.margin().to_string(),
            data.into(),
        ];
        let mut out = String::new();
        for (key, value) in KEYS.iter().zip(values.iter()) {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_echoes_defaults() {
        let cfg = ExperimentConfig::parse("domain = simple_mass\nrounds = 5\n").unwrap();
        let echo = cfg.echo();
        assert!(echo.contains("k = 3\n"));
        assert!(echo.contains("eta = theorem\n"));
        assert!(echo.contains("u_max = 10\n"));
        assert_eq!(echo.lines().count(), 26);
    }

    #[test]
    fn echo_round_trips() {
        let text = "domain = cart_pole # comment\nrounds = 7\nmu1 = 0.25\neta = 0.5\nk = 2\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(again.echo(), cfg.echo());
    }

    #[test]
    fn errors_name_line_and_key() {
        let err = ExperimentConfig::parse("domain = simple_mass\nrounds = 5\nsigma = abc\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("sigma"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(
            ExperimentConfig::parse("domain = simple_mass\nrounds = 5\nbogus = 1\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("domain = simple_mass\nrounds\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(ExperimentConfig::parse("rounds = 5\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invariants_are_checked() {
        assert!(ExperimentConfig::parse("domain = simple_mass\nrounds = 0\n").is_err());
        assert!(ExperimentConfig::parse("domain = simple_mass\nrounds = 3\nzeta = 5\n").is_err());
        assert!(ExperimentConfig::parse("domain = simple_mass\nrounds = 3\nn_traj = 0\n").is_err());
        assert!(ExperimentConfig::parse("domain = rocket\nrounds = 3\n").is_err());
    }
}
