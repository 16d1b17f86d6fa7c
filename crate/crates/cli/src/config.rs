//! Experiment configuration: JSON file plus flag overrides, validated in
//! full before any computation starts.

use serde::{Deserialize, Serialize};
use ssep_mdp::observables::ScalingParams;
use ssep_mdp::stats::InitialLaw;
use ssep_mdp::variational::{Grid, SolverOptions};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Simulate,
    VarianceSweep,
    MdpCurve,
    Variational,
    OracleCheck,
    Report,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::VarianceSweep => "variance-sweep",
            Self::MdpCurve => "mdp-curve",
            Self::Variational => "variational",
            Self::OracleCheck => "oracle-check",
            Self::Report => "report",
        }
    }

    /// Keys that must be present after defaults are applied.
    pub fn required(self) -> &'static [&'static str] {
        match self {
            Self::Simulate => &["rho", "horizon", "replicas"],
            Self::VarianceSweep => &["rho", "horizons", "replicas"],
            Self::MdpCurve => &["rho", "n", "alphas", "replicas"],
            Self::Variational => &["alpha", "t"],
            Self::OracleCheck => &[],
            Self::Report => &["input"],
        }
    }

    /// Command-specific keys accepted besides `command`, `seed`, `out` and
    /// `threads`.
    fn accepted(self) -> &'static [&'static str] {
        match self {
            Self::Simulate => &["rho", "initial", "half_width", "horizon", "horizons", "replicas", "ring_safety_factor"],
            Self::VarianceSweep => &["rho", "initial", "horizons", "replicas", "ring_safety_factor", "confidence"],
            Self::MdpCurve => &["rho", "initial", "n", "theta", "t", "alphas", "replicas", "ring_safety_factor", "confidence"],
            Self::Variational => &["alpha", "t", "rho", "grids", "u_width_factor", "tol", "max_iterations"],
            Self::OracleCheck => &["replicas", "half_widths", "times"],
            Self::Report => &["input"],
        }
    }
}

/// A grid size `nt x nu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub nt: usize,
    pub nu: usize,
}

impl std::str::FromStr for GridSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once('x')
            .ok_or_else(|| format!("expected NTxNU, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(Self {
            nt: parse(a)?,
            nu: parse(b)?,
        })
    }
}

/// Every configurable key. Files and flags both produce one of these; the
/// resolved form (defaults filled in) is echoed next to the results and can
/// be fed back as a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<CommandKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialLaw>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizons: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_safety_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<GridSize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_width_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_widths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

/// A configuration problem, tied to the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "config error: {}", self.message)
        } else {
            write!(f, "config error at `{}`: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        message: message.into(),
    }
}

/// Maps a library parameter error onto the config key that carries it.
pub fn from_core(e: ssep_mdp::Error) -> ConfigError {
    match e {
        ssep_mdp::Error::Parameter { name, reason } => {
            let key = match name {
                "L" => "half_width",
                "N" => "n",
                "T" => "t",
                other => other,
            };
            err(key, reason)
        }
        other => err("", other.to_string()),
    }
}

pub const DEFAULT_OUT: &str = "runs";
pub const DEFAULT_THETA: f64 = 0.75;
pub const DEFAULT_T: f64 = 1.0;
pub const DEFAULT_ORACLE_REPLICAS: usize = 100_000;
pub const DEFAULT_GRIDS: [GridSize; 3] = [
    GridSize { nt: 32, nu: 64 },
    GridSize { nt: 64, nu: 128 },
    GridSize { nt: 128, nu: 256 },
];
pub const THREADS_ENV: &str = "SSEP_MDP_THREADS";

/// Reads a JSON config, reporting the key path of the first problem.
pub fn read_config_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { String::new() } else { path };
        err(key, e.into_inner().to_string())
    })
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),*) => {
        $(if $top.$f.is_some() { $base.$f = $top.$f.clone(); })*
    };
}

impl ExperimentConfig {
    /// `self` with every key set in `flags` replaced.
    pub fn overridden_by(mut self, flags: &ExperimentConfig) -> Self {
        overlay!(self, flags; command, seed, out, threads, rho, initial, half_width, horizon,
            horizons, replicas, ring_safety_factor, confidence, n, theta, t, alphas, alpha, grids,
            u_width_factor, tol, max_iterations, half_widths, times, input);
        self
    }

    fn present_keys(&self) -> Vec<&'static str> {
        let v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object().expect("config is an object");
        KEYS.iter().copied().filter(|k| obj.contains_key(*k)).collect()
    }

    /// Applies defaults and checks every key; the result is fully resolved.
    pub fn resolve(self, env_threads: Option<&str>) -> Result<Self, ConfigError> {
        let Some(cmd) = self.command else {
            let lists: Vec<String> = ALL_COMMANDS
                .iter()
                .map(|c| {
                    let keys: Vec<&str> = std::iter::once("command").chain(c.required().iter().copied()).collect();
                    format!("{}: [{}]", c.name(), keys.join(", "))
                })
                .collect();
            return Err(err(
                "command",
                format!("missing required key `command`; required keys per command: {}", lists.join("; ")),
            ));
        };
        for k in self.present_keys() {
            if !GENERAL.contains(&k) && !cmd.accepted().contains(&k) {
                return Err(err(k, format!("not used by `{}`", cmd.name())));
            }
        }
        let mut c = self;
        c.seed.get_or_insert(0);
        c.out.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT));
        if c.threads.is_none() {
            if let Some(v) = env_threads {
                let n = v
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| err("threads", format!("{THREADS_ENV}=`{v}`: {e}")))?;
                c.threads = Some(n);
            }
        }
        if c.threads == Some(0) {
            return Err(err("threads", "must be at least 1"));
        }
        match cmd {
            CommandKind::Simulate | CommandKind::VarianceSweep | CommandKind::MdpCurve => {
                c.initial.get_or_insert(InitialLaw::BernoulliStar);
                c.ring_safety_factor.get_or_insert(ssep_mdp::lattice::RING_SAFETY_FACTOR);
                if cmd != CommandKind::Simulate {
                    c.confidence.get_or_insert(ssep_mdp::stats::CONFIDENCE);
                }
            }
            CommandKind::Variational => {
                let d = SolverOptions::default();
                c.rho.get_or_insert(0.5);
                c.grids.get_or_insert_with(|| DEFAULT_GRIDS.to_vec());
                c.u_width_factor.get_or_insert(d.u_width_factor);
                c.tol.get_or_insert(d.tol);
                c.max_iterations.get_or_insert(d.max_iterations);
            }
            CommandKind::OracleCheck => {
                c.replicas.get_or_insert(DEFAULT_ORACLE_REPLICAS);
                c.half_widths.get_or_insert_with(|| vec![2, 3]);
                c.times.get_or_insert_with(|| vec![0.5, 1.0, 2.0]);
            }
            CommandKind::Report => {}
        }
        if cmd == CommandKind::MdpCurve {
            c.theta.get_or_insert(DEFAULT_THETA);
            c.t.get_or_insert(DEFAULT_T);
        }
        let present = c.present_keys();
        let missing: Vec<&str> = cmd
            .required()
            .iter()
            .copied()
            .filter(|k| !present.contains(k))
            .collect();
        if !missing.is_empty() {
            return Err(err(
                missing[0],
                format!("missing required keys for `{}`: {}", cmd.name(), missing.join(", ")),
            ));
        }
        c.check(cmd)?;
        Ok(c)
    }

    fn check(&self, cmd: CommandKind) -> Result<(), ConfigError> {
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(err("rho", format!("must lie in the open interval (0,1), got {rho}")));
            }
        }
        if let Some(c) = self.confidence {
            if !(c > 0.0 && c < 1.0) {
                return Err(err("confidence", format!("must lie in (0,1), got {c}")));
            }
        }
        if let Some(f) = self.ring_safety_factor {
            if !(f >= 1.0 && f.is_finite()) {
                return Err(err("ring_safety_factor", format!("must be at least 1, got {f}")));
            }
        }
        if self.replicas == Some(0) {
            return Err(err("replicas", "must be positive"));
        }
        positive("horizon", self.horizon)?;
        positive("t", self.t)?;
        if let Some(hs) = &self.horizons {
            check_increasing("horizons", hs)?;
        }
        match cmd {
            CommandKind::Simulate => {
                let h = self.horizon.unwrap();
                if let Some(hs) = &self.horizons {
                    if hs.last().is_some_and(|&l| l > h) {
                        return Err(err("horizons", format!("record times must not exceed horizon {h}")));
                    }
                }
                if let Some(l) = self.half_width {
                    let p = ssep_mdp::lattice::SimParams {
                        ring_safety_factor: self.ring_safety_factor.unwrap(),
                        ..ssep_mdp::lattice::SimParams::new(self.rho.unwrap(), l, h, 0)
                    };
                    p.validate().map_err(from_core)?;
                }
            }
            CommandKind::VarianceSweep => {
                let hs = self.horizons.as_ref().unwrap();
                if hs.len() < 3 {
                    return Err(err("horizons", "need a geometric ladder of at least 3 horizons"));
                }
                let r = hs[1] / hs[0];
                if hs.windows(2).any(|w| ((w[1] / w[0]) / r - 1.0).abs() > 1e-9) {
                    return Err(err("horizons", "must form a geometric ladder"));
                }
                if self.replicas.unwrap() < 1000 {
                    return Err(err("replicas", "a variance sweep needs at least 1000 replicas"));
                }
            }
            CommandKind::MdpCurve => {
                ScalingParams::new(self.n.unwrap(), self.theta.unwrap(), self.t.unwrap(), self.rho.unwrap())
                    .map_err(from_core)?;
                let a = self.alphas.as_ref().unwrap();
                if a.is_empty() || a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(err("alphas", "need a nonempty list of nonnegative values"));
                }
                if a.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(err("alphas", "must be strictly increasing"));
                }
            }
            CommandKind::Variational => {
                let alpha = self.alpha.unwrap();
                if !alpha.is_finite() {
                    return Err(err("alpha", "must be finite"));
                }
                let t = self.t.unwrap();
                let grids = self.grids.as_ref().unwrap();
                if grids.is_empty() {
                    return Err(err("grids", "need at least one grid"));
                }
                for (i, g) in grids.iter().enumerate() {
                    Grid::scaled(t, g.nt, g.nu, self.u_width_factor.unwrap())
                        .map_err(|e| err(format!("grids[{i}]"), e.to_string()))?;
                    if g.nu % 2 != 0 {
                        return Err(err(format!("grids[{i}]"), "nu must be even so that u = 0 is a node"));
                    }
                }
                positive("tol", self.tol)?;
                positive("u_width_factor", self.u_width_factor)?;
                if self.max_iterations == Some(0) {
                    return Err(err("max_iterations", "must be positive"));
                }
            }
            CommandKind::OracleCheck => {
                let hw = self.half_widths.as_ref().unwrap();
                if hw.is_empty() || hw.iter().any(|&l| l < 1 || 2 * l > ssep_mdp::oracle::MAX_RING) {
                    return Err(err(
                        "half_widths",
                        format!("need ring sizes 2L between 2 and {}", ssep_mdp::oracle::MAX_RING),
                    ));
                }
                let ts = self.times.as_ref().unwrap();
                if ts.is_empty() || ts.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
                    return Err(err("times", "need positive finite times"));
                }
            }
            CommandKind::Report => {}
        }
        Ok(())
    }
}

const ALL_COMMANDS: [CommandKind; 6] = [
    CommandKind::Simulate,
    CommandKind::VarianceSweep,
    CommandKind::MdpCurve,
    CommandKind::Variational,
    CommandKind::OracleCheck,
    CommandKind::Report,
];

const GENERAL: [&str; 4] = ["command", "seed", "out", "threads"];

const KEYS: [&str; 24] = [
    "command", "seed", "out", "threads", "rho", "initial", "half_width", "horizon", "horizons",
    "replicas", "ring_safety_factor", "confidence", "n", "theta", "t", "alphas", "alpha", "grids",
    "u_width_factor", "tol", "max_iterations", "half_widths", "times", "input",
];

fn positive(key: &str, v: Option<f64>) -> Result<(), ConfigError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(err(key, format!("must be positive and finite, got {x}"))),
        _ => Ok(()),
    }
}

fn check_increasing(key: &str, v: &[f64]) -> Result<(), ConfigError> {
    if v.is_empty() || v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(err(key, "need positive finite values"));
    }
    if v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(err(key, "must be strictly increasing"));
    }
    Ok(())
}
