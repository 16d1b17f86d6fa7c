//! Command execution and artifact layout.

use crate::config::{from_core, CommandKind, ConfigError, ExperimentConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ssep_mdp::lattice::{half_width_for, init_bernoulli, init_bernoulli_star, run_stirring_with, SimParams};
use ssep_mdp::observables::ScalingParams;
use ssep_mdp::oracle::{compare_with_simulator, OracleCase, OracleOptions};
use ssep_mdp::rng::replica_rng;
use ssep_mdp::stats::{
    mdp_curves, mean_ci, variance_ci, variance_sweep_with, EnsembleOptions, InitialLaw, TailCurve,
};
use ssep_mdp::variational::{minimize_f_with, minimize_g_with, sigma_constants, Grid, SolverOptions};
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Largest total-variation distance an oracle case may show.
pub const ORACLE_TV_LIMIT: f64 = 0.02;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Why a run stopped.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Failed(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(e) => e.fmt(f),
            Self::Failed(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<ssep_mdp::Error> for RunError {
    fn from(e: ssep_mdp::Error) -> Self {
        match e {
            ssep_mdp::Error::Parameter { .. } => Self::Config(from_core(e)),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Failed(_) => 1,
        }
    }
}

/// Written last into every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: CommandKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub git_describe: String,
    pub started_utc: String,
    pub wall_time_seconds: f64,
    pub files: Vec<String>,
    pub passed: bool,
    pub summary: Value,
}

/// What a finished command hands back.
#[derive(Debug)]
pub struct Completed {
    pub dir: Option<PathBuf>,
    pub passed: bool,
    pub text: String,
}

impl Completed {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>, RunError> {
        self.files.push(name.to_string());
        Ok(csv::Writer::from_writer(BufWriter::new(File::create(self.dir.join(name))?)))
    }

    fn raw(&mut self, name: &str) -> Result<BufWriter<File>, RunError> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }
}

/// Creates `<out>/<command>-<UTC stamp>-s<seed>`, adding a counter when the
/// name is taken. Never reuses an existing directory.
fn fresh_dir(out: &Path, cmd: CommandKind, seed: u64, stamp: &str) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(out)?;
    let base = format!("{}-{stamp}-s{seed}", cmd.name());
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Runs a resolved configuration.
pub fn run(config: &ExperimentConfig) -> Result<Completed, RunError> {
    let cmd = config.command.expect("resolved config has a command");
    if cmd == CommandKind::Report {
        return report(config.input.as_ref().expect("resolved"));
    }
    if let Some(n) = config.threads {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = config.seed.expect("resolved");
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let dir = fresh_dir(
        config.out.as_ref().expect("resolved"),
        cmd,
        seed,
        &started.format("%Y%m%dT%H%M%S%.3fZ").to_string(),
    )?;
    let mut art = Artifacts { dir: dir.clone(), files: Vec::new() };
    serde_json::to_writer_pretty(art.raw(CONFIG_FILE)?, config).map_err(|e| RunError::Failed(e.to_string()))?;
    let (passed, summary, text) = match cmd {
        CommandKind::Simulate => simulate(config, &mut art)?,
        CommandKind::VarianceSweep => sweep(config, &mut art)?,
        CommandKind::MdpCurve => mdp(config, &mut art)?,
        CommandKind::Variational => variational(config, &mut art)?,
        CommandKind::OracleCheck => oracle(config, &mut art)?,
        CommandKind::Report => unreachable!(),
    };
    let manifest = Manifest {
        command: cmd,
        seed,
        config: config.clone(),
        git_describe: git_describe(),
        started_utc: started.to_rfc3339(),
        wall_time_seconds: clock.elapsed().as_secs_f64(),
        files: art.files.clone(),
        passed,
        summary,
    };
    serde_json::to_writer_pretty(File::create(dir.join(MANIFEST_FILE))?, &manifest)
        .map_err(|e| RunError::Failed(e.to_string()))?;
    let text = format!("{text}results in {}\n", dir.display());
    Ok(Completed { dir: Some(dir), passed, text })
}

type Outcome = (bool, Value, String);

fn ensemble_options(c: &ExperimentConfig) -> EnsembleOptions {
    let d = EnsembleOptions::default();
    EnsembleOptions {
        initial: c.initial.unwrap_or(d.initial),
        ring_safety_factor: c.ring_safety_factor.unwrap_or(d.ring_safety_factor),
        confidence: c.confidence.unwrap_or(d.confidence),
    }
}

#[derive(Serialize)]
struct EndpointRow {
    replica: u64,
    t: f64,
    x: i64,
    j: i64,
}

fn simulate(c: &ExperimentConfig, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let (rho, horizon, replicas, seed) = (c.rho.unwrap(), c.horizon.unwrap(), c.replicas.unwrap(), c.seed.unwrap());
    let safety = c.ring_safety_factor.unwrap();
    let l = c.half_width.unwrap_or_else(|| half_width_for(horizon, safety));
    let params = SimParams {
        record_grid: c.horizons.clone().unwrap_or_else(|| vec![horizon]),
        ring_safety_factor: safety,
        ..SimParams::new(rho, l, horizon, seed)
    };
    params.validate()?;
    let initial = c.initial.unwrap();
    let runs: Vec<(Vec<f64>, Vec<i64>, Vec<i64>)> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let config = match initial {
                InitialLaw::BernoulliStar => init_bernoulli_star(rho, l, &mut rng)?,
                InitialLaw::Bernoulli => init_bernoulli(rho, l, &mut rng)?,
            };
            let rec = run_stirring_with(config, &params, &mut rng)?;
            Ok((rec.times, rec.x, rec.j_origin))
        })
        .collect::<ssep_mdp::Result<_>>()?;
    let mut w = art.csv("endpoints.csv")?;
    for (r, (ts, xs, js)) in runs.iter().enumerate() {
        for k in 1..ts.len() {
            w.serialize(EndpointRow { replica: r as u64, t: ts[k], x: xs[k], j: js[k] })?;
        }
    }
    w.flush()?;
    let mut per_time = Vec::new();
    let mut text = format!("simulate: rho={rho}, 2L={}, {replicas} replicas\n", 2 * l);
    let times = &runs[0].0;
    for (k, &tk) in times.iter().enumerate().skip(1) {
        let xs: Vec<f64> = runs.iter().map(|r| r.1[k] as f64).collect();
        let js: Vec<f64> = runs.iter().map(|r| r.2[k] as f64).collect();
        let stats = if replicas >= 2 {
            Some((mean_ci(&xs, 0.95)?, mean_ci(&js, 0.95)?, variance_ci(&xs, 0.95)?, variance_ci(&js, 0.95)?))
        } else {
            None
        };
        if let Some((mx, mj, vx, vj)) = stats {
            let _ = writeln!(
                text,
                "  t={:<10} E[X]={:+.4} Var X={:.4}  E[J]={:+.4} Var J={:.4}",
                tk, mx.value, vx.value, mj.value, vj.value
            );
        }
        per_time.push(json!({ "t": tk, "stats": stats.map(|(mx, mj, vx, vj)| json!({
            "mean_x": mx, "mean_j": mj, "var_x": vx, "var_j": vj })) }));
    }
    Ok((true, json!({ "half_width": l, "records": per_time }), text))
}

#[derive(Serialize)]
struct SweepRow {
    t: f64,
    mean_x: f64,
    mean_x_lo: f64,
    mean_x_hi: f64,
    mean_j: f64,
    mean_j_lo: f64,
    mean_j_hi: f64,
    exact_mean_j: f64,
    var_x: f64,
    var_x_lo: f64,
    var_x_hi: f64,
    var_j: f64,
    var_j_lo: f64,
    var_j_hi: f64,
    var_x_scaled: f64,
    var_x_scaled_lo: f64,
    var_x_scaled_hi: f64,
    var_j_scaled: f64,
    var_j_scaled_lo: f64,
    var_j_scaled_hi: f64,
    ks_x: Option<f64>,
    ks_j: Option<f64>,
}

fn sweep(c: &ExperimentConfig, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let rho = c.rho.unwrap();
    let s = variance_sweep_with(rho, c.horizons.as_ref().unwrap(), c.replicas.unwrap(), c.seed.unwrap(), &ensemble_options(c))?;
    let (sx, sj) = sigma_constants(rho)?;
    let mut w = art.csv("variance.csv")?;
    let mut text = format!(
        "variance-sweep: rho={rho}, {} replicas, 2L={}; limits Var X/sqrt t -> {sx:.5}, Var J/sqrt t -> {sj:.5}\n",
        s.replica_count,
        2 * s.half_width
    );
    for h in &s.horizons {
        w.serialize(SweepRow {
            t: h.t,
            mean_x: h.mean_x.value,
            mean_x_lo: h.mean_x.lo,
            mean_x_hi: h.mean_x.hi,
            mean_j: h.mean_j.value,
            mean_j_lo: h.mean_j.lo,
            mean_j_hi: h.mean_j.hi,
            exact_mean_j: h.exact_mean_j,
            var_x: h.var_x.value,
            var_x_lo: h.var_x.lo,
            var_x_hi: h.var_x.hi,
            var_j: h.var_j.value,
            var_j_lo: h.var_j.lo,
            var_j_hi: h.var_j.hi,
            var_x_scaled: h.var_x_scaled.value,
            var_x_scaled_lo: h.var_x_scaled.lo,
            var_x_scaled_hi: h.var_x_scaled.hi,
            var_j_scaled: h.var_j_scaled.value,
            var_j_scaled_lo: h.var_j_scaled.lo,
            var_j_scaled_hi: h.var_j_scaled.hi,
            ks_x: h.ks_x.map(|k| k.statistic),
            ks_j: h.ks_j.map(|k| k.statistic),
        })?;
        let _ = writeln!(
            text,
            "  t={:<8} Var X/sqrt t={:.5} [{:.5},{:.5}]  Var J/sqrt t={:.5} [{:.5},{:.5}]",
            h.t, h.var_x_scaled.value, h.var_x_scaled.lo, h.var_x_scaled.hi, h.var_j_scaled.value, h.var_j_scaled.lo, h.var_j_scaled.hi
        );
    }
    w.flush()?;
    let (fx, fj) = (s.slope_x.unwrap(), s.slope_j.unwrap());
    let _ = writeln!(text, "  log-log slopes: X {:.4} +- {:.4}, J {:.4} +- {:.4} (target 0.5)", fx.slope, fx.slope_se, fj.slope, fj.slope_se);
    let summary = json!({ "sigma2_x": sx, "sigma2_j": sj, "slope_x": fx, "slope_j": fj, "half_width": s.half_width,
        "confidence": s.confidence, "initial": s.initial });
    Ok((true, summary, text))
}

#[derive(Serialize)]
struct CurveRow {
    observable: &'static str,
    alpha: f64,
    threshold: f64,
    expected_count: f64,
    probability: f64,
    probability_lo: f64,
    probability_hi: f64,
    resolvable: bool,
    scaled_log: Option<f64>,
    scaled_log_lo: Option<f64>,
    scaled_log_hi: Option<f64>,
    rate_reference: f64,
    gaussian_reference: f64,
}

fn write_curve(w: &mut csv::Writer<BufWriter<File>>, name: &'static str, curve: &TailCurve) -> Result<(), RunError> {
    for p in &curve.points {
        w.serialize(CurveRow {
            observable: name,
            alpha: p.alpha,
            threshold: p.threshold,
            expected_count: p.expected_count,
            probability: p.probability.value,
            probability_lo: p.probability.lo,
            probability_hi: p.probability.hi,
            resolvable: p.resolvable,
            scaled_log: p.scaled_log.map(|e| e.value),
            scaled_log_lo: p.scaled_log.map(|e| e.lo),
            scaled_log_hi: p.scaled_log.map(|e| e.hi),
            rate_reference: p.rate_reference,
            gaussian_reference: p.gaussian_reference,
        })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrackingRow {
    alpha: f64,
    tagged: f64,
    tagged_lo: f64,
    tagged_hi: f64,
    current_at_rho_alpha: f64,
    current_lo: f64,
    current_hi: f64,
    excess: f64,
}

fn mdp(c: &ExperimentConfig, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let scaling = ScalingParams::new(c.n.unwrap(), c.theta.unwrap(), c.t.unwrap(), c.rho.unwrap())?;
    let alphas = c.alphas.as_ref().unwrap();
    let r = mdp_curves(&scaling, alphas, c.replicas.unwrap(), c.seed.unwrap(), &ensemble_options(c))?;
    let mut w = art.csv("curves.csv")?;
    write_curve(&mut w, "current", r.current())?;
    write_curve(&mut w, "tagged", r.tagged())?;
    write_curve(&mut w, "current_at_rho_alpha", r.current_at_rho_alpha())?;
    w.flush()?;
    let mut w = art.csv("tracking.csv")?;
    for p in &r.tracking {
        w.serialize(TrackingRow {
            alpha: p.alpha,
            tagged: p.tagged.value,
            tagged_lo: p.tagged.lo,
            tagged_hi: p.tagged.hi,
            current_at_rho_alpha: p.current.value,
            current_lo: p.current.lo,
            current_hi: p.current.hi,
            excess: p.excess,
        })?;
    }
    w.flush()?;
    let cur = r.current();
    let flagged: Vec<f64> = cur.points.iter().filter(|p| !p.resolvable).map(|p| p.alpha).collect();
    let flagged_x: Vec<f64> = r.tagged().points.iter().filter(|p| !p.resolvable).map(|p| p.alpha).collect();
    let mut text = format!(
        "mdp-curve: N={}, theta={}, a_N={:.4}, horizon={}, rho={}, {} replicas\n  alpha   (N/a_N^2) ln P(J/a_N >= alpha)        gaussian ref   -rate_J\n",
        scaling.n,
        scaling.theta,
        scaling.a_n(),
        scaling.horizon(),
        scaling.rho,
        c.replicas.unwrap()
    );
    for p in &cur.points {
        match p.scaled_log {
            Some(e) => {
                let _ = writeln!(text, "  {:<6} {:+.5} [{:+.5},{:+.5}]   {:+.5}       {:+.5}", p.alpha, e.value, e.lo, e.hi, p.gaussian_reference, p.rate_reference);
            }
            None => {
                let _ = writeln!(text, "  {:<6} flagged: expected count {:.1} below threshold", p.alpha, p.expected_count);
            }
        }
    }
    let _ = writeln!(
        text,
        "  nonincreasing {}, rate convex {}, max Gaussian gap {:.2} CI-widths, tagged tracks current at rho*alpha {}",
        cur.is_nonincreasing(),
        cur.rate_is_midpoint_convex(),
        cur.gaussian_gap_in_widths(),
        r.tracks()
    );
    if !flagged.is_empty() || !flagged_x.is_empty() {
        let _ = writeln!(text, "  unresolvable alphas (flagged, not estimated): current {flagged:?}, tagged {flagged_x:?}");
    }
    let summary = json!({
        "a_n": scaling.a_n(),
        "horizon": scaling.horizon(),
        "half_width": r.summary.half_width,
        "current_nonincreasing": cur.is_nonincreasing(),
        "current_rate_convex": cur.rate_is_midpoint_convex(),
        "current_gaussian_gap_widths": cur.gaussian_gap_in_widths(),
        "tagged_nonincreasing": r.tagged().is_nonincreasing(),
        "tracks": r.tracks(),
        "flagged_current": flagged,
        "flagged_tagged": flagged_x,
    });
    Ok((true, summary, text))
}

#[derive(Serialize)]
struct RateRow {
    nt: usize,
    nu: usize,
    u: f64,
    f_value: f64,
    f_target: f64,
    f_el_bulk: f64,
    f_iterations: usize,
    g_value: f64,
    g_target: f64,
    g_iterations: usize,
}

fn variational(c: &ExperimentConfig, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let (alpha, t, rho) = (c.alpha.unwrap(), c.t.unwrap(), c.rho.unwrap());
    let opts = SolverOptions {
        tol: c.tol.unwrap(),
        max_iterations: c.max_iterations.unwrap(),
        u_width_factor: c.u_width_factor.unwrap(),
        ..SolverOptions::default()
    };
    let grids = c.grids.as_ref().unwrap();
    let mut rows = Vec::new();
    let mut text = format!("variational: alpha={alpha}, T={t}, rho={rho}\n");
    let mut finest = None;
    for g in grids {
        let grid = Grid::scaled(t, g.nt, g.nu, opts.u_width_factor)?;
        let (rf, kf) = minimize_f_with(alpha, t, &grid, &opts)?;
        let (rg, kg, mg) = minimize_g_with(alpha, t, rho, &grid, &opts)?;
        let _ = writeln!(
            text,
            "  grid {}x{}: min F = {:.6} (target {:.5}), min G = {:.6} (target {:.5})",
            g.nt, g.nu, rf.value, rf.closed_form, rg.value, rg.closed_form
        );
        rows.push(RateRow {
            nt: g.nt,
            nu: g.nu,
            u: grid.u,
            f_value: rf.value,
            f_target: rf.closed_form,
            f_el_bulk: rf.el_residual,
            f_iterations: rf.iterations,
            g_value: rg.value,
            g_target: rg.closed_form,
            g_iterations: rg.iterations,
        });
        finest = Some((rf, kf, rg, kg, mg));
    }
    let mut w = art.csv("rates.csv")?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let (rf, kf, rg, kg, mg) = finest.expect("at least one grid");
    kf.write_csv(art.raw("field_f.csv")?)?;
    kg.write_csv(art.raw("field_g.csv")?)?;
    mg.write_csv(art.raw("mu0_g.csv")?)?;
    let summary = json!({ "f": rf, "g": rg });
    Ok((true, summary, text))
}

#[derive(Serialize)]
struct OracleRow {
    ring: usize,
    particles: usize,
    t: f64,
    replicas: usize,
    tv_x: f64,
    tv_j: f64,
    clipped: f64,
    pass: bool,
}

fn oracle(c: &ExperimentConfig, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let opts = OracleOptions::default();
    let replicas = c.replicas.unwrap();
    let seed = c.seed.unwrap();
    let mut w = art.csv("oracle.csv")?;
    let mut text = format!("oracle-check: {replicas} replicas per case, TV limit {ORACLE_TV_LIMIT}\n");
    let (mut all, mut worst, mut count) = (true, 0.0f64, 0usize);
    for &l in c.half_widths.as_ref().unwrap() {
        for particles in 1..2 * l {
            for &t in c.times.as_ref().unwrap() {
                let case = OracleCase { half_width: l, particles, t };
                // Each case gets its own seed stream.
                let case_seed = ssep_mdp::rng::replica_seed(seed, count as u64);
                let r = compare_with_simulator(&case, replicas, case_seed, &opts)?;
                let pass = r.tv_x < ORACLE_TV_LIMIT && r.tv_j < ORACLE_TV_LIMIT;
                all &= pass;
                worst = worst.max(r.tv_x).max(r.tv_j);
                count += 1;
                w.serialize(OracleRow { ring: 2 * l, particles, t, replicas, tv_x: r.tv_x, tv_j: r.tv_j, clipped: r.clipped, pass })?;
                let _ = writeln!(
                    text,
                    "  2L={} k={} t={:<4} TV(X)={:.4} TV(J)={:.4} {}",
                    2 * l, particles, t, r.tv_x, r.tv_j, if pass { "ok" } else { "FAIL" }
                );
            }
        }
    }
    w.flush()?;
    let _ = writeln!(text, "  {count} cases, max TV {worst:.4}: {}", if all { "all within limit" } else { "LIMIT EXCEEDED" });
    Ok((all, json!({ "cases": count, "max_tv": worst, "limit": ORACLE_TV_LIMIT }), text))
}

/// Summarizes an earlier run directory without touching it.
fn report(input: &Path) -> Result<Completed, RunError> {
    let path = input.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        RunError::Config(ConfigError { key: "input".into(), message: format!("cannot read {}: {e}", path.display()) })
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| {
        RunError::Config(ConfigError { key: "input".into(), message: format!("{} is not a run manifest: {e}", path.display()) })
    })?;
    let mut out = format!(
        "run {}\n  command {}, seed {}, git {}, started {}, wall time {:.1}s, passed {}\n  files: {}\n",
        input.display(),
        m.command.name(),
        m.seed,
        m.git_describe,
        m.started_utc,
        m.wall_time_seconds,
        m.passed,
        m.files.join(", ")
    );
    let _ = writeln!(out, "  summary: {}", serde_json::to_string_pretty(&m.summary).unwrap_or_default().replace('\n', "\n  "));
    Ok(Completed { dir: None, passed: m.passed, text: out })
}
