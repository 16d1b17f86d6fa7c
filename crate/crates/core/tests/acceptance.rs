//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! The MDP ensemble (criterion 8) takes about an hour on one core and is
//! skipped unless the binary gets `--include-ignored`/`--ignored` or
//! `SSEP_MDP_SLOW=1` is set.

use rayon::prelude::*;
use ssep_mdp::lattice::*;
use ssep_mdp::observables::*;
use ssep_mdp::oracle::{compare_with_simulator, default_cases, OracleOptions};
use ssep_mdp::rng::replica_rng;
use ssep_mdp::stats::*;
use ssep_mdp::variational::*;
use std::time::Instant;

const LEVELS: [(usize, usize); 3] = [(32, 64), (64, 128), (128, 256)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: u32, name: &str, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = run();
    println!(
        "criterion {id} {} {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.pass
}

fn exact_identities() -> Outcome {
    let mut cases = Vec::new();
    for &rho in &[0.1, 0.5, 0.9] {
        for &t in &[10.0f64, 100.0, 1000.0] {
            cases.push((rho, t));
        }
    }
    let per_case = 1000u64.div_ceil(cases.len() as u64);
    let results: Vec<(bool, bool, f64)> = cases
        .par_iter()
        .enumerate()
        .flat_map_iter(|(c, &(rho, t))| (0..per_case).map(move |r| (c as u64, r, rho, t)))
        .map(|(c, r, rho, t)| {
            let big_n = t.sqrt().ceil() as usize;
            let n = 2;
            let scaling = ScalingParams::new(big_n, 0.75, 1.0, rho).unwrap();
            let l = half_width_for(t, RING_SAFETY_FACTOR).max(n * big_n + 2);
            let seed = 1000 + c;
            let mut rng = replica_rng(seed, r);
            let config = init_bernoulli_star(rho, l, &mut rng).unwrap();
            let p = SimParams {
                window: n * big_n,
                snapshots: true,
                record_grid: vec![t / 2.0, t],
                ..SimParams::new(rho, l, t, seed)
            };
            let rec = run_stirring_with(config, &p, &mut rng).unwrap();
            let (mut cons, mut pos, mut worst) = (true, true, 0.0f64);
            for k in 1..rec.len() {
                cons &= conservation_at(&rec, k).unwrap();
                pos &= check_position_current_identity(&rec, k).unwrap();
                worst = worst.max(summed_current_diagnostic(&rec, n, &scaling, k).unwrap().relative_residual());
            }
            (cons, pos, worst)
        })
        .collect();
    let total = results.len();
    let cons = results.iter().filter(|r| r.0).count();
    let pos = results.iter().filter(|r| r.1).count();
    let worst = results.iter().fold(0.0f64, |m, r| m.max(r.2));
    outcome(
        cons == total && pos == total && worst <= 1e-10,
        format!("{total} trajectories, conservation {cons}/{total}, position/current {pos}/{total}, max relative residual {worst:.1e} (<= 1e-10)"),
    )
}

fn oracle_equivalence() -> Outcome {
    let opts = OracleOptions::default();
    let cases = default_cases();
    let mut worst: f64 = 0.0;
    let mut fails = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let c = compare_with_simulator(case, 100_000, 500 + i as u64, &opts).unwrap();
        let m = c.tv_x.max(c.tv_j);
        worst = worst.max(m);
        if m >= 0.02 {
            fails.push(format!("2L={} k={} t={}: {m:.4}", 2 * case.half_width, case.particles, case.t));
        }
    }
    outcome(
        fails.is_empty(),
        format!("{} cases at 1e5 replicas, max TV {worst:.4} (< 0.02){}", cases.len(), if fails.is_empty() { String::new() } else { format!("; failing {fails:?}") }),
    )
}

fn clt_variances() -> Outcome {
    let (sx, sj) = sigma_constants(0.5).unwrap();
    let s = variance_sweep(0.5, &[100.0, 1000.0, 10_000.0], 10_000, 2024).unwrap();
    let last = s.horizons.last().unwrap();
    let vj = last.var_j_scaled.value;
    let vx = last.var_x_scaled.value;
    let fx = s.slope_x.unwrap().slope;
    let fj = s.slope_j.unwrap().slope;
    let in_band = |v: f64, target: f64, tol: f64| (v / target - 1.0).abs() <= tol;
    let slope_ok = |b: f64| (0.45..=0.55).contains(&b);
    // Companion distributional check at the largest horizon.
    let ks = last.ks_j.map_or(1.0, |k| k.statistic);
    outcome(
        in_band(vj, sj, 0.05) && in_band(vx, sx, 0.10) && slope_ok(fx) && slope_ok(fj) && ks < 0.05,
        format!(
            "Var J/sqrt t = {vj:.5} (target {sj:.5} +-5%), Var X/sqrt t = {vx:.5} (target {sx:.5} +-10%), slopes X {fx:.4} J {fj:.4} (in [0.45,0.55]), KS J/t^1/4 {ks:.4} (< 0.05)"
        ),
    )
}

fn f_infimum_convergence() -> Outcome {
    let target = f_infimum(1.0, 1.0).unwrap();
    let gaps: Vec<f64> = LEVELS
        .iter()
        .map(|&(nt, nu)| minimize_f(1.0, 1.0, &Grid::standard(1.0, nt, nu).unwrap()).unwrap().0.value - target)
        .collect();
    let decreasing = gaps.windows(2).all(|w| w[1].abs() < w[0].abs());
    let rel = gaps[2].abs() / target;
    outcome(
        decreasing && rel < 0.01,
        format!("gaps to {target:.6}: {:.2e} {:.2e} {:.2e}, finest relative {rel:.2e} (< 1%)", gaps[0], gaps[1], gaps[2]),
    )
}

fn g_rate_function() -> Outcome {
    let target = g_infimum(1.0, 1.0).unwrap();
    let (nt, nu) = LEVELS[2];
    let grid = Grid::standard(1.0, nt, nu).unwrap();
    let values: Vec<f64> = [0.2, 0.5, 0.8]
        .iter()
        .map(|&rho| minimize_g(1.0, 1.0, rho, &grid).unwrap().0.value)
        .collect();
    let rel = (values[1] - target).abs() / target;
    let spread = values.iter().fold(0.0f64, |m, v| m.max(v.abs())) / values.iter().fold(f64::MAX, |m, v| m.min(*v)) - 1.0;
    let root = (2.0 * std::f64::consts::PI).sqrt();
    let rj = rate_j(1.0, 0.5, 1.0).unwrap();
    let ri = rate_i(1.0, 0.5, 1.0).unwrap();
    let exact = |a: f64, b: f64| (a - b).abs() <= 4.0 * f64::EPSILON * b;
    outcome(
        rel < 0.01 && spread < 0.005 && exact(rj, root) && exact(ri, root / 4.0),
        format!(
            "min G = {:.6} vs {target:.6} ({rel:.2e} < 1%), spread over rho {spread:.1e} (< 0.5%), rate_J {rj:.12} rate_I {ri:.12}",
            values[1]
        ),
    )
}

fn minimizer_structure() -> Outcome {
    let (nt, nu) = LEVELS[2];
    let full = Grid::standard(1.0, nt, nu).unwrap();
    let half = Grid::new(0.5, full.u, nt / 2, nu).unwrap();
    let (rh, kh) = minimize_f(0.5, 0.5, &half).unwrap();
    let (kt, mt) = construct_reflected_minimizer(&kh, &full).unwrap();
    let scale = kt.k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mid = density_at(&kt, &mt, nt / 2).unwrap();
    let mid_max = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut antisym = 0.0f64;
    for s in 0..=nt / 2 {
        let a = density_at(&kt, &mt, nt / 2 - s).unwrap();
        let b = density_at(&kt, &mt, nt / 2 + s).unwrap();
        antisym = a.iter().zip(&b).fold(antisym, |m, (x, y)| m.max((x + y).abs()));
    }
    let g = eval_g(&kt, &mt, &full, 0.5).unwrap();
    let twice_f = 2.0 * rh.value;
    let (rg, _, _) = minimize_g(1.0, 1.0, 0.5, &full).unwrap();
    let bulk: Vec<f64> = LEVELS
        .iter()
        .map(|&(nt, nu)| minimize_f(1.0, 1.0, &Grid::standard(1.0, nt, nu).unwrap()).unwrap().0.el_residual)
        .collect();
    let el_ok = bulk.windows(2).all(|w| w[1] < 0.5 * w[0]);
    let c1 = (g - twice_f).abs() / twice_f;
    let c2 = (g - rg.value).abs() / rg.value;
    outcome(
        mid_max < 1e-6 * scale && antisym <= 1e-12 * scale && c1 < 0.01 && c2 < 0.01 && el_ok,
        format!(
            "mid-horizon density {:.1e} of scale, antisymmetry defect {antisym:.1e}, G(reflected) vs 2F {c1:.1e}, vs min G {c2:.1e}, bulk EL residuals {:.1e} {:.1e} {:.1e}",
            mid_max / scale,
            bulk[0],
            bulk[1],
            bulk[2]
        ),
    )
}

fn scaling_laws() -> Outcome {
    let (nt, nu) = LEVELS[1];
    let g1 = Grid::standard(1.0, nt, nu).unwrap();
    let g4 = Grid::standard(4.0, nt, nu).unwrap();
    let f = |a: f64, t: f64, g: &Grid| minimize_f(a, t, g).unwrap().0.value;
    let base = f(1.0, 1.0, &g1);
    let alpha_ratio = f(2.0, 1.0, &g1) / base;
    let t_ratio = f(1.0, 4.0, &g4) / base;
    let gbase = minimize_g(1.0, 1.0, 0.5, &g1).unwrap().0.value;
    let g_alpha = minimize_g(2.0, 1.0, 0.5, &g1).unwrap().0.value / gbase;
    let g_t = minimize_g(1.0, 4.0, 0.5, &g4).unwrap().0.value / gbase;
    let mut closed = 0.0f64;
    for &rho in &[0.1, 0.3, 0.5, 0.7, 0.9] {
        let (_, sj) = sigma_constants(rho).unwrap();
        for &alpha in &[0.25, 1.0, 3.0] {
            for &t in &[0.5, 1.0, 4.0] {
                let j = rate_j(alpha, rho, t).unwrap();
                let direct = alpha * alpha / (2.0 * sj * t.sqrt());
                let i = rate_i(alpha, rho, t).unwrap();
                let via = rate_j(rho * alpha, rho, t).unwrap();
                closed = closed.max((j - direct).abs() / direct).max((i - via).abs() / via);
            }
        }
    }
    let ok = (alpha_ratio / 4.0 - 1.0).abs() < 0.005
        && (g_alpha / 4.0 - 1.0).abs() < 0.005
        && (t_ratio / 0.5 - 1.0).abs() < 0.01
        && (g_t / 0.5 - 1.0).abs() < 0.01
        && closed <= 4.0 * f64::EPSILON;
    outcome(
        ok,
        format!("F: alpha ratio {alpha_ratio:.6}, T ratio {t_ratio:.6}; G: alpha ratio {g_alpha:.6}, T ratio {g_t:.6}; closed-form max relative defect {closed:.1e}"),
    )
}

fn mdp_regime() -> Outcome {
    let scaling = ScalingParams::new(50, 0.75, 1.0, 0.5).unwrap();
    let alphas: Vec<f64> = (0..=16).map(|k| k as f64 * 0.05).collect();
    let r = mdp_curves(&scaling, &alphas, 1_000_000, 8, &EnsembleOptions::default()).unwrap();
    let cur = r.current();
    let resolved = cur.resolved().count();
    let monotone = cur.is_nonincreasing();
    let convex = cur.rate_is_midpoint_convex();
    let gap = cur.gaussian_gap_in_widths();
    let at_half = cur
        .points
        .iter()
        .find(|p| (p.alpha - 0.5).abs() < 1e-12)
        .and_then(|p| p.scaled_log.map(|e| (e.value, p.gaussian_reference)))
        .map_or("unresolved".to_string(), |(v, g)| format!("scaled log {v:.4} vs Gaussian {g:.4}"));
    let tracks = r.tracks();
    let worst_track = r.tracking.iter().fold(f64::MIN, |m, p| m.max(p.excess));
    outcome(
        monotone && convex && gap <= 3.0 && tracks,
        format!(
            "{resolved} resolvable alphas, nonincreasing {monotone}, convex {convex}, max Gaussian gap {gap:.2} CI-widths (<= 3), alpha=0.5 {at_half}, tagged tracks current {tracks} (worst excess {worst_track:.4})"
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let slow = args.iter().any(|a| a == "--include-ignored" || a == "--ignored")
        || std::env::var("SSEP_MDP_SLOW").is_ok_and(|v| v == "1");
    let mut ok = true;
    ok &= report(1, "exact identities", exact_identities);
    ok &= report(2, "oracle equivalence", oracle_equivalence);
    ok &= report(3, "CLT variances", clt_variances);
    ok &= report(4, "F infimum", f_infimum_convergence);
    ok &= report(5, "rate function", g_rate_function);
    ok &= report(6, "minimizer structure", minimizer_structure);
    ok &= report(7, "scaling laws", scaling_laws);
    if slow {
        ok &= report(8, "MDP regime", mdp_regime);
    } else {
        println!("criterion 8 SKIPPED MDP regime: slow, rerun with --include-ignored or SSEP_MDP_SLOW=1");
    }
    if !ok {
        std::process::exit(1);
    }
}
