//! Ensemble statistics of `X(t)` and `J_{-1,0}(t)`.
//!
//! Replicas run in parallel, each from its own seeded stream, and are
//! collected in replica order, so every summary is a deterministic
//! function of `(seed, parameters)`.
//!
//! Tail probabilities are continuized: the integer sample `J` is paired
//! with an independent `U ~ Unif(-½, ½)` and `P(J + U >= c)` is estimated
//! by the mean of `clamp(J + ½ - c, 0, 1)`, which removes the lattice
//! staircase from the curves without changing their exponential order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_density, param, Error, Result};
use crate::lattice::{
    half_width_for, init_bernoulli, init_bernoulli_star, run_stirring_with, SimParams,
    RING_SAFETY_FACTOR,
};
use crate::observables::ScalingParams;
use crate::rng::{replica_rng, splitmix64, SimRng};
use crate::variational::{rate_i, rate_j, sigma_constants};

/// Default two-sided confidence level.
pub const CONFIDENCE: f64 = 0.95;
/// Smallest expected number of tail hits for an estimate to be reported.
pub const MIN_TAIL_COUNT: f64 = 10.0;
/// Asymptotic Kolmogorov quantile at level 1%.
pub const KS_C_1PCT: f64 = 1.627_61;

/// Initial law of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLaw {
    /// `ν_ρ` conditioned on a particle at the origin.
    BernoulliStar,
    /// Plain `ν_ρ`; the tagged particle is the first one at or right of 0.
    Bernoulli,
}

/// Ensemble settings beyond the replica count and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    pub initial: InitialLaw,
    pub ring_safety_factor: f64,
    pub confidence: f64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            initial: InitialLaw::BernoulliStar,
            ring_safety_factor: RING_SAFETY_FACTOR,
            confidence: CONFIDENCE,
        }
    }
}

/// `X` and `J_{-1,0}` of every replica at every horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub horizons: Vec<f64>,
    pub half_width: usize,
    /// `x[h][r]`.
    pub x: Vec<Vec<i64>>,
    /// `j[h][r]`.
    pub j: Vec<Vec<i64>>,
}

/// Runs `replicas` independent trajectories and records `(X, J)` at each
/// horizon. The ring is sized for the largest horizon.
pub fn simulate_endpoints(
    rho: f64,
    horizons: &[f64],
    replicas: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<Endpoints> {
    check_density(rho)?;
    if replicas == 0 {
        return Err(param("replicas", "must be positive"));
    }
    if horizons.is_empty() || horizons.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(param("horizons", "need at least one positive horizon"));
    }
    if horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(param("horizons", "must be strictly increasing"));
    }
    let t_max = *horizons.last().unwrap();
    let half_width = half_width_for(t_max, opts.ring_safety_factor.max(1.0));
    let params = SimParams {
        record_grid: horizons.to_vec(),
        ring_safety_factor: opts.ring_safety_factor,
        ..SimParams::new(rho, half_width, t_max, seed)
    };
    params.validate()?;
    let runs: Vec<(Vec<i64>, Vec<i64>)> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let c = match opts.initial {
                InitialLaw::BernoulliStar => init_bernoulli_star(rho, half_width, &mut rng)?,
                InitialLaw::Bernoulli => init_bernoulli(rho, half_width, &mut rng)?,
            };
            let rec = run_stirring_with(c, &params, &mut rng)?;
            Ok((rec.x[1..].to_vec(), rec.j_origin[1..].to_vec()))
        })
        .collect::<Result<_>>()?;
    let mut x = vec![Vec::with_capacity(replicas); horizons.len()];
    let mut j = vec![Vec::with_capacity(replicas); horizons.len()];
    for (xs, js) in runs {
        for h in 0..horizons.len() {
            x[h].push(xs[h]);
            j[h].push(js[h]);
        }
    }
    Ok(Endpoints {
        horizons: horizons.to_vec(),
        half_width,
        x,
        j,
    })
}

/// Point estimate with a two-sided interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl Estimate {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            value: self.value * s,
            lo: self.lo * s,
            hi: self.hi * s,
            level: self.level,
        }
    }
}

/// Two-sided standard normal quantile for `level`.
pub fn z_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(param("confidence", "must lie in (0,1)"));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + 0.5 * level))
}

fn moments(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in samples {
        let d = (v - mean) * (v - mean);
        m2 += d;
        m4 += d * d;
    }
    (mean, m2 / n, m4 / n)
}

/// Sample mean with a normal-theory interval.
pub fn mean_ci(samples: &[f64], level: f64) -> Result<Estimate> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let z = z_value(level)?;
    let n = samples.len() as f64;
    let (mean, m2, _) = moments(samples);
    let se = (m2 * n / (n - 1.0) / n).sqrt();
    Ok(Estimate {
        value: mean,
        lo: mean - z * se,
        hi: mean + z * se,
        level,
    })
}

/// Unbiased sample variance with the asymptotic interval
/// `s² ± z √((m₄ - m₂²)/n)`.
pub fn variance_ci(samples: &[f64], level: f64) -> Result<Estimate> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let z = z_value(level)?;
    let n = samples.len() as f64;
    let (_, m2, m4) = moments(samples);
    let s2 = m2 * n / (n - 1.0);
    let se = ((m4 - m2 * m2).max(0.0) / n).sqrt();
    Ok(Estimate {
        value: s2,
        lo: (s2 - z * se).max(0.0),
        hi: s2 + z * se,
        level,
    })
}

/// Wilson score interval for a proportion `p` estimated from `n` trials.
pub fn wilson(p: f64, n: usize, level: f64) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let z = z_value(level)?;
    let n = n as f64;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(Estimate {
        value: p,
        lo: (centre - half).max(0.0),
        hi: (centre + half).min(1.0),
        level,
    })
}

/// Weighted least-squares line through `(ln t, ln v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Fits `ln v = a + b ln t` with weights from the variance intervals.
pub fn log_log_fit(t: &[f64], v: &[Estimate]) -> Result<LogLogFit> {
    if t.len() != v.len() || t.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: t.len().min(v.len()),
        });
    }
    let z = z_value(v[0].level)?;
    let pts: Vec<(f64, f64, f64)> = t
        .iter()
        .zip(v)
        .map(|(&t, e)| {
            let se = (e.half_width() / z / e.value).max(1e-12);
            (t.ln(), e.value.ln(), 1.0 / (se * se))
        })
        .collect();
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(param("horizons", "need at least two distinct horizons"));
    }
    let slope = sxy / sxx;
    Ok(LogLogFit {
        slope,
        intercept: my - slope * mx,
        slope_se: (1.0 / sxx).sqrt(),
    })
}

/// Kolmogorov–Smirnov outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    /// Effective sample size `n` (or `nm/(n+m)` for two samples).
    pub n: f64,
    /// Pass threshold.
    pub threshold: f64,
    pub passes: bool,
}

/// KS distance between the empirical law of `samples` and `N(0, sigma2)`,
/// judged against the asymptotic 1% critical value.
pub fn normality_check(samples: &[f64], sigma2: f64) -> Result<KsResult> {
    normality_check_with(samples, sigma2, None)
}

/// As [`normality_check`] with an explicit pass threshold.
pub fn normality_check_with(
    samples: &[f64],
    sigma2: f64,
    threshold: Option<f64>,
) -> Result<KsResult> {
    if samples.len() < 1000 {
        return Err(Error::TooFewSamples {
            needed: 1000,
            got: samples.len(),
        });
    }
    if !(sigma2 > 0.0) {
        return Err(param("sigma2", "must be positive"));
    }
    let normal = Normal::new(0.0, sigma2.sqrt()).expect("positive variance");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in s.iter().enumerate() {
        let f = normal.cdf(v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let threshold = threshold.unwrap_or(KS_C_1PCT / n.sqrt());
    Ok(KsResult {
        statistic: d,
        n,
        threshold,
        passes: d <= threshold,
    })
}

/// Two-sample KS distance, judged at the asymptotic 1% level.
pub fn two_sample_ks(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let need = 1000;
    for s in [a, b] {
        if s.len() < need {
            return Err(Error::TooFewSamples {
                needed: need,
                got: s.len(),
            });
        }
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut k, mut d) = (0, 0, 0.0f64);
    while i < n && k < m {
        let v = a[i].min(b[k]);
        while i < n && a[i] <= v {
            i += 1;
        }
        while k < m && b[k] <= v {
            k += 1;
        }
        d = d.max((i as f64 / n as f64 - k as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let threshold = KS_C_1PCT / ne.sqrt();
    Ok(KsResult {
        statistic: d,
        n: ne,
        threshold,
        passes: d <= threshold,
    })
}

/// Integer samples plus one `Unif(-½, ½)` draw each, from a stream that
/// depends only on `seed` and the sample index.
pub fn continuized(samples: &[i64], seed: u64) -> Vec<f64> {
    use rand::Rng;
    let base = splitmix64(seed ^ 0x6a09_e667_f3bc_c909);
    samples
        .iter()
        .enumerate()
        .map(|(r, &v)| {
            let mut rng: SimRng = replica_rng(base, r as u64);
            v as f64 + rng.gen_range(-0.5..0.5)
        })
        .collect()
}

/// `P(Y_t = 0) = e^{-t} I₀(t)` for the rate-1 symmetric walk `Y`.
pub fn walk_return_probability(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    // Y_t = A - B with A, B independent Poisson(t/2).
    let h = t / 2.0;
    let ln_h = h.ln();
    let top = (h + 12.0 * h.sqrt() + 20.0) as u64;
    (0..=top)
        .map(|k| {
            let k = k as f64;
            (-t + 2.0 * k * ln_h - 2.0 * ln_gamma(k + 1.0)).exp()
        })
        .sum()
}

/// `E[J_{-1,0}(t)] = -(1-ρ) P(Y_t < 0)` on `ℤ` under the origin-conditioned
/// law: the excess particle at the origin spreads as a single walker.
/// Under plain `ν_ρ` the mean vanishes.
pub fn exact_mean_current(rho: f64, t: f64, initial: InitialLaw) -> Result<f64> {
    check_density(rho)?;
    Ok(match initial {
        InitialLaw::BernoulliStar => -(1.0 - rho) * 0.5 * (1.0 - walk_return_probability(t)),
        InitialLaw::Bernoulli => 0.0,
    })
}

/// Per-horizon moments of `X` and `J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonStats {
    pub t: f64,
    pub mean_x: Estimate,
    pub mean_j: Estimate,
    pub var_x: Estimate,
    pub var_j: Estimate,
    /// `Var[X]/√t`.
    pub var_x_scaled: Estimate,
    /// `Var[J]/√t`.
    pub var_j_scaled: Estimate,
    /// Exact `E[J]` under the ensemble's initial law.
    pub exact_mean_j: f64,
    /// KS of continuized `X/t^{1/4}` against `N(0, σ_X²)`.
    pub ks_x: Option<KsResult>,
    /// KS of continuized `J/t^{1/4}` against `N(0, σ_J²)`.
    pub ks_j: Option<KsResult>,
}

/// Which observable a tail curve describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Current,
    Tagged,
}

/// One α of an empirical tail curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub alpha: f64,
    /// Integer-scale threshold `α a_N`.
    pub threshold: f64,
    /// `n · p̂`.
    pub expected_count: f64,
    /// `p̂` with its Wilson interval.
    pub probability: Estimate,
    /// `(N/a_N²) ln p̂` with a delta-method interval; `None` when flagged.
    pub scaled_log: Option<Estimate>,
    pub resolvable: bool,
    /// `-inf_{u >= α} rate(u)` from the closed form.
    pub rate_reference: f64,
    /// `(N/a_N²) ln` of the finite-N Gaussian tail.
    pub gaussian_reference: f64,
}

/// Empirical `(N/a_N²) ln P(· / a_N >= α)` over an α grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCurve {
    pub observable: Observable,
    pub scaling: ScalingParams,
    pub points: Vec<TailPoint>,
}

impl TailCurve {
    /// Resolvable points in α order.
    pub fn resolved(&self) -> impl Iterator<Item = (&TailPoint, &Estimate)> {
        self.points
            .iter()
            .filter_map(|p| p.scaled_log.as_ref().map(|e| (p, e)))
    }

    /// Nonincreasing within intervals: each value is at most the previous
    /// one plus the sum of their half-widths.
    pub fn is_nonincreasing(&self) -> bool {
        let pts: Vec<&Estimate> = self.resolved().map(|(_, e)| e).collect();
        pts.windows(2)
            .all(|w| w[1].value <= w[0].value + w[0].half_width() + w[1].half_width())
    }

    /// Midpoint convexity of the empirical rate `-value` on every
    /// equally spaced resolvable triple, within the summed half-widths.
    pub fn rate_is_midpoint_convex(&self) -> bool {
        let pts: Vec<(&TailPoint, &Estimate)> = self.resolved().collect();
        pts.windows(3).all(|w| {
            let (a, b, c) = (w[0], w[1], w[2]);
            let spacing_ok =
                ((b.0.alpha - a.0.alpha) - (c.0.alpha - b.0.alpha)).abs() < 1e-9 * c.0.alpha.abs().max(1.0);
            if !spacing_ok {
                return true;
            }
            let slack = b.1.half_width() + 0.5 * (a.1.half_width() + c.1.half_width());
            -b.1.value <= 0.5 * (-a.1.value - c.1.value) + slack
        })
    }

    /// Largest `|value - gaussian_reference|` in units of the full interval
    /// width, over resolvable points.
    pub fn gaussian_gap_in_widths(&self) -> f64 {
        self.resolved()
            .map(|(p, e)| (e.value - p.gaussian_reference).abs() / (e.hi - e.lo).max(1e-300))
            .fold(0.0, f64::max)
    }
}

/// A full ensemble summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub replica_count: usize,
    pub seed: u64,
    pub rho: f64,
    pub half_width: usize,
    pub initial: InitialLaw,
    pub confidence: f64,
    pub horizons: Vec<HorizonStats>,
    pub slope_x: Option<LogLogFit>,
    pub slope_j: Option<LogLogFit>,
    pub curves: Vec<TailCurve>,
}

fn to_f64(v: &[i64]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Moments, scaled variances and normality of an existing ensemble.
pub fn summarize_horizons(
    rho: f64,
    ends: &Endpoints,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<Vec<HorizonStats>> {
    let (sx, sj) = sigma_constants(rho)?;
    let level = opts.confidence;
    ends.horizons
        .iter()
        .enumerate()
        .map(|(h, &t)| {
            let xs = to_f64(&ends.x[h]);
            let js = to_f64(&ends.j[h]);
            let var_x = variance_ci(&xs, level)?;
            let var_j = variance_ci(&js, level)?;
            let q = t.powf(0.25);
            let ks = |v: &[i64], s2: f64, salt: u64| -> Result<Option<KsResult>> {
                if v.len() < 1000 {
                    return Ok(None);
                }
                let c: Vec<f64> = continuized(v, seed ^ salt).iter().map(|x| x / q).collect();
                normality_check(&c, s2).map(Some)
            };
            Ok(HorizonStats {
                t,
                mean_x: mean_ci(&xs, level)?,
                mean_j: mean_ci(&js, level)?,
                var_x_scaled: var_x.scaled(1.0 / t.sqrt()),
                var_j_scaled: var_j.scaled(1.0 / t.sqrt()),
                var_x,
                var_j,
                exact_mean_j: exact_mean_current(rho, t, opts.initial)?,
                ks_x: ks(&ends.x[h], sx, h as u64 * 2 + 1)?,
                ks_j: ks(&ends.j[h], sj, h as u64 * 2 + 2)?,
            })
        })
        .collect()
}

/// Scaled variances of `X(t)` and `J(t)` over a geometric horizon ladder
/// with a log-log slope fit.
pub fn variance_sweep(
    rho: f64,
    horizons: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<EnsembleSummary> {
    variance_sweep_with(rho, horizons, replicas, seed, &EnsembleOptions::default())
}

pub fn variance_sweep_with(
    rho: f64,
    horizons: &[f64],
    replicas: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<EnsembleSummary> {
    if horizons.len() < 3 {
        return Err(param("horizons", "need a ladder of at least 3 horizons"));
    }
    let ratio = horizons[1] / horizons[0];
    if !(ratio > 1.0)
        || horizons
            .windows(2)
            .any(|w| ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-9)
    {
        return Err(param("horizons", "must form an increasing geometric ladder"));
    }
    if replicas < 1000 {
        return Err(param("replicas", format!("need at least 1000, got {replicas}")));
    }
    let ends = simulate_endpoints(rho, horizons, replicas, seed, opts)?;
    let stats = summarize_horizons(rho, &ends, seed, opts)?;
    let ts: Vec<f64> = stats.iter().map(|s| s.t).collect();
    let vx: Vec<Estimate> = stats.iter().map(|s| s.var_x).collect();
    let vj: Vec<Estimate> = stats.iter().map(|s| s.var_j).collect();
    Ok(EnsembleSummary {
        replica_count: replicas,
        seed,
        rho,
        half_width: ends.half_width,
        initial: opts.initial,
        confidence: opts.confidence,
        slope_x: Some(log_log_fit(&ts, &vx)?),
        slope_j: Some(log_log_fit(&ts, &vj)?),
        horizons: stats,
        curves: Vec::new(),
    })
}

/// `P(Z + U >= c)` for `Z ~ N(mean, sd²)` and an independent
/// `U ~ Unif(-½, ½)`: `∫_{c-½}^{c+½} Φc((y - mean)/sd) dy`, using the
/// antiderivative `φ(z) - zΦc(z)` of `-Φc`.
pub fn continuized_normal_tail(c: f64, mean: f64, sd: f64) -> f64 {
    let g = |y: f64| {
        let z = (y - mean) / sd;
        let tail = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
        (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() - z * tail
    };
    sd * (g(c - 0.5) - g(c + 0.5))
}

/// Empirical tail curve of integer samples `v` at thresholds `α a_N`.
///
/// The Gaussian reference is the continuized tail of `N(mean, σ²√t)`,
/// see [`continuized_normal_tail`].
#[allow(clippy::too_many_arguments)]
pub fn tail_curve(
    observable: Observable,
    samples: &[i64],
    scaling: &ScalingParams,
    alphas: &[f64],
    sigma2: f64,
    mean: f64,
    rate: impl Fn(f64) -> Result<f64>,
    level: f64,
) -> Result<TailCurve> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let a = scaling.a_n();
    let speed = scaling.speed();
    let n = samples.len();
    let z = z_value(level)?;
    let sd = (sigma2 * scaling.horizon().sqrt()).sqrt();
    let points = alphas
        .iter()
        .map(|&alpha| {
            let c = alpha * a;
            let (mut s1, mut s2) = (0.0, 0.0);
            for &v in samples {
                let w = (v as f64 + 0.5 - c).clamp(0.0, 1.0);
                s1 += w;
                s2 += w * w;
            }
            let p = s1 / n as f64;
            let expected_count = s1;
            let resolvable = expected_count >= MIN_TAIL_COUNT;
            let scaled_log = resolvable.then(|| {
                let var_w = (s2 / n as f64 - p * p).max(0.0);
                let se_log = (var_w / n as f64).sqrt() / p;
                let centre = p.ln();
                Estimate {
                    value: speed * centre,
                    lo: speed * (centre - z * se_log),
                    hi: speed * (centre + z * se_log),
                    level,
                }
            });
            Ok(TailPoint {
                alpha,
                threshold: c,
                expected_count,
                probability: wilson(p, n, level)?,
                scaled_log,
                resolvable,
                rate_reference: -rate(alpha.max(0.0))?,
                gaussian_reference: speed * continuized_normal_tail(c, mean, sd).ln(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TailCurve {
        observable,
        scaling: *scaling,
        points,
    })
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite()) {
        return Err(param("alphas", "need at least one finite value"));
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(param("alphas", "must be strictly increasing"));
    }
    Ok(())
}

fn mdp_ensemble(
    scaling: &ScalingParams,
    replicas: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<Endpoints> {
    scaling.validate()?;
    simulate_endpoints(scaling.rho, &[scaling.horizon()], replicas, seed, opts)
}

fn current_curve(
    scaling: &ScalingParams,
    samples: &[i64],
    alphas: &[f64],
    opts: &EnsembleOptions,
) -> Result<TailCurve> {
    let (_, sj) = sigma_constants(scaling.rho)?;
    let mean = exact_mean_current(scaling.rho, scaling.horizon(), opts.initial)?;
    tail_curve(
        Observable::Current,
        samples,
        scaling,
        alphas,
        sj,
        mean,
        |u| rate_j(u, scaling.rho, scaling.t),
        opts.confidence,
    )
}

fn tagged_curve(
    scaling: &ScalingParams,
    samples: &[i64],
    alphas: &[f64],
    opts: &EnsembleOptions,
) -> Result<TailCurve> {
    let (sx, _) = sigma_constants(scaling.rho)?;
    tail_curve(
        Observable::Tagged,
        samples,
        scaling,
        alphas,
        sx,
        0.0,
        |u| rate_i(u, scaling.rho, scaling.t),
        opts.confidence,
    )
}

fn curve_summary(
    scaling: &ScalingParams,
    replicas: usize,
    seed: u64,
    opts: &EnsembleOptions,
    ends: &Endpoints,
    curves: Vec<TailCurve>,
) -> EnsembleSummary {
    EnsembleSummary {
        replica_count: replicas,
        seed,
        rho: scaling.rho,
        half_width: ends.half_width,
        initial: opts.initial,
        confidence: opts.confidence,
        horizons: Vec::new(),
        slope_x: None,
        slope_j: None,
        curves,
    }
}

/// Empirical `(N/a_N²) ln P(J_{-1,0}(TN²)/a_N >= α)`.
pub fn mdp_curve(
    scaling: &ScalingParams,
    alphas: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<EnsembleSummary> {
    check_alphas(alphas)?;
    let opts = EnsembleOptions::default();
    let ends = mdp_ensemble(scaling, replicas, seed, &opts)?;
    let curve = current_curve(scaling, &ends.j[0], alphas, &opts)?;
    Ok(curve_summary(scaling, replicas, seed, &opts, &ends, vec![curve]))
}

/// Empirical `(N/a_N²) ln P(X(TN²)/a_N >= α)`.
pub fn tagged_mdp_curve(
    scaling: &ScalingParams,
    alphas: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<EnsembleSummary> {
    check_alphas(alphas)?;
    let opts = EnsembleOptions::default();
    let ends = mdp_ensemble(scaling, replicas, seed, &opts)?;
    let curve = tagged_curve(scaling, &ends.x[0], alphas, &opts)?;
    Ok(curve_summary(scaling, replicas, seed, &opts, &ends, vec![curve]))
}

/// Comparison of the tagged curve at `α` with the current curve at `ρα`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingPoint {
    pub alpha: f64,
    pub tagged: Estimate,
    pub current: Estimate,
    /// `|tagged - current|` minus the sum of half-widths; `<= 0` tracks.
    pub excess: f64,
}

/// Both curves from a single ensemble plus the `𝕀(α) = 𝕁(ρα)` tracking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpReport {
    pub summary: EnsembleSummary,
    pub tracking: Vec<TrackingPoint>,
}

impl MdpReport {
    pub fn current(&self) -> &TailCurve {
        &self.summary.curves[0]
    }

    pub fn tagged(&self) -> &TailCurve {
        &self.summary.curves[1]
    }

    /// The current curve evaluated at `ρα`.
    pub fn current_at_rho_alpha(&self) -> &TailCurve {
        &self.summary.curves[2]
    }

    pub fn tracks(&self) -> bool {
        self.tracking.iter().all(|p| p.excess <= 0.0)
    }
}

/// Current curve, tagged curve and the current curve at `ρα`, all from
/// the same replicas.
pub fn mdp_curves(
    scaling: &ScalingParams,
    alphas: &[f64],
    replicas: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<MdpReport> {
    check_alphas(alphas)?;
    let ends = mdp_ensemble(scaling, replicas, seed, opts)?;
    let current = current_curve(scaling, &ends.j[0], alphas, opts)?;
    let tagged = tagged_curve(scaling, &ends.x[0], alphas, opts)?;
    let scaled: Vec<f64> = alphas.iter().map(|a| scaling.rho * a).collect();
    let at_rho = current_curve(scaling, &ends.j[0], &scaled, opts)?;
    let tracking = tagged
        .points
        .iter()
        .zip(&at_rho.points)
        .filter_map(|(x, j)| {
            let (tx, tj) = (x.scaled_log?, j.scaled_log?);
            Some(TrackingPoint {
                alpha: x.alpha,
                tagged: tx,
                current: tj,
                excess: (tx.value - tj.value).abs() - tx.half_width() - tj.half_width(),
            })
        })
        .collect();
    Ok(MdpReport {
        summary: curve_summary(
            scaling,
            replicas,
            seed,
            opts,
            &ends,
            vec![current, tagged, at_rho],
        ),
        tracking,
    })
}
