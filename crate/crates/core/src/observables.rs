//! Empirical functionals of simulated trajectories.
//!
//! Everything here is a pure function of a [`TrajectoryRecord`] or of
//! snapshots. The conservation law `η_T(x) - η_0(x) = J_{x-1,x} - J_{x,x+1}`
//! and the position/current identities are exact integer statements, so
//! any `false` returned by the checks below points at a simulator defect.

use serde::{Deserialize, Serialize};

use crate::error::{check_density, param, Error, Result};
use crate::lattice::{Snapshot, TrajectoryRecord};

/// Moderate-deviation scaling regime: `a_N = N^θ` with `θ ∈ (1/2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    /// Scale parameter `N >= 1`.
    pub n: usize,
    /// Exponent of `a_N`.
    pub theta: f64,
    /// Macroscopic horizon `T > 0`.
    pub t: f64,
    pub rho: f64,
}

impl ScalingParams {
    pub fn new(n: usize, theta: f64, t: f64, rho: f64) -> Result<Self> {
        let s = Self { n, theta, t, rho };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(param("N", "must be at least 1"));
        }
        if !(self.theta > 0.5 && self.theta < 1.0) {
            return Err(param(
                "theta",
                format!("a_N = N^theta needs theta in (1/2, 1), got {}", self.theta),
            ));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(param("T", format!("must be positive, got {}", self.t)));
        }
        check_density(self.rho)
    }

    /// `a_N = N^θ`.
    pub fn a_n(&self) -> f64 {
        (self.n as f64).powf(self.theta)
    }

    /// Microscopic horizon `T N²`.
    pub fn horizon(&self) -> f64 {
        self.t * (self.n as f64).powi(2)
    }

    /// Speed factor `N / a_N²` multiplying log-probabilities.
    pub fn speed(&self) -> f64 {
        self.n as f64 / self.a_n().powi(2)
    }
}

/// A test function on `ℝ` with compact support.
pub trait TestFunction {
    fn value(&self, u: f64) -> f64;
    /// Closed interval outside of which the function vanishes.
    fn support(&self) -> (f64, f64);
}

/// `G_n(u) = χ_{u>0} (1 - u/n)⁺`.
pub fn g_n(u: f64, n: f64) -> f64 {
    if u > 0.0 {
        (1.0 - u / n).max(0.0)
    } else {
        0.0
    }
}

/// `χ_{u>=0} (1 - u/n)⁺`: [`g_n`] with the origin included.
///
/// This is the variant for which summation by parts of the conservation
/// law produces `J_{-1,0}` exactly.
pub fn g_n_closed(u: f64, n: f64) -> f64 {
    if u >= 0.0 {
        (1.0 - u / n).max(0.0)
    } else {
        0.0
    }
}

/// Tent test function `(1 - u/n)⁺` on `u > 0` (or `u >= 0` when `closed`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tent {
    pub n: f64,
    pub closed: bool,
}

impl Tent {
    pub fn open(n: f64) -> Self {
        Self { n, closed: false }
    }

    pub fn closed(n: f64) -> Self {
        Self { n, closed: true }
    }
}

impl TestFunction for Tent {
    fn value(&self, u: f64) -> f64 {
        if self.closed {
            g_n_closed(u, self.n)
        } else {
            g_n(u, self.n)
        }
    }

    fn support(&self) -> (f64, f64) {
        (0.0, self.n)
    }
}

/// Any closure together with a declared support interval.
pub struct Compact<F> {
    pub f: F,
    pub lo: f64,
    pub hi: f64,
}

impl<F: Fn(f64) -> f64> TestFunction for Compact<F> {
    fn value(&self, u: f64) -> f64 {
        if u < self.lo || u > self.hi {
            0.0
        } else {
            (self.f)(u)
        }
    }

    fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

/// `⟨μ^N, G⟩ = a_N⁻¹ Σ_x (η(x) - ρ) G(x/N)` for one snapshot.
///
/// The support of `G`, scaled by `N`, must fit inside the ring sites
/// `[-L, L-1]`.
pub fn empirical_pairing<G: TestFunction + ?Sized>(
    snapshot: &Snapshot,
    g: &G,
    scaling: &ScalingParams,
) -> Result<f64> {
    let n = scaling.n as f64;
    let (lo, hi) = g.support();
    let first = (lo * n).ceil() as i64;
    let last = (hi * n).floor() as i64;
    let l = snapshot.half_width() as i64;
    if first < -l || last > l - 1 {
        return Err(Error::Domain(format!(
            "support [{lo}, {hi}] covers sites {first}..={last}, outside the ring [-{l}, {}]",
            l - 1
        )));
    }
    let sum: f64 = (first..=last)
        .map(|x| (snapshot.eta(x) as f64 - scaling.rho) * g.value(x as f64 / n))
        .sum();
    Ok(sum / scaling.a_n())
}

/// Checks `η_T(x) - η_0(x) = J_{x-1,x}(T) - J_{x,x+1}(T)` at every site the
/// currents cover.
///
/// `window[x]` is `J_{x,x+1}` for `x ∈ [0, W)`, which covers the sites
/// `1..W`; passing `j_origin = Some(J_{-1,0})` adds the site `0`.
pub fn check_conservation_identity(
    initial: &Snapshot,
    final_: &Snapshot,
    window: &[i64],
    j_origin: Option<i64>,
) -> Result<bool> {
    if initial.ring_size() != final_.ring_size() {
        return Err(Error::Data("snapshots come from different rings".into()));
    }
    if window.len() < 2 && !(j_origin.is_some() && !window.is_empty()) {
        return Err(Error::Data(
            "current window covers no site; track at least two bonds".into(),
        ));
    }
    let balance = |x: i64, left: i64, right: i64| final_.eta(x) - initial.eta(x) == left - right;
    let mut ok = true;
    if let Some(j) = j_origin {
        ok &= balance(0, j, window[0]);
    }
    for x in 1..window.len() {
        ok &= balance(x as i64, window[x - 1], window[x]);
    }
    Ok(ok)
}

/// Conservation identity between the first record and record `k`.
pub fn conservation_at(record: &TrajectoryRecord, k: usize) -> Result<bool> {
    let snaps = record
        .snapshots
        .as_ref()
        .ok_or_else(|| Error::Data("trajectory has no snapshots".into()))?;
    let currents = record
        .window_currents
        .as_ref()
        .ok_or_else(|| Error::Data("trajectory has no current window".into()))?;
    let last = snaps.len().min(currents.len());
    if k >= last {
        return Err(Error::Data(format!("no record {k}")));
    }
    check_conservation_identity(&snaps[0], &snaps[k], &currents[k], Some(record.j_origin[k]))
}

/// Which branch of the position/current identity applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionCurrent {
    /// `J > 0`: whether `J = Σ_{x=0}^{X-1} η(x)`.
    Positive(bool),
    /// `J < 0`: whether `J = -Σ_{x=X}^{-1} η(x)`.
    Negative(bool),
    /// `J = 0`: not asserted. Carries `X` and the number of particles in
    /// `[0, X)` for logging.
    Zero { x: i64, between: i64 },
}

impl PositionCurrent {
    /// `false` only when an asserted branch fails.
    pub fn holds(&self) -> bool {
        match *self {
            Self::Positive(ok) | Self::Negative(ok) => ok,
            Self::Zero { .. } => true,
        }
    }
}

/// Evaluates the identity relating `J_{-1,0}(t)` to the particles between
/// the origin and the tagged particle at record index `k`.
pub fn position_current_case(record: &TrajectoryRecord, k: usize) -> Result<PositionCurrent> {
    let snap = record
        .snapshots
        .as_ref()
        .and_then(|s| s.get(k))
        .ok_or_else(|| Error::Data(format!("no snapshot at record {k}")))?;
    let x = record.x[k];
    let j = record.j_origin[k];
    let count = |from: i64, to: i64| (from..to).map(|y| snap.eta(y)).sum::<i64>();
    Ok(match j.cmp(&0) {
        std::cmp::Ordering::Greater => PositionCurrent::Positive(x > 0 && j == count(0, x)),
        std::cmp::Ordering::Less => PositionCurrent::Negative(x < 0 && j == -count(x, 0)),
        std::cmp::Ordering::Equal => PositionCurrent::Zero {
            x,
            between: if x > 0 { count(0, x) } else { 0 },
        },
    })
}

/// `true` unless an asserted branch of the identity fails at record `k`.
pub fn check_position_current_identity(record: &TrajectoryRecord, k: usize) -> Result<bool> {
    position_current_case(record, k).map(|c| c.holds())
}

/// The summed-current term and the residual of the pairing/current identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummedCurrent {
    /// `(n N a_N)⁻¹ Σ_{x=0}^{nN-1} J_{x,x+1}`.
    pub value: f64,
    /// `⟨μ_T,G⟩ - ⟨μ_0,G⟩ + value - J_{-1,0}/a_N` with `G` the closed tent.
    pub residual: f64,
    /// Largest magnitude among the four terms, for relative comparisons.
    pub scale: f64,
}

impl SummedCurrent {
    pub fn relative_residual(&self) -> f64 {
        if self.scale == 0.0 {
            self.residual.abs()
        } else {
            self.residual.abs() / self.scale
        }
    }
}

/// Summed current over `[0, nN)` at record `k`, with the identity residual.
pub fn summed_current_diagnostic(
    record: &TrajectoryRecord,
    n: usize,
    scaling: &ScalingParams,
    k: usize,
) -> Result<SummedCurrent> {
    if n < 1 {
        return Err(param("n", "must be at least 1"));
    }
    let span = n * scaling.n;
    let currents = record
        .window_currents
        .as_ref()
        .and_then(|w| w.get(k))
        .ok_or_else(|| Error::Data(format!("no current window at record {k}")))?;
    if currents.len() < span {
        return Err(Error::Data(format!(
            "current window of {} bonds is shorter than nN = {span}",
            currents.len()
        )));
    }
    let snaps = record
        .snapshots
        .as_ref()
        .ok_or_else(|| Error::Data("trajectory has no snapshots".into()))?;
    let (first, last) = (
        snaps.first().ok_or_else(|| Error::Data("no snapshots".into()))?,
        snaps
            .get(k)
            .ok_or_else(|| Error::Data(format!("no snapshot at record {k}")))?,
    );
    let a = scaling.a_n();
    let tent = Tent::closed(n as f64);
    let p0 = empirical_pairing(first, &tent, scaling)?;
    let pt = empirical_pairing(last, &tent, scaling)?;
    let total: i64 = currents[..span].iter().sum();
    let value = total as f64 / (span as f64 * a);
    let jterm = record.j_origin[k] as f64 / a;
    let residual = pt - p0 + value - jterm;
    let scale = [pt, p0, value, jterm]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(SummedCurrent {
        value,
        residual,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{run_stirring, Configuration, SimParams};

    fn scaling(n: usize) -> ScalingParams {
        ScalingParams::new(n, 0.75, 1.0, 0.5).unwrap()
    }

    #[test]
    fn tent_values() {
        assert_eq!(g_n(0.0, 3.0), 0.0);
        assert_eq!(g_n(0.0, 1.0), 0.0);
        assert_eq!(g_n(2.0, 4.0), 0.5);
        assert_eq!(g_n(-1.0, 4.0), 0.0);
        assert_eq!(g_n(4.0, 4.0), 0.0);
        assert_eq!(g_n(7.0, 4.0), 0.0);
        assert_eq!(g_n_closed(0.0, 4.0), 1.0);
    }

    #[test]
    fn scaling_validation() {
        assert!(ScalingParams::new(50, 0.5, 1.0, 0.5).is_err());
        assert!(ScalingParams::new(50, 1.0, 1.0, 0.5).is_err());
        assert!(ScalingParams::new(0, 0.75, 1.0, 0.5).is_err());
        assert!(ScalingParams::new(50, 0.75, 0.0, 0.5).is_err());
        let s = scaling(100);
        assert!((s.a_n() - 31.622776601683793).abs() < 1e-12);
        assert_eq!(s.horizon(), 1e4);
    }

    #[test]
    fn pairing_of_zero_function_vanishes() {
        let c = Configuration::full(200).unwrap();
        let zero = Compact {
            f: |_u: f64| 0.0,
            lo: -1.0,
            hi: 1.0,
        };
        assert_eq!(empirical_pairing(c.snapshot(), &zero, &scaling(100)).unwrap(), 0.0);
    }

    #[test]
    fn pairing_full_lattice_tent() {
        // (0.5 / a_N) * sum_{x=1}^{99} (1 - x/100) = 0.5 * 49.5 / 100^0.75.
        let c = Configuration::full(200).unwrap();
        let v = empirical_pairing(c.snapshot(), &Tent::open(1.0), &scaling(100)).unwrap();
        let expected = 0.5 * 49.5 / 100f64.powf(0.75);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        assert!((v - 0.7827).abs() < 1e-4);
    }

    #[test]
    fn pairing_support_outside_ring_is_rejected() {
        let c = Configuration::full(50).unwrap();
        let r = empirical_pairing(c.snapshot(), &Tent::open(1.0), &scaling(100));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn pairing_is_linear_in_g() {
        let c = Configuration::from_sites(100, &[-7, -3, 0, 2, 5, 11, 40], 0).unwrap();
        let s = scaling(20);
        let g1 = Compact {
            f: |u: f64| (u * 3.0).sin(),
            lo: -2.0,
            hi: 2.0,
        };
        let g2 = Compact {
            f: |u: f64| u * u - 1.0,
            lo: -2.0,
            hi: 2.0,
        };
        let sum = Compact {
            f: |u: f64| 2.0 * (u * 3.0).sin() - 0.5 * (u * u - 1.0),
            lo: -2.0,
            hi: 2.0,
        };
        let a = empirical_pairing(c.snapshot(), &g1, &s).unwrap();
        let b = empirical_pairing(c.snapshot(), &g2, &s).unwrap();
        let ab = empirical_pairing(c.snapshot(), &sum, &s).unwrap();
        assert!((ab - (2.0 * a - 0.5 * b)).abs() < 1e-12);
    }

    /// Hop 0 -> 1, hop 1 -> 2, hop 2 -> 1 for a single particle.
    #[test]
    fn hand_built_trace() {
        let l = 8;
        let initial = Configuration::from_sites(l, &[0], 0).unwrap();
        let fin = Configuration::from_sites(l, &[1], 1).unwrap();
        // J_{-1,0} = 0, J_{0,1} = 1, J_{1,2} = 1 - 1 = 0.
        let window = [1, 0, 0, 0];
        assert!(check_conservation_identity(initial.snapshot(), fin.snapshot(), &window, Some(0)).unwrap());
        let wrong = [1, 1, 0, 0];
        assert!(!check_conservation_identity(initial.snapshot(), fin.snapshot(), &wrong, Some(0)).unwrap());
        assert!(check_conservation_identity(initial.snapshot(), fin.snapshot(), &[], None).is_err());
    }

    #[test]
    fn frozen_lattice_identities() {
        let c = Configuration::full(20).unwrap();
        let p = SimParams {
            window: 8,
            snapshots: true,
            ring_safety_factor: 0.0,
            record_grid: vec![5.0, 10.0],
            ..SimParams::new(0.5, 20, 10.0, 3)
        };
        let rec = run_stirring(c, &p).unwrap();
        for k in 0..rec.len() {
            assert!(conservation_at(&rec, k).unwrap());
            assert_eq!(
                position_current_case(&rec, k).unwrap(),
                PositionCurrent::Zero { x: 0, between: 0 }
            );
        }
        let s = ScalingParams::new(4, 0.75, 1.0, 0.5).unwrap();
        let d = summed_current_diagnostic(&rec, 2, &s, 2).unwrap();
        assert_eq!(d.value, 0.0);
        assert!(d.residual.abs() < 1e-12);
    }

    #[test]
    fn lone_walker_position_identity() {
        // Tagged particle alone at +5: it never crossed (-1, 0) net, so J = 0
        // unless it wandered left first; build the terminal state directly.
        let l = 20;
        let snap = Configuration::from_sites(l, &[5], 5).unwrap();
        let rec = TrajectoryRecord {
            times: vec![0.0, 1.0],
            x: vec![0, 5],
            j_origin: vec![0, 0],
            tagged_sites: vec![0, 5],
            window_currents: None,
            snapshots: Some(vec![snap.snapshot().clone(), snap.snapshot().clone()]),
            ring_size: 40,
            events: 0,
        };
        assert_eq!(
            position_current_case(&rec, 1).unwrap(),
            PositionCurrent::Zero { x: 5, between: 0 }
        );
        // A second particle that crossed (-1, 0) and sits at 2 gives J = 1.
        let snap = Configuration::from_sites(l, &[2, 5], 5).unwrap();
        let rec = TrajectoryRecord {
            x: vec![0, 5],
            j_origin: vec![0, 1],
            snapshots: Some(vec![snap.snapshot().clone(), snap.snapshot().clone()]),
            ..rec
        };
        assert_eq!(
            position_current_case(&rec, 1).unwrap(),
            PositionCurrent::Positive(true)
        );
    }

    #[test]
    fn missing_data_errors() {
        let c = Configuration::full(20).unwrap();
        let p = SimParams {
            ring_safety_factor: 0.0,
            ..SimParams::new(0.5, 20, 1.0, 3)
        };
        let rec = run_stirring(c, &p).unwrap();
        assert!(matches!(conservation_at(&rec, 1), Err(Error::Data(_))));
        assert!(matches!(position_current_case(&rec, 1), Err(Error::Data(_))));
        assert!(matches!(
            summed_current_diagnostic(&rec, 1, &scaling(4), 1),
            Err(Error::Data(_))
        ));
    }
}
