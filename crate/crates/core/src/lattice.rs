//! Stirring simulation of the symmetric simple exclusion process on a ring.
//!
//! Sites `x ∈ {-L, …, L-1}` of a ring of size `2L` are stored bit-packed,
//! site `x` at bit index `x mod 2L`. Bond `b` joins index `b` and
//! `b + 1 mod 2L`; bond index `2L - 1` is the bond `(-1, 0)`.
//!
//! Every bond carries a rate-1/2 clock that swaps its two endpoint values.
//! The total rate `L` does not depend on the configuration, so the number
//! of events between two observation times is Poisson and the bonds are
//! drawn uniformly; a swap of two equal values is a no-op. Two particles
//! exchanging places is one of those no-ops, which is why the tagged
//! particle never passes its neighbours.
//!
//! The event loop works on an unpacked byte-per-site copy of the ring;
//! configurations and recorded snapshots stay bit-packed.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Poisson};

use crate::error::{check_density, param, Error, Result};
use crate::rng::{IndexSampler, SimRng};

/// Default value of [`SimParams::ring_safety_factor`].
pub const RING_SAFETY_FACTOR: f64 = 10.0;

/// Smallest half-width `L` with `2L >= factor * sqrt(horizon)` (and `L >= 1`).
pub fn half_width_for(horizon: f64, factor: f64) -> usize {
    let ring = (factor * horizon.max(0.0).sqrt()).ceil() as usize;
    ring.div_ceil(2).max(1)
}

/// Occupation bits of a ring, detached from any dynamics.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Snapshot {
    ring: usize,
    words: Vec<u64>,
}

impl Snapshot {
    fn empty(ring: usize) -> Self {
        Self {
            ring,
            words: vec![0; ring.div_ceil(64)],
        }
    }

    /// Number of sites `2L`.
    pub fn ring_size(&self) -> usize {
        self.ring
    }

    /// Half-width `L`.
    pub fn half_width(&self) -> usize {
        self.ring / 2
    }

    #[inline]
    pub(crate) fn index(&self, x: i64) -> usize {
        x.rem_euclid(self.ring as i64) as usize
    }

    /// Occupation `η(x)` of site `x`, taken modulo the ring.
    #[inline]
    pub fn occupied(&self, x: i64) -> bool {
        self.bit(self.index(x))
    }

    /// Occupation as `0`/`1`.
    #[inline]
    pub fn eta(&self, x: i64) -> i64 {
        self.occupied(x) as i64
    }

    #[inline]
    pub(crate) fn bit(&self, i: usize) -> bool {
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    fn set(&mut self, i: usize, v: bool) {
        let m = 1u64 << (i & 63);
        if v {
            self.words[i >> 6] |= m;
        } else {
            self.words[i >> 6] &= !m;
        }
    }

    /// Number of occupied sites.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Signed site label of ring index `i`.
    pub fn site(&self, i: usize) -> i64 {
        let l = self.half_width();
        if i < l {
            i as i64
        } else {
            i as i64 - self.ring as i64
        }
    }

    /// Occupied sites in signed labels, increasing.
    pub fn occupied_sites(&self) -> Vec<i64> {
        let mut v: Vec<i64> = (0..self.ring)
            .filter(|&i| self.bit(i))
            .map(|i| self.site(i))
            .collect();
        v.sort_unstable();
        v
    }
}

/// Occupation state of the ring plus the position of the tagged particle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    occupancy: Snapshot,
    tagged: usize,
    count: usize,
}

impl Configuration {
    /// Builds a configuration of half-width `half_width` from explicit
    /// occupied sites (signed labels, taken modulo the ring).
    ///
    /// `tagged` must be among the occupied sites. The completely filled
    /// ring is accepted (it is frozen under the dynamics); the empty ring
    /// cannot carry a tagged particle.
    pub fn from_sites(half_width: usize, occupied: &[i64], tagged: i64) -> Result<Self> {
        if half_width < 1 {
            return Err(param("L", "half-width must be at least 1"));
        }
        let mut occupancy = Snapshot::empty(2 * half_width);
        for &x in occupied {
            let i = occupancy.index(x);
            occupancy.set(i, true);
        }
        let t = occupancy.index(tagged);
        if !occupancy.bit(t) {
            return Err(param("tagged", format!("site {tagged} is not occupied")));
        }
        let count = occupancy.count();
        Ok(Self {
            occupancy,
            tagged: t,
            count,
        })
    }

    /// Every site occupied; the tagged particle sits at the origin.
    pub fn full(half_width: usize) -> Result<Self> {
        let sites: Vec<i64> = (-(half_width as i64)..half_width as i64).collect();
        Self::from_sites(half_width, &sites, 0)
    }

    /// A single (tagged) particle at the origin.
    pub fn lone(half_width: usize) -> Result<Self> {
        Self::from_sites(half_width, &[0], 0)
    }

    pub fn ring_size(&self) -> usize {
        self.occupancy.ring
    }

    pub fn half_width(&self) -> usize {
        self.occupancy.half_width()
    }

    pub fn occupied(&self, x: i64) -> bool {
        self.occupancy.occupied(x)
    }

    /// Signed label of the tagged particle's site.
    pub fn tagged_site(&self) -> i64 {
        self.occupancy.site(self.tagged)
    }

    pub fn particle_count(&self) -> usize {
        self.count
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.occupancy
    }

    /// Checks both structural invariants: tagged site occupied and the
    /// cached particle count equal to the number of set bits.
    pub fn is_consistent(&self) -> bool {
        self.occupancy.bit(self.tagged) && self.occupancy.count() == self.count
    }
}

/// Draws from `ν_ρ` conditioned on a particle at the origin: every site
/// other than the origin is occupied independently with probability `rho`.
pub fn init_bernoulli_star<R: Rng + ?Sized>(
    rho: f64,
    half_width: usize,
    rng: &mut R,
) -> Result<Configuration> {
    check_density(rho)?;
    if half_width < 1 {
        return Err(param("L", "half-width must be at least 1"));
    }
    let ring = 2 * half_width;
    let mut occ = Snapshot::empty(ring);
    occ.set(0, true);
    for i in 1..ring {
        if rng.gen::<f64>() < rho {
            occ.set(i, true);
        }
    }
    let count = occ.count();
    Ok(Configuration {
        occupancy: occ,
        tagged: 0,
        count,
    })
}

/// Draws from the unconditioned product measure `ν_ρ`. The tagged particle
/// is put on the first occupied site at or to the right of the origin.
/// Fails only on the (astronomically unlikely for sizeable rings) empty draw.
pub fn init_bernoulli<R: Rng + ?Sized>(
    rho: f64,
    half_width: usize,
    rng: &mut R,
) -> Result<Configuration> {
    check_density(rho)?;
    if half_width < 1 {
        return Err(param("L", "half-width must be at least 1"));
    }
    let ring = 2 * half_width;
    let mut occ = Snapshot::empty(ring);
    for i in 0..ring {
        if rng.gen::<f64>() < rho {
            occ.set(i, true);
        }
    }
    let tagged = (0..ring)
        .find(|&i| occ.bit(i))
        .ok_or_else(|| Error::Data("drew an empty ring".into()))?;
    let count = occ.count();
    Ok(Configuration {
        occupancy: occ,
        tagged,
        count,
    })
}

/// Tagged particle at the origin plus `particles - 1` others placed
/// uniformly among the remaining `2L - 1` sites: `ν_ρ*` conditioned on the
/// particle number, which no longer depends on `ρ`.
pub fn init_fixed_count<R: Rng + ?Sized>(
    particles: usize,
    half_width: usize,
    rng: &mut R,
) -> Result<Configuration> {
    if half_width < 1 {
        return Err(param("L", "half-width must be at least 1"));
    }
    let ring = 2 * half_width;
    if particles < 1 || particles > ring {
        return Err(param(
            "particle_count",
            format!("must lie in 1..={ring}, got {particles}"),
        ));
    }
    let mut occ = Snapshot::empty(ring);
    occ.set(0, true);
    for i in rand::seq::index::sample(rng, ring - 1, particles - 1) {
        occ.set(i + 1, true);
    }
    Ok(Configuration {
        occupancy: occ,
        tagged: 0,
        count: particles,
    })
}

/// Parameters of one stirring run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimParams {
    /// Density used by the initializers.
    pub rho: f64,
    /// Half-width `L`; the ring has `2L` sites.
    pub half_width: usize,
    /// Physical time horizon.
    pub horizon: f64,
    /// Seed of the dynamics when run through [`run_stirring`].
    pub seed: u64,
    /// Observation times, sorted, inside `[0, horizon]`.
    pub record_grid: Vec<f64>,
    /// Require `2L >= ring_safety_factor * sqrt(horizon)`; `0` disables.
    pub ring_safety_factor: f64,
    /// Track `J_{x,x+1}` for `x ∈ [0, window)`; `0` tracks none.
    pub window: usize,
    /// Store the occupation bits at every observation time.
    pub snapshots: bool,
}

impl SimParams {
    /// Parameters observing only at `horizon`, with the default ring check.
    pub fn new(rho: f64, half_width: usize, horizon: f64, seed: u64) -> Self {
        Self {
            rho,
            half_width,
            horizon,
            seed,
            record_grid: vec![horizon],
            ring_safety_factor: RING_SAFETY_FACTOR,
            window: 0,
            snapshots: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_density(self.rho)?;
        if self.half_width < 1 {
            return Err(param("L", "half-width must be at least 1"));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(param("horizon", format!("must be finite and >= 0, got {}", self.horizon)));
        }
        if self.record_grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(param("record_grid", "must be sorted"));
        }
        if self
            .record_grid
            .iter()
            .any(|&t| !(0.0..=self.horizon).contains(&t))
        {
            return Err(param("record_grid", "entries must lie in [0, horizon]"));
        }
        let need = self.ring_safety_factor * self.horizon.sqrt();
        if (2 * self.half_width) as f64 + 1e-9 < need {
            return Err(param(
                "L",
                format!(
                    "ring of {} sites is smaller than {} * sqrt({}) = {need:.1}",
                    2 * self.half_width,
                    self.ring_safety_factor,
                    self.horizon
                ),
            ));
        }
        if self.window > 2 * self.half_width {
            return Err(param("window", "current window larger than the ring"));
        }
        Ok(())
    }
}

/// Observations of one replica at the recorded times.
///
/// `times[0]` is always `0`; the remaining entries are the record grid
/// (a leading `0` in the grid is not duplicated).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// Unwrapped tagged displacement `X(t)`.
    pub x: Vec<i64>,
    /// Current `J_{-1,0}(t)`.
    pub j_origin: Vec<i64>,
    /// Ring site (signed label) of the tagged particle.
    pub tagged_sites: Vec<i64>,
    /// `window_currents[k][x] = J_{x,x+1}(times[k])` for `x ∈ [0, W)`.
    pub window_currents: Option<Vec<Vec<i64>>>,
    pub snapshots: Option<Vec<Snapshot>>,
    pub ring_size: usize,
    /// Number of bond clock rings processed (no-ops included).
    pub events: u64,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the recorded time closest to `t`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .filter(|(_, &s)| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|(i, _)| i)
    }

    pub fn half_width(&self) -> usize {
        self.ring_size / 2
    }

    pub fn window(&self) -> usize {
        self.window_currents
            .as_ref()
            .and_then(|w| w.first().map(Vec::len))
            .unwrap_or(0)
    }
}

/// Runs the stirring dynamics from `config` seeded by `params.seed`.
pub fn run_stirring(config: Configuration, params: &SimParams) -> Result<TrajectoryRecord> {
    let mut rng = SimRng::seed_from_u64(params.seed);
    run_stirring_with(config, params, &mut rng)
}

/// Runs the stirring dynamics from `config`, drawing from `rng`.
pub fn run_stirring_with<R: RngCore + ?Sized>(
    config: Configuration,
    params: &SimParams,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    params.validate()?;
    if config.half_width() != params.half_width {
        return Err(param(
            "L",
            format!(
                "configuration half-width {} differs from parameters {}",
                config.half_width(),
                params.half_width
            ),
        ));
    }
    if params.window > 0 {
        Stirring::<true>::new(config, params.window).run(params, rng)
    } else {
        Stirring::<false>::new(config, 0).run(params, rng)
    }
}

/// Working state of one run. Sites are unpacked to one byte each for the
/// event loop and packed back into a [`Snapshot`] when observed.
struct Stirring<const WINDOW: bool> {
    sites: Vec<u8>,
    tagged: usize,
    disp: i64,
    j_origin: i64,
    currents: Vec<i64>,
    count: usize,
}

impl<const WINDOW: bool> Stirring<WINDOW> {
    fn new(config: Configuration, window: usize) -> Self {
        let occ = &config.occupancy;
        Self {
            sites: (0..occ.ring).map(|i| occ.bit(i) as u8).collect(),
            tagged: config.tagged,
            disp: 0,
            j_origin: 0,
            currents: vec![0; window],
            count: config.count,
        }
    }

    fn ring(&self) -> usize {
        self.sites.len()
    }

    fn snapshot(&self) -> Snapshot {
        let mut s = Snapshot::empty(self.ring());
        for (i, &v) in self.sites.iter().enumerate() {
            if v != 0 {
                s.set(i, true);
            }
        }
        s
    }

    fn run<R: RngCore + ?Sized>(
        mut self,
        params: &SimParams,
        rng: &mut R,
    ) -> Result<TrajectoryRecord> {
        let mut times = vec![0.0];
        times.extend(params.record_grid.iter().copied().filter(|&t| t > 0.0));
        let n = times.len();
        let mut rec = TrajectoryRecord {
            times: Vec::with_capacity(n),
            x: Vec::with_capacity(n),
            j_origin: Vec::with_capacity(n),
            tagged_sites: Vec::with_capacity(n),
            window_currents: WINDOW.then(|| Vec::with_capacity(n)),
            snapshots: params.snapshots.then(|| Vec::with_capacity(n)),
            ring_size: self.ring(),
            events: 0,
        };
        // Total clock rate: 2L bonds at rate 1/2.
        let rate = self.ring() as f64 * 0.5;
        let bonds = IndexSampler::new(self.ring());
        let mut now = 0.0;
        for &t in &times {
            let mean = rate * (t - now);
            if mean > 0.0 {
                let k = Poisson::new(mean)
                    .map_err(|e| param("horizon", e.to_string()))?
                    .sample(rng) as u64;
                self.advance(k, &bonds, rng);
                rec.events += k;
            }
            now = t;
            self.observe(&mut rec, t);
        }
        debug_assert_eq!(
            self.sites.iter().map(|&v| v as usize).sum::<usize>(),
            self.count
        );
        Ok(rec)
    }

    fn observe(&self, rec: &mut TrajectoryRecord, t: f64) {
        let ring = self.ring() as i64;
        rec.times.push(t);
        rec.x.push(self.disp);
        rec.j_origin.push(self.j_origin);
        let ti = self.tagged as i64;
        rec.tagged_sites
            .push(if 2 * ti < ring { ti } else { ti - ring });
        if let Some(w) = rec.window_currents.as_mut() {
            w.push(self.currents.clone());
        }
        if let Some(s) = rec.snapshots.as_mut() {
            s.push(self.snapshot());
        }
    }

    /// Applies `k` uniformly chosen bond clock rings.
    #[inline(never)]
    fn advance<R: RngCore + ?Sized>(&mut self, k: u64, bonds: &IndexSampler, rng: &mut R) {
        let last = self.sites.len() - 1;
        let window = self.currents.len();
        let sites = &mut self.sites[..];
        let currents = &mut self.currents[..];
        let mut tagged = self.tagged;
        let mut disp = self.disp;
        let mut j0 = self.j_origin;
        let mut ring_bond = |b: usize| {
            let c = if b == last { 0 } else { b + 1 };
            let (vb, vc) = (sites[b], sites[c]);
            sites[b] = vc;
            sites[c] = vb;
            let d = (vb ^ vc) as i64;
            let right = (b == tagged) as i64 & d;
            let left = (c == tagged) as i64 & d;
            disp += right - left;
            tagged = if right != 0 {
                c
            } else if left != 0 {
                b
            } else {
                tagged
            };
            // +1 when a particle crossed b -> c, -1 when it crossed c -> b.
            if b == last {
                j0 += d * (2 * vb as i64 - 1);
            }
            if WINDOW && b < window {
                currents[b] += d * (2 * vb as i64 - 1);
            }
        };
        for _ in 0..k / 2 {
            let (a, b) = bonds.pair(rng);
            ring_bond(a);
            ring_bond(b);
        }
        if k % 2 == 1 {
            ring_bond(bonds.sample(rng));
        }
        self.tagged = tagged;
        self.disp = disp;
        self.j_origin = j0;
    }
}

/// Unwraps a path of ring sites (signed labels) into a cumulative signed
/// displacement along `ℤ`.
///
/// Each step is resolved to its minimal image on the ring, so consecutive
/// entries must be less than half a ring apart; crossing the seam from
/// `L - 1` to `-L` counts as `+1`.
pub fn unwrap_displacement(sites: &[i64], ring_size: usize) -> Vec<i64> {
    let n = ring_size as i64;
    let mut out = Vec::with_capacity(sites.len());
    let mut acc = 0i64;
    for (k, &s) in sites.iter().enumerate() {
        if k > 0 {
            let mut step = (s - sites[k - 1]).rem_euclid(n);
            if 2 * step > n {
                step -= n;
            }
            acc += step;
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replica_rng;

    fn params(rho: f64, l: usize, horizon: f64) -> SimParams {
        SimParams {
            ring_safety_factor: 0.0,
            ..SimParams::new(rho, l, horizon, 11)
        }
    }

    #[test]
    fn init_forces_origin() {
        let mut rng = replica_rng(0, 0);
        let c = init_bernoulli_star(0.5, 4, &mut rng).unwrap();
        assert!(c.occupied(0));
        assert_eq!(c.tagged_site(), 0);
        for _ in 0..20 {
            let c = init_bernoulli_star(0.999, 1024, &mut rng).unwrap();
            assert!(c.occupied(0));
            assert!(c.particle_count() > 2030, "{}", c.particle_count());
            assert!(c.is_consistent());
        }
    }

    #[test]
    fn init_rejects_bad_parameters() {
        let mut rng = replica_rng(0, 0);
        assert!(matches!(
            init_bernoulli_star(0.0, 4, &mut rng),
            Err(Error::Parameter { name: "rho", .. })
        ));
        assert!(init_bernoulli_star(1.0, 4, &mut rng).is_err());
        assert!(matches!(
            init_bernoulli_star(0.5, 0, &mut rng),
            Err(Error::Parameter { name: "L", .. })
        ));
        assert!(init_fixed_count(0, 3, &mut rng).is_err());
        assert!(init_fixed_count(7, 3, &mut rng).is_err());
    }

    #[test]
    fn fixed_count_init() {
        let mut rng = replica_rng(3, 0);
        for k in 1..=6 {
            let c = init_fixed_count(k, 3, &mut rng).unwrap();
            assert_eq!(c.particle_count(), k);
            assert!(c.is_consistent());
            assert!(c.occupied(0));
        }
    }

    #[test]
    fn full_lattice_is_frozen() {
        let c = Configuration::full(8).unwrap();
        let mut p = params(0.5, 8, 50.0);
        p.record_grid = vec![10.0, 25.0, 50.0];
        let rec = run_stirring(c, &p).unwrap();
        assert!(rec.events > 0);
        assert!(rec.x.iter().all(|&x| x == 0));
        assert!(rec.j_origin.iter().all(|&j| j == 0));
    }

    #[test]
    fn lone_particle_displacement_tracks_site() {
        let c = Configuration::lone(50).unwrap();
        let mut p = params(0.5, 50, 200.0);
        p.record_grid = (1..=200).map(|k| k as f64).collect();
        let rec = run_stirring(c, &p).unwrap();
        // With one particle, X mod ring equals its site and J_{-1,0} counts
        // the tagged particle's own crossings of bond (-1, 0).
        for k in 0..rec.len() {
            assert_eq!(
                rec.x[k].rem_euclid(100),
                rec.tagged_sites[k].rem_euclid(100)
            );
        }
        assert_eq!(unwrap_displacement(&rec.tagged_sites, 100), rec.x);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = replica_rng(9, 1);
        let c = init_bernoulli_star(0.3, 40, &mut rng).unwrap();
        let mut p = params(0.3, 40, 30.0);
        p.window = 16;
        p.snapshots = true;
        p.record_grid = vec![0.0, 5.0, 30.0];
        let a = run_stirring(c.clone(), &p).unwrap();
        let b = run_stirring(c, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times, vec![0.0, 5.0, 30.0]);
    }

    #[test]
    fn ring_safety_enforced() {
        let p = SimParams::new(0.5, 10, 100.0, 0);
        assert!(p.validate().is_err());
        let p = SimParams::new(0.5, 50, 100.0, 0);
        assert!(p.validate().is_ok());
        assert_eq!(half_width_for(100.0, 10.0), 50);
        let mut p = SimParams::new(0.5, 50, 100.0, 0);
        p.record_grid = vec![50.0, 10.0];
        assert!(p.validate().is_err());
        p.record_grid = vec![150.0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn unwrap_examples() {
        assert_eq!(*unwrap_displacement(&[0, 1, 0], 10).last().unwrap(), 0);
        assert_eq!(
            *unwrap_displacement(&[0, 1, 2, 3, 4, 5], 10).last().unwrap(),
            5
        );
        // Seam: L - 1 = 4 to -L = -5 on a ring of 10.
        assert_eq!(unwrap_displacement(&[4, -5], 10), vec![0, 1]);
        assert_eq!(unwrap_displacement(&[-5, 4], 10), vec![0, -1]);
    }
}
