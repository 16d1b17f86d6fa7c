//! Exact transient law of the stirring dynamics on small rings.
//!
//! A state is `(pattern, D, J)`: the occupation bits of a ring of
//! `2L <= 12` sites, the unwrapped displacement `D` of the tagged
//! particle (which sits at site `D mod 2L`) and the current `J_{-1,0}`.
//! Both counters are bounded; a transition leaving `[-Dmax, Dmax]` or
//! `[-Jmax, Jmax]` moves the mass into an absorbing sink whose weight is
//! reported as clipped mass.
//!
//! The law at time `t` is computed by uniformization at rate `L`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::lattice::{init_fixed_count, run_stirring_with, SimParams};
use crate::rng::replica_rng;

/// Largest ring the oracle accepts.
pub const MAX_RING: usize = 12;
/// Default bound on `|J|`.
pub const JMAX: i64 = 16;
/// Default bound on `|D|`.
pub const DMAX: i64 = 20;
/// Default cap on the number of states.
pub const STATE_CAP: usize = 4_000_000;
/// Default tolerated clipped mass.
pub const CLIP_TOLERANCE: f64 = 1e-9;
/// Poisson tail mass dropped by uniformization.
pub const TRUNCATION: f64 = 1e-12;

/// Settings of the finite-state embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub jmax: i64,
    pub dmax: i64,
    pub state_cap: usize,
    pub clip_tolerance: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            jmax: JMAX,
            dmax: DMAX,
            state_cap: STATE_CAP,
            clip_tolerance: CLIP_TOLERANCE,
        }
    }
}

/// One non-sink state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentedState {
    /// Bit `i` is site `i mod 2L`.
    pub occupancy: u16,
    /// Unwrapped tagged displacement.
    pub displacement: i64,
    /// `J_{-1,0}`.
    pub current: i64,
}

impl AugmentedState {
    /// Ring index of the tagged particle.
    pub fn tagged_index(&self, ring: usize) -> usize {
        self.displacement.rem_euclid(ring as i64) as usize
    }
}

/// Sparse generator over the states plus a final sink index.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub half_width: usize,
    pub particles: usize,
    pub options: OracleOptions,
    /// `(pattern, D)` pairs with the tagged bit set; `J` is the inner index.
    cells: Vec<(u16, i64)>,
    cell_index: HashMap<(u16, i64), usize>,
    /// Per state: outgoing `(target, rate)` with the sink as `len()`.
    rows: Vec<Vec<(usize, f64)>>,
    diagonal: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn ring_size(&self) -> usize {
        2 * self.half_width
    }

    fn width(&self) -> usize {
        (2 * self.options.jmax + 1) as usize
    }

    /// Number of states, sink excluded.
    pub fn state_count(&self) -> usize {
        self.rows.len()
    }

    /// Index of the absorbing sink.
    pub fn sink(&self) -> usize {
        self.rows.len()
    }

    pub fn state(&self, index: usize) -> AugmentedState {
        let w = self.width();
        let (pattern, d) = self.cells[index / w];
        AugmentedState {
            occupancy: pattern,
            displacement: d,
            current: (index % w) as i64 - self.options.jmax,
        }
    }

    pub fn index_of(&self, s: &AugmentedState) -> Option<usize> {
        if s.current.abs() > self.options.jmax {
            return None;
        }
        self.cell_index
            .get(&(s.occupancy, s.displacement))
            .map(|c| c * self.width() + (s.current + self.options.jmax) as usize)
    }

    /// Outgoing transitions of `index` (sink = [`Self::sink`]).
    pub fn transitions(&self, index: usize) -> &[(usize, f64)] {
        &self.rows[index]
    }

    /// `Q(index, index)`.
    pub fn diagonal(&self, index: usize) -> f64 {
        self.diagonal[index]
    }

    /// Uniform over patterns with the origin occupied, `D = J = 0`: the
    /// particle-number conditioning of `ν_ρ*`.
    pub fn initial_tagged_origin(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.state_count() + 1];
        let hits: Vec<usize> = self
            .cells
            .iter()
            .enumerate()
            .filter(|(_, &(p, d))| d == 0 && p & 1 == 1)
            .map(|(c, _)| c * self.width() + self.options.jmax as usize)
            .collect();
        let w = 1.0 / hits.len() as f64;
        for h in hits {
            v[h] = w;
        }
        v
    }

    /// Uniform over all patterns, tagged uniform among the particles and
    /// placed at `D ∈ [0, 2L)`, with `J = 0`.
    pub fn initial_uniform(&self) -> Vec<f64> {
        let ring = self.ring_size() as i64;
        let mut v = vec![0.0; self.state_count() + 1];
        let hits: Vec<usize> = self
            .cells
            .iter()
            .enumerate()
            .filter(|(_, &(_, d))| (0..ring).contains(&d))
            .map(|(c, _)| c * self.width() + self.options.jmax as usize)
            .collect();
        let w = 1.0 / hits.len() as f64;
        for h in hits {
            v[h] = w;
        }
        v
    }

    /// Point mass on one state.
    pub fn point_mass(&self, s: &AugmentedState) -> Result<Vec<f64>> {
        let i = self
            .index_of(s)
            .ok_or_else(|| Error::Data(format!("{s:?} is not a state of this generator")))?;
        let mut v = vec![0.0; self.state_count() + 1];
        v[i] = 1.0;
        Ok(v)
    }
}

/// Generator with the default `Dmax`, state cap and clip tolerance.
pub fn build_generator(half_width: usize, particles: usize, jmax: i64) -> Result<GeneratorMatrix> {
    build_generator_with(
        half_width,
        particles,
        &OracleOptions {
            jmax,
            ..Default::default()
        },
    )
}

pub fn build_generator_with(
    half_width: usize,
    particles: usize,
    options: &OracleOptions,
) -> Result<GeneratorMatrix> {
    let ring = 2 * half_width;
    if half_width < 1 || ring > MAX_RING {
        return Err(param("L", format!("need 2 <= 2L <= {MAX_RING}, got 2L = {ring}")));
    }
    if particles < 1 || particles >= ring {
        return Err(param(
            "particle_count",
            format!("must lie in 1..={}, got {particles}", ring - 1),
        ));
    }
    if options.jmax < 1 {
        return Err(param("Jmax", "must be at least 1"));
    }
    if options.dmax < 1 {
        return Err(param("Dmax", "must be at least 1"));
    }
    let width = (2 * options.jmax + 1) as usize;
    let patterns: Vec<u16> = (0u32..1 << ring)
        .filter(|p| p.count_ones() as usize == particles)
        .map(|p| p as u16)
        .collect();
    let per_d = patterns.len() * particles / ring;
    let states = (2 * options.dmax as usize + 1)
        .saturating_mul(per_d)
        .saturating_mul(width);
    if states > options.state_cap {
        return Err(Error::Capacity {
            states,
            cap: options.state_cap,
        });
    }
    let mut cells = Vec::new();
    for d in -options.dmax..=options.dmax {
        let site = d.rem_euclid(ring as i64) as u32;
        cells.extend(
            patterns
                .iter()
                .filter(|&&p| p >> site & 1 == 1)
                .map(|&p| (p, d)),
        );
    }
    let cell_index: HashMap<(u16, i64), usize> =
        cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = cells.len() * width;
    let sink = n;
    let mut rows = Vec::with_capacity(n);
    let mut diagonal = Vec::with_capacity(n);
    for &(pattern, d) in &cells {
        let tagged = d.rem_euclid(ring as i64) as usize;
        // Moves of (pattern, D) per bond, with the J increment.
        let moves: Vec<(Option<usize>, i64)> = (0..ring)
            .filter_map(|b| {
                let c = (b + 1) % ring;
                let (vb, vc) = (pattern >> b & 1, pattern >> c & 1);
                if vb == vc {
                    return None;
                }
                let swapped = pattern ^ (1 << b) ^ (1 << c);
                let nd = d + (b == tagged) as i64 - (c == tagged) as i64;
                let dj = if b == ring - 1 { 2 * vb as i64 - 1 } else { 0 };
                Some((cell_index.get(&(swapped, nd)).copied(), dj))
            })
            .collect();
        for j in -options.jmax..=options.jmax {
            let mut out = Vec::with_capacity(moves.len());
            for &(cell, dj) in &moves {
                let nj = j + dj;
                let target = match cell {
                    Some(c) if nj.abs() <= options.jmax => c * width + (nj + options.jmax) as usize,
                    _ => sink,
                };
                out.push((target, 0.5));
            }
            diagonal.push(-0.5 * out.len() as f64);
            rows.push(out);
        }
    }
    Ok(GeneratorMatrix {
        half_width,
        particles,
        options: *options,
        cells,
        cell_index,
        rows,
        diagonal,
    })
}

/// Law at time `t` and its marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    /// Joint law over states, with the sink last.
    pub joint: Vec<f64>,
    /// `P(X = x)` for `x ∈ [-Dmax, Dmax]`, index `x + Dmax`.
    pub x_marginal: Vec<f64>,
    /// `P(J = j)` for `j ∈ [-Jmax, Jmax]`, index `j + Jmax`.
    pub j_marginal: Vec<f64>,
    /// Mass in the sink.
    pub clipped: f64,
    /// Number of uniformization steps used.
    pub steps: usize,
}

/// `exp(tQ)ᵀ` applied to `initial` by uniformization.
pub fn distribution_at(gen: &GeneratorMatrix, initial: &[f64], t: f64) -> Result<Distribution> {
    let n = gen.state_count();
    if initial.len() != n + 1 {
        return Err(Error::Data(format!(
            "initial law has {} entries, generator has {}",
            initial.len(),
            n + 1
        )));
    }
    if initial.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Data("initial law has a negative entry".into()));
    }
    let total: f64 = initial.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Data(format!("initial law sums to {total}")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(param("t", format!("must be finite and >= 0, got {t}")));
    }
    let rate = gen.half_width as f64;
    let lambda = rate * t;
    let mut acc = vec![0.0; n + 1];
    let mut v = initial.to_vec();
    let mut next = vec![0.0; n + 1];
    let mut covered = 0.0;
    let mut steps = 0;
    let ln_lambda = lambda.ln();
    let mut ln_fact = 0.0;
    loop {
        let w = if lambda == 0.0 {
            if steps == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            (-lambda + steps as f64 * ln_lambda - ln_fact).exp()
        };
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += w * x;
        }
        covered += w;
        if 1.0 - covered < TRUNCATION && steps as f64 >= lambda {
            break;
        }
        // v ← v (I + Q/rate)
        next.iter_mut().for_each(|x| *x = 0.0);
        next[n] = v[n];
        for (i, row) in gen.rows.iter().enumerate() {
            let p = v[i];
            if p == 0.0 {
                continue;
            }
            next[i] += p * (1.0 + gen.diagonal[i] / rate);
            for &(j, r) in row {
                next[j] += p * r / rate;
            }
        }
        std::mem::swap(&mut v, &mut next);
        steps += 1;
        ln_fact += (steps as f64).ln();
    }
    let (dmax, jmax) = (gen.options.dmax, gen.options.jmax);
    let mut x_marginal = vec![0.0; (2 * dmax + 1) as usize];
    let mut j_marginal = vec![0.0; (2 * jmax + 1) as usize];
    for (i, &p) in acc[..n].iter().enumerate() {
        let s = gen.state(i);
        x_marginal[(s.displacement + dmax) as usize] += p;
        j_marginal[(s.current + jmax) as usize] += p;
    }
    let clipped = acc[n];
    if clipped > gen.options.clip_tolerance {
        return Err(Error::Accuracy {
            clipped,
            tolerance: gen.options.clip_tolerance,
        });
    }
    Ok(Distribution {
        joint: acc,
        x_marginal,
        j_marginal,
        clipped,
        steps,
    })
}

/// Law of the occupation pattern alone, keyed by pattern.
pub fn pattern_marginal(gen: &GeneratorMatrix, dist: &Distribution) -> HashMap<u16, f64> {
    let mut m = HashMap::new();
    for (i, &p) in dist.joint[..gen.state_count()].iter().enumerate() {
        *m.entry(gen.state(i).occupancy).or_insert(0.0) += p;
    }
    m
}

/// Total variation `½ Σ |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    0.5 * (0..n)
        .map(|i| (p.get(i).unwrap_or(&0.0) - q.get(i).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// One cell of the simulator-versus-oracle matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub half_width: usize,
    pub particles: usize,
    pub t: f64,
}

/// Agreement of simulator and oracle on one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub case: OracleCase,
    pub replicas: usize,
    pub tv_x: f64,
    pub tv_j: f64,
    pub clipped: f64,
}

/// The default matrix: `2L ∈ {4, 6}`, every admissible particle count,
/// `t ∈ {0.5, 1, 2}`.
pub fn default_cases() -> Vec<OracleCase> {
    let mut v = Vec::new();
    for half_width in [2, 3] {
        for particles in 1..2 * half_width {
            for t in [0.5, 1.0, 2.0] {
                v.push(OracleCase {
                    half_width,
                    particles,
                    t,
                });
            }
        }
    }
    v
}

/// Runs `replicas` simulations from the fixed-count initial law and compares
/// the empirical marginals of `X(t)` and clipped `J(t)` with the oracle.
pub fn compare_with_simulator(
    case: &OracleCase,
    replicas: usize,
    seed: u64,
    options: &OracleOptions,
) -> Result<OracleComparison> {
    if replicas == 0 {
        return Err(param("replicas", "must be positive"));
    }
    let gen = build_generator_with(case.half_width, case.particles, options)?;
    let exact = distribution_at(&gen, &gen.initial_tagged_origin(), case.t)?;
    let params = SimParams {
        ring_safety_factor: 0.0,
        ..SimParams::new(0.5, case.half_width, case.t, seed)
    };
    let (dmax, jmax) = (options.dmax, options.jmax);
    let samples: Vec<(i64, i64)> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let c = init_fixed_count(case.particles, case.half_width, &mut rng)?;
            let rec = run_stirring_with(c, &params, &mut rng)?;
            let k = rec.len() - 1;
            Ok((rec.x[k], rec.j_origin[k]))
        })
        .collect::<Result<_>>()?;
    let mut xs = vec![0.0; (2 * dmax + 1) as usize];
    let mut js = vec![0.0; (2 * jmax + 1) as usize];
    let w = 1.0 / replicas as f64;
    for (x, j) in samples {
        xs[(x.clamp(-dmax, dmax) + dmax) as usize] += w;
        js[(j.clamp(-jmax, jmax) + jmax) as usize] += w;
    }
    Ok(OracleComparison {
        case: *case,
        replicas,
        tv_x: total_variation(&xs, &exact.x_marginal),
        tv_j: total_variation(&js, &exact.j_marginal),
        clipped: exact.clipped,
    })
}

/// Marginals of `X(t)` and `J(t)` when the initial law is `ν_ρ*` on the
/// ring: a binomial mixture over the particle number, the full ring
/// contributing a point mass at `X = J = 0`.
pub fn bernoulli_star_marginals(
    half_width: usize,
    rho: f64,
    t: f64,
    options: &OracleOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    crate::error::check_density(rho)?;
    let ring = 2 * half_width;
    let mut xs = vec![0.0; (2 * options.dmax + 1) as usize];
    let mut js = vec![0.0; (2 * options.jmax + 1) as usize];
    let others = ring as i32 - 1;
    let mut binom = 1.0;
    for m in 0..=others {
        if m > 0 {
            binom *= (others - m + 1) as f64 / m as f64;
        }
        let w = binom * rho.powi(m) * (1.0 - rho).powi(others - m);
        let k = m as usize + 1;
        if k == ring {
            xs[options.dmax as usize] += w;
            js[options.jmax as usize] += w;
            continue;
        }
        let gen = build_generator_with(half_width, k, options)?;
        let d = distribution_at(&gen, &gen.initial_tagged_origin(), t)?;
        xs.iter_mut().zip(&d.x_marginal).for_each(|(a, b)| *a += w * b);
        js.iter_mut().zip(&d.j_marginal).for_each(|(a, b)| *a += w * b);
    }
    Ok((xs, js))
}
