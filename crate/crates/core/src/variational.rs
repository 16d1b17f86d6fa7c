//! Discretized rate functionals and their minimizers.
//!
//! The unknown is the integrated flux `K(t,u)` on the node grid
//! `(t_i, u_j) = (i dt, -U + j du)`. The functionals are sums of weighted
//! squares of linear stencils of `K` (and of the initial profile `μ₀`):
//!
//! ```text
//! F(K)     = Σ ½ (δ_t K)² du dt + Σ ⅛ (D² K̄)² du dt + Σ ¼ (D⁺ K_T)² du
//! G(K, μ₀) = Σ ½ (δ_t K)² du dt + Σ ⅛ (D² K̄ - D⁻ μ₀)² du dt
//!          + Σ ¼ (D⁺ K_T - μ₀)² du + Σ ¼ μ₀² du
//! ```
//!
//! `δ_t K = (K_{i+1} - K_i)/dt` lives on time-cell midpoints at interior
//! nodes, `K̄ = (K_i + K_{i+1})/2` is the midpoint average, `D²` is the
//! central 3-point second difference at interior nodes, and `D⁺` is the
//! forward difference onto the `nu` cell faces `u_j + du/2`. The initial
//! profile `μ₀` lives on those faces, so `D⁻ D⁺ = D²` holds exactly and
//! the completed squares above equal the expanded forms term by term.
//!
//! Minimization is a convex quadratic program in the free unknowns: every
//! node except `K(0,·)`, the two boundary columns and the constrained
//! node `K(T,0) = α`. It is solved by Jacobi-preconditioned conjugate
//! gradient.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_density, param, Error, Result};

/// Default ratio `U / √T`.
pub const U_WIDTH_FACTOR: f64 = 6.0;
/// Default relative gradient tolerance of the solver.
pub const QP_TOL: f64 = 1e-10;
/// Default iteration cap of the solver.
pub const MAX_ITERATIONS: usize = 100_000;
/// Default fraction of `[0,T]` used for the bulk Euler–Lagrange residual.
pub const BULK_FRACTION: f64 = 0.5;

/// `𝕁(α) = √(2π) α² / (4ρ(1-ρ)√T)`.
pub fn rate_j(alpha: f64, rho: f64, t: f64) -> Result<f64> {
    check_density(rho)?;
    check_horizon(t)?;
    Ok((2.0 * PI).sqrt() * alpha * alpha / (4.0 * rho * (1.0 - rho) * t.sqrt()))
}

/// `𝕀(α) = √(2π) ρ α² / (4(1-ρ)√T)`, equal to `𝕁(ρα)`.
pub fn rate_i(alpha: f64, rho: f64, t: f64) -> Result<f64> {
    check_density(rho)?;
    check_horizon(t)?;
    Ok((2.0 * PI).sqrt() * rho * alpha * alpha / (4.0 * (1.0 - rho) * t.sqrt()))
}

/// Limiting variances `(σ_X², σ_J²)` of `X_t/t^{1/4}` and `J_t/t^{1/4}`.
pub fn sigma_constants(rho: f64) -> Result<(f64, f64)> {
    check_density(rho)?;
    let c = (2.0 / PI).sqrt();
    Ok((c * (1.0 - rho) / rho, c * rho * (1.0 - rho)))
}

/// Gaussian rate `α² / (2σ²√T)` for a given variance constant.
pub fn gaussian_rate(alpha: f64, sigma2: f64, t: f64) -> Result<f64> {
    check_horizon(t)?;
    if !(sigma2 > 0.0) {
        return Err(param("sigma2", "must be positive"));
    }
    Ok(alpha * alpha / (2.0 * sigma2 * t.sqrt()))
}

/// Infimum of `F_T` under `K(0,·)=0, K(T,0)=α`: `(√π/2) α²/√T`.
pub fn f_infimum(alpha: f64, t: f64) -> Result<f64> {
    check_horizon(t)?;
    Ok(PI.sqrt() / 2.0 * alpha * alpha / t.sqrt())
}

/// Infimum of the `G` functional: `ρ(1-ρ)𝕁(α) = √(2π) α² / (4√T)`.
pub fn g_infimum(alpha: f64, t: f64) -> Result<f64> {
    check_horizon(t)?;
    Ok((2.0 * PI).sqrt() / 4.0 * alpha * alpha / t.sqrt())
}

fn check_horizon(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(param("T", format!("must be positive, got {t}")))
    }
}

/// Truncated space-time grid `[0,T] × [-U,U]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub t: f64,
    pub u: f64,
    pub nt: usize,
    pub nu: usize,
}

impl Grid {
    pub fn new(t: f64, u: f64, nt: usize, nu: usize) -> Result<Self> {
        check_horizon(t)?;
        if !(u > 0.0 && u.is_finite()) {
            return Err(param("U", format!("must be positive, got {u}")));
        }
        if nt < 4 || nu < 4 {
            return Err(param("grid", format!("need nt, nu >= 4, got ({nt}, {nu})")));
        }
        Ok(Self { t, u, nt, nu })
    }

    /// Grid with `U = factor · √T`.
    pub fn scaled(t: f64, nt: usize, nu: usize, factor: f64) -> Result<Self> {
        check_horizon(t)?;
        Self::new(t, factor * t.sqrt(), nt, nu)
    }

    /// Grid with the default width `U = 6√T`.
    pub fn standard(t: f64, nt: usize, nu: usize) -> Result<Self> {
        Self::scaled(t, nt, nu, U_WIDTH_FACTOR)
    }

    pub fn dt(&self) -> f64 {
        self.t / self.nt as f64
    }

    pub fn du(&self) -> f64 {
        2.0 * self.u / self.nu as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }

    pub fn space(&self, j: usize) -> f64 {
        -self.u + j as f64 * self.du()
    }

    /// Centre of face `f`, between nodes `f` and `f+1`.
    pub fn face(&self, f: usize) -> f64 {
        -self.u + (f as f64 + 0.5) * self.du()
    }

    pub fn nodes(&self) -> usize {
        (self.nt + 1) * (self.nu + 1)
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.nu + 1) + j
    }

    fn same_as(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Grid(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Integrated flux `K` at the grid nodes, stored time-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub grid: Grid,
    pub k: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            k: vec![0.0; grid.nodes()],
        }
    }

    /// Samples `f(t,u)` at every node, without enforcing the invariants.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut k = Vec::with_capacity(grid.nodes());
        for i in 0..=grid.nt {
            for j in 0..=grid.nu {
                k.push(f(grid.time(i), grid.space(j)));
            }
        }
        Self { grid, k }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.k[self.grid.idx(i, j)]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.grid.nu + 1;
        &self.k[i * w..(i + 1) * w]
    }

    /// Largest violation of `K(0,·) = 0` and `K(·,±U) = 0`.
    pub fn invariant_violation(&self) -> f64 {
        let g = &self.grid;
        let initial = self.row(0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (0..=g.nt).fold(initial, |m, i| {
            m.max(self.at(i, 0).abs()).max(self.at(i, g.nu).abs())
        })
    }

    /// `D⁺K` at time index `i`, on the `nu` faces.
    pub fn face_gradient(&self, i: usize) -> Vec<f64> {
        let du = self.grid.du();
        self.row(i).windows(2).map(|w| (w[1] - w[0]) / du).collect()
    }

    /// Writes `t,u,K` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,u,K")?;
        for i in 0..=self.grid.nt {
            for j in 0..=self.grid.nu {
                writeln!(out, "{},{},{}", self.grid.time(i), self.grid.space(j), self.at(i, j))?;
            }
        }
        Ok(())
    }
}

/// Initial density fluctuation `μ₀` on the `nu` cell faces.
///
/// The faces nearest `±U` sit half a cell inside the boundary; `μ₀` is
/// zero beyond them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialProfile {
    pub grid: Grid,
    pub mu0: Vec<f64>,
}

impl InitialProfile {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            mu0: vec![0.0; grid.nu],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            mu0: (0..grid.nu).map(|j| f(grid.face(j))).collect(),
        }
    }

    /// Writes `u,mu0` rows at face centres.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "u,mu0")?;
        for (f, v) in self.mu0.iter().enumerate() {
            writeln!(out, "{},{}", self.grid.face(f), v)?;
        }
        Ok(())
    }
}

/// Density fluctuation `μ(t_i,·) = μ₀ - D⁺K(t_i,·)` on faces.
pub fn density_at(field: &Field, mu0: &InitialProfile, i: usize) -> Result<Vec<f64>> {
    field.grid.same_as(&mu0.grid)?;
    Ok(mu0
        .mu0
        .iter()
        .zip(field.face_gradient(i))
        .map(|(m, g)| m - g)
        .collect())
}

/// Outcome of a minimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// Discrete minimum.
    pub value: f64,
    pub grid: Grid,
    /// Bulk Euler–Lagrange residual, see [`ElResidual::bulk`].
    pub el_residual: f64,
    /// `[max |K(0,·)|, max |K(·,±U)|, |K(T,0) - α|]`.
    pub constraint_residuals: Vec<f64>,
    /// Continuum infimum the value approximates.
    pub closed_form: f64,
    /// Full Euler–Lagrange report of the minimizer.
    pub euler_lagrange: ElResidual,
    pub iterations: usize,
    /// Relative free-gradient norm at exit.
    pub gradient_norm: f64,
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Minimum admissible `U / √T`.
    pub u_width_factor: f64,
    pub bulk_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: QP_TOL,
            max_iterations: MAX_ITERATIONS,
            u_width_factor: U_WIDTH_FACTOR,
            bulk_fraction: BULK_FRACTION,
        }
    }
}

/// Sparse rows of the residual map, one weight per row.
struct Residuals {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
    weights: Vec<f64>,
    cols: usize,
}

impl Residuals {
    fn push(&mut self, weight: f64, entries: &[(usize, f64)]) {
        for &(c, v) in entries {
            self.indices.push(c);
            self.data.push(v);
        }
        self.indptr.push(self.indices.len());
        self.weights.push(weight);
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.indptr[r], self.indptr[r + 1]);
            *o = self.indices[a..b]
                .iter()
                .zip(&self.data[a..b])
                .map(|(&c, &v)| v * x[c])
                .sum();
        }
    }

    /// `out = 2 Aᵀ W y`.
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &yr) in y.iter().enumerate() {
            let s = 2.0 * self.weights[r] * yr;
            for p in self.indptr[r]..self.indptr[r + 1] {
                out[self.indices[p]] += self.data[p] * s;
            }
        }
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let mut r = vec![0.0; self.weights.len()];
        self.apply(x, &mut r);
        r.iter().zip(&self.weights).map(|(v, w)| w * v * v).sum()
    }

    fn hessian_diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.cols];
        for r in 0..self.weights.len() {
            for p in self.indptr[r]..self.indptr[r + 1] {
                d[self.indices[p]] += 2.0 * self.weights[r] * self.data[p] * self.data[p];
            }
        }
        d
    }

    /// Residual rows of `F` (`with_mu = false`) or `G` over the unknown
    /// vector `[K nodes..., μ₀ faces...]`.
    fn build(grid: &Grid, with_mu: bool) -> Self {
        let (nt, nu) = (grid.nt, grid.nu);
        let (dt, du) = (grid.dt(), grid.du());
        let mu = |f: usize| grid.nodes() + f;
        let mut a = Residuals {
            indptr: vec![0],
            indices: Vec::new(),
            data: Vec::new(),
            weights: Vec::new(),
            cols: grid.nodes() + if with_mu { nu } else { 0 },
        };
        let inv_dt = 1.0 / dt;
        let c2 = 0.5 / (du * du);
        let mut e = Vec::with_capacity(8);
        for i in 0..nt {
            for j in 1..nu {
                a.push(
                    0.5 * du * dt,
                    &[(grid.idx(i + 1, j), inv_dt), (grid.idx(i, j), -inv_dt)],
                );
            }
            for j in 1..nu {
                e.clear();
                for ii in [i, i + 1] {
                    e.push((grid.idx(ii, j - 1), c2));
                    e.push((grid.idx(ii, j), -2.0 * c2));
                    e.push((grid.idx(ii, j + 1), c2));
                }
                if with_mu {
                    e.push((mu(j), -1.0 / du));
                    e.push((mu(j - 1), 1.0 / du));
                }
                a.push(du * dt / 8.0, &e);
            }
        }
        for f in 0..nu {
            e.clear();
            e.push((grid.idx(nt, f + 1), 1.0 / du));
            e.push((grid.idx(nt, f), -1.0 / du));
            if with_mu {
                e.push((mu(f), -1.0));
            }
            a.push(du / 4.0, &e);
        }
        if with_mu {
            for f in 0..nu {
                a.push(du / 4.0, &[(mu(f), 1.0)]);
            }
        }
        a
    }
}

fn field_check(field: &Field, grid: &Grid) -> Result<()> {
    field.grid.same_as(grid)?;
    if field.k.len() != grid.nodes() {
        return Err(Error::Grid(format!(
            "field has {} values, grid has {} nodes",
            field.k.len(),
            grid.nodes()
        )));
    }
    Ok(())
}

fn profile_check(mu0: &InitialProfile, grid: &Grid) -> Result<()> {
    mu0.grid.same_as(grid)?;
    if mu0.mu0.len() != grid.nu {
        return Err(Error::Grid(format!(
            "profile has {} values, grid has {} faces",
            mu0.mu0.len(),
            grid.nu
        )));
    }
    Ok(())
}

/// Discrete `F_T(K)`.
pub fn eval_f(field: &Field, grid: &Grid) -> Result<f64> {
    field_check(field, grid)?;
    let (nt, nu) = (grid.nt, grid.nu);
    let (dt, du) = (grid.dt(), grid.du());
    let mut kinetic = 0.0;
    let mut curvature = 0.0;
    for i in 0..nt {
        let (a, b) = (field.row(i), field.row(i + 1));
        for j in 1..nu {
            kinetic += ((b[j] - a[j]) / dt).powi(2);
            curvature += second_mid(a, b, j, du).powi(2);
        }
    }
    let terminal: f64 = field.face_gradient(nt).iter().map(|g| g * g).sum();
    Ok(0.5 * kinetic * du * dt + 0.125 * curvature * du * dt + 0.25 * terminal * du)
}

/// `D²` of the midpoint average of two time rows at node `j`.
fn second_mid(a: &[f64], b: &[f64], j: usize, du: f64) -> f64 {
    let d2 = |r: &[f64]| (r[j - 1] - 2.0 * r[j] + r[j + 1]) / (du * du);
    0.5 * (d2(a) + d2(b))
}

/// Discrete `ρ(1-ρ) Q(μ)` in its expanded form: the `F` terms plus
/// `⅛(∂_uμ₀)² - ¼ ∂_uμ₀ ∂_u²K` in the bulk and `½μ₀² - ½μ₀ ∂_uK(T,·)` at
/// the terminal time.
///
/// The quadratic form itself does not involve `ρ`; it is validated only.
pub fn eval_g(field: &Field, mu0: &InitialProfile, grid: &Grid, rho: f64) -> Result<f64> {
    check_density(rho)?;
    profile_check(mu0, grid)?;
    let f = eval_f(field, grid)?;
    let (nt, nu) = (grid.nt, grid.nu);
    let (dt, du) = (grid.dt(), grid.du());
    let dmu: Vec<f64> = (1..nu).map(|j| (mu0.mu0[j] - mu0.mu0[j - 1]) / du).collect();
    let mut cross = 0.0;
    for i in 0..nt {
        let (a, b) = (field.row(i), field.row(i + 1));
        for j in 1..nu {
            let m = dmu[j - 1];
            cross += 0.125 * m * m - 0.25 * m * second_mid(a, b, j, du);
        }
    }
    let terminal: f64 = mu0
        .mu0
        .iter()
        .zip(field.face_gradient(nt))
        .map(|(m, g)| 0.5 * m * m - 0.5 * m * g)
        .sum();
    Ok(f + cross * du * dt + terminal * du)
}

fn unknowns(field: &Field, mu0: Option<&InitialProfile>) -> Vec<f64> {
    let mut x = field.k.clone();
    if let Some(m) = mu0 {
        x.extend_from_slice(&m.mu0);
    }
    x
}

/// Gradient of [`eval_f`] with respect to every node value.
pub fn gradient_f(field: &Field, grid: &Grid) -> Result<Field> {
    field_check(field, grid)?;
    let a = Residuals::build(grid, false);
    let x = unknowns(field, None);
    let mut r = vec![0.0; a.weights.len()];
    a.apply(&x, &mut r);
    let mut g = vec![0.0; a.cols];
    a.adjoint(&r, &mut g);
    Ok(Field { grid: *grid, k: g })
}

/// Gradient of [`eval_g`] with respect to every node and face value.
pub fn gradient_g(
    field: &Field,
    mu0: &InitialProfile,
    grid: &Grid,
) -> Result<(Field, InitialProfile)> {
    field_check(field, grid)?;
    profile_check(mu0, grid)?;
    let a = Residuals::build(grid, true);
    let x = unknowns(field, Some(mu0));
    let mut r = vec![0.0; a.weights.len()];
    a.apply(&x, &mut r);
    let mut g = vec![0.0; a.cols];
    a.adjoint(&r, &mut g);
    let mu = g.split_off(grid.nodes());
    Ok((
        Field { grid: *grid, k: g },
        InitialProfile { grid: *grid, mu0: mu },
    ))
}

/// `G` evaluated through its completed-square residual form.
pub fn eval_g_residual_form(field: &Field, mu0: &InitialProfile, grid: &Grid) -> Result<f64> {
    field_check(field, grid)?;
    profile_check(mu0, grid)?;
    Ok(Residuals::build(grid, true).energy(&unknowns(field, Some(mu0))))
}

struct Solution {
    x: Vec<f64>,
    iterations: usize,
    gradient_norm: f64,
}

/// Minimizes `Σ w (A x)²` over `x` with the entries where `free` is false
/// held at their values in `x0`.
fn solve(a: &Residuals, x0: Vec<f64>, free: &[bool], opts: &SolverOptions) -> Result<Solution> {
    let n = a.cols;
    let rows = a.weights.len();
    let mut tmp = vec![0.0; rows];
    let mut hess = |v: &[f64], out: &mut [f64]| {
        a.apply(v, &mut tmp);
        a.adjoint(&tmp, out);
        for (o, &f) in out.iter_mut().zip(free) {
            if !f {
                *o = 0.0;
            }
        }
    };
    let mut x = x0;
    // Residual of the normal equations: r = -∇ on the free set.
    let mut r = vec![0.0; n];
    hess(&x, &mut r);
    r.iter_mut().for_each(|v| *v = -*v);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let b_norm = norm(&r);
    if b_norm == 0.0 {
        return Ok(Solution {
            x,
            iterations: 0,
            gradient_norm: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .hessian_diagonal()
        .iter()
        .zip(free)
        .map(|(&d, &f)| if f && d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut hp = vec![0.0; n];
    let mut rel = 1.0;
    for it in 1..=opts.max_iterations {
        hess(&p, &mut hp);
        let step = rz / p.iter().zip(&hp).map(|(a, b)| a * b).sum::<f64>();
        for k in 0..n {
            x[k] += step * p[k];
            r[k] -= step * hp[k];
        }
        rel = norm(&r) / b_norm;
        if rel <= opts.tol {
            return Ok(Solution {
                x,
                iterations: it,
                gradient_norm: rel,
            });
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::Solver {
        iterations: opts.max_iterations,
        residual: rel,
    })
}

fn check_problem(t: f64, grid: &Grid, opts: &SolverOptions) -> Result<()> {
    check_horizon(t)?;
    if (grid.t - t).abs() > 1e-12 * t {
        return Err(Error::Grid(format!("grid horizon {} differs from T = {t}", grid.t)));
    }
    if !grid.nu.is_multiple_of(2) {
        return Err(param("nu", "must be even so that u = 0 is a node"));
    }
    if grid.u < opts.u_width_factor * t.sqrt() * (1.0 - 1e-12) {
        return Err(param(
            "U",
            format!(
                "{} is narrower than {} * sqrt(T)",
                grid.u, opts.u_width_factor
            ),
        ));
    }
    Ok(())
}

fn free_mask(grid: &Grid, with_mu: bool) -> Vec<bool> {
    let mut free = vec![false; grid.nodes() + if with_mu { grid.nu } else { 0 }];
    for i in 1..=grid.nt {
        for j in 1..grid.nu {
            free[grid.idx(i, j)] = true;
        }
    }
    free[grid.idx(grid.nt, grid.nu / 2)] = false;
    for f in free.iter_mut().skip(grid.nodes()) {
        *f = true;
    }
    free
}

fn report(
    field: &Field,
    value: f64,
    alpha: f64,
    closed_form: f64,
    sol: &Solution,
    opts: &SolverOptions,
) -> Result<RateReport> {
    let g = field.grid;
    let el = euler_lagrange_residual_within(field, &g, opts.bulk_fraction)?;
    let initial = field.row(0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let boundary = (0..=g.nt).fold(0.0f64, |m, i| {
        m.max(field.at(i, 0).abs()).max(field.at(i, g.nu).abs())
    });
    Ok(RateReport {
        value,
        grid: g,
        el_residual: el.bulk,
        constraint_residuals: vec![initial, boundary, (field.at(g.nt, g.nu / 2) - alpha).abs()],
        closed_form,
        euler_lagrange: el,
        iterations: sol.iterations,
        gradient_norm: sol.gradient_norm,
    })
}

/// Minimizes the discrete `F_T` subject to `K(T,0) = α`.
pub fn minimize_f(alpha: f64, t: f64, grid: &Grid) -> Result<(RateReport, Field)> {
    minimize_f_with(alpha, t, grid, &SolverOptions::default())
}

pub fn minimize_f_with(
    alpha: f64,
    t: f64,
    grid: &Grid,
    opts: &SolverOptions,
) -> Result<(RateReport, Field)> {
    check_problem(t, grid, opts)?;
    let a = Residuals::build(grid, false);
    let mut x0 = vec![0.0; a.cols];
    x0[grid.idx(grid.nt, grid.nu / 2)] = alpha;
    let sol = solve(&a, x0, &free_mask(grid, false), opts)?;
    let field = Field {
        grid: *grid,
        k: sol.x.clone(),
    };
    let value = eval_f(&field, grid)?;
    let rep = report(&field, value, alpha, f_infimum(alpha, t)?, &sol, opts)?;
    Ok((rep, field))
}

/// Jointly minimizes the discrete `G` over `(K, μ₀)` subject to
/// `K(T,0) = α`. The value estimates `ρ(1-ρ)𝕁(α)`.
pub fn minimize_g(
    alpha: f64,
    t: f64,
    rho: f64,
    grid: &Grid,
) -> Result<(RateReport, Field, InitialProfile)> {
    minimize_g_with(alpha, t, rho, grid, &SolverOptions::default())
}

pub fn minimize_g_with(
    alpha: f64,
    t: f64,
    rho: f64,
    grid: &Grid,
    opts: &SolverOptions,
) -> Result<(RateReport, Field, InitialProfile)> {
    check_density(rho)?;
    check_problem(t, grid, opts)?;
    let a = Residuals::build(grid, true);
    let mut x0 = vec![0.0; a.cols];
    x0[grid.idx(grid.nt, grid.nu / 2)] = alpha;
    let sol = solve(&a, x0, &free_mask(grid, true), opts)?;
    let mut k = sol.x.clone();
    let mu = k.split_off(grid.nodes());
    let field = Field { grid: *grid, k };
    let profile = InitialProfile { grid: *grid, mu0: mu };
    let value = eval_g(&field, &profile, grid, rho)?;
    let rep = report(&field, value, alpha, g_infimum(alpha, t)?, &sol, opts)?;
    Ok((rep, field, profile))
}

/// Builds `(K̃, μ̃₀)` on the full horizon from a minimizer over half of it.
///
/// With `m` time cells in `k_half`, `grid` must have the same spatial
/// discretization, `2m` time cells and twice the horizon. Then
/// `K̃_i = K_m - K_{m-i}` for `i <= m`, `K̃_i = K_m + K_{i-m}` after, and
/// `μ̃₀ = D⁺K_m`.
pub fn construct_reflected_minimizer(
    k_half: &Field,
    grid: &Grid,
) -> Result<(Field, InitialProfile)> {
    let h = k_half.grid;
    let m = h.nt;
    if grid.nt != 2 * m
        || grid.nu != h.nu
        || (grid.u - h.u).abs() > 1e-12 * h.u
        || (grid.t - 2.0 * h.t).abs() > 1e-12 * grid.t
    {
        return Err(Error::Grid(format!(
            "full grid {grid:?} is not the doubling of {h:?}"
        )));
    }
    let w = grid.nu + 1;
    let top = k_half.row(m);
    let mut k = Vec::with_capacity(grid.nodes());
    for i in 0..=2 * m {
        if i <= m {
            let r = k_half.row(m - i);
            k.extend((0..w).map(|j| top[j] - r[j]));
        } else {
            let r = k_half.row(i - m);
            k.extend((0..w).map(|j| top[j] + r[j]));
        }
    }
    let mu0 = k_half.face_gradient(m);
    Ok((
        Field { grid: *grid, k },
        InitialProfile { grid: *grid, mu0 },
    ))
}

/// Residuals of the Euler–Lagrange system `¼∂_u⁴K = ∂_t²K` with the
/// terminal conditions `∂_u²K(T,·) = 0` and `∂_tK(T,·) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElResidual {
    /// Max of `|¼D⁴K - D_t²K|` over interior nodes with `t <= bulk_fraction · T`.
    pub bulk: f64,
    /// The same maximum over every interior node.
    pub full: f64,
    /// Max of `|∂_tK(T,·)|` with the one-sided second-order stencil.
    pub terminal_dt: f64,
    /// Max of `|D²K(T,·)|` over interior nodes.
    pub terminal_uu: f64,
}

/// Euler–Lagrange residual with the default bulk region.
pub fn euler_lagrange_residual(field: &Field, grid: &Grid) -> Result<ElResidual> {
    euler_lagrange_residual_within(field, grid, BULK_FRACTION)
}

/// The interior stencil uses the 5-point `D⁴` in space at `2 <= j <= nu-2`
/// and the 3-point `D_t²` at `1 <= i <= nt-1`. The flux singularity at
/// `(T,0)` makes the full maximum grow under refinement, so convergence
/// is judged on the bulk region.
pub fn euler_lagrange_residual_within(
    field: &Field,
    grid: &Grid,
    bulk_fraction: f64,
) -> Result<ElResidual> {
    field_check(field, grid)?;
    if grid.nt < 8 || grid.nu < 8 {
        return Err(param("grid", "Euler–Lagrange residual needs nt, nu >= 8"));
    }
    if !(bulk_fraction > 0.0 && bulk_fraction <= 1.0) {
        return Err(param("bulk_fraction", "must lie in (0, 1]"));
    }
    let (nt, nu) = (grid.nt, grid.nu);
    let (dt, du) = (grid.dt(), grid.du());
    let (mut bulk, mut full) = (0.0f64, 0.0f64);
    for i in 1..nt {
        let (p, c, n) = (field.row(i - 1), field.row(i), field.row(i + 1));
        let in_bulk = grid.time(i) <= bulk_fraction * grid.t * (1.0 + 1e-12);
        for j in 2..nu - 1 {
            let d4 = (c[j - 2] - 4.0 * c[j - 1] + 6.0 * c[j] - 4.0 * c[j + 1] + c[j + 2])
                / du.powi(4);
            let dtt = (n[j] - 2.0 * c[j] + p[j]) / (dt * dt);
            let r = (0.25 * d4 - dtt).abs();
            full = full.max(r);
            if in_bulk {
                bulk = bulk.max(r);
            }
        }
    }
    let (a, b, c) = (field.row(nt - 2), field.row(nt - 1), field.row(nt));
    let terminal_dt = (0..=nu)
        .map(|j| ((3.0 * c[j] - 4.0 * b[j] + a[j]) / (2.0 * dt)).abs())
        .fold(0.0, f64::max);
    let terminal_uu = (1..nu)
        .map(|j| ((c[j - 1] - 2.0 * c[j] + c[j + 1]) / (du * du)).abs())
        .fold(0.0, f64::max);
    Ok(ElResidual {
        bulk,
        full,
        terminal_dt,
        terminal_uu,
    })
}

/// `∂_uH = [ρ(1-ρ)]⁻¹ (J + ½∂_uμ)` on time-cell midpoints at interior
/// nodes, with `J = δ_tK` and `∂_uμ = D⁻μ₀ - D²K̄`. Row-major in
/// `(i, j-1)` for `i < nt`, `1 <= j < nu`.
pub fn control_gradient(field: &Field, mu0: &InitialProfile, rho: f64) -> Result<Vec<f64>> {
    check_density(rho)?;
    let grid = field.grid;
    profile_check(mu0, &grid)?;
    let (dt, du) = (grid.dt(), grid.du());
    let chi = rho * (1.0 - rho);
    let mut out = Vec::with_capacity(grid.nt * (grid.nu - 1));
    for i in 0..grid.nt {
        let (a, b) = (field.row(i), field.row(i + 1));
        for j in 1..grid.nu {
            let flux = (b[j] - a[j]) / dt;
            let dmu = (mu0.mu0[j] - mu0.mu0[j - 1]) / du - second_mid(a, b, j, du);
            out.push((flux + 0.5 * dmu) / chi);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Grid {
        Grid::standard(1.0, 8, 16).unwrap()
    }

    #[test]
    fn closed_forms() {
        let s = (2.0 * PI).sqrt();
        assert_eq!(rate_j(0.0, 0.5, 1.0).unwrap(), 0.0);
        assert!((rate_j(1.0, 0.5, 1.0).unwrap() - s).abs() < 1e-14);
        assert!((rate_j(1.0, 0.5, 1.0).unwrap() - 2.50663).abs() < 1e-5);
        assert!((rate_i(1.0, 0.5, 1.0).unwrap() - 0.62666).abs() < 1e-5);
        let (sx, sj) = sigma_constants(0.5).unwrap();
        assert!((sj - 0.19947).abs() < 1e-5);
        assert!((sx - 0.79788).abs() < 1e-5);
        assert!((rate_j(1.0, 0.5, 1.0).unwrap() - 1.0 / (2.0 * sj)).abs() < 1e-14);
        assert!(rate_j(1.0, 0.0, 1.0).is_err());
        assert!(rate_i(1.0, 0.5, 0.0).is_err());
        assert!(sigma_constants(1.0).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(1.0, 6.0, 3, 16).is_err());
        assert!(Grid::new(0.0, 6.0, 8, 16).is_err());
        assert!(Grid::new(1.0, -1.0, 8, 16).is_err());
        let g = small();
        assert_eq!(g.space(0), -6.0);
        assert_eq!(g.space(16), 6.0);
        assert_eq!(g.space(8), 0.0);
        assert_eq!(g.face(0), -6.0 + 0.375);
    }

    #[test]
    fn zero_fields() {
        let g = small();
        let k = Field::zeros(g);
        let m = InitialProfile::zeros(g);
        assert_eq!(eval_f(&k, &g).unwrap(), 0.0);
        assert_eq!(eval_g(&k, &m, &g, 0.3).unwrap(), 0.0);
        let el = euler_lagrange_residual(&k, &g).unwrap();
        assert_eq!((el.bulk, el.full, el.terminal_dt, el.terminal_uu), (0.0, 0.0, 0.0, 0.0));
    }

    /// `K = t φ(u)` with `φ` the hat of height 1 at node `c`.
    #[test]
    fn separable_hat_field_by_hand() {
        let g = small();
        let (dt, du, c) = (g.dt(), g.du(), 8);
        let mut k = Field::zeros(g);
        for i in 0..=g.nt {
            k.k[g.idx(i, c)] = g.time(i);
        }
        // Kinetic: one node with δ_t K = 1 in each of nt cells.
        let kinetic = 0.5 * g.nt as f64 * du * dt;
        // Curvature: D²φ = (-2, 1, 1)/du² at (c, c±1), midpoint t̄ = (i+½)dt.
        let tbar2: f64 = (0..g.nt).map(|i| ((i as f64 + 0.5) * dt).powi(2)).sum();
        let curvature = 0.125 * 6.0 / du.powi(4) * tbar2 * du * dt;
        // Terminal: D⁺K = ±T/du on two faces.
        let terminal = 0.25 * 2.0 / (du * du) * du;
        let expected = kinetic + curvature + terminal;
        let v = eval_f(&k, &g).unwrap();
        assert!((v - expected).abs() < 1e-12 * expected, "{v} vs {expected}");
    }

    #[test]
    fn terminal_time_residual_of_t_squared() {
        for t in [1.0, 2.5] {
            let g = Grid::standard(t, 10, 12).unwrap();
            let k = Field::from_fn(g, |s, _| s * s);
            let el = euler_lagrange_residual(&k, &g).unwrap();
            assert!((el.terminal_dt - 2.0 * t).abs() < 1e-12 * t);
            assert_eq!(el.terminal_uu, 0.0);
        }
        let coarse = Grid::standard(1.0, 4, 8).unwrap();
        assert!(euler_lagrange_residual(&Field::zeros(coarse), &coarse).is_err());
    }

    #[test]
    fn g_reduces_to_f_and_forms_agree() {
        let g = small();
        let k = Field::from_fn(g, |t, u| t * (1.0 - u * u / 36.0) * (u * 0.7).cos());
        let zero = InitialProfile::zeros(g);
        assert_eq!(eval_g(&k, &zero, &g, 0.4).unwrap(), eval_f(&k, &g).unwrap());
        let mu = InitialProfile::from_fn(g, |u| (-u * u).exp() * (1.0 + u));
        let a = eval_g(&k, &mu, &g, 0.4).unwrap();
        let b = eval_g_residual_form(&k, &mu, &g).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let g = small();
        let other = Grid::standard(1.0, 8, 18).unwrap();
        let k = Field::zeros(other);
        assert!(matches!(eval_f(&k, &g), Err(Error::Grid(_))));
        assert!(matches!(
            eval_g(&Field::zeros(g), &InitialProfile::zeros(other), &g, 0.5),
            Err(Error::Grid(_))
        ));
        assert!(minimize_f(1.0, 2.0, &g).is_err());
        assert!(minimize_f(1.0, 1.0, &Grid::new(1.0, 3.0, 8, 16).unwrap()).is_err());
        assert!(minimize_f(1.0, 1.0, &Grid::standard(1.0, 8, 15).unwrap()).is_err());
    }

    #[test]
    fn zero_alpha_gives_zero_minimizer() {
        let g = small();
        let (r, k) = minimize_f(0.0, 1.0, &g).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(k.k.iter().all(|&v| v == 0.0));
        let (r, k, m) = minimize_g(0.0, 1.0, 0.5, &g).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(k.k.iter().all(|&v| v == 0.0) && m.mu0.iter().all(|&v| v == 0.0));
        let full = Grid::new(2.0, 6.0, 16, 16).unwrap();
        let (kt, mt) = construct_reflected_minimizer(&k, &full).unwrap();
        assert!(kt.k.iter().all(|&v| v == 0.0) && mt.mu0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constraints_hold_and_sign_flips() {
        let g = Grid::standard(1.0, 16, 32).unwrap();
        let (r, k) = minimize_f(1.0, 1.0, &g).unwrap();
        assert!(r.constraint_residuals.iter().all(|&c| c == 0.0));
        assert!(k.invariant_violation() == 0.0);
        let (rn, kn) = minimize_f(-1.0, 1.0, &g).unwrap();
        assert!((rn.value - r.value).abs() < 1e-12 * r.value);
        for (a, b) in k.k.iter().zip(&kn.k) {
            assert!((a + b).abs() < 1e-12);
        }
        assert!(r.gradient_norm <= QP_TOL);
    }

    #[test]
    fn iteration_cap_is_an_error() {
        let g = Grid::standard(1.0, 16, 32).unwrap();
        let opts = SolverOptions {
            max_iterations: 3,
            ..Default::default()
        };
        assert!(matches!(
            minimize_f_with(1.0, 1.0, &g, &opts),
            Err(Error::Solver { iterations: 3, .. })
        ));
    }

    #[test]
    fn reflected_structure() {
        let half = Grid::scaled(0.5, 8, 16, 6.0 * 2f64.sqrt()).unwrap();
        let full = Grid::standard(1.0, 16, 16).unwrap();
        let (_, kh) = minimize_f(0.5, 0.5, &half).unwrap();
        let (kt, mt) = construct_reflected_minimizer(&kh, &full).unwrap();
        assert_eq!(kt.row(0).iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
        assert!((kt.at(16, 8) - 1.0).abs() < 1e-12);
        let mid = density_at(&kt, &mt, 8).unwrap();
        assert!(mid.iter().all(|v| v.abs() < 1e-12));
        for s in 0..=8 {
            let a = density_at(&kt, &mt, 8 - s).unwrap();
            let b = density_at(&kt, &mt, 8 + s).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x + y).abs() < 1e-12);
            }
        }
        // D⁺K̃(T,·) = 2μ̃₀ pointwise.
        for (d, m) in kt.face_gradient(16).iter().zip(&mt.mu0) {
            assert!((d - 2.0 * m).abs() < 1e-12);
        }
        let gv = eval_g(&kt, &mt, &full, 0.5).unwrap();
        let fv = eval_f(&kh, &half).unwrap();
        assert!((gv - 2.0 * fv).abs() < 1e-12 * gv);
        assert!(construct_reflected_minimizer(&kh, &Grid::standard(1.0, 14, 16).unwrap()).is_err());
    }

    #[test]
    fn control_gradient_shape() {
        let g = small();
        let k = Field::from_fn(g, |t, u| t * (-u * u).exp());
        let m = InitialProfile::zeros(g);
        let h = control_gradient(&k, &m, 0.5).unwrap();
        assert_eq!(h.len(), g.nt * (g.nu - 1));
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn csv_dump() {
        let g = small();
        let k = Field::from_fn(g, |t, u| t + u);
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + g.nodes());
        assert!(text.starts_with("t,u,K\n0,-6,-6\n"));
        let mut buf = Vec::new();
        InitialProfile::zeros(g).write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + g.nu);
    }
}
