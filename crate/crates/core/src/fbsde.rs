//! Monte Carlo realisation of the doubly backward SDE along the backward
//! characteristic `X^S(t, x) = x + W(S) - W(t)`.
//!
//! Two routes produce `(y, z)`: the grid route reads `psi^k` from the SHE
//! solver along the characteristic, the bridge route evaluates the
//! Feynman–Kac formula with Brownian bridges against the same frozen noise.
//! The discrete SHE step is exactly the one-step Feynman–Kac kernel, so the
//! routes differ only by spatial discretisation and Monte Carlo error.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{dx_central, Field, FieldTrajectory, SpaceGrid, TimeGrid};
use crate::mollifier::Mollifier;
use crate::noise::{pair_with_mollifier, NoiseRealization, PointKernel};
use crate::quadrature::gauss_hermite;
use crate::rng::{CounterNormals, StreamDomain};
use crate::solvers::{hopf_cole, she_solve_with, SolverOptions};
use crate::stats::{cluster_regression, mean, pairwise_sum, variance, ClusterAccum, RegressionStat};
use crate::stochastic::{backward_integral, time_reverse, DiscretePath, Partition, ReversalMode};

/// The auxiliary Brownian motion `W`, drawn from its own stream family.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverPath {
    seed: u64,
    stream: u64,
    w: DiscretePath,
}

impl DriverPath {
    pub fn sample(seed: u64, stream: u64, time: TimeGrid) -> Self {
        let mut normals = CounterNormals::new(seed, StreamDomain::Driver, stream);
        Self {
            seed,
            stream,
            w: DiscretePath::brownian(time, 1.0, &mut normals),
        }
    }

    pub fn from_path(seed: u64, stream: u64, w: DiscretePath) -> Result<Self> {
        if w.value(0) != 0.0 {
            return Err(Error::Domain("driver must start at W(0) = 0".into()));
        }
        Ok(Self { seed, stream, w })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn stream(&self) -> u64 {
        self.stream
    }
    pub fn w(&self) -> &DiscretePath {
        &self.w
    }
    pub fn time(&self) -> &TimeGrid {
        self.w.time()
    }

    /// The same path observed on every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            w: self.w.restrict(&Partition::uniform(self.w.n_steps(), factor)?)?,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardCharacteristic {
    x: f64,
    x_path: DiscretePath,
}

impl BackwardCharacteristic {
    pub fn new(x: f64, driver: &DriverPath) -> Self {
        let w = driver.w();
        let ws = w.last();
        Self {
            x,
            // subtract first so X(S) = x holds exactly
            x_path: w.map(|wt| x + (ws - wt)),
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn path(&self) -> &DiscretePath {
        &self.x_path
    }
    pub fn at(&self, j: usize) -> f64 {
        self.x_path.value(j)
    }
}

/// Dense noise with a point evaluator for `Delta B^k_j(x)` at any `x`.
#[derive(Clone, Debug)]
pub struct FrozenNoise {
    noise: NoiseRealization,
    mollifier: Mollifier,
    kernel: PointKernel,
    scale: f64,
}

impl FrozenNoise {
    pub fn new(noise: &NoiseRealization, m: &Mollifier) -> Result<Self> {
        let kernel = PointKernel::new(m, noise.space())?;
        Ok(Self {
            noise: noise.materialize(),
            mollifier: m.clone(),
            kernel,
            scale: (noise.time().dt() * noise.space().dx()).sqrt(),
        })
    }

    pub fn noise(&self) -> &NoiseRealization {
        &self.noise
    }
    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }
    pub fn time(&self) -> &TimeGrid {
        self.noise.time()
    }
    pub fn space(&self) -> &SpaceGrid {
        self.noise.space()
    }

    /// `Delta B^k_j(x) = <zeta^k_x, B_{t_{j+1}} - B_{t_j}>`.
    #[inline]
    pub fn increment_at(&self, j: usize, x: f64) -> f64 {
        match self.noise.dense_rows() {
            Some(rows) => {
                let n = self.noise.space().n_points();
                self.scale * self.kernel.dot(&rows[j * n..(j + 1) * n], x)
            }
            None => 0.0,
        }
    }
}

/// `Z^k(t, x) = int_0^t <zeta^k_{X^S(r, x)}, dB_r>`, left-endpoint sums.
#[derive(Clone, Debug, PartialEq)]
pub struct ZFunctional {
    pub z_path: DiscretePath,
}

pub fn build_z(frozen: &FrozenNoise, ch: &BackwardCharacteristic) -> Result<ZFunctional> {
    frozen.time().check_same(ch.path().time())?;
    let n = frozen.time().n_steps();
    let inc: Vec<f64> = (0..n).map(|j| frozen.increment_at(j, ch.at(j))).collect();
    Ok(ZFunctional {
        z_path: DiscretePath::from_increments(*frozen.time(), 0.0, &inc)?,
    })
}

/// A Brownian bridge from `mu` at time 0 to `nu` at time `t`, observed on
/// `n` equal steps, with the value of its noise functional once computed.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSample {
    pub mu: f64,
    pub nu: f64,
    pub t: f64,
    pub path: Vec<f64>,
    pub functional: Option<f64>,
}

fn fill_bridge(mu: f64, nu: f64, t: f64, normals: &mut CounterNormals, path: &mut [f64]) {
    let n = path.len() - 1;
    let sd = (t / n as f64).sqrt();
    path[0] = 0.0;
    for l in 1..=n {
        path[l] = path[l - 1] + sd * normals.next_normal();
    }
    let end = path[n];
    for (l, p) in path.iter_mut().enumerate() {
        let r = l as f64 / n as f64;
        *p = mu + (nu - mu) * r + *p - r * end;
    }
    path[0] = mu;
    path[n] = nu;
}

/// `omega(r) = mu + (nu - mu) r/t + B(r) - (r/t) B(t)` with `B` a fresh
/// discrete Brownian motion from the bridge stream `(seed, stream)`.
pub fn sample_bridge(mu: f64, nu: f64, t: f64, n_steps: usize, seed: u64, stream: u64) -> Result<BridgeSample> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("bridge horizon must be positive, got {t}")));
    }
    if n_steps == 0 {
        return Err(Error::Shape("bridge needs at least one step".into()));
    }
    let mut path = vec![0.0; n_steps + 1];
    fill_bridge(
        mu,
        nu,
        t,
        &mut CounterNormals::new(seed, StreamDomain::Bridge, stream),
        &mut path,
    );
    Ok(BridgeSample {
        mu,
        nu,
        t,
        path,
        functional: None,
    })
}

/// `M_omega = sum_j Delta B^k_j(omega(t_j))` over the bridge's steps.
pub fn bridge_functional(omega: &BridgeSample, frozen: &FrozenNoise) -> Result<f64> {
    let n = omega.path.len() - 1;
    let dt = frozen.time().dt();
    if n > frozen.time().n_steps() || (omega.t - n as f64 * dt).abs() > 1e-9 * omega.t.max(1.0) {
        return Err(Error::Shape(format!(
            "bridge with {n} steps over {} does not align with noise steps of {dt}",
            omega.t
        )));
    }
    Ok(functional_along(frozen, &omega.path[..n], 0.0))
}

#[inline]
fn functional_along(frozen: &FrozenNoise, nodes: &[f64], shift: f64) -> f64 {
    nodes
        .iter()
        .enumerate()
        .map(|(j, &w)| frozen.increment_at(j, w + shift))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FkOptions {
    pub n_bridges: usize,
    pub gh_nodes: usize,
    /// Endpoint window half-width in units of `sqrt(t)`.
    pub window_sds: f64,
    pub seed: u64,
}

impl Default for FkOptions {
    fn default() -> Self {
        Self {
            n_bridges: 10_000,
            gh_nodes: 64,
            window_sds: 6.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FkEstimate {
    pub value: f64,
    pub se: f64,
    pub n_samples: usize,
}

struct Stratum {
    weight: f64,
    y: f64,
    /// `samples[b * n_offsets + o]`
    samples: Vec<f64>,
}

/// Stratified bridge samples of `exp(-M - C t / 2)` for each spatial offset,
/// all offsets sharing the same bridge shapes.
fn fk_strata(frozen: &FrozenNoise, j: usize, gamma: f64, offsets: &[f64], opts: &FkOptions) -> Result<Vec<Stratum>> {
    if opts.n_bridges < 100 {
        return Err(Error::Undersampled(format!(
            "n_bridges = {} is below 100",
            opts.n_bridges
        )));
    }
    let t = frozen.time().t(j);
    let half = opts.window_sds * t.sqrt();
    let max_off = offsets.iter().fold(0.0f64, |a, o| a.max(o.abs()));
    if half + max_off >= frozen.space().half_length() {
        return Err(Error::Window(format!(
            "endpoint window {half:.3} at t = {t} does not fit in the domain half-length {}",
            frozen.space().half_length()
        )));
    }
    let (xs, ws) = gauss_hermite(opts.gh_nodes);
    let scale = (2.0 * t).sqrt();
    let norm = std::f64::consts::PI.sqrt();
    let kept: Vec<(usize, f64, f64)> = xs
        .iter()
        .zip(&ws)
        .enumerate()
        .filter(|(_, (x, _))| (scale * **x).abs() <= half)
        .map(|(i, (x, w))| (i, gamma + scale * x, w / norm))
        .collect();
    let total: f64 = kept.iter().map(|k| k.2).sum();
    let comp = (-0.5 * frozen.mollifier().ck0() * t).exp();
    let no = offsets.len();
    Ok(kept
        .par_iter()
        .map(|&(i, y, w)| {
            let nb = ((opts.n_bridges as f64 * w / total).round() as usize).max(2);
            let mut samples = Vec::with_capacity(nb * no);
            let mut path = vec![0.0; j + 1];
            for b in 0..nb {
                let stream = ((i as u64) << 32) | b as u64;
                fill_bridge(
                    y,
                    gamma,
                    t,
                    &mut CounterNormals::new(opts.seed, StreamDomain::Bridge, stream),
                    &mut path,
                );
                for &o in offsets {
                    samples.push((-functional_along(frozen, &path[..j], o)).exp() * comp);
                }
            }
            Stratum { weight: w, y, samples }
        })
        .collect())
}

/// Estimate and standard error of `sum_o c_o u(gamma + offset_o)`.
fn combine(strata: &[Stratum], offsets: &[f64], coef: &[f64], u0: &(dyn Fn(f64) -> f64 + Sync)) -> FkEstimate {
    let no = offsets.len();
    let mut parts = Vec::with_capacity(strata.len());
    let mut var_parts = Vec::with_capacity(strata.len());
    let mut n = 0;
    for s in strata {
        let u0s: Vec<f64> = offsets.iter().map(|o| u0(s.y + o)).collect();
        let vals: Vec<f64> = s
            .samples
            .chunks_exact(no)
            .map(|c| (0..no).map(|o| coef[o] * u0s[o] * c[o]).sum())
            .collect();
        n += vals.len();
        parts.push(s.weight * mean(&vals));
        var_parts.push(s.weight * s.weight * variance(&vals) / vals.len() as f64);
    }
    FkEstimate {
        value: pairwise_sum(&parts),
        se: pairwise_sum(&var_parts).sqrt(),
        n_samples: n,
    }
}

/// `psi^k_{t_j}(gamma)` by the bridge formula
/// `int u0(y) G_t(gamma - y) E^{y, gamma}[exp(-M - C t / 2)] dy`.
pub fn feynman_kac_at(
    frozen: &FrozenNoise,
    j: usize,
    gamma: f64,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    opts: &FkOptions,
) -> Result<FkEstimate> {
    if j == 0 {
        return Ok(FkEstimate {
            value: u0(gamma),
            se: 0.0,
            n_samples: 0,
        });
    }
    let strata = fk_strata(frozen, j, gamma, &[0.0], opts)?;
    Ok(combine(&strata, &[0.0], &[1.0], u0))
}

/// `u^k_S(t_j, x)` with `gamma = x + W(S) - W(t_j)` taken from the driver.
pub fn feynman_kac_u(
    j: usize,
    x: f64,
    frozen: &FrozenNoise,
    driver: &DriverPath,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    opts: &FkOptions,
) -> Result<FkEstimate> {
    frozen.time().check_same(driver.time())?;
    let ch = BackwardCharacteristic::new(x, driver);
    feynman_kac_at(frozen, j, ch.at(j), u0, opts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Route {
    #[default]
    Grid,
    Bridge,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Grid => "grid",
            Route::Bridge => "bridge",
        })
    }
}

impl FromStr for Route {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "grid" => Ok(Route::Grid),
            "bridge" => Ok(Route::Bridge),
            other => Err(format!("unknown route `{other}` (expected grid|bridge)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbsdeConfig {
    pub route: Route,
    pub fk: FkOptions,
    /// Offset of the symmetric difference for `z` on the bridge route;
    /// `None` means `1 / (4k)`.
    pub fd_offset: Option<f64>,
    pub solver: SolverOptions,
}

impl Default for FbsdeConfig {
    fn default() -> Self {
        Self {
            route: Route::Grid,
            fk: FkOptions::default(),
            fd_offset: None,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbsdeSolution {
    pub route: Route,
    pub x: f64,
    pub y: DiscretePath,
    pub z: DiscretePath,
    pub u: DiscretePath,
    pub v: DiscretePath,
    pub u_se: Vec<f64>,
    pub z_se: Vec<f64>,
}

impl FbsdeSolution {
    fn assemble(
        route: Route,
        x: f64,
        time: TimeGrid,
        u: Vec<f64>,
        z: Vec<f64>,
        u_se: Vec<f64>,
        z_se: Vec<f64>,
    ) -> Result<Self> {
        if let Some(j) = u.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Undersampled(format!(
                "u estimate {} at node {j} is not positive; increase n_bridges",
                u[j]
            )));
        }
        let y: Vec<f64> = u.iter().map(|v| -v.ln()).collect();
        let v: Vec<f64> = u.iter().zip(&z).map(|(a, b)| a * b).collect();
        Ok(Self {
            route,
            x,
            y: DiscretePath::new(time, y)?,
            z: DiscretePath::new(time, z)?,
            u: DiscretePath::new(time, u)?,
            v: DiscretePath::new(time, v)?,
            u_se,
            z_se,
        })
    }
}

/// The SHE solution with every frame stored, plus `h = -log psi` and its
/// central-difference gradient, shared by all drivers on one noise.
#[derive(Clone, Debug)]
pub struct GridRoute {
    pub psi: FieldTrajectory,
    pub h: FieldTrajectory,
    pub dh: FieldTrajectory,
    ck0: f64,
}

impl GridRoute {
    pub fn new(frozen: &FrozenNoise, u0: &Field, opts: &SolverOptions) -> Result<Self> {
        let m = frozen.mollifier();
        let field = pair_with_mollifier(frozen.noise(), m)?;
        let opts = SolverOptions {
            store_stride: 1,
            ..opts.clone()
        };
        let she = she_solve_with(u0, &field, m, &opts)?;
        let h = hopf_cole(&she)?.trajectory;
        let dh_frames = h.frames().iter().map(dx_central).collect();
        Ok(Self {
            dh: FieldTrajectory::new(*h.time(), dh_frames)?,
            psi: she.trajectory,
            h,
            ck0: m.ck0(),
        })
    }

    pub fn time(&self) -> &TimeGrid {
        self.psi.time()
    }
    pub fn ck0(&self) -> f64 {
        self.ck0
    }

    pub fn evaluate(&self, x: f64, driver: &DriverPath) -> Result<FbsdeSolution> {
        self.time().check_same(driver.time())?;
        let ch = BackwardCharacteristic::new(x, driver);
        let n = self.time().n_steps();
        let u: Vec<f64> = (0..=n).map(|j| self.psi.frame(j).interpolate(ch.at(j))).collect();
        let z: Vec<f64> = (0..=n).map(|j| self.dh.frame(j).interpolate(ch.at(j))).collect();
        FbsdeSolution::assemble(Route::Grid, x, *self.time(), u, z, vec![0.0; n + 1], vec![0.0; n + 1])
    }
}

fn bridge_route(
    x: f64,
    frozen: &FrozenNoise,
    driver: &DriverPath,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    config: &FbsdeConfig,
) -> Result<FbsdeSolution> {
    frozen.time().check_same(driver.time())?;
    let ch = BackwardCharacteristic::new(x, driver);
    let delta = config.fd_offset.unwrap_or(0.25 * frozen.mollifier().support_radius());
    let offsets = [0.0, -delta, delta];
    let n = frozen.time().n_steps();
    let (mut u, mut z, mut u_se, mut z_se) = (vec![], vec![], vec![], vec![]);
    for j in 0..=n {
        let gamma = ch.at(j);
        if j == 0 {
            let (c, m, p) = (u0(gamma), u0(gamma - delta), u0(gamma + delta));
            u.push(c);
            z.push(-(p - m) / (2.0 * delta * c));
            u_se.push(0.0);
            z_se.push(0.0);
            continue;
        }
        let fk = FkOptions {
            seed: crate::rng::child_seed(config.fk.seed, j as u64),
            ..config.fk
        };
        let strata = fk_strata(frozen, j, gamma, &offsets, &fk)?;
        let uc = combine(&strata, &offsets, &[1.0, 0.0, 0.0], u0);
        let diff = combine(&strata, &offsets, &[0.0, -1.0, 1.0], u0);
        let denom = 2.0 * delta * uc.value;
        u.push(uc.value);
        z.push(-diff.value / denom);
        u_se.push(uc.se);
        z_se.push(diff.se / denom.abs());
    }
    FbsdeSolution::assemble(Route::Bridge, x, *frozen.time(), u, z, u_se, z_se)
}

/// `(y, z, u, v)` along the characteristic through `x` for one driver.
pub fn solve_fbsde(
    x: f64,
    frozen: &FrozenNoise,
    driver: &DriverPath,
    u0: &Field,
    config: &FbsdeConfig,
) -> Result<FbsdeSolution> {
    match config.route {
        Route::Grid => GridRoute::new(frozen, u0, &config.solver)?.evaluate(x, driver),
        Route::Bridge => {
            frozen.space().check_same(u0.grid())?;
            let f = |y: f64| u0.interpolate(y);
            bridge_route(x, frozen, driver, &f, config)
        }
    }
}

/// Bridge route with an explicit initial profile.
pub fn solve_fbsde_bridge(
    x: f64,
    frozen: &FrozenNoise,
    driver: &DriverPath,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    config: &FbsdeConfig,
) -> Result<FbsdeSolution> {
    bridge_route(x, frozen, driver, u0, config)
}

/// `R(t) = y(t) - [y(0) - 1/2 int (z^2 - C) dr + Z(t) - int z dW(backward)]`.
pub fn dbsde_residual(sol: &FbsdeSolution, z_fn: &ZFunctional, driver: &DriverPath, ck0: f64) -> Result<DiscretePath> {
    let time = *sol.y.time();
    time.check_same(z_fn.z_path.time())?;
    time.check_same(driver.time())?;
    let bwd = backward_integral(&sol.z, driver.w())?;
    let dt = time.dt();
    let y = sol.y.values();
    let mut drift = 0.0;
    let mut out = Vec::with_capacity(y.len());
    for j in 0..y.len() {
        if j > 0 {
            let zz = sol.z.value(j - 1);
            drift += -0.5 * (zz * zz - ck0) * dt;
        }
        out.push(y[j] - (y[0] + drift + z_fn.z_path.value(j) - bwd.value(j)));
    }
    DiscretePath::new(time, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbsdeStudy {
    pub n_drivers: usize,
    pub n_steps: usize,
    /// `Delta R_j` on `(1, dh_j(X_{j+1}))`, pooled over steps and drivers.
    pub regression: RegressionStat,
    pub terminal: Vec<f64>,
    pub rms_terminal: f64,
}

/// Residual statistics over drivers `0..n_drivers` with the noise frozen.
/// Drivers are sampled on `driver_time` and observed on the noise grid.
pub fn dbsde_study(
    grid: &GridRoute,
    frozen: &FrozenNoise,
    x: f64,
    driver_seed: u64,
    n_drivers: usize,
    driver_time: &TimeGrid,
) -> Result<DbsdeStudy> {
    let n = grid.time().n_steps();
    if !driver_time.n_steps().is_multiple_of(n) {
        return Err(Error::Shape("driver grid must refine the noise grid".into()));
    }
    let factor = driver_time.n_steps() / n;
    let per: Vec<(ClusterAccum, f64)> = (0..n_drivers as u64)
        .into_par_iter()
        .map(|d| -> Result<(ClusterAccum, f64)> {
            let driver = DriverPath::sample(driver_seed, d, *driver_time).coarsen(factor)?;
            let sol = grid.evaluate(x, &driver)?;
            let ch = BackwardCharacteristic::new(x, &driver);
            let zf = build_z(frozen, &ch)?;
            let r = dbsde_residual(&sol, &zf, &driver, grid.ck0())?;
            let mut acc = ClusterAccum::default();
            for j in 0..n {
                let g = grid.dh.frame(j).interpolate(ch.at(j + 1));
                acc.push(g, r.value(j + 1) - r.value(j));
            }
            Ok((acc, r.last()))
        })
        .collect::<Result<_>>()?;
    let clusters: Vec<ClusterAccum> = per.iter().map(|p| p.0).collect();
    let terminal: Vec<f64> = per.iter().map(|p| p.1).collect();
    let sq: Vec<f64> = terminal.iter().map(|r| r * r).collect();
    Ok(DbsdeStudy {
        n_drivers,
        n_steps: n,
        regression: cluster_regression(&clusters),
        rms_terminal: (pairwise_sum(&sq) / sq.len() as f64).sqrt(),
        terminal,
    })
}

/// Discrete `M, E, J, U, V` on the reversed axis `tau = S - t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionRecord {
    pub m: DiscretePath,
    pub e: DiscretePath,
    pub j: DiscretePath,
    pub u: DiscretePath,
    pub v: DiscretePath,
    pub z_rev: DiscretePath,
    pub w_rev: DiscretePath,
    /// `U(tau) - U(S) - int_tau^S U dZ~(backward) + int_tau^S V dW~`.
    pub residual: DiscretePath,
    /// `max |U - E M|`.
    pub product_gap: f64,
}

/// Builds the reversed martingale decomposition along one driver, with
/// `J` from per-step least squares over `branches` antithetic pairs of the
/// next driver increment.
pub fn decomposition_check(
    grid: &GridRoute,
    frozen: &FrozenNoise,
    driver: &DriverPath,
    x: f64,
    branches: usize,
    seed: u64,
) -> Result<DecompositionRecord> {
    if branches == 0 {
        return Err(Error::config("branches", "need at least one antithetic pair"));
    }
    let time = *grid.time();
    time.check_same(driver.time())?;
    let n = time.n_steps();
    let dt = time.dt();
    let ck0 = grid.ck0();
    let ch = BackwardCharacteristic::new(x, driver);
    let zf = build_z(frozen, &ch)?;
    let z_rev = time_reverse(&zf.z_path, ReversalMode::Driver);
    let w_rev = time_reverse(driver.w(), ReversalMode::Driver);
    let sol = grid.evaluate(x, driver)?;
    let u_rev = time_reverse(&sol.u, ReversalMode::Integrand);
    let e: Vec<f64> = (0..=n)
        .map(|i| (-z_rev.value(i) + 0.5 * ck0 * time.t(i)).exp())
        .collect();
    let m: Vec<f64> = u_rev.values().iter().zip(&e).map(|(u, e)| u / e).collect();

    let mut jv = vec![0.0; n + 1];
    let mut normals = CounterNormals::new(seed, StreamDomain::Branch, driver.stream());
    let sd = dt.sqrt();
    for i in 0..n {
        // reversed step i covers original step jo = n - 1 - i
        let jo = n - 1 - i;
        let x_next = ch.at(jo + 1);
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for _ in 0..branches {
            let g = sd * normals.next_normal();
            for dw in [g, -g] {
                let xb = x_next + dw;
                let ub = grid.psi.frame(jo).interpolate(xb);
                let dz_rev = -frozen.increment_at(jo, xb);
                let eb = e[i] * (-dz_rev + 0.5 * ck0 * dt).exp();
                let dm = ub / eb - m[i];
                let dw_rev = -dw;
                sxy += dm * dw_rev;
                sxx += dw_rev * dw_rev;
            }
        }
        jv[i] = sxy / sxx;
    }
    jv[n] = jv[n.saturating_sub(1)];
    let v: Vec<f64> = e.iter().zip(&jv).map(|(e, j)| e * j).collect();

    let dzr = z_rev.increments();
    let dwr = w_rev.increments();
    let uv = u_rev.values();
    let mut res = vec![0.0; n + 1];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        acc += uv[i + 1] * dzr[i] - v[i] * dwr[i];
        res[i] = uv[i] - uv[n] - acc;
    }
    let product_gap = (0..=n).map(|i| (uv[i] - e[i] * m[i]).abs()).fold(0.0, f64::max);
    Ok(DecompositionRecord {
        m: DiscretePath::new(time, m)?,
        e: DiscretePath::new(time, e)?,
        j: DiscretePath::new(time, jv)?,
        u: u_rev,
        v: DiscretePath::new(time, v)?,
        z_rev,
        w_rev,
        residual: DiscretePath::new(time, res)?,
        product_gap,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentProbe {
    pub p: f64,
    pub half: f64,
    pub full: f64,
    pub relative_change: f64,
    pub heavy_tail: bool,
}

/// `E sup_t u^p` from the first half and from all of `sups`; flags a heavy
/// tail when doubling the ensemble moves the estimate by more than half.
pub fn moment_probe(sups: &[f64], p: f64) -> MomentProbe {
    let pw: Vec<f64> = sups.iter().map(|s| s.powf(p)).collect();
    let half = mean(&pw[..pw.len() / 2]);
    let full = mean(&pw);
    let relative_change = ((full - half) / full).abs();
    MomentProbe {
        p,
        half,
        full,
        relative_change,
        heavy_tail: !full.is_finite() || relative_change > 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::heat_semigroup;
    use crate::mollifier::mollifier_new;
    use crate::noise::sample_noise;
    use crate::stats::MeanSe;
    use crate::stochastic::quadratic_variation;

    fn small() -> (SpaceGrid, TimeGrid, Mollifier) {
        (
            SpaceGrid::new(8.0, 256).unwrap(),
            TimeGrid::new(1.0, 20).unwrap(),
            mollifier_new(2).unwrap(),
        )
    }

    #[test]
    fn characteristic_endpoints_are_exact() {
        let (_, t, _) = small();
        let d = DriverPath::sample(3, 0, t);
        let ch = BackwardCharacteristic::new(0.37, &d);
        assert_eq!(ch.at(20), 0.37);
        assert_eq!(ch.at(0), 0.37 + d.w().last());
        assert_eq!(d.w().value(0), 0.0);
    }

    #[test]
    fn driver_coarsening_keeps_nodes() {
        let t = TimeGrid::new(1.0, 8).unwrap();
        let d = DriverPath::sample(1, 2, t);
        let c = d.coarsen(2).unwrap();
        assert_eq!(
            c.w().values(),
            &[
                d.w().value(0),
                d.w().value(2),
                d.w().value(4),
                d.w().value(6),
                d.w().value(8)
            ]
        );
    }

    #[test]
    fn bridge_endpoints_pinned_and_validated() {
        let b = sample_bridge(-0.4, 1.1, 0.7, 13, 9, 0).unwrap();
        assert_eq!(b.path[0], -0.4);
        assert_eq!(b.path[13], 1.1);
        assert!(matches!(sample_bridge(0.0, 0.0, 0.0, 4, 0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn bridge_midpoint_variance_and_mean() {
        let n = 10_000;
        let mids: Vec<f64> = (0..n)
            .map(|s| sample_bridge(0.5, 0.5, 2.0, 8, 4, s).unwrap().path[4])
            .collect();
        let m = MeanSe::of(&mids);
        assert!(m.within(0.5, 3.0));
        let sq: Vec<f64> = mids.iter().map(|v| (v - 0.5).powi(2)).collect();
        let v = MeanSe::of(&sq);
        assert!(v.within(0.5, 3.0), "{v:?}");
    }

    #[test]
    fn zero_noise_functionals_vanish() {
        let (s, t, m) = small();
        let frozen = FrozenNoise::new(&NoiseRealization::zeros(s, t), &m).unwrap();
        let d = DriverPath::sample(1, 0, t);
        let z = build_z(&frozen, &BackwardCharacteristic::new(0.0, &d)).unwrap();
        assert!(z.z_path.values().iter().all(|&v| v == 0.0));
        let b = sample_bridge(0.0, 1.0, 1.0, 20, 1, 0).unwrap();
        assert_eq!(bridge_functional(&b, &frozen).unwrap(), 0.0);
        let misaligned = sample_bridge(0.0, 1.0, 1.0, 10, 1, 0).unwrap();
        assert!(bridge_functional(&misaligned, &frozen).is_err());
    }

    #[test]
    fn z_quadratic_variation_matches_ck0() {
        let (s, _, m) = small();
        let t = TimeGrid::new(1.0, 1000).unwrap();
        let frozen = FrozenNoise::new(&sample_noise(5, s, t), &m).unwrap();
        let d = DriverPath::sample(5, 0, t);
        let z = build_z(&frozen, &BackwardCharacteristic::new(0.0, &d)).unwrap();
        let qv = quadratic_variation(&z.z_path).last();
        let sd = (2.0 * t.dt()).sqrt() * m.ck0();
        assert!((qv - m.ck0()).abs() < 4.0 * sd, "{qv} vs {}", m.ck0());
    }

    #[test]
    fn z_has_mean_zero() {
        let (s, _, m) = small();
        let t = TimeGrid::new(0.5, 5).unwrap();
        let vals: Vec<f64> = (0..2000u64)
            .map(|seed| {
                let frozen = FrozenNoise::new(&sample_noise(seed, s, t), &m).unwrap();
                let d = DriverPath::sample(seed, 0, t);
                build_z(&frozen, &BackwardCharacteristic::new(0.0, &d))
                    .unwrap()
                    .z_path
                    .last()
            })
            .collect();
        let ms = MeanSe::of(&vals);
        assert!(ms.within(0.0, 3.0));
        // Var Z(t) = C t
        let sq: Vec<f64> = vals.iter().map(|v| v * v).collect();
        assert!(MeanSe::of(&sq).within(0.5 * m.ck0(), 4.0));
    }

    #[test]
    fn zero_noise_feynman_kac_is_damped_heat_flow() {
        let (s, t, m) = small();
        let frozen = FrozenNoise::new(&NoiseRealization::zeros(s, t), &m).unwrap();
        let opts = FkOptions {
            n_bridges: 200,
            ..Default::default()
        };
        let one = feynman_kac_at(&frozen, 20, 0.3, &|_| 1.0, &opts).unwrap();
        // window truncation drops Gaussian mass beyond six standard deviations
        assert!((one.value - (-0.5 * m.ck0()).exp()).abs() < 1e-8);
        assert!(one.se < 1e-14);
        let u0 = |y: f64| (-0.5 * (-y * y).exp()).exp();
        let field = Field::from_fn(s, u0);
        let heat = heat_semigroup(&field, 1.0).unwrap();
        let fk = feynman_kac_at(&frozen, 20, 0.3, &u0, &opts).unwrap();
        let exact = (-0.5 * m.ck0()).exp() * heat.interpolate(0.3);
        assert!((fk.value - exact).abs() < 1e-6, "{} vs {exact}", fk.value);
        assert_eq!(feynman_kac_at(&frozen, 0, 0.3, &u0, &opts).unwrap().value, u0(0.3));
    }

    #[test]
    fn feynman_kac_rejects_bad_inputs() {
        let (s, t, m) = small();
        let frozen = FrozenNoise::new(&NoiseRealization::zeros(s, t), &m).unwrap();
        let few = FkOptions {
            n_bridges: 50,
            ..Default::default()
        };
        assert!(matches!(
            feynman_kac_at(&frozen, 5, 0.0, &|_| 1.0, &few),
            Err(Error::Undersampled(_))
        ));
        let long = TimeGrid::new(4.0, 20).unwrap();
        let frozen = FrozenNoise::new(&NoiseRealization::zeros(s, long), &m).unwrap();
        assert!(matches!(
            feynman_kac_at(&frozen, 20, 0.0, &|_| 1.0, &FkOptions::default()),
            Err(Error::Window(_))
        ));
    }

    #[test]
    fn zero_noise_flat_solution_and_residual() {
        let (s, t, m) = small();
        let frozen = FrozenNoise::new(&NoiseRealization::zeros(s, t), &m).unwrap();
        let d = DriverPath::sample(2, 0, t);
        let sol = solve_fbsde(0.5, &frozen, &d, &Field::constant(s, 1.0), &FbsdeConfig::default()).unwrap();
        for j in 0..=20 {
            assert!((sol.y.value(j) - 0.5 * m.ck0() * t.t(j)).abs() < 1e-12);
            assert!(sol.z.value(j).abs() < 1e-12);
        }
        let zf = build_z(&frozen, &BackwardCharacteristic::new(0.5, &d)).unwrap();
        let r = dbsde_residual(&sol, &zf, &d, m.ck0()).unwrap();
        assert!(r.values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn grid_route_terminal_value_is_log_psi() {
        let (s, t, m) = small();
        let frozen = FrozenNoise::new(&sample_noise(8, s, t), &m).unwrap();
        let u0 = Field::constant(s, 1.0);
        let grid = GridRoute::new(&frozen, &u0, &SolverOptions::default()).unwrap();
        let x = s.x(130);
        let sol = grid.evaluate(x, &DriverPath::sample(1, 0, t)).unwrap();
        assert!((sol.y.last() + grid.psi.last().values()[130].ln()).abs() < 1e-12);
        for j in 0..=20 {
            assert!((sol.y.value(j) + sol.u.value(j).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bridge_route_agrees_with_grid_route() {
        let (s, t, m) = small();
        let frozen = FrozenNoise::new(&sample_noise(21, s, t), &m).unwrap();
        let u0 = InitialCondition_bump(s);
        let d = DriverPath::sample(21, 0, t);
        let grid = solve_fbsde(0.0, &frozen, &d, &u0, &FbsdeConfig::default()).unwrap();
        let cfg = FbsdeConfig {
            route: Route::Bridge,
            fk: FkOptions {
                n_bridges: 2000,
                seed: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let br = solve_fbsde(0.0, &frozen, &d, &u0, &cfg).unwrap();
        let mut ok = 0;
        for j in [5, 10, 15, 20] {
            ok += ((br.u.value(j) - grid.u.value(j)).abs() <= 3.0 * br.u_se[j]) as usize;
        }
        assert!(ok >= 3);
        assert_eq!(br.u.value(0), grid.u.value(0));
    }

    #[allow(non_snake_case)]
    fn InitialCondition_bump(s: SpaceGrid) -> Field {
        crate::solvers::InitialCondition::cosine_bump(s, 0.5, 2.0).unwrap().u0()
    }

    #[test]
    fn decomposition_product_identity_and_zero_noise() {
        let (s, t, m) = small();
        let frozen = FrozenNoise::new(&NoiseRealization::zeros(s, t), &m).unwrap();
        let grid = GridRoute::new(&frozen, &Field::constant(s, 1.0), &SolverOptions::default()).unwrap();
        let d = DriverPath::sample(3, 0, t);
        let rec = decomposition_check(&grid, &frozen, &d, 0.0, 4, 1).unwrap();
        assert!(rec.product_gap < 1e-12);
        for i in 0..=20 {
            assert!((rec.e.value(i) - (0.5 * m.ck0() * t.t(i)).exp()).abs() < 1e-12);
            assert!((rec.m.value(i) - rec.m.value(0)).abs() < 1e-12);
            assert!(rec.j.value(i).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_probe_flags() {
        let steady: Vec<f64> = (0..100).map(|i| 1.0 + (i % 7) as f64 * 0.01).collect();
        assert!(!moment_probe(&steady, 2.0).heavy_tail);
        let mut spiky = vec![1.0; 100];
        spiky[99] = 50.0;
        assert!(moment_probe(&spiky, 4.0).heavy_tail);
    }
}
