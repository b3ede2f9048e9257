//! Grid solvers for the mollified KPZ equation and the stochastic heat
//! equation, linked by the Hopf–Cole map `h = -log psi`.
//!
//! Both solvers read the same [`SmoothedField`]. KPZ is driven by `+dB^k`
//! with an explicit `+C^k(0)/2` renormalisation; the SHE partner is driven
//! by `-dB^k` with the Itô compensator `exp(-C^k(0) dt / 2)`. By default the
//! compensator is kept when the noise is switched off, so the two schemes
//! stay exact Hopf–Cole partners; `compensate_zero_noise = false` drops it
//! and turns the zero-noise SHE into pure heat flow.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{central_difference, Field, FieldTrajectory, SpaceGrid, TimeGrid};
use crate::mollifier::Mollifier;
use crate::noise::{pair_with_mollifier, NoiseRealization, SmoothedField};
use crate::rng::{CounterNormals, StreamDomain};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcKind {
    Flat,
    DeterministicFunction,
    SampledRandom { seed: u64 },
}

/// Initial height `h0`; the SHE starts from `u0 = exp(-h0)`.
#[derive(Clone, Debug)]
pub struct InitialCondition {
    kind: IcKind,
    h0: Field,
    a_p_probe: Option<f64>,
    b_p_probe: Option<f64>,
}

impl InitialCondition {
    pub fn flat(grid: SpaceGrid) -> Self {
        Self {
            kind: IcKind::Flat,
            h0: Field::constant(grid, 0.0),
            a_p_probe: None,
            b_p_probe: None,
        }
    }

    pub fn deterministic(h0: Field) -> Self {
        Self {
            kind: IcKind::DeterministicFunction,
            h0,
            a_p_probe: None,
            b_p_probe: None,
        }
    }

    /// `amplitude cos^2(pi x / (2 width))` on `|x| < width`, zero elsewhere.
    pub fn cosine_bump(grid: SpaceGrid, amplitude: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !amplitude.is_finite() {
            return Err(Error::Domain(format!("bad bump amplitude {amplitude} / width {width}")));
        }
        let h0 = Field::from_fn(grid, |x| {
            if x.abs() < width {
                amplitude * (std::f64::consts::FRAC_PI_2 * x / width).cos().powi(2)
            } else {
                0.0
            }
        });
        Ok(Self::deterministic(h0))
    }

    /// Two-sided Brownian profile pinned at `h0(0) = 0` with the linear
    /// drift removed so the profile is periodic. Drawn from its own stream,
    /// hence independent of every noise and driver draw.
    pub fn brownian(grid: SpaceGrid, seed: u64, sigma: f64) -> Result<Self> {
        let n = grid.n_points();
        if !n.is_multiple_of(2) {
            return Err(Error::Shape("Brownian initial profile needs an even grid".into()));
        }
        let half = n / 2;
        let sd = sigma * grid.dx().sqrt();
        let mut right = CounterNormals::new(seed, StreamDomain::Initial, 0);
        let mut left = CounterNormals::new(seed, StreamDomain::Initial, 1);
        let mut b = vec![0.0; n + 1];
        for i in half + 1..=n {
            b[i] = b[i - 1] + sd * right.next_normal();
        }
        for i in (0..half).rev() {
            b[i] = b[i + 1] + sd * left.next_normal();
        }
        let slope = (b[n] - b[0]) / grid.length();
        let values = (0..n).map(|i| b[i] - slope * grid.x(i)).collect();
        Ok(Self {
            kind: IcKind::SampledRandom { seed },
            h0: Field::new(grid, values)?,
            a_p_probe: None,
            b_p_probe: None,
        })
    }

    /// Records `a` and `b = sup_x exp(-a|x|) exp(p|h0(x)|)` on the grid.
    pub fn with_probe(mut self, p: f64, a: f64) -> Self {
        let b = self
            .h0
            .grid()
            .nodes()
            .iter()
            .zip(self.h0.values())
            .map(|(x, h)| (-a * x.abs() + p * h.abs()).exp())
            .fold(0.0, f64::max);
        self.a_p_probe = Some(a);
        self.b_p_probe = Some(b);
        self
    }

    pub fn kind(&self) -> IcKind {
        self.kind
    }
    pub fn h0(&self) -> &Field {
        &self.h0
    }
    pub fn a_p_probe(&self) -> Option<f64> {
        self.a_p_probe
    }
    pub fn b_p_probe(&self) -> Option<f64> {
        self.b_p_probe
    }
    pub fn u0(&self) -> Field {
        self.h0.map(|h| (-h).exp())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SheScheme {
    /// `heat(psi exp(-dB - C dt / 2), dt)`; positive by construction.
    #[default]
    Exponential,
    /// `heat(psi (1 - dB), dt)`.
    EulerMaruyama,
}

impl fmt::Display for SheScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SheScheme::Exponential => "exponential",
            SheScheme::EulerMaruyama => "euler-maruyama",
        })
    }
}

impl FromStr for SheScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exponential" => Ok(SheScheme::Exponential),
            "euler-maruyama" => Ok(SheScheme::EulerMaruyama),
            other => Err(format!(
                "unknown scheme `{other}` (expected exponential|euler-maruyama)"
            )),
        }
    }
}

/// Discretisation of `d_x h` in the KPZ nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientScheme {
    #[default]
    Central,
    Spectral,
}

impl fmt::Display for GradientScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientScheme::Central => "central",
            GradientScheme::Spectral => "spectral",
        })
    }
}

impl FromStr for GradientScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "central" => Ok(GradientScheme::Central),
            "spectral" => Ok(GradientScheme::Spectral),
            other => Err(format!("unknown gradient `{other}` (expected central|spectral)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub she_scheme: SheScheme,
    pub gradient: GradientScheme,
    /// Abort when `|h|_inf` exceeds this.
    pub instability_threshold: f64,
    /// Keep every `store_stride`-th frame.
    pub store_stride: usize,
    /// Upper bound on `dt / dx^2` for the explicit KPZ step.
    pub max_step_ratio: Option<f64>,
    /// Apply the SHE compensator even when the noise source is zero.
    pub compensate_zero_noise: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            she_scheme: SheScheme::Exponential,
            gradient: GradientScheme::Central,
            instability_threshold: 1e6,
            store_stride: 1,
            max_step_ratio: Some(0.25),
            compensate_zero_noise: true,
        }
    }
}

impl SolverOptions {
    fn stored_time(&self, time: &TimeGrid) -> Result<TimeGrid> {
        time.coarsen(self.store_stride).map_err(|_| {
            Error::config(
                "store_stride",
                format!("{} does not divide {}", self.store_stride, time.n_steps()),
            )
        })
    }
}

#[derive(Clone, Debug)]
pub struct SheState {
    pub trajectory: FieldTrajectory,
    pub mollifier: Mollifier,
    pub noise: SmoothedField,
    pub options: SolverOptions,
}

#[derive(Clone, Debug)]
pub struct KpzState {
    pub trajectory: FieldTrajectory,
    pub mollifier: Mollifier,
    pub noise: SmoothedField,
    pub options: SolverOptions,
}

fn check_pairing(noise: &SmoothedField, m: &Mollifier) -> Result<()> {
    let nm = noise.mollifier();
    if nm.k() != m.k() || nm.kernel() != m.kernel() {
        return Err(Error::Shape(format!(
            "noise is smoothed at level k = {} but solver mollifier has k = {}",
            nm.k(),
            m.k()
        )));
    }
    Ok(())
}

fn instability(step: usize, values: &[f64], threshold: f64) -> Option<Error> {
    let mut sup = 0.0f64;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Some(Error::Instability {
                step,
                detail: format!("non-finite value {v} at index {i}"),
            });
        }
        sup = sup.max(v.abs());
    }
    (sup > threshold).then(|| Error::Instability {
        step,
        detail: format!("sup norm {sup:e} exceeds {threshold:e}"),
    })
}

pub fn she_solve(u0: &Field, noise: &SmoothedField, m: &Mollifier) -> Result<SheState> {
    she_solve_with(u0, noise, m, &SolverOptions::default())
}

pub fn she_solve_with(u0: &Field, noise: &SmoothedField, m: &Mollifier, opts: &SolverOptions) -> Result<SheState> {
    check_pairing(noise, m)?;
    noise.space().check_same(u0.grid())?;
    if let Some(i) = u0.values().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "u0 must be positive, found {} at index {i}",
            u0.values()[i]
        )));
    }
    let time = *noise.time();
    let stored = opts.stored_time(&time)?;
    let space = *noise.space();
    let spectral = noise.spectral();
    let heat = spectral.heat_multiplier(time.dt());
    let mut ws = spectral.workspace();
    let mut buf = noise.buffer();
    let compensator = if noise.noise().is_zero() && !opts.compensate_zero_noise {
        0.0
    } else {
        0.5 * m.ck0() * time.dt()
    };

    let mut psi = u0.values().to_vec();
    let mut frames = Vec::with_capacity(stored.n_steps() + 1);
    frames.push(u0.clone());
    for j in 0..time.n_steps() {
        let db = noise.increment(j, &mut buf);
        match opts.she_scheme {
            SheScheme::Exponential => {
                for (p, d) in psi.iter_mut().zip(db) {
                    *p *= (-d - compensator).exp();
                }
            }
            SheScheme::EulerMaruyama => {
                for (p, d) in psi.iter_mut().zip(db) {
                    *p *= 1.0 - d;
                }
            }
        }
        spectral.apply_multiplier(&mut psi, &heat, &mut ws);
        if let Some(i) = psi.iter().position(|v| !v.is_finite()) {
            return Err(Error::Instability {
                step: j + 1,
                detail: format!("non-finite psi at index {i}"),
            });
        }
        if let Some(i) = psi.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Positivity {
                frame: j + 1,
                index: i,
                value: psi[i],
            });
        }
        if (j + 1) % opts.store_stride == 0 {
            frames.push(Field::from_vec_unchecked(space, psi.clone()));
        }
    }
    Ok(SheState {
        trajectory: FieldTrajectory::new(stored, frames)?,
        mollifier: m.clone(),
        noise: noise.clone(),
        options: opts.clone(),
    })
}

pub fn kpz_solve(h0: &Field, noise: &SmoothedField, m: &Mollifier) -> Result<KpzState> {
    kpz_solve_with(h0, noise, m, &SolverOptions::default())
}

pub fn kpz_solve_with(h0: &Field, noise: &SmoothedField, m: &Mollifier, opts: &SolverOptions) -> Result<KpzState> {
    check_pairing(noise, m)?;
    noise.space().check_same(h0.grid())?;
    let time = *noise.time();
    let space = *noise.space();
    if let Some(r) = opts.max_step_ratio {
        let ratio = time.dt() / (space.dx() * space.dx());
        if ratio > r * (1.0 + 1e-12) {
            return Err(Error::config("dt", format!("dt / dx^2 = {ratio:.4} exceeds {r}")));
        }
    }
    let stored = opts.stored_time(&time)?;
    let spectral = noise.spectral();
    let heat = spectral.heat_multiplier(time.dt());
    let mut ws = spectral.workspace();
    let mut buf = noise.buffer();
    let dt = time.dt();
    let ck0 = m.ck0();

    let mut h = h0.values().to_vec();
    let mut grad = vec![0.0; h.len()];
    let mut frames = Vec::with_capacity(stored.n_steps() + 1);
    frames.push(h0.clone());
    for j in 0..time.n_steps() {
        match opts.gradient {
            GradientScheme::Central => central_difference(&space, &h, &mut grad),
            GradientScheme::Spectral => spectral.derivative(&h, &mut grad, &mut ws),
        }
        spectral.apply_multiplier(&mut h, &heat, &mut ws);
        let db = noise.increment(j, &mut buf);
        for ((v, g), d) in h.iter_mut().zip(&grad).zip(db) {
            *v += -0.5 * (g * g - ck0) * dt + d;
        }
        if let Some(e) = instability(j + 1, &h, opts.instability_threshold) {
            return Err(e);
        }
        if (j + 1) % opts.store_stride == 0 {
            frames.push(Field::from_vec_unchecked(space, h.clone()));
        }
    }
    Ok(KpzState {
        trajectory: FieldTrajectory::new(stored, frames)?,
        mollifier: m.clone(),
        noise: noise.clone(),
        options: opts.clone(),
    })
}

/// `h = -log psi`, frame by frame.
pub fn hopf_cole(s: &SheState) -> Result<KpzState> {
    for (f, frame) in s.trajectory.frames().iter().enumerate() {
        if let Some(i) = frame.values().iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Positivity {
                frame: f,
                index: i,
                value: frame.values()[i],
            });
        }
    }
    Ok(KpzState {
        trajectory: s.trajectory.map(|p| -p.ln()),
        mollifier: s.mollifier.clone(),
        noise: s.noise.clone(),
        options: s.options.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossLevel {
    pub n_steps: usize,
    pub dt: f64,
    /// Sup over the window and over the common stored times.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidationReport {
    pub levels: Vec<CrossLevel>,
    /// `log2(gap_l / gap_{l+1})` for consecutive levels.
    pub orders: Vec<f64>,
    /// Least-squares slope of `-log2 gap` against the level index.
    pub observed_order: f64,
    pub monotone: bool,
}

/// Runs KPZ and Hopf–Cole(SHE) on the same noise at `levels` time
/// resolutions obtained by pairwise aggregation of `noise`, which must be
/// the finest level. Levels are reported coarse to fine.
pub fn cross_validate(
    h0: &Field,
    noise: &NoiseRealization,
    m: &Mollifier,
    levels: usize,
    window: (f64, f64),
    opts: &SolverOptions,
) -> Result<CrossValidationReport> {
    if levels < 2 {
        return Err(Error::config("levels", "need at least two refinement levels"));
    }
    let top = 1usize << (levels - 1);
    if !noise.time().n_steps().is_multiple_of(top) {
        return Err(Error::config("n_steps", format!("must be divisible by {top}")));
    }
    let idx = h0.grid().window_indices(window.0, window.1);
    if idx.is_empty() {
        return Err(Error::config("window", "observation window contains no grid nodes"));
    }
    let u0 = h0.map(|h| (-h).exp());
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let factor = top >> l;
        let coarse = noise.coarsen(factor)?;
        let field = pair_with_mollifier(&coarse, m)?;
        let o = SolverOptions {
            store_stride: opts.store_stride << l,
            ..opts.clone()
        };
        let kpz = kpz_solve_with(h0, &field, m, &o)?;
        let she = hopf_cole(&she_solve_with(&u0, &field, m, &o)?)?;
        let gap = kpz
            .trajectory
            .frames()
            .iter()
            .zip(she.trajectory.frames())
            .map(|(a, b)| {
                idx.iter()
                    .map(|&i| (a.values()[i] - b.values()[i]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        out.push(CrossLevel {
            n_steps: coarse.time().n_steps(),
            dt: coarse.time().dt(),
            gap,
        });
    }
    let orders: Vec<f64> = out.windows(2).map(|w| (w[0].gap / w[1].gap).log2()).collect();
    let monotone = out.windows(2).all(|w| w[1].gap < w[0].gap);
    let ys: Vec<f64> = out.iter().map(|c| -c.gap.log2()).collect();
    let n = ys.len() as f64;
    let xbar = (n - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxy: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xbar) * (y - ybar)).sum();
    let sxx: f64 = (0..ys.len()).map(|i| (i as f64 - xbar).powi(2)).sum();
    Ok(CrossValidationReport {
        levels: out,
        orders,
        observed_order: sxy / sxx,
        monotone,
    })
}
