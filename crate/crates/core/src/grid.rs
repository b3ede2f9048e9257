//! Uniform periodic space grid, time grid, field containers and the spectral
//! heat semigroup shared by every solver.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
}

/// Periodic box `[-L, L)` with `n_points` nodes `x_i = -L + i dx`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceGrid {
    half_length: f64,
    n_points: usize,
    dx: f64,
    boundary: Boundary,
}

impl SpaceGrid {
    pub fn new(half_length: f64, n_points: usize) -> Result<Self> {
        if !(half_length.is_finite() && half_length > 0.0) {
            return Err(Error::Domain(format!(
                "half_length must be positive, got {half_length}"
            )));
        }
        if n_points < 8 {
            return Err(Error::Domain(format!("n_points must be at least 8, got {n_points}")));
        }
        Ok(Self {
            half_length,
            n_points,
            dx: 2.0 * half_length / n_points as f64,
            boundary: Boundary::Periodic,
        })
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }
    pub fn n_points(&self) -> usize {
        self.n_points
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn boundary(&self) -> Boundary {
        self.boundary
    }
    pub fn length(&self) -> f64 {
        2.0 * self.half_length
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        -self.half_length + i as f64 * self.dx
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    #[inline]
    pub fn wrap_index(&self, i: isize) -> usize {
        i.rem_euclid(self.n_points as isize) as usize
    }

    /// Map any coordinate into `[-L, L)`.
    #[inline]
    pub fn wrap_coord(&self, x: f64) -> f64 {
        let len = self.length();
        let y = (x + self.half_length).rem_euclid(len);
        // rem_euclid can return `len` itself for tiny negative inputs
        if y >= len {
            -self.half_length
        } else {
            y - self.half_length
        }
    }

    /// Signed periodic displacement in `[-L, L)`.
    #[inline]
    pub fn periodic_delta(&self, d: f64) -> f64 {
        self.wrap_coord(d)
    }

    /// Index of the node nearest to `x` (after wrapping).
    pub fn nearest_index(&self, x: f64) -> usize {
        let s = (self.wrap_coord(x) + self.half_length) / self.dx;
        self.wrap_index(s.round() as isize)
    }

    /// Indices whose nodes lie in `[lo, hi]` (no wrapping).
    pub fn window_indices(&self, lo: f64, hi: f64) -> Vec<usize> {
        (0..self.n_points)
            .filter(|&i| {
                let x = self.x(i);
                x >= lo - 1e-12 && x <= hi + 1e-12
            })
            .collect()
    }

    pub(crate) fn same_as(&self, other: &SpaceGrid) -> bool {
        self.n_points == other.n_points && self.half_length == other.half_length
    }

    pub(crate) fn check_same(&self, other: &SpaceGrid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "space grids differ: (L={}, n={}) vs (L={}, n={})",
                self.half_length, self.n_points, other.half_length, other.n_points
            )))
        }
    }
}

/// `n_steps` uniform steps on `[0, horizon]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("n_steps must be positive".into()));
        }
        Ok(Self {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Node `t_i = i dt`; the last node is the horizon exactly.
    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.t(i)).collect()
    }

    /// Node index of time `t`, if `t` is (to rounding) a node.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let s = t / self.dt;
        let i = s.round();
        if i < 0.0 || i > self.n_steps as f64 || (s - i).abs() > 1e-9 {
            None
        } else {
            Some(i as usize)
        }
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::Shape(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.n_steps
            )));
        }
        TimeGrid::new(self.horizon, self.n_steps / factor)
    }

    pub(crate) fn check_same(&self, other: &TimeGrid) -> Result<()> {
        if self.n_steps == other.n_steps && self.horizon == other.horizon {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "time grids differ: (T={}, n={}) vs (T={}, n={})",
                self.horizon, self.n_steps, other.horizon, other.n_steps
            )))
        }
    }
}

/// Grid function on a [`SpaceGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: SpaceGrid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: SpaceGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::Shape(format!(
                "field has {} values, grid has {} points",
                values.len(),
                grid.n_points()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite field value at index {i}")));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: SpaceGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_points());
        Self { grid, values }
    }

    pub fn constant(grid: SpaceGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.n_points()],
        }
    }

    pub fn from_fn(grid: SpaceGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            values: (0..grid.n_points()).map(|i| f(grid.x(i))).collect(),
        }
    }

    pub fn grid(&self) -> &SpaceGrid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Periodic four-point Lagrange interpolation. Exact at nodes.
    pub fn interpolate(&self, x: f64) -> f64 {
        interpolate_periodic(&self.grid, &self.values, x)
    }
}

pub(crate) fn interpolate_periodic(grid: &SpaceGrid, values: &[f64], x: f64) -> f64 {
    let s = (grid.wrap_coord(x) + grid.half_length()) / grid.dx();
    let base = s.floor();
    let mut frac = s - base;
    let mut i = base as isize;
    if frac < 1e-10 {
        return values[grid.wrap_index(i)];
    }
    if frac > 1.0 - 1e-10 {
        return values[grid.wrap_index(i + 1)];
    }
    if frac >= 1.0 {
        i += 1;
        frac -= 1.0;
    }
    let p = |o: isize| values[grid.wrap_index(i + o)];
    let (f0, f1, f2, f3) = (p(-1), p(0), p(1), p(2));
    let u = frac;
    let w0 = -u * (u - 1.0) * (u - 2.0) / 6.0;
    let w1 = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
    let w2 = -(u + 1.0) * u * (u - 2.0) / 2.0;
    let w3 = (u + 1.0) * u * (u - 1.0) / 6.0;
    w0 * f0 + w1 * f1 + w2 * f2 + w3 * f3
}

/// Time-indexed sequence of fields, one per node of `time`.
#[derive(Clone, Debug)]
pub struct FieldTrajectory {
    time: TimeGrid,
    frames: Vec<Field>,
}

impl FieldTrajectory {
    pub fn new(time: TimeGrid, frames: Vec<Field>) -> Result<Self> {
        if frames.len() != time.n_steps() + 1 {
            return Err(Error::Shape(format!(
                "trajectory has {} frames, time grid needs {}",
                frames.len(),
                time.n_steps() + 1
            )));
        }
        Ok(Self { time, frames })
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }
    pub fn frames(&self) -> &[Field] {
        &self.frames
    }
    pub fn frame(&self, j: usize) -> &Field {
        &self.frames[j]
    }
    pub fn last(&self) -> &Field {
        self.frames.last().expect("trajectory has at least one frame")
    }
    pub fn space(&self) -> &SpaceGrid {
        self.frames[0].grid()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> FieldTrajectory {
        FieldTrajectory {
            time: self.time,
            frames: self.frames.iter().map(|fr| fr.map(f)).collect(),
        }
    }
}

/// Riemann inner product `sum_i f_i g_i dx`.
pub fn inner_product(f: &Field, g: &Field) -> Result<f64> {
    f.grid.check_same(&g.grid)?;
    Ok(f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum::<f64>() * f.grid.dx())
}

/// Central difference with periodic wrap.
pub fn dx_central(f: &Field) -> Field {
    let mut out = vec![0.0; f.values.len()];
    central_difference(&f.grid, &f.values, &mut out);
    Field::from_vec_unchecked(f.grid, out)
}

pub(crate) fn central_difference(grid: &SpaceGrid, values: &[f64], out: &mut [f64]) {
    let n = values.len();
    let inv = 1.0 / (2.0 * grid.dx());
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let ip = if i + 1 == n { 0 } else { i + 1 };
        let im = if i == 0 { n - 1 } else { i - 1 };
        *o = (values[ip] - values[im]) * inv;
    }
}

/// `G_t * f` on the periodic grid, exact in the discrete Fourier basis.
pub fn heat_semigroup(f: &Field, t: f64) -> Result<Field> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("heat semigroup time must be >= 0, got {t}")));
    }
    let spectral = Spectral::new(f.grid);
    let mult = spectral.heat_multiplier(t);
    let mut out = f.values.clone();
    let mut ws = spectral.workspace();
    spectral.apply_multiplier(&mut out, &mult, &mut ws);
    Ok(Field::from_vec_unchecked(f.grid, out))
}

/// Cached FFT plans and wavenumbers for one space grid.
#[derive(Clone)]
pub struct Spectral {
    grid: SpaceGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    kappa: Vec<f64>,
    kappa2: Vec<f64>,
    scratch_len: usize,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

/// Per-caller buffers for [`Spectral`]; not shared between threads.
pub struct SpectralWorkspace {
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Spectral {
    pub fn new(grid: SpaceGrid) -> Self {
        let n = grid.n_points();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        let base = std::f64::consts::TAU / grid.length();
        let signed = |m: usize| if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
        let kappa2: Vec<f64> = (0..n).map(|m| (base * signed(m)).powi(2)).collect();
        // the Nyquist mode has no odd part on a real grid
        let kappa = (0..n)
            .map(|m| if 2 * m == n { 0.0 } else { base * signed(m) })
            .collect();
        Self {
            grid,
            fwd,
            inv,
            kappa,
            kappa2,
            scratch_len,
        }
    }

    pub fn grid(&self) -> &SpaceGrid {
        &self.grid
    }

    pub fn workspace(&self) -> SpectralWorkspace {
        SpectralWorkspace {
            buf: vec![Complex64::new(0.0, 0.0); self.grid.n_points()],
            scratch: vec![Complex64::new(0.0, 0.0); self.scratch_len],
        }
    }

    /// Fourier symbol `exp(-t kappa_m^2 / 2)` of the heat semigroup.
    pub fn heat_multiplier(&self, t: f64) -> Vec<f64> {
        self.kappa2.iter().map(|k2| (-0.5 * t * k2).exp()).collect()
    }

    /// Multiply the spectrum of `values` by a real, even symbol.
    pub fn apply_multiplier(&self, values: &mut [f64], mult: &[f64], ws: &mut SpectralWorkspace) {
        let n = values.len();
        for (b, &v) in ws.buf.iter_mut().zip(values.iter()) {
            *b = Complex64::new(v, 0.0);
        }
        self.fwd.process_with_scratch(&mut ws.buf, &mut ws.scratch);
        for (b, &m) in ws.buf.iter_mut().zip(mult) {
            *b *= m;
        }
        self.inv.process_with_scratch(&mut ws.buf, &mut ws.scratch);
        let scale = 1.0 / n as f64;
        for (v, b) in values.iter_mut().zip(&ws.buf) {
            *v = b.re * scale;
        }
    }

    /// Spectral first derivative of a periodic sequence.
    pub fn derivative(&self, values: &[f64], out: &mut [f64], ws: &mut SpectralWorkspace) {
        let n = values.len();
        for (b, &v) in ws.buf.iter_mut().zip(values) {
            *b = Complex64::new(v, 0.0);
        }
        self.fwd.process_with_scratch(&mut ws.buf, &mut ws.scratch);
        for (b, &k) in ws.buf.iter_mut().zip(&self.kappa) {
            *b = Complex64::new(-b.im * k, b.re * k);
        }
        self.inv.process_with_scratch(&mut ws.buf, &mut ws.scratch);
        let scale = 1.0 / n as f64;
        for (o, b) in out.iter_mut().zip(&ws.buf) {
            *o = b.re * scale;
        }
    }

    /// Spectrum of a real sequence (unnormalised forward DFT).
    pub fn spectrum(&self, values: &[f64]) -> Vec<Complex64> {
        let mut ws = self.workspace();
        for (b, &v) in ws.buf.iter_mut().zip(values) {
            *b = Complex64::new(v, 0.0);
        }
        self.fwd.process_with_scratch(&mut ws.buf, &mut ws.scratch);
        ws.buf
    }

    /// Periodic circular convolution `out_i = sum_l kernel_{i-l} input_l`,
    /// with `kernel_hat` the spectrum of the kernel sequence.
    pub fn convolve(&self, input: &[f64], kernel_hat: &[Complex64], out: &mut [f64], ws: &mut SpectralWorkspace) {
        let n = input.len();
        for (b, &v) in ws.buf.iter_mut().zip(input) {
            *b = Complex64::new(v, 0.0);
        }
        self.fwd.process_with_scratch(&mut ws.buf, &mut ws.scratch);
        for (b, k) in ws.buf.iter_mut().zip(kernel_hat) {
            *b *= k;
        }
        self.inv.process_with_scratch(&mut ws.buf, &mut ws.scratch);
        let scale = 1.0 / n as f64;
        for (o, b) in out.iter_mut().zip(&ws.buf) {
            *o = b.re * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(l: f64, n: usize) -> SpaceGrid {
        SpaceGrid::new(l, n).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SpaceGrid::new(1.0, 4).is_err());
        assert!(SpaceGrid::new(-1.0, 64).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn grid_geometry() {
        let g = grid(16.0, 512);
        assert_eq!(g.dx() * g.n_points() as f64, 32.0);
        assert_eq!(g.wrap_index(-1), 511);
        assert_eq!(g.wrap_index(512), 0);
        assert_eq!(g.x(256), 0.0);
        assert!((g.wrap_coord(16.5) - (-15.5)).abs() < 1e-12);
    }

    #[test]
    fn time_nodes_are_not_accumulated() {
        let tg = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(tg.t(3), 1.0);
        assert_eq!(tg.t(1), 1.0 / 3.0);
        assert_eq!(tg.index_of(2.0 / 3.0), Some(2));
        assert_eq!(tg.index_of(0.5), None);
    }

    #[test]
    fn single_cell_inner_product() {
        let g = grid(2.0, 8);
        let mut v = vec![0.0; 8];
        v[3] = 1.0;
        let f = Field::new(g, v).unwrap();
        assert_eq!(inner_product(&f, &f).unwrap(), 0.5);
    }

    #[test]
    fn disjoint_support_is_orthogonal() {
        let g = grid(2.0, 8);
        let f = Field::from_fn(g, |x| if x < 0.0 { 1.0 } else { 0.0 });
        let h = Field::from_fn(g, |x| if x >= 0.0 { 2.0 } else { 0.0 });
        assert_eq!(inner_product(&f, &h).unwrap(), 0.0);
    }

    #[test]
    fn inner_product_grid_mismatch() {
        let f = Field::constant(grid(2.0, 8), 1.0);
        let h = Field::constant(grid(2.0, 16), 1.0);
        assert!(matches!(inner_product(&f, &h), Err(Error::Shape(_))));
    }

    #[test]
    fn heat_fixes_constants_and_identity_at_zero() {
        let g = grid(4.0, 64);
        let c = Field::constant(g, 2.5);
        let out = heat_semigroup(&c, 0.7).unwrap();
        for v in out.values() {
            assert!((v - 2.5).abs() < 1e-13);
        }
        let f = Field::from_fn(g, |x| (x * 0.3).sin() + x.cos().powi(2));
        let same = heat_semigroup(&f, 0.0).unwrap();
        for (a, b) in same.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(heat_semigroup(&f, -1.0).is_err());
    }

    #[test]
    fn heat_of_gaussian_matches_closed_form() {
        // Var sigma^2 convolved with G_1 has variance sigma^2 + 1.
        let sigma: f64 = 0.5;
        let g = grid(16.0, 1024);
        let gauss = |x: f64, v: f64| (-x * x / (2.0 * v)).exp() / (std::f64::consts::TAU * v).sqrt();
        let f = Field::from_fn(g, |x| gauss(x, sigma * sigma));
        let out = heat_semigroup(&f, 1.0).unwrap();
        let err = (0..g.n_points())
            .map(|i| (out.values()[i] - gauss(g.x(i), sigma * sigma + 1.0)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "sup error {err}");
    }

    #[test]
    fn heat_preserves_mean() {
        let g = grid(8.0, 128);
        let f = Field::from_fn(g, |x| (-(x - 1.0).powi(2)).exp() + 0.1 * x.sin());
        let out = heat_semigroup(&f, 0.3).unwrap();
        assert!((out.mean() - f.mean()).abs() < 1e-14);
    }

    #[test]
    fn central_difference_of_constant_is_zero() {
        let g = grid(1.0, 16);
        let d = dx_central(&Field::constant(g, 3.0));
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn central_difference_is_second_order() {
        let err = |n: usize| {
            let g = grid(4.0, n);
            let w = std::f64::consts::TAU / g.length();
            let f = Field::from_fn(g, |x| (w * x).sin());
            let d = dx_central(&f);
            (0..n)
                .map(|i| (d.values()[i] - w * (w * g.x(i)).cos()).abs())
                .fold(0.0, f64::max)
        };
        let order = (err(32) / err(64)).log2();
        assert!(order > 1.9, "observed order {order}");
    }

    #[test]
    fn central_difference_wraps() {
        let g = grid(1.0, 8);
        // sawtooth: x_i itself, one jump at the wrap
        let f = Field::from_fn(g, |x| x);
        let d = dx_central(&f);
        assert!(d.values().iter().all(|v| v.is_finite()));
        // interior slope is one; the two wrap cells see the jump
        assert!((d.values()[3] - 1.0).abs() < 1e-12);
        assert!((d.values()[0] - (g.x(1) - g.x(7)) / (2.0 * g.dx())).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_accurate_between() {
        let g = grid(4.0, 128);
        let f = Field::from_fn(g, |x| (0.7 * x).sin());
        assert_eq!(f.interpolate(g.x(17)), f.values()[17]);
        let x = 0.123;
        assert!((f.interpolate(x) - (0.7f64 * x).sin()).abs() < 1e-7);
    }
}
