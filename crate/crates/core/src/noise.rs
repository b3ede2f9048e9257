//! Discretised cylindrical Brownian motion and the smoothed field
//! `B^k(t, x) = B_t(zeta^k_x)`.
//!
//! The orthonormal system is the set of normalised cell indicators
//! `1_{cell i} / sqrt(dx)`, so `beta_i` are independent per-cell Brownian
//! motions with increments `xi[j][i] sqrt(dt)`. Both the grid field
//! `B^k` and the point functionals `<zeta^k_x, dB>` used by the
//! characteristic and bridge code are linear in this one Gaussian array.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{Field, FieldTrajectory, SpaceGrid, Spectral, SpectralWorkspace, TimeGrid};
use crate::mollifier::Mollifier;
use crate::rng::{CounterNormals, StreamDomain};

pub const NOISE_MAGIC: &[u8; 8] = b"KPZNOISE";
pub const NOISE_VERSION: u32 = 1;
/// magic + version + seed + L + n_points + T + n_steps
pub const NOISE_HEADER_LEN: usize = 8 + 4 + 8 + 8 + 8 + 8 + 8;

#[derive(Clone, Debug)]
enum Source {
    /// Rows regenerated from the counter stream; `refine` fine steps are
    /// aggregated into each step of this realization.
    Counter {
        refine: usize,
    },
    Dense(Arc<Vec<f64>>),
    Zero,
}

/// `xi[j][i]`: standard normal weight of cell `i` over step `j`.
#[derive(Clone, Debug)]
pub struct NoiseRealization {
    seed: u64,
    space: SpaceGrid,
    time: TimeGrid,
    source: Source,
}

/// Fill a realization keyed by `(seed, step, cell)`.
pub fn sample_noise(seed: u64, space: SpaceGrid, time: TimeGrid) -> NoiseRealization {
    NoiseRealization {
        seed,
        space,
        time,
        source: Source::Counter { refine: 1 },
    }
}

impl NoiseRealization {
    pub fn zeros(space: SpaceGrid, time: TimeGrid) -> Self {
        Self {
            seed: 0,
            space,
            time,
            source: Source::Zero,
        }
    }

    /// Wrap an explicit row-major `[n_steps x n_points]` matrix.
    pub fn from_matrix(seed: u64, space: SpaceGrid, time: TimeGrid, xi: Vec<f64>) -> Result<Self> {
        let want = space.n_points() * time.n_steps();
        if xi.len() != want {
            return Err(Error::Shape(format!(
                "noise matrix has {} entries, expected {want}",
                xi.len()
            )));
        }
        Ok(Self {
            seed,
            space,
            time,
            source: Source::Dense(Arc::new(xi)),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn space(&self) -> &SpaceGrid {
        &self.space
    }
    pub fn time(&self) -> &TimeGrid {
        &self.time
    }
    pub fn is_zero(&self) -> bool {
        matches!(self.source, Source::Zero)
    }

    /// Borrow the stored matrix when the realization is dense.
    pub fn dense_rows(&self) -> Option<&[f64]> {
        match &self.source {
            Source::Dense(m) => Some(m),
            _ => None,
        }
    }

    /// Write row `j` into `out` (length `n_points`).
    pub fn row(&self, j: usize, out: &mut [f64]) {
        let n = self.space.n_points();
        debug_assert_eq!(out.len(), n);
        match &self.source {
            Source::Zero => out.fill(0.0),
            Source::Dense(m) => out.copy_from_slice(&m[j * n..(j + 1) * n]),
            Source::Counter { refine: 1 } => {
                CounterNormals::new(self.seed, StreamDomain::Noise, j as u64).fill_normals(out);
            }
            Source::Counter { refine } => {
                out.fill(0.0);
                for q in 0..*refine {
                    let mut s = CounterNormals::new(self.seed, StreamDomain::Noise, (j * refine + q) as u64);
                    for v in out.iter_mut() {
                        *v += s.next_normal();
                    }
                }
                let scale = 1.0 / (*refine as f64).sqrt();
                for v in out.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }

    pub fn entry(&self, j: usize, i: usize) -> f64 {
        match &self.source {
            Source::Zero => 0.0,
            Source::Dense(m) => m[j * self.space.n_points() + i],
            Source::Counter { refine } => {
                let s: f64 = (0..*refine)
                    .map(|q| CounterNormals::at(self.seed, StreamDomain::Noise, (j * refine + q) as u64, i as u64))
                    .sum();
                s / (*refine as f64).sqrt()
            }
        }
    }

    /// Row-major copy of the whole matrix; rows are generated in parallel.
    pub fn to_matrix(&self) -> Vec<f64> {
        let n = self.space.n_points();
        let mut m = vec![0.0; n * self.time.n_steps()];
        m.par_chunks_mut(n).enumerate().for_each(|(j, row)| self.row(j, row));
        m
    }

    pub fn materialize(&self) -> NoiseRealization {
        match self.source {
            Source::Dense(_) | Source::Zero => self.clone(),
            Source::Counter { .. } => Self {
                source: Source::Dense(Arc::new(self.to_matrix())),
                ..self.clone()
            },
        }
    }

    /// Aggregate `factor` consecutive steps: `(xi_a + xi_b + ...) / sqrt(factor)`,
    /// which is the same Brownian path sampled on the coarser time grid.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseRealization> {
        let time = self.time.coarsen(factor)?;
        let source = match &self.source {
            Source::Zero => Source::Zero,
            Source::Counter { refine } => Source::Counter {
                refine: refine * factor,
            },
            Source::Dense(m) => {
                let n = self.space.n_points();
                let scale = 1.0 / (factor as f64).sqrt();
                let mut out = vec![0.0; n * time.n_steps()];
                for (j, row) in out.chunks_mut(n).enumerate() {
                    for q in 0..factor {
                        let src = &m[(j * factor + q) * n..(j * factor + q + 1) * n];
                        for (o, s) in row.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                    for o in row.iter_mut() {
                        *o *= scale;
                    }
                }
                Source::Dense(Arc::new(out))
            }
        };
        Ok(NoiseRealization {
            seed: self.seed,
            space: self.space,
            time,
            source,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(NOISE_MAGIC)?;
        w.write_all(&NOISE_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.space.half_length().to_le_bytes())?;
        w.write_all(&(self.space.n_points() as u64).to_le_bytes())?;
        w.write_all(&self.time.horizon().to_le_bytes())?;
        w.write_all(&(self.time.n_steps() as u64).to_le_bytes())?;
        let n = self.space.n_points();
        let mut row = vec![0.0; n];
        let mut bytes = Vec::with_capacity(8 * n);
        for j in 0..self.time.n_steps() {
            self.row(j, &mut row);
            bytes.clear();
            for v in &row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; NOISE_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Incompatible(format!("truncated header: {e}")))?;
        if &header[0..8] != NOISE_MAGIC {
            return Err(Error::Incompatible("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != NOISE_VERSION {
            return Err(Error::Incompatible(format!("unsupported version {version}")));
        }
        let seed = u64_at(12);
        let half_length = f64_at(20);
        let n_points = u64_at(28) as usize;
        let horizon = f64_at(36);
        let n_steps = u64_at(44) as usize;
        let space = SpaceGrid::new(half_length, n_points).map_err(|e| Error::Incompatible(e.to_string()))?;
        let time = TimeGrid::new(horizon, n_steps).map_err(|e| Error::Incompatible(e.to_string()))?;
        let mut raw = vec![0u8; 8 * n_points * n_steps];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Incompatible(format!("truncated matrix: {e}")))?;
        let xi = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_matrix(seed, space, time, xi)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// `Delta B_j(f) = sum_l f(x_l) xi[j][l] sqrt(dt) sqrt(dx)`.
pub fn project_on(noise: &NoiseRealization, f: &Field, j: usize) -> Result<f64> {
    noise.space.check_same(f.grid())?;
    if j >= noise.time.n_steps() {
        return Err(Error::Shape(format!("step {j} out of range")));
    }
    let mut row = vec![0.0; noise.space.n_points()];
    noise.row(j, &mut row);
    let s: f64 = f.values().iter().zip(&row).map(|(a, b)| a * b).sum();
    Ok(s * (noise.time.dt() * noise.space.dx()).sqrt())
}

/// Evaluates `<zeta^k_x, Delta B_j>` at arbitrary `x` by a direct sum over
/// the cells inside the kernel support.
#[derive(Clone, Debug)]
pub struct PointKernel {
    mollifier: Mollifier,
    space: SpaceGrid,
    radius: usize,
}

impl PointKernel {
    pub fn new(mollifier: &Mollifier, space: &SpaceGrid) -> Result<Self> {
        mollifier.check_resolved(space)?;
        Ok(Self {
            mollifier: mollifier.clone(),
            space: *space,
            radius: mollifier.offset_radius(space),
        })
    }

    /// `sum_l zeta^k(x - x_l) row[l]`, without the `sqrt(dt dx)` factor.
    #[inline]
    pub fn dot(&self, row: &[f64], x: f64) -> f64 {
        let g = &self.space;
        let xw = g.wrap_coord(x);
        let center = ((xw + g.half_length()) / g.dx()).floor() as isize;
        let base = g.x(g.wrap_index(center));
        let frac = xw - base;
        let w = self.radius as isize;
        let mut s = 0.0;
        for o in -w..=w {
            let z = self.mollifier.zeta_k(frac - o as f64 * g.dx());
            if z != 0.0 {
                s += z * row[g.wrap_index(center + o)];
            }
        }
        s
    }
}

/// The smoothed field paired with one mollifier.
#[derive(Clone, Debug)]
pub struct SmoothedField {
    noise: NoiseRealization,
    mollifier: Mollifier,
    spectral: Spectral,
    kernel_hat: Vec<Complex64>,
    scale: f64,
}

/// Reusable buffers for pulling increments out of a [`SmoothedField`].
pub struct IncrementBuffer {
    row: Vec<f64>,
    out: Vec<f64>,
    ws: SpectralWorkspace,
}

pub fn pair_with_mollifier(noise: &NoiseRealization, m: &Mollifier) -> Result<SmoothedField> {
    m.check_resolved(&noise.space)?;
    let spectral = Spectral::new(noise.space);
    let kernel_hat = spectral.spectrum(&m.offset_sequence(&noise.space));
    Ok(SmoothedField {
        noise: noise.clone(),
        mollifier: m.clone(),
        spectral,
        kernel_hat,
        scale: (noise.time.dt() * noise.space.dx()).sqrt(),
    })
}

impl SmoothedField {
    pub fn noise(&self) -> &NoiseRealization {
        &self.noise
    }
    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }
    pub fn space(&self) -> &SpaceGrid {
        &self.noise.space
    }
    pub fn time(&self) -> &TimeGrid {
        &self.noise.time
    }
    pub(crate) fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn buffer(&self) -> IncrementBuffer {
        let n = self.noise.space.n_points();
        IncrementBuffer {
            row: vec![0.0; n],
            out: vec![0.0; n],
            ws: self.spectral.workspace(),
        }
    }

    /// `Delta B^k_j(x_i) = sqrt(dt dx) sum_l zeta^k(x_i - x_l) xi[j][l]`.
    pub fn increment<'b>(&self, j: usize, buf: &'b mut IncrementBuffer) -> &'b [f64] {
        if self.noise.is_zero() {
            buf.out.fill(0.0);
            return &buf.out;
        }
        self.noise.row(j, &mut buf.row);
        self.spectral
            .convolve(&buf.row, &self.kernel_hat, &mut buf.out, &mut buf.ws);
        for v in buf.out.iter_mut() {
            *v *= self.scale;
        }
        &buf.out
    }

    /// `B^k(t_j, .)` for every node, starting from zero.
    pub fn cumulative(&self) -> FieldTrajectory {
        let space = self.noise.space;
        let n = space.n_points();
        let mut buf = self.buffer();
        let mut acc = vec![0.0; n];
        let mut frames = Vec::with_capacity(self.noise.time.n_steps() + 1);
        frames.push(Field::constant(space, 0.0));
        for j in 0..self.noise.time.n_steps() {
            let inc = self.increment(j, &mut buf);
            for (a, d) in acc.iter_mut().zip(inc) {
                *a += d;
            }
            frames.push(Field::from_vec_unchecked(space, acc.clone()));
        }
        FieldTrajectory::new(self.noise.time, frames).expect("frame count matches time grid")
    }
}
