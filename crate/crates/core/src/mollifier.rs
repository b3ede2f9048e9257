//! The smoothing kernel `zeta`, its rescalings `zeta^k(y) = k zeta(k y)`, and
//! the covariance `C^k = zeta^k * zeta^k`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{Field, SpaceGrid};
use crate::quadrature::integrate;

const QUAD_TOL: f64 = 1e-13;

/// Even, nonnegative, compactly supported profile on `[-1, 1]` before
/// normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BaseKernel {
    /// `exp(-1 / (1 - x^2))`, smooth with compact support.
    #[default]
    Bump,
    /// `(1 - x^2)^2`, only C^1 at the edge. For kernel-sensitivity studies.
    Biweight,
}

impl BaseKernel {
    #[inline]
    fn raw(self, x: f64) -> f64 {
        let s = 1.0 - x * x;
        if s <= 0.0 {
            return 0.0;
        }
        match self {
            BaseKernel::Bump => (-1.0 / s).exp(),
            BaseKernel::Biweight => s * s,
        }
    }
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseKernel::Bump => "bump",
            BaseKernel::Biweight => "biweight",
        })
    }
}

impl FromStr for BaseKernel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bump" => Ok(BaseKernel::Bump),
            "biweight" => Ok(BaseKernel::Biweight),
            other => Err(format!("unknown kernel `{other}` (expected bump|biweight)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mollifier {
    k: u32,
    kernel: BaseKernel,
    base_support: f64,
    norm_const: f64,
    ck0: f64,
}

/// Mollifier of level `k` built on the standard bump.
pub fn mollifier_new(k: i64) -> Result<Mollifier> {
    Mollifier::with_kernel(k, BaseKernel::Bump)
}

impl Mollifier {
    pub fn with_kernel(k: i64, kernel: BaseKernel) -> Result<Self> {
        if k < 1 || k > u32::MAX as i64 {
            return Err(Error::Domain(format!("mollification level must be >= 1, got {k}")));
        }
        let k = k as u32;
        let mass = integrate(|x| kernel.raw(x), -1.0, 1.0, QUAD_TOL);
        let norm_const = 1.0 / mass;
        let mut m = Self {
            k,
            kernel,
            base_support: 1.0,
            norm_const,
            ck0: 0.0,
        };
        let r = m.support_radius();
        m.ck0 = integrate(|y| m.zeta_k(y).powi(2), -r, r, QUAD_TOL * k as f64);
        Ok(m)
    }

    pub fn k(&self) -> u32 {
        self.k
    }
    pub fn kernel(&self) -> BaseKernel {
        self.kernel
    }
    pub fn base_support(&self) -> f64 {
        self.base_support
    }
    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }
    /// `C^k(0) = k ||zeta||^2`, the renormalisation constant.
    pub fn ck0(&self) -> f64 {
        self.ck0
    }

    /// Radius `1/k` of the support of `zeta^k`.
    pub fn support_radius(&self) -> f64 {
        self.base_support / self.k as f64
    }

    #[inline]
    pub fn zeta(&self, x: f64) -> f64 {
        self.norm_const * self.kernel.raw(x)
    }

    #[inline]
    pub fn zeta_k(&self, y: f64) -> f64 {
        let k = self.k as f64;
        k * self.zeta(k * y)
    }

    /// `C^k(x) = int zeta^k(x - y) zeta^k(y) dy`.
    pub fn covariance(&self, x: f64) -> f64 {
        let r = self.support_radius();
        if x.abs() >= 2.0 * r {
            return 0.0;
        }
        if x == 0.0 {
            return self.ck0;
        }
        let lo = (-r).max(x - r);
        let hi = r.min(x + r);
        integrate(
            |y| self.zeta_k(x - y) * self.zeta_k(y),
            lo,
            hi,
            QUAD_TOL * self.k as f64,
        )
    }

    /// Smallest `n_points` on a box of half-length `half_length` that keeps
    /// two cells inside the kernel support radius.
    pub fn required_points(&self, half_length: f64) -> usize {
        (2.0 * half_length * self.k as f64).ceil() as usize
    }

    pub fn check_resolved(&self, grid: &SpaceGrid) -> Result<()> {
        // 2/k >= 2 dx
        if grid.dx() <= self.support_radius() * (1.0 + 1e-12) {
            Ok(())
        } else {
            Err(Error::Resolution {
                k: self.k,
                required: self.required_points(grid.half_length()),
                have: grid.n_points(),
            })
        }
    }

    /// `zeta^k_center` sampled at the grid nodes, argument wrapped periodically.
    pub fn sample_on_grid(&self, grid: &SpaceGrid, center: f64) -> Result<Field> {
        self.check_resolved(grid)?;
        Ok(Field::from_fn(*grid, |x| self.zeta_k(grid.periodic_delta(center - x))))
    }

    /// Kernel as a function of node offset, `kernel[m] = zeta^k(m dx)` with
    /// `m` read periodically; this is the convolution sequence used by the
    /// noise field.
    pub(crate) fn offset_sequence(&self, grid: &SpaceGrid) -> Vec<f64> {
        let n = grid.n_points();
        (0..n)
            .map(|m| {
                let signed = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
                self.zeta_k(signed * grid.dx())
            })
            .collect()
    }

    /// Node offsets `-w..=w` that can carry nonzero kernel mass.
    pub(crate) fn offset_radius(&self, grid: &SpaceGrid) -> usize {
        (self.support_radius() / grid.dx()).ceil() as usize + 1
    }
}
