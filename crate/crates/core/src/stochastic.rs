//! Discrete forward (left-endpoint) and backward (right-endpoint) stochastic
//! integrals, time reversal, quadratic variation and the mixed Itô formula.
//!
//! Adaptedness is the caller's contract. A forward integrand `H(t_i)` may use
//! information up to `t_i` of the driver it multiplies; a backward integrand
//! `H(t_{i+1})` may use only the future of its driver (the increments after
//! `t_{i+1}`). With these conventions the reversal identity
//! `int_0^t H dD~ = -int_{S-t}^S H~ dD` holds exactly for finite sums.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::CounterNormals;

/// Values of a process at the nodes `t_0..=t_n` of a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePath {
    time: TimeGrid,
    values: Vec<f64>,
}

impl DiscretePath {
    pub fn new(time: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != time.n_steps() + 1 {
            return Err(Error::Shape(format!(
                "path has {} values for {} steps",
                values.len(),
                time.n_steps()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite path value at node {i}")));
        }
        Ok(Self { time, values })
    }

    pub(crate) fn from_vec_unchecked(time: TimeGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), time.n_steps() + 1);
        Self { time, values }
    }

    pub fn constant(time: TimeGrid, c: f64) -> Self {
        Self::from_vec_unchecked(time, vec![c; time.n_steps() + 1])
    }

    pub fn from_fn(time: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..=time.n_steps()).map(|i| f(time.t(i))).collect();
        Self::from_vec_unchecked(time, values)
    }

    /// Cumulative sum of `increments` started at `start`.
    pub fn from_increments(time: TimeGrid, start: f64, increments: &[f64]) -> Result<Self> {
        if increments.len() != time.n_steps() {
            return Err(Error::Shape(format!(
                "{} increments for {} steps",
                increments.len(),
                time.n_steps()
            )));
        }
        let mut values = Vec::with_capacity(increments.len() + 1);
        let mut acc = start;
        values.push(acc);
        for d in increments {
            acc += d;
            values.push(acc);
        }
        Self::new(time, values)
    }

    /// Brownian path from 0 with `Var(D(t)) = rate * t`.
    pub fn brownian(time: TimeGrid, rate: f64, normals: &mut CounterNormals) -> Self {
        let sd = (rate * time.dt()).sqrt();
        let mut values = Vec::with_capacity(time.n_steps() + 1);
        let mut acc = 0.0;
        values.push(acc);
        for _ in 0..time.n_steps() {
            acc += sd * normals.next_normal();
            values.push(acc);
        }
        Self::from_vec_unchecked(time, values)
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn value(&self, j: usize) -> f64 {
        self.values[j]
    }
    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
    pub fn n_steps(&self) -> usize {
        self.time.n_steps()
    }

    pub fn increments(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.time, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination of two paths on the same grid.
    pub fn zip_with(&self, other: &DiscretePath, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.time.check_same(&other.time)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_vec_unchecked(self.time, values))
    }

    /// Sample the path at the nodes of `partition`; the partition must be
    /// uniform so the result lives on a coarser grid.
    pub fn restrict(&self, partition: &Partition) -> Result<Self> {
        if partition.last() != self.n_steps() {
            return Err(Error::Shape("partition does not end at the final node".into()));
        }
        let stride = partition
            .uniform_stride()
            .ok_or_else(|| Error::Shape("partition is not uniform".into()))?;
        let time = self.time.coarsen(stride)?;
        let values = partition.nodes().iter().map(|&i| self.values[i]).collect();
        Ok(Self::from_vec_unchecked(time, values))
    }
}

/// Strictly increasing node indices `0 = i_0 < ... < i_m = n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    nodes: Vec<usize>,
}

impl Partition {
    pub fn new(nodes: Vec<usize>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0 {
            return Err(Error::Shape("partition must start at node 0 and have two nodes".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Shape("partition nodes must be strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    /// Every `stride`-th node of an `n_steps` grid.
    pub fn uniform(n_steps: usize, stride: usize) -> Result<Self> {
        if stride == 0 || !n_steps.is_multiple_of(stride) {
            return Err(Error::Shape(format!("stride {stride} does not divide {n_steps}")));
        }
        Self::new((0..=n_steps / stride).map(|i| i * stride).collect())
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }
    pub fn last(&self) -> usize {
        self.nodes[self.nodes.len() - 1]
    }

    fn uniform_stride(&self) -> Option<usize> {
        let s = self.nodes[1] - self.nodes[0];
        self.nodes.windows(2).all(|w| w[1] - w[0] == s).then_some(s)
    }
}

/// `I(t_j) = sum_{i<j} H(t_i) (D(t_{i+1}) - D(t_i))`.
pub fn forward_integral(h: &DiscretePath, d: &DiscretePath) -> Result<DiscretePath> {
    h.time.check_same(&d.time)?;
    Ok(riemann(h, d, 0))
}

/// `J(t_j) = sum_{i<j} H(t_{i+1}) (D(t_{i+1}) - D(t_i))`.
pub fn backward_integral(h: &DiscretePath, d: &DiscretePath) -> Result<DiscretePath> {
    h.time.check_same(&d.time)?;
    Ok(riemann(h, d, 1))
}

fn riemann(h: &DiscretePath, d: &DiscretePath, shift: usize) -> DiscretePath {
    let n = d.n_steps();
    let mut values = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    values.push(acc);
    for i in 0..n {
        acc += h.values[i + shift] * (d.values[i + 1] - d.values[i]);
        values.push(acc);
    }
    DiscretePath::from_vec_unchecked(d.time, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReversalMode {
    /// `P~(t_j) = P(t_{n-j}) - P(t_n)`, for drivers.
    Driver,
    /// `P~(t_j) = P(t_{n-j})`, for integrands.
    Integrand,
}

pub fn time_reverse(p: &DiscretePath, mode: ReversalMode) -> DiscretePath {
    let shift = match mode {
        ReversalMode::Driver => p.last(),
        ReversalMode::Integrand => 0.0,
    };
    let values = p.values.iter().rev().map(|v| v - shift).collect();
    DiscretePath::from_vec_unchecked(p.time, values)
}

/// `int_0^t H dD~ + int_{S-t}^S H~ dD`, which vanishes identically.
pub fn reversal_identity_check(h: &DiscretePath, d: &DiscretePath, t: usize) -> Result<f64> {
    h.time.check_same(&d.time)?;
    let n = d.n_steps();
    if t > n {
        return Err(Error::Shape(format!("node {t} beyond {n}")));
    }
    let d_rev = time_reverse(d, ReversalMode::Driver);
    let h_rev = time_reverse(h, ReversalMode::Integrand);
    let fwd = forward_integral(h, &d_rev)?;
    let bwd = backward_integral(&h_rev, d)?;
    Ok(fwd.values[t] + (bwd.values[n] - bwd.values[n - t]))
}

/// `QV(t_j) = sum_{i<j} (Delta D_i)^2`.
pub fn quadratic_variation(d: &DiscretePath) -> DiscretePath {
    riemann(
        &DiscretePath::from_vec_unchecked(d.time, d.increments().into_iter().chain([0.0]).collect()),
        d,
        0,
    )
}

/// A scalar function with its first two derivatives.
pub trait Smooth {
    fn f(&self, x: f64) -> f64;
    fn d1(&self, x: f64) -> f64;
    fn d2(&self, x: f64) -> f64;
}

/// `Smooth` built from three closures.
pub struct SmoothFn<F, G, H>(pub F, pub G, pub H);

impl<F, G, H> Smooth for SmoothFn<F, G, H>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
    H: Fn(f64) -> f64,
{
    fn f(&self, x: f64) -> f64 {
        (self.0)(x)
    }
    fn d1(&self, x: f64) -> f64 {
        (self.1)(x)
    }
    fn d2(&self, x: f64) -> f64 {
        (self.2)(x)
    }
}

/// Coefficients of `alpha = alpha0 + int beta dr + int gamma dZ + int delta dW`.
pub struct ItoCoefficients<'a> {
    pub alpha0: f64,
    pub beta: &'a DiscretePath,
    pub gamma: &'a DiscretePath,
    pub delta: &'a DiscretePath,
}

#[derive(Clone, Copy)]
enum Conv {
    Forward,
    Backward,
}

/// Residual of the mixed Itô formula with `Z` integrated forward (quadratic
/// variation `ck0 t`) and `W` backward (quadratic variation `t`):
/// `phi(alpha) - [phi(alpha0) + int phi' beta + int phi' gamma dZ
///  + int phi' delta dW + ck0/2 int phi'' gamma^2 - 1/2 int phi'' delta^2]`.
pub fn ito_check_forward(
    phi: &dyn Smooth,
    c: &ItoCoefficients,
    z: &DiscretePath,
    w: &DiscretePath,
    ck0: f64,
) -> Result<DiscretePath> {
    ito_check(phi, c, z, w, ck0, Conv::Forward, Conv::Backward)
}

/// Same formula for the reversed drivers: `Z~` integrated backward, `W~`
/// forward, with the second-order corrections changing sign.
pub fn ito_check_reversed(
    phi: &dyn Smooth,
    c: &ItoCoefficients,
    z_rev: &DiscretePath,
    w_rev: &DiscretePath,
    ck0: f64,
) -> Result<DiscretePath> {
    ito_check(phi, c, z_rev, w_rev, ck0, Conv::Backward, Conv::Forward)
}

fn ito_check(
    phi: &dyn Smooth,
    c: &ItoCoefficients,
    z: &DiscretePath,
    w: &DiscretePath,
    ck0: f64,
    zc: Conv,
    wc: Conv,
) -> Result<DiscretePath> {
    let time = z.time;
    for p in [c.beta, c.gamma, c.delta, w] {
        time.check_same(&p.time)?;
    }
    let integrate = |h: &DiscretePath, d: &DiscretePath, conv: Conv| match conv {
        Conv::Forward => riemann(h, d, 0),
        Conv::Backward => riemann(h, d, 1),
    };
    let dt = time.dt();
    let n = time.n_steps();
    let drift: Vec<f64> = std::iter::once(0.0)
        .chain(c.beta.values[..n].iter().scan(0.0, |acc, b| {
            *acc += b * dt;
            Some(*acc)
        }))
        .collect();
    let gz = integrate(c.gamma, z, zc);
    let dw = integrate(c.delta, w, wc);
    let alpha: Vec<f64> = (0..=n)
        .map(|j| c.alpha0 + drift[j] + gz.values[j] + dw.values[j])
        .collect();
    let alpha = DiscretePath::from_vec_unchecked(time, alpha);

    let d1 = alpha.map(|a| phi.d1(a));
    let g = d1.zip_with(c.gamma, |p, g| p * g)?;
    let dl = d1.zip_with(c.delta, |p, d| p * d)?;
    let int_g = integrate(&g, z, zc);
    let int_d = integrate(&dl, w, wc);
    let sign = |conv: Conv| match conv {
        Conv::Forward => 1.0,
        Conv::Backward => -1.0,
    };
    let (sz, sw) = (sign(zc), sign(wc));

    let mut out = Vec::with_capacity(n + 1);
    let mut acc = phi.f(c.alpha0);
    out.push(phi.f(alpha.values[0]) - acc);
    for i in 0..n {
        let a = alpha.values[i];
        let (p1, p2) = (phi.d1(a), phi.d2(a));
        acc += p1 * c.beta.values[i] * dt
            + 0.5 * p2 * (sz * ck0 * c.gamma.values[i].powi(2) + sw * c.delta.values[i].powi(2)) * dt;
        out.push(phi.f(alpha.values[i + 1]) - (acc + int_g.values[i + 1] + int_d.values[i + 1]));
    }
    DiscretePath::new(time, out)
}

/// Both sides of
/// `int_0^t phi(Z~) psi dZ~ = phi2(Z~(t)) int_0^t phi1(Z~ - Z~(t)) psi dZ~(backward)
///   - ck0 int_0^t phi'(Z~) psi dr`
/// for `phi(z) = phi1(z - z') phi2(z')`. Returns `(lhs, rhs)`.
pub fn weighted_backward_forward_bridge(
    phi: &dyn Smooth,
    phi1: &dyn Fn(f64) -> f64,
    phi2: &dyn Fn(f64) -> f64,
    psi: &DiscretePath,
    z: &DiscretePath,
    t: usize,
    ck0: f64,
) -> Result<(f64, f64)> {
    psi.time.check_same(&z.time)?;
    if t > z.n_steps() {
        return Err(Error::Shape(format!("node {t} beyond {}", z.n_steps())));
    }
    let zv = &z.values;
    let pv = &psi.values;
    let zt = zv[t];
    let dt = z.time.dt();
    let mut lhs = 0.0;
    let mut back = 0.0;
    let mut corr = 0.0;
    for i in 0..t {
        let dz = zv[i + 1] - zv[i];
        lhs += phi.f(zv[i]) * pv[i] * dz;
        back += phi1(zv[i + 1] - zt) * pv[i + 1] * dz;
        corr += phi.d1(zv[i]) * pv[i] * dt;
    }
    Ok((lhs, phi2(zt) * back - ck0 * corr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamDomain;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn bm(n: usize, stream: u64) -> DiscretePath {
        DiscretePath::brownian(grid(n), 1.0, &mut CounterNormals::new(1, StreamDomain::Driver, stream))
    }

    #[test]
    fn constant_integrand_telescopes() {
        let d = bm(50, 0);
        let one = DiscretePath::constant(grid(50), 1.0);
        let f = forward_integral(&one, &d).unwrap();
        let b = backward_integral(&one, &d).unwrap();
        for j in 0..=50 {
            assert!((f.value(j) - d.value(j)).abs() < 1e-12);
            assert!((b.value(j) - d.value(j)).abs() < 1e-12);
        }
        let zero = DiscretePath::constant(grid(50), 0.0);
        assert!(forward_integral(&zero, &d).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        assert!(forward_integral(&bm(10, 0), &bm(20, 0)).is_err());
        assert!(backward_integral(&bm(10, 0), &bm(20, 0)).is_err());
    }

    #[test]
    fn backward_minus_forward_is_covariation() {
        let h = bm(64, 3);
        let d = bm(64, 4);
        let diff = backward_integral(&h, &d).unwrap().last() - forward_integral(&h, &d).unwrap().last();
        let cov: f64 = h.increments().iter().zip(d.increments()).map(|(a, b)| a * b).sum();
        assert!((diff - cov).abs() < 1e-12);
        let qv = quadratic_variation(&d).last();
        let self_diff = backward_integral(&d, &d).unwrap().last() - forward_integral(&d, &d).unwrap().last();
        assert!((self_diff - qv).abs() < 1e-12);
    }

    #[test]
    fn future_constant_step_integrand() {
        let n = 40;
        let d = bm(n, 5);
        let (a, b, zeta) = (10usize, 25usize, 1.7);
        let h = DiscretePath::from_vec_unchecked(
            grid(n),
            (0..=n).map(|i| if i > a && i <= b { zeta } else { 0.0 }).collect(),
        );
        let j = backward_integral(&h, &d).unwrap();
        for t in 0..=n {
            let expect = zeta * (d.value(b.min(t)) - d.value(a.min(t)));
            assert!((j.value(t) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn reversal_closed_forms() {
        let g = grid(10);
        let c = DiscretePath::constant(g, 3.0);
        assert!(time_reverse(&c, ReversalMode::Driver)
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let lin = DiscretePath::from_fn(g, |t| 2.0 * t);
        let rev = time_reverse(&lin, ReversalMode::Driver);
        for j in 0..=10 {
            assert!((rev.value(j) + 2.0 * g.t(j)).abs() < 1e-12);
        }
        let d = bm(33, 9);
        let twice = time_reverse(&time_reverse(&d, ReversalMode::Driver), ReversalMode::Driver);
        for (a, b) in twice.values().iter().zip(d.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            time_reverse(&time_reverse(&d, ReversalMode::Integrand), ReversalMode::Integrand),
            d
        );
    }

    #[test]
    fn reversal_identity_at_endpoints() {
        let h = bm(80, 1);
        let d = bm(80, 2);
        assert!(reversal_identity_check(&h, &d, 0).unwrap().abs() < 1e-12);
        assert!(reversal_identity_check(&h, &d, 80).unwrap().abs() < 1e-12);
        assert!(reversal_identity_check(&h, &d, 81).is_err());
    }

    #[test]
    fn quadratic_variation_of_linear_path_vanishes() {
        for n in [10, 100, 1000] {
            let lin = DiscretePath::from_fn(grid(n), |t| 3.0 * t);
            let qv = quadratic_variation(&lin).last();
            assert!((qv - 9.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_variation_of_bm() {
        let d = bm(2000, 7);
        let qv = quadratic_variation(&d).last();
        assert!((qv - 1.0).abs() < 4.0 * (2.0 / 2000.0f64).sqrt());
    }

    #[test]
    fn forward_ito_isometry() {
        let n = 50;
        let paths = 10_000;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut s4 = 0.0;
        for p in 0..paths {
            let d = bm(n, 100 + p);
            let i = forward_integral(&d, &d).unwrap().last();
            s1 += i;
            s2 += i * i;
            s4 += i.powi(4);
        }
        let m1 = s1 / paths as f64;
        let m2 = s2 / paths as f64;
        let se1 = (m2 / paths as f64).sqrt();
        let se2 = ((s4 / paths as f64 - m2 * m2) / paths as f64).sqrt();
        // E int_0^1 D^2 dr on the grid: sum_i t_i dt
        let exact = (0..n).map(|i| i as f64 / n as f64).sum::<f64>() / n as f64;
        assert!(m1.abs() < 3.0 * se1);
        assert!((m2 - exact).abs() < 3.0 * se2, "{m2} vs {exact}");
    }

    fn square() -> SmoothFn<impl Fn(f64) -> f64, impl Fn(f64) -> f64, impl Fn(f64) -> f64> {
        SmoothFn(|x: f64| x * x, |x: f64| 2.0 * x, |_: f64| 2.0)
    }

    #[test]
    fn ito_linear_phi_is_exact() {
        let n = 64;
        let (z, w) = (bm(n, 1), bm(n, 2));
        let beta = bm(n, 3);
        let gamma = bm(n, 4);
        let delta = bm(n, 5);
        let c = ItoCoefficients {
            alpha0: 0.3,
            beta: &beta,
            gamma: &gamma,
            delta: &delta,
        };
        let lin = SmoothFn(|x: f64| 2.0 * x - 1.0, |_: f64| 2.0, |_: f64| 0.0);
        for r in [
            ito_check_forward(&lin, &c, &z, &w, 1.5).unwrap(),
            ito_check_reversed(&lin, &c, &z, &w, 1.5).unwrap(),
        ] {
            assert!(r.values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn ito_deterministic_order_one() {
        let err = |n: usize| {
            let g = grid(n);
            let zero = DiscretePath::constant(g, 0.0);
            let beta = DiscretePath::from_fn(g, |t| (3.0 * t).cos());
            let c = ItoCoefficients {
                alpha0: 0.2,
                beta: &beta,
                gamma: &zero,
                delta: &zero,
            };
            let phi = SmoothFn(f64::sin, f64::cos, |x: f64| -x.sin());
            ito_check_forward(&phi, &c, &zero, &zero, 1.0).unwrap().last().abs()
        };
        let (e1, e2) = (err(100), err(200));
        assert!((e1 / e2).log2() >= 0.9);
    }

    #[test]
    fn ito_square_residual_is_exact_per_step() {
        // For phi = x^2 the residual reduces to gamma^2 (dZ^2 - ck0 dt) and
        // delta^2 (dt - dW^2) sums, which we reproduce directly.
        let n = 32;
        let (z, w) = (bm(n, 11), bm(n, 12));
        let zero = DiscretePath::constant(grid(n), 0.0);
        let gamma = DiscretePath::constant(grid(n), 0.7);
        let delta = DiscretePath::constant(grid(n), 1.3);
        let c = ItoCoefficients {
            alpha0: 0.0,
            beta: &zero,
            gamma: &gamma,
            delta: &delta,
        };
        let ck0 = 2.0;
        let r = ito_check_forward(&square(), &c, &z, &w, ck0).unwrap();
        let dt = 1.0 / n as f64;
        let mut expect = 0.0;
        let (dz, dw) = (z.increments(), w.increments());
        for i in 0..n {
            expect += 0.49 * (dz[i] * dz[i] - ck0 * dt) - 1.69 * (dw[i] * dw[i] - dt);
        }
        assert!((r.last() - expect).abs() < 1e-12, "{} vs {expect}", r.last());
    }

    #[test]
    fn bridge_identity_trivial_and_smooth_cases() {
        let g = grid(400);
        let z = DiscretePath::brownian(g, 2.0, &mut CounterNormals::new(3, StreamDomain::Driver, 0));
        let phi = SmoothFn(|x: f64| (-x).exp(), |x: f64| -(-x).exp(), |x: f64| (-x).exp());
        let e = |x: f64| (-x).exp();
        let zero = DiscretePath::constant(g, 0.0);
        let (l, r) = weighted_backward_forward_bridge(&phi, &e, &e, &zero, &z, 400, 2.0).unwrap();
        assert_eq!((l, r), (0.0, 0.0));

        // smooth driver: lhs - rhs -> +ck0 int phi'(z) psi dr
        let ck0 = 2.0;
        let gap = |n: usize| {
            let g = grid(n);
            let z = DiscretePath::from_fn(g, |t| t.sin());
            let psi = DiscretePath::from_fn(g, |t| (ck0 * t / 2.0).exp());
            let (l, r) = weighted_backward_forward_bridge(&phi, &e, &e, &psi, &z, n, ck0).unwrap();
            l - r
        };
        let exact = ck0 * crate::quadrature::integrate(|t| -(-t.sin()).exp() * (ck0 * t / 2.0).exp(), 0.0, 1.0, 1e-13);
        assert!((gap(1000) - exact).abs() < 1e-2 * exact.abs());
        assert!((gap(2000) - exact).abs() < (gap(1000) - exact).abs());
    }
}
