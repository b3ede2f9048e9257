//! Order-stable summaries used by the Monte Carlo checks.

use crate::rng::{CounterNormals, StreamDomain};

/// Pairwise summation in index order; the result depends only on the data.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (xs.len() - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            se: (variance(xs) / xs.len() as f64).sqrt(),
            n: xs.len(),
        }
    }

    /// `|mean - target| <= k se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Two-sample Kolmogorov–Smirnov distance `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Bootstrap replicates of `ks_two_sample`, resampling both ensembles.
pub fn bootstrap_ks(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    (0..resamples)
        .map(|r| {
            let mut rng = CounterNormals::new(seed, StreamDomain::Bootstrap, r as u64);
            let ra: Vec<f64> = (0..a.len()).map(|_| a[rng.next_index(a.len())]).collect();
            let rb: Vec<f64> = (0..b.len()).map(|_| b[rng.next_index(b.len())]).collect();
            ks_two_sample(&ra, &rb)
        })
        .collect()
}

/// Sufficient statistics of one cluster for `y = a + b g`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClusterAccum {
    pub n: usize,
    pub sg: f64,
    pub sgg: f64,
    pub sy: f64,
    pub sgy: f64,
}

impl ClusterAccum {
    pub fn push(&mut self, g: f64, y: f64) {
        self.n += 1;
        self.sg += g;
        self.sgg += g * g;
        self.sy += y;
        self.sgy += g * y;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionStat {
    pub intercept: f64,
    pub slope: f64,
    pub se_intercept: f64,
    pub se_slope: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
}

impl RegressionStat {
    /// Both coefficients within `k` standard errors of zero.
    pub fn null_within(&self, k: f64) -> bool {
        self.intercept.abs() <= k * self.se_intercept && self.slope.abs() <= k * self.se_slope
    }
}

/// Pooled least squares with cluster-robust (sandwich) standard errors.
pub fn cluster_regression(clusters: &[ClusterAccum]) -> RegressionStat {
    let n: usize = clusters.iter().map(|c| c.n).sum();
    let s = |f: fn(&ClusterAccum) -> f64| pairwise_sum(&clusters.iter().map(f).collect::<Vec<_>>());
    let (s1, sg, sgg, sy, sgy) = (n as f64, s(|c| c.sg), s(|c| c.sgg), s(|c| c.sy), s(|c| c.sgy));
    let det = s1 * sgg - sg * sg;
    // (X'X)^{-1}
    let inv = [[sgg / det, -sg / det], [-sg / det, s1 / det]];
    let a = inv[0][0] * sy + inv[0][1] * sgy;
    let b = inv[1][0] * sy + inv[1][1] * sgy;
    let mut meat = [[0.0; 2]; 2];
    for c in clusters {
        // cluster score X_c' e_c
        let u0 = c.sy - a * c.n as f64 - b * c.sg;
        let u1 = c.sgy - a * c.sg - b * c.sgg;
        meat[0][0] += u0 * u0;
        meat[0][1] += u0 * u1;
        meat[1][1] += u1 * u1;
    }
    meat[1][0] = meat[0][1];
    let g = clusters.len() as f64;
    let adj = if g > 1.0 { g / (g - 1.0) } else { 1.0 };
    let sand = |i: usize| {
        let mut v = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                v += inv[i][p] * meat[p][q] * inv[i][q];
            }
        }
        (adj * v).sqrt()
    };
    RegressionStat {
        intercept: a,
        slope: b,
        se_intercept: sand(0),
        se_slope: sand(1),
        n_obs: n,
        n_clusters: clusters.len(),
    }
}
