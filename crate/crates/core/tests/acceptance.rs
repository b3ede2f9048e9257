//! Acceptance suite. Each test prints one `PASS`/`FAIL` line on stderr
//! (bypassing the harness capture) and then asserts the same verdict.

use std::io::Write;
use std::time::Instant;

use kpzlab::experiments::{
    dbsde_refinement, fbsde_probes, replay, run_cross_validation, run_fbsde_verify, run_k_convergence, Experiment,
    ExperimentConfig,
};
use kpzlab::fbsde::{feynman_kac_u, DriverPath, FkOptions, FrozenNoise};
use kpzlab::grid::heat_semigroup;
use kpzlab::rng::{CounterNormals, StreamDomain};
use kpzlab::solvers::{kpz_solve_with, InitialCondition, SolverOptions};
use kpzlab::stats::MeanSe;
use kpzlab::stochastic::{
    ito_check_forward, ito_check_reversed, reversal_identity_check, ItoCoefficients, Partition, SmoothFn,
};
use kpzlab::*;

fn verdict(n: u32, name: &str, passed: bool, detail: String, started: Instant) {
    let line = format!(
        "{} criterion {n:>2} {name}: {detail} [{:.1}s]\n",
        if passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "{line}");
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    num / den
}

/// Composite Simpson on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn criterion_01_mollifier_scaling() {
    let t0 = Instant::now();
    let m1 = mollifier_new(1).unwrap();
    let mut worst_ck = 0.0f64;
    let mut worst_mass = 0.0f64;
    let mut worst_cov = 0.0f64;
    for k in [1i64, 2, 4, 8] {
        let m = mollifier_new(k).unwrap();
        worst_ck = worst_ck.max((m.ck0() - k as f64 * m1.ck0()).abs() / (k as f64 * m1.ck0()));
        let r = m.support_radius();
        let mass = simpson(|y| m.zeta_k(y), -r, r, 20_000);
        worst_mass = worst_mass.max((mass - 1.0).abs());
        for x in [0.0, 0.1, 0.37, -0.8, 1.5] {
            let kx = k as f64 * x;
            worst_cov = worst_cov.max((m.covariance(x) - k as f64 * m1.covariance(kx)).abs());
        }
    }
    let ok = worst_ck < 1e-10 && worst_mass < 1e-8 && worst_cov < 1e-7;
    verdict(
        1,
        "mollifier scaling",
        ok,
        format!("ck0 rel err {worst_ck:.1e}, mass err {worst_mass:.1e}, C^k(x) - kC^1(kx) err {worst_cov:.1e}"),
        t0,
    );
}

#[test]
fn criterion_02_noise_covariance() {
    let t0 = Instant::now();
    let space = SpaceGrid::new(4.0, 256).unwrap();
    let time = TimeGrid::new(1.0, 4).unwrap();
    let m = mollifier_new(2).unwrap();
    // (t, s) node pairs and spatial probes
    let times = [(1usize, 2usize), (2, 4), (4, 4)];
    let xs = [-0.25f64, 0.0, 0.125];
    let ys = [0.0f64, 0.1875, 0.5];
    let xi: Vec<usize> = xs.iter().map(|&x| space.nearest_index(x)).collect();
    let yi: Vec<usize> = ys.iter().map(|&y| space.nearest_index(y)).collect();
    let reps = 10_000u64;
    let mut products: Vec<Vec<f64>> = (0..27).map(|_| Vec::with_capacity(reps as usize)).collect();
    for r in 0..reps {
        let field = pair_with_mollifier(&sample_noise(r, space, time), &m).unwrap();
        let b = field.cumulative();
        let mut p = 0;
        for &(t, s) in &times {
            for &i in &xi {
                for &j in &yi {
                    products[p].push(b.frame(t).values()[i] * b.frame(s).values()[j]);
                    p += 1;
                }
            }
        }
    }
    let mut p = 0;
    let mut inside = 0;
    let mut worst = 0.0f64;
    for &(t, s) in &times {
        for &i in &xi {
            for &j in &yi {
                let exact = time.t(t.min(s)) * m.covariance(space.x(i) - space.x(j));
                let ms = MeanSe::of(&products[p]);
                let z = (ms.mean - exact).abs() / ms.se;
                worst = worst.max(z);
                inside += (z <= 3.0) as usize;
                p += 1;
            }
        }
    }
    verdict(
        2,
        "noise covariance",
        inside == 27,
        format!("{inside}/27 probes within 3 SE (worst {worst:.2} SE), {reps} realizations"),
        t0,
    );
}

#[test]
fn criterion_03_exact_discrete_reversal() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for r in 0..1000u64 {
        let mut g = CounterNormals::new(r, StreamDomain::Initial, 77);
        let n = 1 + g.next_index(200);
        let time = TimeGrid::new(0.5 + g.next_index(100) as f64 / 50.0, n).unwrap();
        let h = DiscretePath::brownian(time, 1.0 + g.next_index(4) as f64, &mut g).map(|v| v + 0.3);
        let d = DiscretePath::brownian(time, 1.0, &mut g);
        let t = g.next_index(n + 1);
        worst = worst.max(reversal_identity_check(&h, &d, t).unwrap().abs());
    }
    verdict(
        3,
        "exact discrete reversal",
        worst < 1e-10,
        format!("max residual {worst:.2e} over 1000 draws"),
        t0,
    );
}

#[test]
fn criterion_04_quadratic_variation_of_z() {
    let t0 = Instant::now();
    let space = SpaceGrid::new(4.0, 256).unwrap();
    let time = TimeGrid::new(1.0, 1000).unwrap();
    let m = mollifier_new(2).unwrap();
    let c = m.ck0();
    let sd = c * (2.0 * time.dt()).sqrt();
    let qvs: Vec<f64> = (0..1000u64)
        .map(|p| {
            let frozen = FrozenNoise::new(&sample_noise(p, space, time), &m).unwrap();
            let driver = DriverPath::sample(p, 0, time);
            let z = build_z(&frozen, &BackwardCharacteristic::new(0.0, &driver)).unwrap();
            quadratic_variation(&z.z_path).last()
        })
        .collect();
    let outside = qvs.iter().filter(|q| (*q - c).abs() > 4.0 * sd).count();
    let ms = MeanSe::of(&qvs);
    let ok = outside <= 1 && ms.within(c, 4.0);
    verdict(
        4,
        "quadratic variation of Z",
        ok,
        format!(
            "{outside}/1000 paths outside 4 SD of C t = {c:.4}; ensemble mean {:.5} ({:.2} SE)",
            ms.mean,
            (ms.mean - c) / ms.se
        ),
        t0,
    );
}

/// Terminal residual RMS of both Itô checks at `n0 * 2^l` steps; drivers
/// are sampled at the finest level and restricted.
fn ito_rms(levels: usize, n0: usize, stochastic: bool) -> (Vec<f64>, Vec<f64>) {
    let ck0 = 2.0;
    let fine = TimeGrid::new(1.0, n0 << (levels - 1)).unwrap();
    let phi = SmoothFn(
        |x: f64| x.sin() + 0.5 * x * x,
        |x: f64| x.cos() + x,
        |x: f64| -x.sin() + 1.0,
    );
    let mut fwd = vec![vec![]; levels];
    let mut rev = vec![vec![]; levels];
    for p in 0..1000u64 {
        let mut g = CounterNormals::new(p, StreamDomain::Driver, 5);
        let zf = DiscretePath::brownian(fine, ck0, &mut g);
        let wf = DiscretePath::brownian(fine, 1.0, &mut g);
        for l in 0..levels {
            let stride = 1 << (levels - 1 - l);
            let part = Partition::uniform(fine.n_steps(), stride).unwrap();
            let z = zf.restrict(&part).unwrap();
            let w = wf.restrict(&part).unwrap();
            let time = *z.time();
            let beta = DiscretePath::from_fn(time, |t| (2.0 * t).cos());
            let (gamma, delta) = if stochastic {
                (
                    DiscretePath::from_fn(time, |t| 0.5 + 0.25 * t),
                    DiscretePath::from_fn(time, |t| 0.7 * (1.0 - 0.5 * t)),
                )
            } else {
                (DiscretePath::constant(time, 0.0), DiscretePath::constant(time, 0.0))
            };
            let c = ItoCoefficients {
                alpha0: 0.2,
                beta: &beta,
                gamma: &gamma,
                delta: &delta,
            };
            fwd[l].push(ito_check_forward(&phi, &c, &z, &w, ck0).unwrap().last());
            let zr = time_reverse(&z, ReversalMode::Driver);
            let wr = time_reverse(&w, ReversalMode::Driver);
            rev[l].push(ito_check_reversed(&phi, &c, &zr, &wr, ck0).unwrap().last());
        }
    }
    let rms = |v: &Vec<f64>| (v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64).sqrt();
    (fwd.iter().map(rms).collect(), rev.iter().map(rms).collect())
}

#[test]
fn criterion_05_ito_formula_orders() {
    let t0 = Instant::now();
    let order = |v: &[f64]| slope(&v.iter().map(|r| -r.log2()).collect::<Vec<_>>());
    let (sf, sr) = ito_rms(4, 100, true);
    let (df, dr) = ito_rms(4, 100, false);
    let (osf, osr, odf, odr) = (order(&sf), order(&sr), order(&df), order(&dr));
    let ok = osf >= 0.4 && osr >= 0.4 && odf >= 0.9 && odr >= 0.9;
    verdict(
        5,
        "Ito formula refinement",
        ok,
        format!("stochastic orders fwd {osf:.3} rev {osr:.3}; deterministic orders fwd {odf:.3} rev {odr:.3}"),
        t0,
    );
}

#[test]
fn criterion_06_hopf_cole_cross_validation() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::preset(Experiment::CrossValidate);
    let rep = run_cross_validation(&cfg).unwrap();
    let frac: f64 = rep.get("monotone_fraction").unwrap().parse().unwrap();
    let med: f64 = rep.get("median_order").unwrap().parse().unwrap();
    verdict(
        6,
        "Hopf-Cole cross-validation",
        rep.passed && frac >= 0.9 && med >= 0.4,
        format!(
            "{:.0}% of {} seeds strictly decreasing, median order {med:.3}",
            100.0 * frac,
            cfg.n_seeds
        ),
        t0,
    );
}

#[test]
fn criterion_07_bridge_feynman_kac_matches_grid() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig {
        n_drivers: 0,
        ..ExperimentConfig::preset(Experiment::FbsdeVerify)
    };
    let probes = fbsde_probes(&cfg).unwrap();
    let gaps: Vec<f64> = probes.iter().map(|p| p.gap_in_se().unwrap()).collect();
    let within = gaps.iter().filter(|g| g.abs() <= 3.0).count();
    let worst = gaps.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    verdict(
        7,
        "bridge Feynman-Kac vs grid",
        within as f64 >= 0.95 * probes.len() as f64,
        format!(
            "{within}/{} probes within 3 bridge-SE at {} bridges (worst {worst:.2} SE)",
            probes.len(),
            cfg.n_bridges
        ),
        t0,
    );
}

#[test]
fn criterion_08_dbsde_residual() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::preset(Experiment::FbsdeVerify);
    let r = dbsde_refinement(&cfg).unwrap();
    let reg = r.studies.last().unwrap().regression;
    let null = reg.null_within(3.0);
    let rms: Vec<String> = r.studies.iter().map(|s| format!("{:.3e}", s.rms_terminal)).collect();
    verdict(
        8,
        "DBSDE residual",
        null && r.rms_order >= 0.4,
        format!(
            "{} drivers; intercept {:.2} SE, slope {:.2} SE; terminal RMS [{}] order {:.3}",
            cfg.n_drivers,
            reg.intercept / reg.se_intercept,
            reg.slope / reg.se_slope,
            rms.join(", "),
            r.rms_order
        ),
        t0,
    );
}

#[test]
fn criterion_09_zero_noise_analytic_values() {
    let t0 = Instant::now();
    let space = SpaceGrid::new(8.0, 512).unwrap();
    let time = TimeGrid::new(1.0, 200).unwrap();
    let m = mollifier_new(2).unwrap();
    let zero = NoiseRealization::zeros(space, time);
    let field = pair_with_mollifier(&zero, &m).unwrap();
    let opts = SolverOptions {
        max_step_ratio: None,
        ..SolverOptions::default()
    };
    let kpz = kpz_solve_with(InitialCondition::flat(space).h0(), &field, &m, &opts).unwrap();
    let mut flat_err = 0.0f64;
    for (j, f) in kpz.trajectory.frames().iter().enumerate() {
        let exact = 0.5 * m.ck0() * kpz.trajectory.time().t(j);
        flat_err = flat_err.max(f.values().iter().map(|v| (v - exact).abs()).fold(0.0, f64::max));
    }

    let h0 = |x: f64| 0.6 * (-x * x).exp();
    let u0 = |y: f64| (-h0(y)).exp();
    let frozen = FrozenNoise::new(&zero, &m).unwrap();
    let fk = FkOptions {
        n_bridges: 200,
        ..FkOptions::default()
    };
    let mut fk_err = 0.0f64;
    for (p, x) in [-1.0, -0.25, 0.0, 0.5, 1.25].into_iter().enumerate() {
        let driver = DriverPath::sample(9, p as u64, time);
        for j in [50, 100, 200] {
            let gamma = x + driver.w().last() - driver.w().value(j);
            let t = time.t(j);
            let est = feynman_kac_u(j, x, &frozen, &driver, &u0, &fk).unwrap();
            // heat kernel against u0 by fine Simpson quadrature
            let s = t.sqrt();
            let heat = simpson(
                |y| u0(y) * (-(gamma - y).powi(2) / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt(),
                gamma - 12.0 * s,
                gamma + 12.0 * s,
                4000,
            );
            fk_err = fk_err.max((est.value - (-0.5 * m.ck0() * t).exp() * heat).abs());
        }
    }
    // grid oracle for the same profile
    let u0_field = Field::from_fn(space, u0);
    let g = heat_semigroup(&u0_field, 1.0).unwrap();
    let x0 = space.x(256);
    let driver = DriverPath::sample(1, 0, time);
    let at_s = feynman_kac_u(200, x0, &frozen, &driver, &u0, &fk).unwrap();
    let grid_err = (at_s.value - (-0.5 * m.ck0()).exp() * g.values()[256]).abs();
    let ok = flat_err < 1e-10 && fk_err < 1e-6 && grid_err < 1e-6;
    verdict(
        9,
        "zero-noise analytic values",
        ok,
        format!(
            "flat KPZ err {flat_err:.1e}; Feynman-Kac err {fk_err:.1e} (quadrature), {grid_err:.1e} (spectral heat)"
        ),
        t0,
    );
}

#[test]
fn criterion_10_k_convergence_diagnostic() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::preset(Experiment::KConvergence);
    let s = run_k_convergence(&cfg).unwrap();
    let d: Vec<String> = s
        .distances
        .iter()
        .map(|d| format!("KS({},{})={:.3}+-{:.3}", d.k_a, d.k_b, d.ks, d.bootstrap_se))
        .collect();
    verdict(
        10,
        "k-convergence diagnostic",
        s.stabilizing,
        format!("{} members per k; {}", cfg.ensemble, d.join(", ")),
        t0,
    );
}

#[test]
fn criterion_11_reproducibility() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::preset(Experiment::Replay);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noise.bin");
    sample_noise(cfg.seed, cfg.space().unwrap(), cfg.time().unwrap())
        .save(&path)
        .unwrap();
    let cfg_text = cfg.to_text();

    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let cfg = ExperimentConfig::parse(&cfg_text).unwrap();
            let noise = NoiseRealization::load(&path).unwrap();
            let replayed = replay(&noise, &cfg).unwrap().digest();
            let verify = ExperimentConfig {
                n_steps: 20,
                n_probes: 3,
                n_bridges: 500,
                n_drivers: 8,
                dbsde_steps: 40,
                ..cfg.clone()
            };
            (replayed, run_fbsde_verify(&verify).unwrap().digest())
        })
    };
    let fresh = replay(&sample_noise(cfg.seed, cfg.space().unwrap(), cfg.time().unwrap()), &cfg)
        .unwrap()
        .digest();
    let runs: Vec<(String, String)> = [1, 2, 4].into_iter().map(run_with).collect();
    let ok = runs.iter().all(|r| *r == runs[0]) && runs[0].0 == fresh;
    verdict(
        11,
        "reproducibility",
        ok,
        format!(
            "replay digest {} identical across 1/2/4 threads and fresh sampling: {ok}",
            &runs[0].0[..16]
        ),
        t0,
    );
}
