//! Experiment configuration, orchestration and CSV reports.
//!
//! Every run is a pure function of its [`ExperimentConfig`] (plus, for
//! replays, a persisted noise matrix). Reports carry no timestamps, so two
//! runs with equal inputs produce byte-identical files at any thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fbsde::{
    build_z, dbsde_study, feynman_kac_u, BackwardCharacteristic, DbsdeStudy, DriverPath, FkOptions, FrozenNoise,
    GridRoute, Route,
};
use crate::fbsde::{solve_fbsde_bridge, FbsdeConfig};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::mollifier::{mollifier_new, Mollifier};
use crate::noise::{pair_with_mollifier, sample_noise, NoiseRealization};
use crate::rng::{child_seed, CounterNormals, StreamDomain};
use crate::solvers::{cross_validate, she_solve_with, GradientScheme, InitialCondition, SheScheme, SolverOptions};
use crate::stats::{bootstrap_ks, ks_two_sample, median, quantile_sorted, variance, MeanSe};
use crate::stochastic::quadratic_variation;

pub const MIN_ENSEMBLE: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    CrossValidate,
    FbsdeVerify,
    KConvergence,
    Replay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcChoice {
    Flat,
    Bump,
    Brownian,
}

impl IcChoice {
    fn as_str(self) -> &'static str {
        match self {
            IcChoice::Flat => "flat",
            IcChoice::Bump => "bump",
            IcChoice::Brownian => "brownian",
        }
    }
}

impl FromStr for IcChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "flat" => Ok(IcChoice::Flat),
            "bump" => Ok(IcChoice::Bump),
            "brownian" => Ok(IcChoice::Brownian),
            other => Err(format!(
                "unknown initial condition `{other}` (expected flat|bump|brownian)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub half_length: f64,
    pub n_points: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub k: Vec<i64>,
    pub initial: IcChoice,
    pub ic_amplitude: f64,
    pub ic_width: f64,
    pub ic_sigma: f64,
    pub ic_seed: u64,
    pub seed: u64,
    pub n_seeds: usize,
    pub levels: usize,
    pub window_lo: f64,
    pub window_hi: f64,
    pub gradient: GradientScheme,
    pub she_scheme: SheScheme,
    pub max_step_ratio: Option<f64>,
    pub compensate_zero_noise: bool,
    pub zero_noise: bool,
    pub route: Route,
    pub n_bridges: usize,
    pub n_probes: usize,
    pub probe_lo: f64,
    pub probe_hi: f64,
    pub n_drivers: usize,
    pub dbsde_steps: usize,
    pub ensemble: usize,
    pub bootstrap: usize,
    pub probe_x: f64,
    pub se_threshold: f64,
    pub batch_pass: f64,
    pub monotone_pass: f64,
    pub min_order: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            half_length: 8.0,
            n_points: 512,
            horizon: 1.0,
            n_steps: 1000,
            k: vec![2],
            initial: IcChoice::Flat,
            ic_amplitude: 0.5,
            ic_width: 2.0,
            ic_sigma: 1.0,
            ic_seed: 0,
            seed: 0,
            n_seeds: 32,
            levels: 3,
            window_lo: -4.0,
            window_hi: 4.0,
            gradient: GradientScheme::Spectral,
            she_scheme: SheScheme::Exponential,
            max_step_ratio: None,
            compensate_zero_noise: true,
            zero_noise: false,
            route: Route::Grid,
            n_bridges: 10_000,
            n_probes: 100,
            probe_lo: -1.0,
            probe_hi: 1.0,
            n_drivers: 1000,
            dbsde_steps: 4000,
            ensemble: 1000,
            bootstrap: 200,
            probe_x: 0.0,
            se_threshold: 3.0,
            batch_pass: 0.95,
            monotone_pass: 0.9,
            min_order: 0.4,
        }
    }
}

fn parse_field<T: FromStr>(field: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(field, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(field, format!("expected true|false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    /// Defaults tuned for each subcommand.
    pub fn preset(kind: Experiment) -> Self {
        let base = Self::default();
        match kind {
            Experiment::CrossValidate => Self {
                n_steps: 20_000,
                initial: IcChoice::Bump,
                ..base
            },
            Experiment::FbsdeVerify => Self {
                n_steps: 50,
                initial: IcChoice::Bump,
                ..base
            },
            Experiment::KConvergence => Self {
                k: vec![1, 2, 4, 8],
                ..base
            },
            Experiment::Replay => Self {
                n_steps: 2000,
                initial: IcChoice::Bump,
                levels: 2,
                n_probes: 8,
                ..base
            },
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let ks: Vec<String> = self.k.iter().map(|k| k.to_string()).collect();
        vec![
            ("half_length", self.half_length.to_string()),
            ("n_points", self.n_points.to_string()),
            ("horizon", self.horizon.to_string()),
            ("n_steps", self.n_steps.to_string()),
            ("k", ks.join(",")),
            ("initial", self.initial.as_str().to_string()),
            ("ic_amplitude", self.ic_amplitude.to_string()),
            ("ic_width", self.ic_width.to_string()),
            ("ic_sigma", self.ic_sigma.to_string()),
            ("ic_seed", self.ic_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("n_seeds", self.n_seeds.to_string()),
            ("levels", self.levels.to_string()),
            ("window_lo", self.window_lo.to_string()),
            ("window_hi", self.window_hi.to_string()),
            ("gradient", self.gradient.to_string()),
            ("she_scheme", self.she_scheme.to_string()),
            (
                "max_step_ratio",
                self.max_step_ratio
                    .map_or_else(|| "none".to_string(), |r| r.to_string()),
            ),
            ("compensate_zero_noise", self.compensate_zero_noise.to_string()),
            ("zero_noise", self.zero_noise.to_string()),
            ("route", self.route.to_string()),
            ("n_bridges", self.n_bridges.to_string()),
            ("n_probes", self.n_probes.to_string()),
            ("probe_lo", self.probe_lo.to_string()),
            ("probe_hi", self.probe_hi.to_string()),
            ("n_drivers", self.n_drivers.to_string()),
            ("dbsde_steps", self.dbsde_steps.to_string()),
            ("ensemble", self.ensemble.to_string()),
            ("bootstrap", self.bootstrap.to_string()),
            ("probe_x", self.probe_x.to_string()),
            ("se_threshold", self.se_threshold.to_string()),
            ("batch_pass", self.batch_pass.to_string()),
            ("monotone_pass", self.monotone_pass.to_string()),
            ("min_order", self.min_order.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "half_length" => self.half_length = parse_field(key, v)?,
            "n_points" => self.n_points = parse_field(key, v)?,
            "horizon" => self.horizon = parse_field(key, v)?,
            "n_steps" => self.n_steps = parse_field(key, v)?,
            "k" => {
                self.k = v
                    .split(',')
                    .map(|s| parse_field(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "initial" => self.initial = parse_field(key, v)?,
            "ic_amplitude" => self.ic_amplitude = parse_field(key, v)?,
            "ic_width" => self.ic_width = parse_field(key, v)?,
            "ic_sigma" => self.ic_sigma = parse_field(key, v)?,
            "ic_seed" => self.ic_seed = parse_field(key, v)?,
            "seed" => self.seed = parse_field(key, v)?,
            "n_seeds" => self.n_seeds = parse_field(key, v)?,
            "levels" => self.levels = parse_field(key, v)?,
            "window_lo" => self.window_lo = parse_field(key, v)?,
            "window_hi" => self.window_hi = parse_field(key, v)?,
            "gradient" => self.gradient = parse_field(key, v)?,
            "she_scheme" => self.she_scheme = parse_field(key, v)?,
            "max_step_ratio" => self.max_step_ratio = if v == "none" { None } else { Some(parse_field(key, v)?) },
            "compensate_zero_noise" => self.compensate_zero_noise = parse_bool(key, v)?,
            "zero_noise" => self.zero_noise = parse_bool(key, v)?,
            "route" => self.route = parse_field(key, v)?,
            "n_bridges" => self.n_bridges = parse_field(key, v)?,
            "n_probes" => self.n_probes = parse_field(key, v)?,
            "probe_lo" => self.probe_lo = parse_field(key, v)?,
            "probe_hi" => self.probe_hi = parse_field(key, v)?,
            "n_drivers" => self.n_drivers = parse_field(key, v)?,
            "dbsde_steps" => self.dbsde_steps = parse_field(key, v)?,
            "ensemble" => self.ensemble = parse_field(key, v)?,
            "bootstrap" => self.bootstrap = parse_field(key, v)?,
            "probe_x" => self.probe_x = parse_field(key, v)?,
            "se_threshold" => self.se_threshold = parse_field(key, v)?,
            "batch_pass" => self.batch_pass = parse_field(key, v)?,
            "monotone_pass" => self.monotone_pass = parse_field(key, v)?,
            "min_order" => self.min_order = parse_field(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// `key = value` lines over `base`; `#` starts a comment.
    pub fn parse_over(base: Self, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(&format!("line {}", lineno + 1), "expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    pub fn load(path: impl AsRef<Path>, base: Self) -> Result<Self> {
        Self::parse_over(base, &fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        positive("half_length", self.half_length)?;
        positive("horizon", self.horizon)?;
        positive("se_threshold", self.se_threshold)?;
        if self.n_points < 4 || !self.n_points.is_power_of_two() {
            return Err(Error::config("n_points", "must be a power of two, at least 4"));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps", "must be at least 1"));
        }
        if self.k.is_empty() || self.k.iter().any(|&k| k < 1) {
            return Err(Error::config("k", "need a non-empty list of levels >= 1"));
        }
        if self.levels < 2 || self.levels > 16 {
            return Err(Error::config("levels", "must be between 2 and 16"));
        }
        if !(self.window_lo < self.window_hi) {
            return Err(Error::config("window_lo", "must be below window_hi"));
        }
        if !(self.probe_lo <= self.probe_hi) {
            return Err(Error::config("probe_lo", "must not exceed probe_hi"));
        }
        for (field, v) in [("batch_pass", self.batch_pass), ("monotone_pass", self.monotone_pass)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        if let Some(r) = self.max_step_ratio {
            positive("max_step_ratio", r)?;
        }
        positive("ic_width", self.ic_width)?;
        Ok(())
    }

    pub fn space(&self) -> Result<SpaceGrid> {
        SpaceGrid::new(self.half_length, self.n_points)
    }

    pub fn time(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.n_steps)
    }

    pub fn initial_condition(&self, space: SpaceGrid) -> Result<InitialCondition> {
        match self.initial {
            IcChoice::Flat => Ok(InitialCondition::flat(space)),
            IcChoice::Bump => InitialCondition::cosine_bump(space, self.ic_amplitude, self.ic_width),
            IcChoice::Brownian => InitialCondition::brownian(space, self.ic_seed, self.ic_sigma),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            she_scheme: self.she_scheme,
            gradient: self.gradient,
            max_step_ratio: self.max_step_ratio,
            compensate_zero_noise: self.compensate_zero_noise,
            ..SolverOptions::default()
        }
    }

    fn noise(&self, seed: u64, space: SpaceGrid, time: TimeGrid) -> NoiseRealization {
        if self.zero_noise {
            NoiseRealization::zeros(space, time)
        } else {
            sample_noise(seed, space, time)
        }
    }

    fn first_k(&self) -> Result<Mollifier> {
        mollifier_new(self.k[0])
    }
}

/// Named CSV files plus a key/value summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub name: String,
    pub files: Vec<(String, String)>,
    pub summary: Vec<(String, String)>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

impl Report {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            files: vec![],
            summary: vec![],
            warnings: vec![],
            passed: true,
        }
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for (k, v) in &self.summary {
            let _ = writeln!(s, "{k},{v}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning,\"{}\"", w.replace('"', "'"));
        }
        let _ = writeln!(s, "passed,{}", self.passed);
        s
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Every file of the report, summary last.
    pub fn rendered(&self) -> Vec<(String, String)> {
        let mut all = self.files.clone();
        all.push((format!("{}_summary.csv", self.name), self.summary_csv()));
        all
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, body) in self.rendered() {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(body.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut paths = vec![];
        for (name, body) in self.rendered() {
            let p = dir.join(name);
            fs::write(&p, body)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// `0` pass, `2` statistical contract failed, `3` invalid configuration or
/// input, `4` numerical instability, `1` anything else.
pub fn exit_code(outcome: &Result<Report>) -> i32 {
    match outcome {
        Ok(r) if r.passed => 0,
        Ok(_) => 2,
        Err(Error::Undersampled(_)) => 2,
        Err(
            Error::Config { .. }
            | Error::Incompatible(_)
            | Error::Resolution { .. }
            | Error::Window(_)
            | Error::Domain(_),
        ) => 3,
        Err(Error::Instability { .. } | Error::Positivity { .. }) => 4,
        Err(_) => 1,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:e}"))
}

pub fn run_cross_validation(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let space = cfg.space()?;
    let time = cfg.time()?;
    let m = cfg.first_k()?;
    let ic = cfg.initial_condition(space)?;
    let opts = cfg.solver_options();
    let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|i| child_seed(cfg.seed, i)).collect();
    let reports = seeds
        .iter()
        .map(|&s| {
            cross_validate(
                ic.h0(),
                &cfg.noise(s, space, time),
                &m,
                cfg.levels,
                (cfg.window_lo, cfg.window_hi),
                &opts,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rep = Report::new("cross_validation");
    let mut csv = String::from("seed,level,n_steps,dt,gap,order\n");
    for (s, r) in seeds.iter().zip(&reports) {
        for (l, lv) in r.levels.iter().enumerate() {
            let order = if l == 0 { None } else { Some(r.orders[l - 1]) };
            let _ = writeln!(
                csv,
                "{s},{l},{},{:e},{:e},{}",
                lv.n_steps,
                lv.dt,
                lv.gap,
                fmt_opt(order)
            );
        }
    }
    rep.files.push(("cross_validation.csv".into(), csv));

    let monotone = reports.iter().filter(|r| r.monotone).count() as f64 / reports.len().max(1) as f64;
    let orders: Vec<f64> = reports.iter().map(|r| r.observed_order).collect();
    let med = if orders.is_empty() { f64::NAN } else { median(&orders) };
    rep.note("k", m.k());
    rep.note("n_seeds", reports.len());
    rep.note("monotone_fraction", monotone);
    rep.note("median_order", format!("{med:e}"));
    if cfg.zero_noise && cfg.initial == IcChoice::Flat {
        let exact = if cfg.compensate_zero_noise {
            0.0
        } else {
            0.5 * m.ck0() * cfg.horizon
        };
        let worst = reports
            .iter()
            .flat_map(|r| r.levels.iter().map(|l| (l.gap - exact).abs()))
            .fold(0.0, f64::max);
        rep.note("analytic_gap", format!("{exact:e}"));
        rep.note("max_analytic_error", format!("{worst:e}"));
        rep.passed = worst <= 1e-10;
    } else {
        rep.passed = monotone >= cfg.monotone_pass && med >= cfg.min_order;
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub seed: u64,
    pub x: f64,
    pub grid_u: f64,
    pub bridge: Option<(f64, f64, usize)>,
    pub qv: f64,
    pub qv_sd: f64,
    pub ck0: f64,
}

impl ProbeResult {
    /// `(bridge - grid) / se`; gaps below `1e-8` count as exact agreement.
    pub fn gap_in_se(&self) -> Option<f64> {
        self.bridge.map(|(u, se, _)| {
            let gap = u - self.grid_u;
            if gap.abs() <= 1e-8 {
                0.0
            } else if se > 0.0 {
                gap / se
            } else {
                f64::INFINITY
            }
        })
    }

    pub fn qv_ok(&self) -> bool {
        (self.qv - self.ck0 * 1.0).abs() <= 4.0 * self.qv_sd || (self.qv_sd == 0.0 && self.qv == 0.0)
    }
}

fn probe_x(cfg: &ExperimentConfig, p: usize) -> f64 {
    cfg.probe_lo + (cfg.probe_hi - cfg.probe_lo) * (p as f64 + 0.5) / cfg.n_probes as f64
}

/// Bridge-route `u(S, x)` against the grid `psi_S(x)` on independent
/// (noise, driver, x) probes.
pub fn fbsde_probes(cfg: &ExperimentConfig) -> Result<Vec<ProbeResult>> {
    let space = cfg.space()?;
    let time = cfg.time()?;
    let m = cfg.first_k()?;
    let u0 = cfg.initial_condition(space)?.u0();
    let opts = cfg.solver_options();
    let n = time.n_steps();
    (0..cfg.n_probes)
        .map(|p| {
            let seed = child_seed(cfg.seed, p as u64);
            let x = probe_x(cfg, p);
            let frozen = FrozenNoise::new(&cfg.noise(seed, space, time), &m)?;
            let grid = GridRoute::new(&frozen, &u0, &opts)?;
            let driver = DriverPath::sample(seed, 0, time);
            let grid_u = grid.psi.last().interpolate(x);
            let bridge = if cfg.n_bridges >= 100 {
                let fk = FkOptions {
                    n_bridges: cfg.n_bridges,
                    seed,
                    ..FkOptions::default()
                };
                let f = |y: f64| u0.interpolate(y);
                let est = feynman_kac_u(n, x, &frozen, &driver, &f, &fk)?;
                Some((est.value, est.se, est.n_samples))
            } else {
                None
            };
            let z = build_z(&frozen, &BackwardCharacteristic::new(x, &driver))?;
            let qv = quadratic_variation(&z.z_path).last();
            let ck0 = m.ck0() * time.horizon();
            Ok(ProbeResult {
                seed,
                x,
                grid_u,
                bridge,
                qv,
                qv_sd: if cfg.zero_noise {
                    0.0
                } else {
                    m.ck0() * (2.0 * time.dt() * time.horizon()).sqrt()
                },
                ck0,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbsdeRefinement {
    pub studies: Vec<DbsdeStudy>,
    /// Least-squares slope of `-log2 rms` against the level index.
    pub rms_order: f64,
}

/// Terminal-residual RMS at `levels` step sizes ending at `dbsde_steps`, on
/// one noise sampled at the finest level and shared driver paths.
pub fn dbsde_refinement(cfg: &ExperimentConfig) -> Result<DbsdeRefinement> {
    let space = cfg.space()?;
    let fine = TimeGrid::new(cfg.horizon, cfg.dbsde_steps)?;
    let top = 1usize << (cfg.levels - 1);
    if !cfg.dbsde_steps.is_multiple_of(top) {
        return Err(Error::config("dbsde_steps", format!("must be divisible by {top}")));
    }
    let m = cfg.first_k()?;
    let u0 = cfg.initial_condition(space)?.u0();
    let opts = cfg.solver_options();
    let noise_seed = child_seed(cfg.seed, u64::MAX);
    let noise = cfg.noise(noise_seed, space, fine).materialize();
    let x = cfg.probe_x;
    let studies = (0..cfg.levels)
        .map(|l| {
            let factor = top >> l;
            let frozen = FrozenNoise::new(&noise.coarsen(factor)?, &m)?;
            let grid = GridRoute::new(&frozen, &u0, &opts)?;
            dbsde_study(&grid, &frozen, x, noise_seed, cfg.n_drivers, &fine)
        })
        .collect::<Result<Vec<_>>>()?;
    let ys: Vec<f64> = studies.iter().map(|s| -s.rms_terminal.log2()).collect();
    Ok(DbsdeRefinement {
        rms_order: slope(&ys),
        studies,
    })
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        num += (i as f64 - xm) * (y - ym);
        den += (i as f64 - xm).powi(2);
    }
    num / den
}

pub fn run_fbsde_verify(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let mut rep = Report::new("fbsde_verify");
    if cfg.n_bridges < 100 {
        rep.warnings.push(format!(
            "Monte Carlo undersampling: n_bridges = {} is below 100; bridge estimates skipped",
            cfg.n_bridges
        ));
        rep.passed = false;
    }
    let probes = fbsde_probes(cfg)?;
    let t = cfg.horizon;
    let mut rows = String::from("x,t,route,estimate,standard_error,n_samples,seed\n");
    let mut detail = String::from("probe,seed,x,grid_u,bridge_u,bridge_se,gap_se,qv,qv_expected,qv_sd\n");
    let mut within = 0;
    let mut compared = 0;
    for (p, r) in probes.iter().enumerate() {
        let _ = writeln!(rows, "{:e},{t:e},grid,{:e},0,0,{}", r.x, r.grid_u, r.seed);
        let (bu, bse) = match r.bridge {
            Some((u, se, n)) => {
                let _ = writeln!(rows, "{:e},{t:e},bridge,{u:e},{se:e},{n},{}", r.x, r.seed);
                if se > 0.1 * u.abs() {
                    rep.warnings.push(format!(
                        "Monte Carlo undersampling: probe {p} has relative SE {:.3}",
                        se / u.abs()
                    ));
                }
                (Some(u), Some(se))
            }
            None => (None, None),
        };
        if let Some(g) = r.gap_in_se() {
            compared += 1;
            within += (g.abs() <= cfg.se_threshold) as usize;
        }
        let _ = writeln!(
            detail,
            "{p},{},{:e},{:e},{},{},{},{:e},{:e},{:e}",
            r.seed,
            r.x,
            r.grid_u,
            fmt_opt(bu),
            fmt_opt(bse),
            fmt_opt(r.gap_in_se()),
            r.qv,
            r.ck0,
            r.qv_sd
        );
    }
    rep.files.push(("fbsde_verify.csv".into(), rows));
    rep.files.push(("fbsde_probes.csv".into(), detail));
    let frac = if compared > 0 {
        within as f64 / compared as f64
    } else {
        0.0
    };
    let qv_frac = probes.iter().filter(|p| p.qv_ok()).count() as f64 / probes.len().max(1) as f64;
    rep.note("n_probes", probes.len());
    rep.note("fraction_within_se", frac);
    rep.note("qv_fraction_within_4sd", qv_frac);
    if compared > 0 && frac < cfg.batch_pass {
        rep.passed = false;
    }
    if qv_frac < cfg.batch_pass {
        rep.passed = false;
    }

    if cfg.n_drivers > 0 {
        let dr = dbsde_refinement(cfg)?;
        let mut csv = String::from("level,n_steps,rms_terminal,intercept,se_intercept,slope,se_slope\n");
        for (l, s) in dr.studies.iter().enumerate() {
            let g = &s.regression;
            let _ = writeln!(
                csv,
                "{l},{},{:e},{:e},{:e},{:e},{:e}",
                s.n_steps, s.rms_terminal, g.intercept, g.se_intercept, g.slope, g.se_slope
            );
        }
        rep.files.push(("dbsde_residual.csv".into(), csv));
        let finest = &dr.studies.last().expect("at least two levels").regression;
        let null_ok = cfg.zero_noise || finest.null_within(cfg.se_threshold);
        let order_ok = cfg.zero_noise || dr.rms_order >= cfg.min_order;
        rep.note("dbsde_rms_order", format!("{:e}", dr.rms_order));
        rep.note("dbsde_regression_null", null_ok);
        rep.passed &= null_ok && order_ok;
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KLevel {
    pub k: i64,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub se: f64,
    /// 5%, 25%, 50%, 75%, 95%.
    pub quantiles: [f64; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct KsPair {
    pub k_a: i64,
    pub k_b: i64,
    pub ks: f64,
    pub bootstrap_se: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSummary {
    pub x: f64,
    pub t: f64,
    pub levels: Vec<KLevel>,
    pub distances: Vec<KsPair>,
    pub samples: Vec<Vec<f64>>,
    /// Last KS within two combined bootstrap SEs of the first.
    pub stabilizing: bool,
}

/// `-log psi^k_T(x)` over `ensemble` independent noises for one `k`.
pub fn height_ensemble(cfg: &ExperimentConfig, k: i64) -> Result<Vec<f64>> {
    let space = cfg.space()?;
    let time = cfg.time()?;
    let m = mollifier_new(k)?;
    let u0 = cfg.initial_condition(space)?.u0();
    let opts = SolverOptions {
        store_stride: time.n_steps(),
        ..cfg.solver_options()
    };
    let base = child_seed(cfg.seed, k as u64);
    (0..cfg.ensemble as u64)
        .into_par_iter()
        .map(|e| {
            let noise = cfg.noise(child_seed(base, e), space, time);
            let she = she_solve_with(&u0, &pair_with_mollifier(&noise, &m)?, &m, &opts)?;
            Ok(-she.trajectory.last().interpolate(cfg.probe_x).ln())
        })
        .collect()
}

fn bootstrap_se(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> f64 {
    if resamples < 2 {
        return 0.0;
    }
    variance(&bootstrap_ks(a, b, resamples, seed)).sqrt()
}

pub fn run_k_convergence(cfg: &ExperimentConfig) -> Result<EnsembleSummary> {
    cfg.validate()?;
    if cfg.ensemble < MIN_ENSEMBLE {
        return Err(Error::config(
            "ensemble",
            format!("need at least {MIN_ENSEMBLE} members per k, got {}", cfg.ensemble),
        ));
    }
    let samples = cfg
        .k
        .iter()
        .map(|&k| height_ensemble(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let levels = cfg
        .k
        .iter()
        .zip(&samples)
        .map(|(&k, v)| {
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let ms = MeanSe::of(v);
            KLevel {
                k,
                n: v.len(),
                mean: ms.mean,
                variance: variance(v),
                se: ms.se,
                quantiles: [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile_sorted(&sorted, q)),
            }
        })
        .collect();
    let distances: Vec<KsPair> = (1..samples.len())
        .map(|i| KsPair {
            k_a: cfg.k[i - 1],
            k_b: cfg.k[i],
            ks: ks_two_sample(&samples[i - 1], &samples[i]),
            bootstrap_se: bootstrap_se(
                &samples[i - 1],
                &samples[i],
                cfg.bootstrap,
                child_seed(cfg.seed, i as u64),
            ),
        })
        .collect();
    let stabilizing = match (distances.first(), distances.last()) {
        (Some(a), Some(b)) if distances.len() >= 2 => {
            b.ks <= a.ks + 2.0 * (a.bootstrap_se.powi(2) + b.bootstrap_se.powi(2)).sqrt()
        }
        _ => true,
    };
    Ok(EnsembleSummary {
        x: cfg.probe_x,
        t: cfg.horizon,
        levels,
        distances,
        samples,
        stabilizing,
    })
}

pub fn k_convergence_report(cfg: &ExperimentConfig) -> Result<Report> {
    let s = run_k_convergence(cfg)?;
    let mut rep = Report::new("k_convergence");
    let mut lv = String::from("k,t,x,n,mean,variance,se,q05,q25,q50,q75,q95\n");
    for l in &s.levels {
        let q = l.quantiles;
        let _ = writeln!(
            lv,
            "{},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            l.k, s.t, s.x, l.n, l.mean, l.variance, l.se, q[0], q[1], q[2], q[3], q[4]
        );
    }
    let mut ks = String::from("k_a,k_b,ks,bootstrap_se\n");
    for d in &s.distances {
        let _ = writeln!(ks, "{},{},{:e},{:e}", d.k_a, d.k_b, d.ks, d.bootstrap_se);
    }
    rep.files.push(("k_convergence.csv".into(), lv));
    rep.files.push(("k_distances.csv".into(), ks));
    if s.distances.len() < 2 {
        rep.warnings
            .push("fewer than two consecutive k pairs; diagnostic is vacuous".into());
    }
    rep.note("stabilizing", s.stabilizing);
    rep.passed = s.stabilizing;
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NullBand {
    pub ks: f64,
    /// 95% quantile of the pooled-resample null distribution.
    pub band: f64,
}

/// KS between the two halves of one ensemble against its null
/// distribution, obtained by redrawing both halves from the pooled sample.
pub fn half_ensemble_check(values: &[f64], resamples: usize, seed: u64) -> NullBand {
    let (a, b) = values.split_at(values.len() / 2);
    let mut null: Vec<f64> = (0..resamples as u64)
        .map(|r| {
            let mut rng = CounterNormals::new(seed, StreamDomain::Bootstrap, r);
            let ra: Vec<f64> = (0..a.len()).map(|_| values[rng.next_index(values.len())]).collect();
            let rb: Vec<f64> = (0..b.len()).map(|_| values[rng.next_index(values.len())]).collect();
            ks_two_sample(&ra, &rb)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    NullBand {
        ks: ks_two_sample(a, b),
        band: quantile_sorted(&null, 0.95),
    }
}

/// Cross-validation and FBSDE grid/bridge values on one given noise.
pub fn replay(noise: &NoiseRealization, cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let space = cfg.space()?;
    let time = cfg.time()?;
    if noise.space() != &space || noise.time() != &time {
        return Err(Error::Incompatible(format!(
            "noise grid (L = {}, n = {}, T = {}, steps = {}) does not match the config",
            noise.space().half_length(),
            noise.space().n_points(),
            noise.time().horizon(),
            noise.time().n_steps()
        )));
    }
    let m = cfg.first_k()?;
    let ic = cfg.initial_condition(space)?;
    let opts = cfg.solver_options();
    let cv = cross_validate(ic.h0(), noise, &m, cfg.levels, (cfg.window_lo, cfg.window_hi), &opts)?;
    let mut rep = Report::new("replay");
    let mut csv = String::from("level,n_steps,dt,gap\n");
    for (l, lv) in cv.levels.iter().enumerate() {
        let _ = writeln!(csv, "{l},{},{:e},{:e}", lv.n_steps, lv.dt, lv.gap);
    }
    rep.files.push(("replay_cross_validation.csv".into(), csv));

    let frozen = FrozenNoise::new(noise, &m)?;
    let u0 = ic.u0();
    let grid = GridRoute::new(&frozen, &u0, &opts)?;
    let mut rows = String::from("x,t,route,estimate,standard_error,n_samples,seed\n");
    let fb = FbsdeConfig {
        route: cfg.route,
        fk: FkOptions {
            n_bridges: cfg.n_bridges,
            seed: cfg.seed,
            ..FkOptions::default()
        },
        ..FbsdeConfig::default()
    };
    for p in 0..cfg.n_probes {
        let x = probe_x(cfg, p);
        let driver = DriverPath::sample(cfg.seed, p as u64, time);
        let (y, se, n) = match cfg.route {
            Route::Grid => (grid.evaluate(x, &driver)?.y.value(0), 0.0, 0),
            Route::Bridge => {
                let f = |y: f64| u0.interpolate(y);
                let sol = solve_fbsde_bridge(x, &frozen, &driver, &f, &fb)?;
                (sol.y.value(0), sol.u_se[0], 0)
            }
        };
        let _ = writeln!(rows, "{x:e},0e0,{},{y:e},{se:e},{n},{}", cfg.route, cfg.seed);
        let s = grid.evaluate(x, &driver)?;
        let _ = writeln!(rows, "{x:e},{:e},grid,{:e},0e0,0,{}", cfg.horizon, s.y.last(), cfg.seed);
    }
    rep.files.push(("replay_fbsde.csv".into(), rows));
    rep.note("noise_seed", noise.seed());
    rep.note("observed_order", format!("{:e}", cv.observed_order));
    Ok(rep)
}

pub fn replay_file(path: impl AsRef<Path>, cfg: &ExperimentConfig) -> Result<Report> {
    replay(&NoiseRealization::load(path)?, cfg)
}

/// Row-major `j,i,xi` dump of a noise matrix.
pub fn noise_csv(noise: &NoiseRealization) -> String {
    let n = noise.space().n_points();
    let mut s = String::from("step,cell,xi\n");
    let mut row = vec![0.0; n];
    for j in 0..noise.time().n_steps() {
        noise.row(j, &mut row);
        for (i, v) in row.iter().enumerate() {
            let _ = writeln!(s, "{j},{i},{v:e}");
        }
    }
    s
}
