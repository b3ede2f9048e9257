use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kpzlab::experiments::{
    exit_code, k_convergence_report, noise_csv, replay_file, run_cross_validation, run_fbsde_verify, Experiment,
    ExperimentConfig, Report,
};
use kpzlab::{sample_noise, NoiseRealization, Result};

#[derive(Parser)]
#[command(name = "kpzlab", version, about = "Mollified KPZ / SHE / FBSDE experiments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config; unspecified keys take the subcommand defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// KPZ against Hopf–Cole(SHE) on shared noise at several time steps.
    CrossValidate(Common),
    /// Bridge Feynman–Kac against the grid solution, QV and DBSDE residuals.
    FbsdeVerify(Common),
    /// One-point height distributions across mollification levels.
    KConvergence(Common),
    /// Generate or inspect persisted noise.
    Noise {
        #[command(subcommand)]
        action: NoiseCmd,
    },
    /// Re-run the single-noise report from a persisted noise file.
    Replay {
        #[arg(long)]
        noise: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum NoiseCmd {
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "binary")]
        format: Format,
    },
    Dump {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn load_config(common: &Common, kind: Experiment) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::preset(kind);
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p, base)?,
        None => base,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(report: &Report, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for p in report.write(out)? {
        println!("wrote {}", p.display());
    }
    fs::write(out.join("config.txt"), cfg.to_text())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}: {}", report.name, if report.passed { "PASS" } else { "FAIL" });
    Ok(())
}

fn run_report(
    common: &Common,
    kind: Experiment,
    f: impl FnOnce(&ExperimentConfig) -> Result<Report>,
) -> Result<Report> {
    let cfg = load_config(common, kind)?;
    let report = f(&cfg)?;
    emit(&report, &cfg, &common.out)?;
    Ok(report)
}

fn noise_gen(common: &Common, format: Format) -> Result<Report> {
    let cfg = load_config(common, Experiment::Replay)?;
    let noise = sample_noise(cfg.seed, cfg.space()?, cfg.time()?);
    fs::create_dir_all(&common.out)?;
    let path = match format {
        Format::Binary => {
            let p = common.out.join("noise.bin");
            noise.save(&p)?;
            p
        }
        Format::Csv => {
            let p = common.out.join("noise.csv");
            fs::write(&p, noise_csv(&noise))?;
            p
        }
    };
    fs::write(common.out.join("config.txt"), cfg.to_text())?;
    println!("wrote {}", path.display());
    Ok(pass("noise"))
}

fn noise_dump(input: &Path, out: &Path, format: Format) -> Result<Report> {
    let noise = NoiseRealization::load(input)?;
    fs::create_dir_all(out)?;
    let path = match format {
        Format::Csv => {
            let p = out.join("noise.csv");
            fs::write(&p, noise_csv(&noise))?;
            p
        }
        Format::Binary => {
            let p = out.join("noise.bin");
            noise.save(&p)?;
            p
        }
    };
    println!(
        "seed {} L {} n_points {} T {} n_steps {}",
        noise.seed(),
        noise.space().half_length(),
        noise.space().n_points(),
        noise.time().horizon(),
        noise.time().n_steps()
    );
    println!("wrote {}", path.display());
    Ok(pass("noise"))
}

fn pass(name: &str) -> Report {
    Report {
        name: name.into(),
        files: vec![],
        summary: vec![],
        warnings: vec![],
        passed: true,
    }
}

fn dispatch(command: &Command) -> Result<Report> {
    match command {
        Command::CrossValidate(c) => run_report(c, Experiment::CrossValidate, run_cross_validation),
        Command::FbsdeVerify(c) => run_report(c, Experiment::FbsdeVerify, run_fbsde_verify),
        Command::KConvergence(c) => run_report(c, Experiment::KConvergence, k_convergence_report),
        Command::Noise { action } => match action {
            NoiseCmd::Gen { common, format } => noise_gen(common, *format),
            NoiseCmd::Dump { input, out, format } => noise_dump(input, out, *format),
        },
        Command::Replay { noise, common } => {
            let report = run_report(common, Experiment::Replay, |cfg| replay_file(noise, cfg))?;
            let digest = report.digest();
            fs::write(common.out.join("replay.sha256"), format!("{digest}\n"))?;
            println!("sha256 {digest}");
            Ok(report)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    let outcome = pool.install(|| dispatch(&cli.command));
    if let Err(e) = &outcome {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&outcome) as u8)
}
