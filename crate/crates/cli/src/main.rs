mod config;
mod error;
mod experiment;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepsqueeze::compression::empirical_alpha;
use deepsqueeze::rng::{seeded, Purpose};
use deepsqueeze::topology::{build_complete, build_ring};
use deepsqueeze::CompressorSpec;

use config::ExperimentConfig;
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "deepsqueeze", about = "Simulate error-compensated decentralized SGD and its baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (algorithm, gamma, seed) cell of a config.
    Run(RunArgs),
    /// Run a config and pick the best gamma per algorithm into comparison.csv.
    Compare(RunArgs),
    /// Print the eigenvalues of a mixing matrix, one per line, descending.
    Spectrum(SpectrumArgs),
    /// Estimate the compression error ratio ||C[x] - x||² / ||x||² on Gaussian vectors.
    CalibrateAlpha(CalibrateArgs),
    /// Check the engine against the matrix oracle and run the lemma monitors.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's outdir.
    #[arg(long)]
    outdir: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SpectrumArgs {
    #[arg(long, value_name = "N")]
    ring: Option<usize>,
    #[arg(long, value_name = "N")]
    complete: Option<usize>,
    /// Use the topology and node count of an experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    compressor: CompressorArgs,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct CompressorArgs {
    #[arg(long, value_name = "K")]
    randk: Option<usize>,
    #[arg(long, value_name = "K")]
    topk: Option<usize>,
    #[arg(long, value_name = "B")]
    bits: Option<u32>,
    #[arg(long)]
    identity: bool,
}

impl CompressorArgs {
    fn spec(&self) -> CompressorSpec {
        match (self.randk, self.topk, self.bits) {
            (Some(k), _, _) => CompressorSpec::rand_k(k),
            (_, Some(k), _) => CompressorSpec::top_k(k),
            (_, _, Some(b)) => CompressorSpec::bit_quant(b),
            _ => CompressorSpec::identity(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Also write the report to <outdir>/verify.csv.
    #[arg(long)]
    outdir: Option<PathBuf>,
}

fn cmd_run(args: &RunArgs, compare: bool) -> Result<ExitCode> {
    let (cfg, base) = ExperimentConfig::load(&args.config)?;
    if compare && cfg.algorithms.len() < 2 {
        return Err(CliError::Config("compare needs at least two [[algorithm]] blocks".into()));
    }
    let outdir = experiment::resolve_outdir(args.outdir.as_deref(), &cfg, &base);
    let outcome = experiment::run_experiment(cfg, &base, &outdir)?;
    if compare {
        let rows = experiment::compare(&outcome);
        experiment::write_comparison(&rows, &outcome.outdir.join("comparison.csv"))?;
    }
    for c in outcome.cells.iter().filter(|c| c.status != deepsqueeze::RunStatus::Ok) {
        eprintln!("diverged: {}", c.csv);
    }
    Ok(if outcome.any_diverged() { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn cmd_spectrum(args: &SpectrumArgs) -> Result<ExitCode> {
    let w = match (args.ring, args.complete, &args.config) {
        (Some(n), _, _) => build_ring(n)?,
        (_, Some(n), _) => build_complete(n)?,
        (_, _, Some(path)) => {
            let (cfg, base) = ExperimentConfig::load(path)?;
            let n = cfg.problem.build(&base)?.n_nodes();
            cfg.topology.build(n)?
        }
        _ => unreachable!("clap requires one source"),
    };
    for ev in w.spectral()?.eigenvalues {
        println!("{ev:?}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<ExitCode> {
    let spec = args.compressor.spec();
    spec.validate(args.dim)?;
    let (mean, max) = empirical_alpha(&spec, args.dim, args.samples, &mut seeded(args.seed, Purpose::Calibrate))?;
    println!("mean,max");
    println!("{mean},{max}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let report = match args.preset {
        Preset::Desk => verify::desk_preset()?,
    };
    print!("{}", report.to_csv());
    println!();
    print!("{}", report.constants_table());
    if let Some(dir) = &args.outdir {
        verify::write_report(&report, Path::new(dir))?;
    }
    Ok(if report.failed() { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a, false),
        Command::Compare(a) => cmd_run(a, true),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::CalibrateAlpha(a) => cmd_calibrate(a),
        Command::Verify(a) => cmd_verify(a),
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    })
}
