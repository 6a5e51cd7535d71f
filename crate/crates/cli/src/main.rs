//! `flashbias`: command-line front end for the rounding-bias lab.
//!
//! Exit codes: 0 pass, 1 check or assertion failure, 2 usage error.

mod checks;
mod demo;
mod experiment;
mod svg;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flashbias::harness::{ExperimentConfig, WorkloadSpec};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FLASHBIAS_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "flashbias",
    version,
    about = "BF16 rounding-bias lab for flash attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bit-level walkthrough of the accumulation step that rounds away from zero.
    AdditionDemo(demo::DemoArgs),
    /// Prefix rounding errors of one low-precision `P̄ V` dot product.
    Trace(demo::TraceArgs),
    /// Per-token `δ_lp − δ_hp` and the gradient-error decomposition for one batch.
    AttnDiff(checks::DiffArgs),
    /// Finite-difference check of dQ, dK, dV in exact mode.
    Gradcheck(checks::GradArgs),
    /// Tiled forward and backward against the reference implementation.
    TilingCheck(checks::TilingArgs),
    /// Paired training runs from an experiment config.
    Experiment(experiment::ExperimentArgs),
    /// Re-reads an experiment's outputs, verifies them and prints a summary.
    Report(experiment::ReportArgs),
}

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable or invalid input. Exit 2.
    Usage(String),
    /// A check or assertion did not hold, or a run failed. Exit 1.
    Check(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl From<flashbias::Error> for Failure {
    fn from(e: flashbias::Error) -> Self {
        match e {
            flashbias::Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Check(e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

/// Prints the resolved settings of a run to stderr, so stdout stays
/// machine-readable.
pub fn header(command: &str, fields: &[(&str, String)]) {
    eprintln!("# flashbias {} {command}", env!("CARGO_PKG_VERSION"));
    for (k, v) in fields {
        eprintln!("#   {k} = {v}");
    }
}

/// `--out-dir`, else `$FLASHBIAS_OUT_DIR`, else the current directory.
pub fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads an experiment config; every problem with it is a usage error.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    match ExperimentConfig::load(path) {
        Ok(c) => Ok(c),
        Err(flashbias::Error::Io(e)) => Err(Failure::Usage(format!("{}: {e}", path.display()))),
        Err(e) => Err(Failure::Usage(e.to_string())),
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    Default,
    Claim3,
}

/// Workload selection shared by `trace` and `attn-diff`.
#[derive(Args)]
pub struct WorkloadArgs {
    /// Base workload.
    #[arg(long, value_enum, default_value = "claim3")]
    preset: Preset,
    /// Take the workload keys from an experiment config instead of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    tie_rate: Option<f64>,
}

impl WorkloadArgs {
    pub fn resolve(&self) -> Result<WorkloadSpec, Failure> {
        let mut spec = match (&self.config, self.preset) {
            (Some(path), _) => load_config(path)?.workload(),
            (None, Preset::Default) => WorkloadSpec::default(),
            (None, Preset::Claim3) => WorkloadSpec::claim3(),
        };
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.n {
            spec.n = v;
        }
        if let Some(v) = self.d {
            spec.d = v;
        }
        if let Some(v) = self.d_model {
            spec.d_model = v;
        }
        if let Some(v) = self.tie_rate {
            spec.tie_rate = v;
        }
        spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(spec)
    }
}

pub fn spec_fields(spec: &WorkloadSpec) -> Vec<(&'static str, String)> {
    vec![
        ("seed", spec.seed.to_string()),
        ("n", spec.n.to_string()),
        ("d", spec.d.to_string()),
        ("d_model", spec.d_model.to_string()),
        ("tie_rate", spec.tie_rate.to_string()),
        ("value_sign_bias", spec.value_sign_bias.to_string()),
        ("sink_strength", spec.sink_strength.to_string()),
        ("noise", spec.noise.to_string()),
        ("score_jitter", spec.score_jitter.to_string()),
    ]
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = flashbias::numerics::ensure_fp32_conformance() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::AdditionDemo(a) => demo::addition_demo(&a),
        Command::Trace(a) => demo::trace(&a),
        Command::AttnDiff(a) => checks::attn_diff(&a),
        Command::Gradcheck(a) => checks::gradcheck(&a),
        Command::TilingCheck(a) => checks::tiling_check(&a),
        Command::Experiment(a) => experiment::experiment(&a),
        Command::Report(a) => experiment::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("FAIL: {m}");
            ExitCode::from(1)
        }
    }
}
