//! `plmm` command-line front end.

mod eval;
mod fsutil;
mod maps;
mod synth;
mod unmix;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit status 2: bad flags, unreadable or malformed inputs.
/// Exit status 1: the computation itself failed.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

pub fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

#[derive(Parser, Debug)]
#[command(name = "plmm", version, about = "Hyperspectral unmixing with per-pixel endmember variability")]
struct Cli {
    /// Worker threads (0 = one per core). Use 1 for byte-reproducible runs.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene with known ground truth.
    Synth(SynthArgs),
    /// Estimate endmembers, abundances and variability from a data file.
    Unmix(UnmixArgs),
    /// Compare an estimate against ground truth.
    Eval(EvalArgs),
    /// Write abundance or variability-energy maps as 16-bit PGM images.
    ExportMaps(MapsArgs),
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Number of bands when no reference file is given.
    #[arg(long)]
    pub bands: Option<usize>,
    /// Number of endmembers when no reference file is given.
    #[arg(long)]
    pub endmembers: Option<usize>,
    /// Signal-to-noise ratio in dB; `inf` disables the noise.
    #[arg(long, default_value_t = 30.0)]
    pub snr_db: f64,
    /// Variability coefficient of the upper half of the image.
    #[arg(long, default_value_t = 0.1)]
    pub cvar_top: f64,
    /// Variability coefficient of the lower half of the image.
    #[arg(long, default_value_t = 0.25)]
    pub cvar_bottom: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub pure_pixels: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reference endmembers (`L × K` HSM file). Smooth synthetic spectra are
    /// drawn from the seed otherwise.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyArg {
    /// No abundance or endmember penalty.
    None,
    /// Spatial smoothness only.
    Ss,
    /// Smoothness plus minimum volume.
    Mv,
    /// Smoothness plus distance to the VCA endmembers.
    Vca,
    /// Smoothness plus distance to `--reference`.
    Dist,
    /// Smoothness plus mutual distance between endmembers.
    Mutual,
}

#[derive(clap::Args, Debug)]
pub struct UnmixArgs {
    /// Data matrix (`L × N` HSM file).
    #[arg(long)]
    pub input: PathBuf,
    /// `key=value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one configuration entry; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Number of endmembers; read from `spec.cfg` next to the input if omitted.
    #[arg(long)]
    pub endmembers: Option<usize>,
    /// Endmember penalty; overrides `psi_kind` from the configuration.
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reference endmembers for `--penalty dist` (`L × K` HSM file).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Image width; read from `spec.cfg` next to the input if omitted.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `plmm synth`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Directory written by `plmm unmix`.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Output CSV; defaults to `report.csv` in the estimate directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append a row to an existing CSV instead of overwriting it.
    #[arg(long)]
    pub append: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    /// `K × N` abundance matrix.
    Abundance,
    /// `(L·K) × N` stacked variability.
    Variability,
}

#[derive(clap::Args, Debug)]
pub struct MapsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: MapKind,
    /// Needed to unstack variability files; read from `spec.cfg` or
    /// `report.txt` next to the input if omitted.
    #[arg(long)]
    pub endmembers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// File name prefix; defaults to the map kind.
    #[arg(long)]
    pub prefix: Option<String>,
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(runtime)?;
    }
    match cli.command {
        Command::Synth(a) => synth::run(&a),
        Command::Unmix(a) => unmix::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::ExportMaps(a) => maps::run(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
