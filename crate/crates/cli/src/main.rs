//! Command-line front end for the vortexmc sampler.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 configuration
//! error, 3 infeasible constraint.

mod artifacts;
mod config;
mod figures;
mod runcmd;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vortexmc::VortexError;

use config::{load_config_file, RunConfig, Z2Policy};
use figures::{FigureId, Preset};

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or config file: exit 2.
    Config(String),
    /// The requested constraint admits no states: exit 3.
    Infeasible(String),
    /// An invariant check failed: exit 1.
    Validation(String),
    /// Everything else (I/O, numerics): exit 1.
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Validation(_) | Failure::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Infeasible(m) | Failure::Validation(m) | Failure::Other(m) => m,
        }
    }

    pub fn from_io(context: &str, e: std::io::Error) -> Failure {
        Failure::Other(format!("{context}: {e}"))
    }
}

impl From<VortexError> for Failure {
    fn from(e: VortexError) -> Failure {
        match e {
            VortexError::InvalidLattice { .. }
            | VortexError::InvalidCirculation { .. }
            | VortexError::InvalidConfig { .. } => Failure::Config(e.to_string()),
            VortexError::Infeasible { .. } | VortexError::BracketFailure { .. } => {
                Failure::Infeasible(e.to_string())
            }
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "vortexmc",
    version,
    about = "Microcanonical Monte Carlo for a lattice vortex-loop model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run sampling chains and write their outputs to a run directory.
    Run(RunArgs),
    /// Continue an interrupted run from its checkpoints.
    Resume(ResumeArgs),
    /// Produce one of the canned figure datasets.
    Figure(FigureArgs),
    /// Map enstrophy reductions to temperatures over a grid of bounds.
    Tabulate(TabulateArgs),
    /// Check every numerical invariant quickly; nonzero exit on failure.
    Validate,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Lattice size (required unless --config provides it).
    #[arg(long)]
    n: Option<usize>,
    /// Loop circulation strength.
    #[arg(long)]
    gamma: Option<f64>,
    /// Energy the chains are prepared at (required unless --config provides it).
    #[arg(long)]
    target_energy: Option<f64>,
    /// Demon capacity; defaults to target_energy / 10.
    #[arg(long)]
    demon_cap: Option<f64>,
    /// No enstrophy bound (the default policy).
    #[arg(long, conflicts_with_all = ["z2_bound", "delta_z2", "beta_target"])]
    unbounded: bool,
    /// Fixed enstrophy ceiling.
    #[arg(long, conflicts_with_all = ["delta_z2", "beta_target"])]
    z2_bound: Option<f64>,
    /// Enstrophy reduction below the measured unconstrained mean.
    #[arg(long, conflicts_with = "beta_target")]
    delta_z2: Option<f64>,
    /// Search for the bound that lands on this inverse temperature.
    #[arg(long)]
    beta_target: Option<f64>,
    /// Relative tolerance for --beta-target.
    #[arg(long)]
    beta_tolerance: Option<f64>,
    /// Search bracket lower edge for --beta-target, as a fraction of the baseline.
    #[arg(long)]
    delta_lo_frac: Option<f64>,
    /// Search bracket upper edge for --beta-target, as a fraction of the baseline.
    #[arg(long)]
    delta_hi_frac: Option<f64>,
    #[arg(long)]
    equilibration_sweeps: Option<u32>,
    #[arg(long)]
    measurement_sweeps: Option<u32>,
    /// Record a vorticity snapshot every this many measurement sweeps (0 = none).
    #[arg(long)]
    snapshot_stride: Option<u32>,
    /// Sweeps between full solver refreshes.
    #[arg(long)]
    refresh_sweeps: Option<u32>,
    /// Write a checkpoint every this many sweeps (0 = final only).
    #[arg(long)]
    checkpoint_sweeps: Option<u32>,
    /// Demon histogram bin count.
    #[arg(long)]
    hist_bins: Option<usize>,
    /// Jackknife block count for error bars.
    #[arg(long)]
    jackknife_blocks: Option<usize>,
    /// Number of independent chains.
    #[arg(long)]
    chains: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// RNG stream of the first chain; chain i uses stream + i.
    #[arg(long)]
    stream: Option<u64>,
    /// Output directory (default vortexmc-run, or $VORTEXMC_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after the first checkpoint at or past this sweep, for later resume.
    #[arg(long)]
    stop_after_sweeps: Option<u32>,
}

#[derive(Args)]
struct ResumeArgs {
    /// Run directory holding config.json and chain checkpoints.
    #[arg(long)]
    dir: PathBuf,
    /// Stop again after the first checkpoint at or past this sweep.
    #[arg(long)]
    stop_after_sweeps: Option<u32>,
}

#[derive(Args)]
struct FigureArgs {
    /// Which dataset to produce.
    #[arg(value_enum)]
    id: FigureId,
    /// Sweep budgets: desk finishes in minutes, paper runs production lengths.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Lattice size override (fig3, fig4, moments).
    #[arg(long)]
    n: Option<usize>,
    /// Lattice sizes for fig2, e.g. --sizes 4,8,16.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    target_energy: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Enstrophy reductions as fractions of the baseline (fig3).
    #[arg(long, value_delimiter = ',')]
    delta_fracs: Option<Vec<f64>>,
    /// Inverse temperatures to home in on (fig4), e.g. --beta-targets 3,40.2.
    #[arg(long, value_delimiter = ',')]
    beta_targets: Option<Vec<f64>>,
    /// Relative tolerance for the fig4 search.
    #[arg(long)]
    beta_tolerance: Option<f64>,
    /// fig4 search bracket lower edge, as a fraction of the baseline.
    #[arg(long)]
    delta_lo_frac: Option<f64>,
    /// fig4 search bracket upper edge, as a fraction of the baseline.
    #[arg(long)]
    delta_hi_frac: Option<f64>,
    /// Highest moment order for the moments table.
    #[arg(long)]
    max_p: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the preset's equilibration budget for every sub-run.
    #[arg(long)]
    equilibration_sweeps: Option<u32>,
    /// Override the preset's measurement budget for every sub-run.
    #[arg(long)]
    measurement_sweeps: Option<u32>,
    /// Override the preset's snapshot stride for every sub-run.
    #[arg(long)]
    snapshot_stride: Option<u32>,
    /// Output directory (default named after the figure, or $VORTEXMC_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TabulateArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    target_energy: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    demon_cap: Option<f64>,
    /// Absolute enstrophy reductions, e.g. --deltas 0,2000,5000.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    /// Reductions as fractions of the measured baseline, e.g. --delta-fracs 0.05,0.1.
    #[arg(long, value_delimiter = ',')]
    delta_fracs: Option<Vec<f64>>,
    #[arg(long)]
    equilibration_sweeps: Option<u32>,
    #[arg(long)]
    measurement_sweeps: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stream: Option<u64>,
    /// Output directory (default tabulation, or $VORTEXMC_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Build the effective RunConfig from an optional file plus flag overrides.
fn assemble(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => load_config_file(path)?,
        None => {
            let n = args.n.ok_or_else(|| Failure::Config("--n is required without --config".into()))?;
            let e = args
                .target_energy
                .ok_or_else(|| Failure::Config("--target-energy is required without --config".into()))?;
            RunConfig::template(n, e)
        }
    };
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(g) = args.gamma {
        cfg.gamma = g;
    }
    if let Some(e) = args.target_energy {
        cfg.target_energy = e;
    }
    if let Some(c) = args.demon_cap {
        cfg.demon_cap = Some(c);
    }
    if let Some(e) = args.equilibration_sweeps {
        cfg.equilibration_sweeps = e;
    }
    if let Some(m) = args.measurement_sweeps {
        cfg.measurement_sweeps = m;
    }
    if let Some(s) = args.snapshot_stride {
        cfg.snapshot_stride = s;
    }
    if let Some(r) = args.refresh_sweeps {
        cfg.refresh_sweeps = r;
    }
    if let Some(c) = args.checkpoint_sweeps {
        cfg.checkpoint_sweeps = c;
    }
    if let Some(h) = args.hist_bins {
        cfg.hist_bins = h;
    }
    if let Some(j) = args.jackknife_blocks {
        cfg.jackknife_blocks = j;
    }
    if let Some(c) = args.chains {
        cfg.chains = c;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.stream {
        cfg.stream = s;
    }

    if args.unbounded {
        cfg.z2 = Z2Policy::Unbounded;
    } else if let Some(b) = args.z2_bound {
        cfg.z2 = Z2Policy::Bound { z2_bound: b };
    } else if let Some(d) = args.delta_z2 {
        cfg.z2 = Z2Policy::DeltaFromBaseline { delta_z2: d };
    } else if let Some(beta) = args.beta_target {
        cfg.z2 = Z2Policy::TargetBeta {
            beta,
            tolerance: args.beta_tolerance.unwrap_or(0.1),
            delta_lo_frac: args.delta_lo_frac.unwrap_or(0.0),
            delta_hi_frac: args.delta_hi_frac.unwrap_or(0.5),
        };
    }
    if args.beta_target.is_none() {
        if let Z2Policy::TargetBeta { tolerance, delta_lo_frac, delta_hi_frac, .. } = &mut cfg.z2 {
            // Tuning flags also refine a target-beta policy from the file.
            if let Some(t) = args.beta_tolerance {
                *tolerance = t;
            }
            if let Some(lo) = args.delta_lo_frac {
                *delta_lo_frac = lo;
            }
            if let Some(hi) = args.delta_hi_frac {
                *delta_hi_frac = hi;
            }
        } else if args.beta_tolerance.is_some()
            || args.delta_lo_frac.is_some()
            || args.delta_hi_frac.is_some()
        {
            return Err(Failure::Config(
                "--beta-tolerance, --delta-lo-frac, and --delta-hi-frac require a beta target".into(),
            ));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Run(args) => {
            let cfg = assemble(args)?;
            runcmd::cmd_run(&cfg, args.out.clone(), args.stop_after_sweeps)
        }
        Cmd::Resume(args) => runcmd::cmd_resume(args.dir.clone(), args.stop_after_sweeps),
        Cmd::Figure(args) => figures::cmd_figure(args),
        Cmd::Tabulate(args) => figures::cmd_tabulate(args),
        Cmd::Validate => validate::cmd_validate(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
