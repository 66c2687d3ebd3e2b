use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tangentproj_cli::{execute, Options, EXIT_ERROR};

/// Desk-scale experiments on projections onto tangent hyperplanes of a
/// spherical hypersurface.
///
/// Exit status: 0 when every experiment passes, 1 when one fails or is
/// inconclusive, 2 on a configuration error, runtime error or interruption.
#[derive(Parser, Debug)]
#[command(name = "tangentproj", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for reports (overrides the config).
    #[arg(long, global = true, value_name = "PATH")]
    out_dir: Option<PathBuf>,
    /// Random seed (overrides the config).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (overrides the config).
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Run only the experiments of this name.
    #[arg(long, global = true, value_name = "NAME")]
    experiment: Option<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Curvature, duality and constants of the chart.
    ManifoldInfo,
    /// Cinematic constants and bilipschitz bounds of the projection maps.
    CinematicCheck,
    /// Scaling of graph-neighbourhood intersection volumes.
    PairVolume,
    /// Tube volumes and intersection counts of lines with cones.
    ConeIncidence,
    /// Covering number of the union in a configuration of maps.
    ConfigBound,
    /// Box dimension of projected images over sampled parameters.
    ProjectDim,
    /// Dimension profile of parameters with small projections.
    ExceptionalSet,
    /// Cone membership of near-intersecting graph pairs.
    ConeMembership,
    /// Ring counts of fractal points near cones.
    IncidenceCount,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::ManifoldInfo => "manifold-info",
            Command::CinematicCheck => "cinematic-check",
            Command::PairVolume => "pair-volume",
            Command::ConeIncidence => "cone-incidence",
            Command::ConfigBound => "config-bound",
            Command::ProjectDim => "project-dim",
            Command::ExceptionalSet => "exceptional-set",
            Command::ConeMembership => "cone-membership",
            Command::IncidenceCount => "incidence-count",
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let experiment = match (cli.command.map(Command::name), cli.experiment) {
        (Some(a), Some(b)) if a != b => {
            eprintln!("error: subcommand `{a}` conflicts with --experiment {b}");
            std::process::exit(EXIT_ERROR);
        }
        (a, b) => b.or(a.map(str::to_string)),
    };
    let opts = Options {
        config: cli.config,
        out_dir: cli.out_dir,
        seed: cli.seed,
        threads: cli.threads.map(|t| t as usize),
        experiment,
    };
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        eprintln!("interrupted; finishing the current report");
        flag.store(true, Ordering::Relaxed);
    }) {
        log::warn!("cannot install the interrupt handler: {e}");
    }
    std::process::exit(execute(&opts, &cancel));
}
