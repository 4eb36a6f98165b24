use clap::{Parser, Subcommand};
use pvd_cli::commands::{
    cmd_lattice_compare, cmd_longtime, cmd_optimize, cmd_plot, cmd_simulate, CommandOutput,
    PlotKind,
};
use pvd_cli::config::parse_config;
use pvd_cli::error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Cross-diffusion thin-film toolkit: forward solver, decay diagnostics,
/// flux reconstruction, and stochastic lattice comparison.
#[derive(Parser)]
#[command(
    name = "pvd",
    version,
    long_about = "Cross-diffusion thin-film toolkit.\n\n\
        Exit codes:\n  \
        0  success\n  \
        1  I/O failure\n  \
        2  unreadable config or data file\n  \
        3  configuration rejected by validation\n  \
        4  solver failure (Newton divergence, step rejection)\n  \
        5  optimizer failure (line-search stall)\n  \
        6  fit failure (degenerate decay window)"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Output directory (defaults to [output].directory from the config,
    /// or the input's directory for `plot`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress per-file progress lines on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured schedule and write trajectory, thickness, and
    /// Newton logs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Long-horizon constant-injection run with decay observables and
    /// affine fits.
    Longtime {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct injection rates that reach a target composition profile
    /// and thickness.
    Optimize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evolve an ensemble of exchange lattices and compare the coarse
    /// density to the matched continuum run.
    LatticeCompare {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured ensemble base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a CSV written by the other commands as an SVG figure.
    Plot {
        /// CSV file to render.
        #[arg(long)]
        input: PathBuf,
        /// Figure layout to apply.
        #[arg(long, value_enum)]
        kind: PlotKind,
    },
}

fn run(cli: &Cli) -> Result<CommandOutput, CliError> {
    let configured = |config: &PathBuf| -> Result<_, CliError> {
        let cfg = parse_config(config)?;
        let out = cli
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
        std::fs::create_dir_all(&out)?;
        Ok((cfg, out))
    };
    match &cli.command {
        Cmd::Simulate { config } => {
            let (cfg, out) = configured(config)?;
            cmd_simulate(&cfg, &out)
        }
        Cmd::Longtime { config } => {
            let (cfg, out) = configured(config)?;
            cmd_longtime(&cfg, &out)
        }
        Cmd::Optimize { config } => {
            let (cfg, out) = configured(config)?;
            cmd_optimize(&cfg, &out)
        }
        Cmd::LatticeCompare { config, seed } => {
            let (cfg, out) = configured(config)?;
            cmd_lattice_compare(&cfg, &out, *seed)
        }
        Cmd::Plot { input, kind } => {
            let out = cli.out.clone().unwrap_or_else(|| {
                input
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            std::fs::create_dir_all(&out)?;
            cmd_plot(input, *kind, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(output) => {
            if !cli.quiet {
                for file in &output.files {
                    println!("wrote {}", file.display());
                }
                for note in &output.notes {
                    println!("{note}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
