use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdre_eso_cli::scenario::{ModeName, Scenario, BUNDLED};
use sdre_eso_cli::{compare, run_scenario, seed_sweep, CliError};

#[derive(Parser)]
#[command(name = "sdre-eso", version, about = "SDRE + extended state observer stabilization studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its trajectory CSV.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        /// Output directory (defaults to the scenario's `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the controller mode: switching, sdre or adrc.
        #[arg(long)]
        mode: Option<ModeName>,
        /// Run this many randomized initial conditions instead.
        #[arg(long)]
        seed_sweep: Option<usize>,
    },
    /// Switching vs SDRE+ESO vs the ADRC gain family.
    Compare {
        /// Scenario file, or the name of a bundled scenario
        #[arg(long)]
        scenario: String,
        /// Output directory (defaults to the scenario's `output.dir`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a scenario without running it.
    Validate {
        /// Scenario file, or the name of a bundled scenario
        #[arg(long)]
        scenario: String,
    },
    /// Print the available plant models.
    ListPlants,
}

fn out_dir(s: &Scenario, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| s.output.dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            mode,
            seed_sweep: Some(count),
        } => {
            let s = Scenario::load(&scenario)?;
            let report = seed_sweep(&s, &out_dir(&s, out), mode, count)?;
            print!("{report}");
        }
        Command::Run { scenario, out, mode, .. } => {
            let s = Scenario::load(&scenario)?;
            let summary = run_scenario(&s, &out_dir(&s, out), mode)?;
            print!("{summary}");
        }
        Command::Compare { scenario, out } => {
            let s = Scenario::load(&scenario)?;
            let report = compare(&s, &out_dir(&s, out))?;
            print!("{report}");
        }
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            let (k, n) = s.dims();
            println!("{}: ok (k={k}, n={n}, mode={})", s.name, s.controller.mode);
        }
        Command::ListPlants => {
            println!("pendulum          parameters g, l, b   (k=2, n=1)");
            println!("chain_integrator  parameters k, n      (f=0, G=I)");
            for (name, _) in BUNDLED {
                println!("bundled scenario: {name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
