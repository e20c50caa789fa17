//! `coreplan`: generate instances, run the planner, audit runs and sweep
//! schedules. Exit codes: 0 on success, 2 for configuration or contract
//! errors, 3 when an artifact belongs to a different instance.

mod artifact;
mod audit;
mod plan;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use coreplan::features::gen_linear_mdp;
use coreplan::LinearInstance;
use serde::Serialize;

use artifact::{Instance, IntegrityError};

#[derive(Debug, Parser)]
#[command(name = "coreplan", version = artifact::VERSION, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a linear MDP with features, core set and witness.
    Gen(GenArgs),
    /// Run the planner once per replicate seed.
    Plan(plan::PlanArgs),
    /// Compute the duality gap, certificate and error bounds of a run.
    Audit(audit::AuditArgs),
    /// Tune or run a list of settings and summarise them in one CSV.
    Sweep(sweep::SweepArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    /// Directory the instance files are written to.
    #[serde(skip)]
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, required_unless_present = "toggle")]
    states: Option<usize>,
    #[arg(long, required_unless_present = "toggle")]
    actions: Option<usize>,
    #[arg(long, required_unless_present = "toggle")]
    dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Write the two-state toggle MDP with tabular features instead.
    #[arg(long, conflicts_with_all = ["states", "actions", "dim"])]
    toggle: bool,
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let generated = if args.toggle {
        LinearInstance::toggle(args.gamma)?
    } else {
        // clap enforces presence unless --toggle
        let (x, a, d) = (
            args.states.unwrap_or(0),
            args.actions.unwrap_or(0),
            args.dim.unwrap_or(0),
        );
        gen_linear_mdp(args.seed, x, a, d, args.gamma)?
    };
    let inst = Instance::new(
        generated.mdp,
        generated.features,
        generated.core,
        Some(generated.witness),
    )?;
    let mut echo = serde_json::to_value(args)?;
    echo["command"] = "gen".into();
    inst.save(&args.out, &echo)?;
    println!("instance {} written to {}", inst.hash, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Plan(a) => plan::cmd_plan(a),
        Command::Audit(a) => audit::cmd_audit(a),
        Command::Sweep(a) => sweep::cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<IntegrityError>()) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
