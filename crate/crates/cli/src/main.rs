use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sweep_core::discrete_ocp::Scenario;
use sweep_core::scenarios::{self, Command, RunOptions};
use sweep_core::{Result, SweepError};

#[derive(Parser)]
#[command(name = "sweepctl", version, about = "Simulate, optimise and certify controlled sweeping processes")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Catch-up simulation with the scenario's initial controls.
    Simulate(Common),
    /// Minimise the discrete cost.
    Optimize(Common),
    /// Reconstruct or check a dual certificate for a candidate.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Candidate trajectory CSV; defaults to the built-in candidate or a simulation.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Certificate JSON to verify instead of solving for one.
        #[arg(long)]
        certificate: Option<PathBuf>,
    },
    /// Compare the coderivative formula with the graph-normal oracle on random instances.
    Coderiv(Common),
    /// Error of catch-up against a reference on a sequence of meshes.
    Convergence(Common),
    /// List the registry; with --out, run every entry's default command.
    Examples {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML or JSON).
    #[arg(long, conflicts_with = "id")]
    scenario: Option<PathBuf>,
    /// Registry id.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(Scenario, Option<f64>)> {
        match (&self.scenario, &self.id) {
            (Some(path), _) => Ok((Scenario::from_file(path)?, None)),
            (None, Some(id)) => scenarios::lookup(id)
                .map(|e| (e.scenario, e.reference_cost))
                .ok_or_else(|| SweepError::UnknownScenario(id.clone())),
            (None, None) => Err(SweepError::Config("either --scenario or --id is required".into())),
        }
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            k: self.k,
            tau: self.tau,
            seed: self.seed,
            out: self.out.clone(),
            ..RunOptions::default()
        }
    }
}

fn run_one(common: &Common, command: Command, opts: RunOptions) -> Result<serde_json::Value> {
    let (scenario, reference) = common.resolve()?;
    let report = scenarios::run(&scenario, reference, command, &opts)?;
    Ok(serde_json::to_value(&report)?)
}

fn examples(out: Option<PathBuf>) -> Result<serde_json::Value> {
    let entries = scenarios::registry();
    let Some(out) = out else {
        let list: Vec<_> = entries
            .iter()
            .map(|e| {
                json!({
                    "id": e.id,
                    "title": e.title,
                    "default_command": e.default_command,
                    "reference_cost": e.reference_cost,
                })
            })
            .collect();
        return Ok(json!(list));
    };
    // One worker per scenario, each writing into its own directory.
    let results: Vec<serde_json::Value> = std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .iter()
            .map(|e| {
                let dir = out.join(e.id);
                s.spawn(move || {
                    let opts = RunOptions {
                        out: Some(dir),
                        ..RunOptions::default()
                    };
                    match scenarios::run(&e.scenario, e.reference_cost, e.default_command, &opts) {
                        Ok(r) => json!({ "id": e.id, "report": r }),
                        Err(err) => json!({ "id": e.id, "error": err.kind(), "message": err.to_string() }),
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    Ok(json!(results))
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SWEEPCTL_LOG", "error")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Simulate(c) => run_one(c, Command::Simulate, c.options()),
        Cmd::Optimize(c) => run_one(c, Command::Optimize, c.options()),
        Cmd::Certify {
            common,
            trajectory,
            certificate,
        } => {
            let opts = RunOptions {
                trajectory: trajectory.clone(),
                certificate: certificate.clone(),
                ..common.options()
            };
            run_one(common, Command::Certify, opts)
        }
        Cmd::Coderiv(c) => run_one(c, Command::Coderiv, c.options()),
        Cmd::Convergence(c) => run_one(c, Command::Convergence, c.options()),
        Cmd::Examples { out } => examples(out.clone()),
    };
    match result {
        Ok(v) => {
            emit(&serde_json::to_string_pretty(&v).expect("report serialises"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = err.exit_code();
            log::error!("{err}");
            emit(&json!({ "error": err.kind(), "message": err.to_string(), "exit_code": code }).to_string());
            ExitCode::from(code as u8)
        }
    }
}
