//! Scenario-runner CLI for the regularisation-by-noise pipeline.
//!
//! Subcommands select a stage subset; `full` runs everything the scenario's
//! feature flags enable. All numeric output is 17-significant-digit decimal
//! text, so reruns with the same seed are byte-identical regardless of the
//! worker count.

mod runner;
mod scenario;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

use runner::Stage;
use scenario::Scenario;

#[derive(Parser)]
#[command(name = "zvonkin", version, about = "Zvonkin-transform scenario runner")]
struct Cli {
    /// scenario config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// override mc.seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// override output.dir
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// override mc.n_paths
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// override mc.n_steps
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// dotted-path config overrides, e.g. --set solver.lambda0=8
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// drift norm certificates and the degree classifier
    Norms,
    /// solve the damped Kolmogorov equation and report the ladder
    SolvePde,
    /// build the drift-removing diffeomorphism (alias of solve-pde)
    Transform,
    /// Euler flows in transformed coordinates plus flow-axiom checks
    Simulate,
    /// stochastic transport by inverse characteristics
    Transport,
    /// mollification-stability sweep
    Stability,
    /// every stage enabled by the scenario's feature flags
    Full,
}

fn main() {
    match run() {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn run() -> Result<bool> {
    let cli = Cli::parse();

    let workers = match std::env::var("ZVONKIN_WORKERS") {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                anyhow::anyhow!("ZVONKIN_WORKERS must be a positive integer, got '{v}'")
            })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global()
                .ok();
            n.max(1)
        }
        Err(_) => rayon::current_num_threads(),
    };

    let config = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config <scenario.toml> is required"))?;

    // precedence: explicit flags beat --set pairs beat the config file
    let mut overrides = cli.sets.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("mc.seed={seed}"));
    }
    if let Some(paths) = cli.paths {
        overrides.push(format!("mc.n_paths={paths}"));
    }
    if let Some(steps) = cli.steps {
        overrides.push(format!("mc.n_steps={steps}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("output.dir={}", out.display()));
    }

    let scenario = Scenario::load(&config, &overrides)?;
    if matches!(cli.cmd, Cmd::Transport | Cmd::Stability) {
        scenario
            .exponents()?
            .require_transport_window()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }

    let stages: Vec<Stage> = match cli.cmd {
        Cmd::Norms => vec![Stage::Norms],
        Cmd::SolvePde | Cmd::Transform => vec![Stage::Pde],
        Cmd::Simulate => vec![Stage::Pde, Stage::Simulate],
        Cmd::Transport => vec![Stage::Pde, Stage::Transport],
        Cmd::Stability => vec![Stage::Stability],
        Cmd::Full => {
            let mut s = vec![Stage::Norms, Stage::Pde, Stage::Simulate];
            if scenario.features.transport {
                s.push(Stage::Transport);
            }
            if scenario.features.stability {
                s.push(Stage::Stability);
            }
            s
        }
    };

    println!(
        "scenario '{}' -> {} (workers: {workers})",
        scenario.name,
        stages
            .iter()
            .map(|s| format!("{s:?}").to_lowercase())
            .collect::<Vec<_>>()
            .join(", ")
    );
    let state = runner::run_scenario(scenario, &stages, workers)?;
    let failed = state.hard_fail();
    println!(
        "artifacts in {} -> {}",
        runner::out_dir(&state).display(),
        if failed { "FAIL" } else { "PASS" }
    );
    Ok(!failed)
}
