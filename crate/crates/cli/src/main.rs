use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fuelhjb_cli::{execute, sweep, CliError, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "fuelhjb", version, about = "Finite-fuel liquidation HJB: solve, simulate, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML, or JSON for a `.json` extension).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `sim.seed0`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the HJB equation and write value slices and the policy field.
    Solve(Common),
    /// Solve, then simulate the feedback policy.
    Simulate(Common),
    /// Solve, simulate and run the structural checks.
    Verify(Common),
    /// Full pipeline including oracle summary, trajectories and cost table.
    Run(Common),
    /// Full pipeline once per value of one numeric config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. `solver.n_x`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.sim.seed0 = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pool(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(k) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build_global()
            .map_err(|e| CliError::Compute(e.to_string()))?;
    }
    Ok(())
}

fn run_stage(c: &Common, stage: Stage) -> Result<(), CliError> {
    let cfg = load(c)?;
    pool(c.workers)?;
    let outcome = execute(&cfg, stage)?;
    if let Some(v) = outcome.field_value {
        println!("field value at (T, x0, r0): {v:.10e}");
    }
    for r in &outcome.reports {
        println!("{:<24} {} statistic={:.4e} tolerance={:.4e}", r.name, if r.pass { "PASS" } else { "FAIL" }, r.statistic, r.tolerance);
    }
    println!("artifacts in {}", cfg.output_dir.display());
    let failed: Vec<String> = outcome.reports.iter().filter(|r| !r.pass).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Checks(failed))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Solve(c) => run_stage(c, Stage::Solve),
        Command::Simulate(c) => run_stage(c, Stage::Simulate),
        Command::Verify(c) => run_stage(c, Stage::Verify),
        Command::Run(c) => run_stage(c, Stage::Run),
        Command::Sweep { common, param, values } => load(common).and_then(|cfg| {
            let workers = common.workers.unwrap_or_else(rayon::current_num_threads);
            let entries = sweep(&cfg, param, values, &cfg.output_dir, workers, Stage::Run)?;
            for e in &entries {
                println!(
                    "{param}={:<10} field={} oracle={} checks={}/{} {}",
                    e.value,
                    e.field_value.map(|v| format!("{v:.8e}")).unwrap_or_else(|| "-".into()),
                    e.oracle_value.map(|v| format!("{v:.8e}")).unwrap_or_else(|| "-".into()),
                    e.checks_passed,
                    e.checks_total,
                    e.status
                );
            }
            println!("summary in {}", cfg.output_dir.join("sweep_summary.csv").display());
            Ok(())
        }),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
