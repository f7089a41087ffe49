use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magres_core::scenario::{load_config, run_oracles, run_scenario, RunOptions};
use magres_core::Error;

#[derive(Parser)]
#[command(name = "magres", version, about = "Semiclassical magnetic response: scenarios, sweeps and oracles")]
struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its CSV files and manifest.json.
    Run(RunArgs),
    /// Parse and validate a config without computing anything.
    Validate(ConfigArg),
    /// Run the built-in closed-form and brute-force oracles.
    Oracle,
}

#[derive(Args)]
struct ConfigArg {
    /// Scenario config (TOML).
    #[arg(long = "config", value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(value_name = "CONFIG", conflicts_with = "config")]
    positional: Option<PathBuf>,
}

impl ConfigArg {
    fn path(&self) -> Result<PathBuf, Error> {
        self.config
            .clone()
            .or_else(|| self.positional.clone())
            .ok_or_else(|| Error::Config("no config given (use --config PATH)".into()))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in [experiment].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "MAGRES_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Evaluate semiclassical quantities outside their regime; violations are still reported.
    #[arg(long)]
    force: bool,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let path = args.config.path()?;
            let scenario = load_config(&path)?;
            log::info!("running {:?} from {}", scenario.experiment.kind, path.display());
            let opts = RunOptions { out_dir: args.out, seed: args.seed, force: args.force, workers: args.workers };
            let report = run_scenario(&scenario, &opts)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for p in &report.outputs {
                println!("{}", p.display());
            }
            println!("{}", report.manifest.display());
            Ok(())
        }
        Command::Validate(arg) => {
            let path = arg.path()?;
            let scenario = load_config(&path)?;
            println!("{}: ok ({:?}, {}D spec)", path.display(), scenario.experiment.kind, scenario.spec.dim());
            Ok(())
        }
        Command::Oracle => {
            let checks = run_oracles()?;
            let width = checks.iter().map(|c| c.name.chars().count()).max().unwrap_or(0);
            let mut failed = 0;
            for c in &checks {
                let pad = width - c.name.chars().count();
                let tag = if c.pass { "PASS" } else { "FAIL" };
                println!("{tag}  {}{}  value {:>14.8e}  expected {:>14.8e}  tol {:.1e}", c.name, " ".repeat(pad), c.value, c.expected, c.tolerance);
                failed += usize::from(!c.pass);
            }
            if failed > 0 {
                return Err(Error::Numerical { module: "cli", op: "oracle", msg: format!("{failed} oracle checks failed") });
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
