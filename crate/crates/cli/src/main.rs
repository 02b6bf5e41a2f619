use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use tabs_cli::config::keys_help;
use tabs_cli::run::{Mode, Outcome, Runner};
use tabs_cli::{parse_config, CliError, Overrides, ScenarioConfig};

/// Token-based auto-scaling: simulation, fluid model and experiment sweeps.
///
/// Results go to <OUT>/<scenario file stem>/ as CSV files with 12
/// significant digits. Exit status: 0 on success, 1 for invalid
/// configuration or arguments, 2 when a run fails.
#[derive(Parser)]
#[command(name = "tabs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured policy: trace_rep<k>.csv and metrics.csv.
    Simulate(Common),
    /// Integrate the fluid model: fluid.csv and metrics.csv.
    Fluid(Common),
    /// Simulate and integrate, plus gap.csv with the sup-norm distance.
    Both(Common),
    /// One metrics row per [sweep] value and policy.
    Sweep(Common),
    /// Side-by-side metrics of the [policy] compare list on common seeds.
    Compare(Common),
    /// Integrate random initial states and check they reach the fixed point.
    Stability(StabilityArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    config: PathBuf,
    /// Root directory for results.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed of replication 0 (overrides [run] seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replications (overrides [run] replications).
    #[arg(long)]
    replications: Option<usize>,
    /// Fluid integration step (overrides [run] dt).
    #[arg(long)]
    dt: Option<f64>,
    /// Fraction of the horizon discarded before averaging (overrides [run] warmup_fraction).
    #[arg(long)]
    warmup_fraction: Option<f64>,
    /// Maximum number of runs executing at once [default: available cores].
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct StabilityArgs {
    #[command(flatten)]
    common: Common,
    /// Number of random initial states.
    #[arg(long, default_value_t = 100)]
    initials: usize,
    /// Distance to the fixed point that counts as converged.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

impl Common {
    fn load(&self) -> Result<(ScenarioConfig, Runner), CliError> {
        let mut cfg = parse_config(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            replications: self.replications,
            dt: self.dt,
            warmup_fraction: self.warmup_fraction,
        })?;
        let jobs = match self.jobs {
            Some(0) => return Err(CliError::Invalid(vec!["--jobs must be at least 1".into()])),
            Some(j) => j,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok((cfg, Runner::new(&self.out, jobs)))
    }
}

fn print_outcome(o: &Outcome) {
    println!("wrote {}", o.dir.display());
    println!(
        "{:<12} {:<8} {:>8} {:>8} {:>8} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "policy", "run", "N", "1/mu", "1/nu", "mean_wait", "power_W", "wastage", "loss", "status"
    );
    for r in o.rows.iter().filter(|r| !r.run.starts_with("rep")) {
        let m = &r.report;
        println!(
            "{:<12} {:<8} {:>8} {:>8.4} {:>8.4} {:>12.6} {:>12.4} {:>12.4} {:>12.3e} {:>10}",
            r.policy,
            r.run,
            r.n_servers,
            1.0 / r.mu,
            1.0 / r.nu,
            m.mean_wait,
            m.mean_power,
            m.wastage,
            m.loss_fraction,
            r.status.as_deref().unwrap_or("ok")
        );
    }
    if !o.gaps.is_empty() {
        let mut g = o.gaps.clone();
        g.sort_by(f64::total_cmp);
        println!("trajectory gap: median {:.5}, max {:.5}", g[g.len() / 2], g[g.len() - 1]);
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let scenario = |common: &Common, mode: Mode| -> Result<(), CliError> {
        let (cfg, runner) = common.load()?;
        print_outcome(&runner.scenario(&cfg, mode)?);
        Ok(())
    };
    match cli.command {
        Command::Simulate(c) => scenario(&c, Mode::Simulate),
        Command::Fluid(c) => scenario(&c, Mode::Fluid),
        Command::Both(c) => scenario(&c, Mode::Both),
        Command::Sweep(c) => {
            let (cfg, runner) = c.load()?;
            print_outcome(&runner.sweep(&cfg)?);
            Ok(())
        }
        Command::Compare(c) => {
            let (cfg, runner) = c.load()?;
            print_outcome(&runner.compare(&cfg)?);
            Ok(())
        }
        Command::Stability(s) => {
            let (cfg, runner) = s.common.load()?;
            let (dir, report) = runner.stability(&cfg, s.initials, s.tol)?;
            println!("wrote {}", dir.display());
            println!(
                "{} of {} initial states within {} of the fixed point (worst distance {:.3e})",
                report.converged(),
                report.distances.len(),
                report.tolerance,
                report.worst_distance()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let help = keys_help();
    let cmd = Cli::command().after_help(help.clone()).mut_subcommands(|s| s.after_help(help.clone()));
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
