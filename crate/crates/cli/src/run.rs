//! Orchestration of scenario runs and their output files.
//!
//! Replications and sweep points run on a pool of `jobs` threads. Each task
//! writes only its own files, and results are gathered in index order, so the
//! output does not depend on scheduling.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tabs_core::fluid::{integrate_fluid, stability_sweep, FluidTrajectory, StabilityReport};
use tabs_core::metrics::{summarize, summarize_fluid, trajectory_gap};
use tabs_core::output::{fmt_num, write_fluid, write_metrics, write_table, write_tasks, write_trace, MetricsRow};
use tabs_core::{run_simulation, MetricsReport, Policy};

use crate::config::ScenarioConfig;
use crate::CliError;

/// Where results go and how many threads may run at once.
#[derive(Debug, Clone)]
pub struct Runner {
    pub out_root: PathBuf,
    pub jobs: usize,
}

/// What a run produced: its directory, the metrics rows written to
/// `metrics.csv` and, for `both`, one gap per replication.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub gaps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Fluid,
    Both,
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(
    path: &Path,
    f: impl FnOnce(BufWriter<File>) -> tabs_core::Result<()>,
) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| runtime(path, e))?;
    f(BufWriter::new(file)).map_err(|e| runtime(path, e))
}

fn nan_report() -> MetricsReport {
    MetricsReport {
        mean_wait: f64::NAN,
        mean_power: f64::NAN,
        wastage: f64::NAN,
        normalized_power: f64::NAN,
        loss_fraction: f64::NAN,
        msg_per_task: f64::NAN,
        admitted_load: f64::NAN,
        sample_count: 0,
        warmup_used: f64::NAN,
    }
}

pub fn row(cfg: &ScenarioConfig, policy: Policy, run: &str, report: MetricsReport, status: Option<String>) -> MetricsRow {
    MetricsRow {
        scenario: cfg.name.clone(),
        policy: policy.name().to_string(),
        run: run.to_string(),
        n_servers: cfg.n_servers,
        lambda: cfg.arrivals.nominal(),
        mu: cfg.mu,
        nu: cfg.nu,
        report,
        status,
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

/// Per-replication result of one simulation run.
struct RepResult {
    report: MetricsReport,
    gap: Option<f64>,
}

impl Runner {
    pub fn new(out_root: impl Into<PathBuf>, jobs: usize) -> Self {
        Self { out_root: out_root.into(), jobs: jobs.max(1) }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| CliError::Runtime(format!("cannot start worker threads: {e}")))
    }

    /// Creates the scenario directory and writes `config_echo` into it.
    fn prepare(&self, cfg: &ScenarioConfig) -> Result<PathBuf, CliError> {
        let dir = self.out_root.join(&cfg.name);
        std::fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
        let echo = dir.join("config_echo");
        std::fs::write(&echo, cfg.echo()).map_err(|e| runtime(&echo, e))?;
        Ok(dir)
    }

    fn check_policy(cfg: &ScenarioConfig, policy: Policy) -> Result<(), CliError> {
        cfg.sim_config(policy, cfg.run.seed).validate().map_err(|e| CliError::Invalid(vec![e.to_string()]))
    }

    fn check_fluid(cfg: &ScenarioConfig) -> Result<(), CliError> {
        if cfg.policy != Policy::Tabs {
            return Err(CliError::Invalid(vec![format!(
                "the fluid model describes TABS, but [policy] name = \"{}\"",
                cfg.policy.name()
            )]));
        }
        cfg.fluid_params().map(|_| ())
    }

    fn integrate(cfg: &ScenarioConfig) -> Result<FluidTrajectory, CliError> {
        let params = cfg.fluid_params()?;
        integrate_fluid(&cfg.fluid_initial(), &params, cfg.run.horizon, cfg.run.dt, cfg.run.sample_interval)
            .map_err(|e| CliError::Runtime(format!("fluid integration failed: {e}")))
    }

    /// Runs every replication of `policy`, writing traces into `dir` when
    /// given and measuring the gap to `fluid` when given.
    fn replicate(
        &self,
        cfg: &ScenarioConfig,
        policy: Policy,
        dir: Option<&Path>,
        fluid: Option<&FluidTrajectory>,
    ) -> Result<Vec<RepResult>, CliError> {
        self.pool()?.install(|| {
            (0..cfg.run.replications)
                .into_par_iter()
                .map(|k| {
                    let sim = cfg.sim_config(policy, cfg.run.seed.wrapping_add(k as u64));
                    let out = run_simulation(&sim).map_err(|e| CliError::Runtime(format!("replication {k}: {e}")))?;
                    if let Some(dir) = dir {
                        write_file(&dir.join(format!("trace_rep{k}.csv")), |w| write_trace(&out, w))?;
                        if cfg.run.tasks {
                            write_file(&dir.join(format!("tasks_rep{k}.csv")), |w| write_tasks(&out.tasks, w))?;
                        }
                    }
                    let report = summarize(&out, &cfg.energy, cfg.run.warmup_fraction)
                        .map_err(|e| CliError::Runtime(format!("replication {k}: {e}")))?;
                    let gap = fluid
                        .map(|f| trajectory_gap(&out.samples, f))
                        .transpose()
                        .map_err(|e| CliError::Runtime(format!("replication {k}: {e}")))?;
                    Ok(RepResult { report, gap })
                })
                .collect()
        })
    }

    fn rep_rows(cfg: &ScenarioConfig, policy: Policy, reps: &[RepResult]) -> Vec<MetricsRow> {
        let mut rows: Vec<MetricsRow> =
            reps.iter().enumerate().map(|(k, r)| row(cfg, policy, &format!("rep{k}"), r.report, None)).collect();
        let reports: Vec<MetricsReport> = reps.iter().map(|r| r.report).collect();
        if let Some(mean) = MetricsReport::average(&reports) {
            rows.push(row(cfg, policy, "mean", mean, None));
        }
        rows
    }

    /// `simulate`, `fluid` or `both` for the scenario's policy.
    pub fn scenario(&self, cfg: &ScenarioConfig, mode: Mode) -> Result<Outcome, CliError> {
        if mode != Mode::Fluid {
            Self::check_policy(cfg, cfg.policy)?;
        }
        if mode != Mode::Simulate {
            Self::check_fluid(cfg)?;
        }
        let dir = self.prepare(cfg)?;
        let mut rows = Vec::new();
        let fluid = if mode == Mode::Simulate {
            None
        } else {
            let traj = Self::integrate(cfg)?;
            write_file(&dir.join("fluid.csv"), |w| write_fluid(&traj.samples, &cfg.arrivals, w))?;
            Some(traj)
        };
        let mut gaps = Vec::new();
        if mode != Mode::Fluid {
            let reps = self.replicate(cfg, cfg.policy, Some(&dir), fluid.as_ref())?;
            rows.extend(Self::rep_rows(cfg, cfg.policy, &reps));
            gaps = reps.iter().filter_map(|r| r.gap).collect();
        }
        if let Some(traj) = &fluid {
            let params = cfg.fluid_params()?;
            let report = summarize_fluid(traj, &params, &cfg.energy, cfg.run.warmup_fraction)
                .map_err(|e| CliError::Runtime(format!("fluid metrics: {e}")))?;
            rows.push(row(cfg, Policy::Tabs, "fluid", report, None));
        }
        write_file(&dir.join("metrics.csv"), |w| write_metrics(&rows, w))?;
        if !gaps.is_empty() {
            let tuple = |run: String, gap: f64| {
                vec![
                    cfg.name.clone(),
                    cfg.policy.name().to_string(),
                    run,
                    cfg.n_servers.to_string(),
                    fmt_num(cfg.arrivals.nominal()),
                    fmt_num(cfg.mu),
                    fmt_num(cfg.nu),
                    fmt_num(gap),
                ]
            };
            let mut table: Vec<Vec<String>> =
                gaps.iter().enumerate().map(|(k, &g)| tuple(format!("rep{k}"), g)).collect();
            table.push(tuple("median".into(), median(&gaps)));
            let header = ["scenario", "policy", "run", "N", "lambda", "mu", "nu", "gap"];
            write_file(&dir.join("gap.csv"), |w| write_table(&header, &table, w))?;
        }
        Ok(Outcome { dir, rows, gaps })
    }

    /// Every policy of the compare list on common seeds: replication `k`
    /// uses the same seed for each policy.
    pub fn compare(&self, cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
        let policies = cfg.compare_list();
        for &p in &policies {
            Self::check_policy(cfg, p)?;
        }
        let dir = self.prepare(cfg)?;
        let mut rows = Vec::new();
        for &p in &policies {
            let reps = self.replicate(cfg, p, None, None)?;
            rows.extend(Self::rep_rows(cfg, p, &reps));
        }
        write_file(&dir.join("metrics.csv"), |w| write_metrics(&rows, w))?;
        Ok(Outcome { dir, rows, gaps: Vec::new() })
    }

    /// One averaged metrics row per sweep value and policy. A point that
    /// fails is kept with its error in the `status` column.
    pub fn sweep(&self, cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
        let Some(sweep) = &cfg.sweep else {
            return Err(CliError::Invalid(vec!["the sweep command needs a [sweep] section".into()]));
        };
        let policies = cfg.compare.clone().unwrap_or_else(|| vec![cfg.policy]);
        for &p in &policies {
            Self::check_policy(cfg, p)?;
        }
        let dir = self.prepare(cfg)?;
        let points: Vec<(ScenarioConfig, Policy)> = sweep
            .values
            .iter()
            .flat_map(|&v| {
                let point = cfg.at_sweep_value(sweep.param, v);
                policies.iter().map(move |&p| (point.clone(), p))
            })
            .collect();
        let reps = cfg.run.replications;
        let results: Vec<Result<MetricsReport, String>> = self.pool()?.install(|| {
            (0..points.len() * reps)
                .into_par_iter()
                .map(|i| {
                    let (point, policy) = &points[i / reps];
                    let k = (i % reps) as u64;
                    let sim = point.sim_config(*policy, point.run.seed.wrapping_add(k));
                    sim.validate().map_err(|e| e.to_string())?;
                    let out = run_simulation(&sim).map_err(|e| e.to_string())?;
                    summarize(&out, &point.energy, point.run.warmup_fraction).map_err(|e| e.to_string())
                })
                .collect()
        });
        let rows: Vec<MetricsRow> = points
            .iter()
            .zip(results.chunks(reps))
            .map(|((point, policy), chunk)| {
                let reports: Result<Vec<MetricsReport>, String> = chunk.iter().cloned().collect();
                match reports {
                    Ok(reports) => {
                        let mean = MetricsReport::average(&reports).expect("at least one replication");
                        row(point, *policy, "mean", mean, Some("ok".into()))
                    }
                    Err(e) => row(point, *policy, "mean", nan_report(), Some(e)),
                }
            })
            .collect();
        write_file(&dir.join("metrics.csv"), |w| write_metrics(&rows, w))?;
        Ok(Outcome { dir, rows, gaps: Vec::new() })
    }

    /// Integrates `initials` random starting states over the scenario horizon
    /// and records each final distance to the fixed point.
    pub fn stability(&self, cfg: &ScenarioConfig, initials: usize, tol: f64) -> Result<(PathBuf, StabilityReport), CliError> {
        Self::check_fluid(cfg)?;
        if !cfg.arrivals.is_constant() {
            return Err(CliError::Invalid(vec!["stability needs constant arrivals (a fixed point)".into()]));
        }
        if !(tol.is_finite() && tol > 0.0) {
            return Err(CliError::Invalid(vec![format!("--tol must be positive, got {tol}")]));
        }
        let params = cfg.fluid_params()?;
        let dir = self.prepare(cfg)?;
        let report = self
            .pool()?
            .install(|| stability_sweep(&params, initials, cfg.run.horizon, tol, cfg.run.dt, cfg.run.seed))
            .map_err(|e| CliError::Runtime(format!("stability sweep failed: {e}")))?;
        let rows: Vec<Vec<String>> = report
            .initials
            .iter()
            .zip(&report.distances)
            .enumerate()
            .map(|(i, (s, &d))| {
                vec![
                    i.to_string(),
                    fmt_num(s.q(1)),
                    fmt_num(s.delta0),
                    fmt_num(s.delta1),
                    fmt_num(d),
                    (d <= tol).to_string(),
                ]
            })
            .collect();
        let header = ["initial", "q1_start", "delta0_start", "delta1_start", "distance", "converged"];
        write_file(&dir.join("stability.csv"), |w| write_table(&header, &rows, w))?;
        Ok((dir, report))
    }
}
