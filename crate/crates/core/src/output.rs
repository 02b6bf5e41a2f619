//! CSV emission for traces, task records, fluid trajectories and metrics.
//!
//! Every number is written with 12 significant digits in the shortest form
//! that reads back to the same rounded value.

use std::io::Write;

use crate::error::{Error, Result};
use crate::fluid::FluidSample;
use crate::metrics::MetricsReport;
use crate::model::{ArrivalProfile, FluidState};
use crate::simulate::{Policy, SimOutput, TaskRecord};

/// Formats `x` with 12 significant digits.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("scientific notation parses");
    format!("{rounded}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv output failed: {e}"))
}

fn level_columns(buffer: usize) -> Vec<String> {
    (1..=buffer).map(|i| format!("q{i}")).collect()
}

fn phase_columns(buffer: usize, phases: usize) -> Vec<String> {
    if phases < 2 {
        return Vec::new();
    }
    (1..=buffer).flat_map(|i| (1..=phases).map(move |j| format!("q{i}_{j}"))).collect()
}

fn state_fields(s: &FluidState) -> Vec<String> {
    let mut row: Vec<String> = s.levels().into_iter().map(fmt_num).collect();
    row.push(fmt_num(s.delta0));
    row.push(fmt_num(s.delta1));
    row
}

fn phase_fields(s: &FluidState) -> Vec<String> {
    if s.phases() < 2 {
        return Vec::new();
    }
    s.q_matrix().iter().map(|&x| fmt_num(x)).collect()
}

/// `t,q1..qB,delta0,delta1,u,arrivals,departures,drops,msgs_green,msgs_red,setups`,
/// then `central_queue` for the delayed-off baseline and per-phase columns
/// `q<i>_<j>` for phase-type service.
pub fn write_trace<W: Write>(out: &SimOutput, w: W) -> Result<()> {
    let Some(first) = out.samples.first() else {
        return Err(Error::EmptySample("trace has no samples".into()));
    };
    let (b, k) = (first.fluid.buffer(), first.fluid.phases());
    let central = out.policy == Policy::DelayedOff;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend(level_columns(b));
    for h in ["delta0", "delta1", "u", "arrivals", "departures", "drops", "msgs_green", "msgs_red", "setups"] {
        header.push(h.into());
    }
    if central {
        header.push("central_queue".into());
    }
    header.extend(phase_columns(b, k));
    wtr.write_record(&header).map_err(csv_err)?;
    for s in &out.samples {
        let c = s.counters;
        let mut row = vec![fmt_num(s.t)];
        row.extend(state_fields(&s.fluid));
        row.push(fmt_num(s.u));
        for v in [c.arrivals, c.departures, c.drops, c.msgs_green, c.msgs_red, c.setups] {
            row.push(v.to_string());
        }
        if central {
            row.push(s.central_queue.to_string());
        }
        row.extend(phase_fields(&s.fluid));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::Config(format!("csv output failed: {e}")))
}

/// `arrival,start,departure,server,dropped`; missing values are empty.
pub fn write_tasks<W: Write>(tasks: &[TaskRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["arrival", "start", "departure", "server", "dropped"]).map_err(csv_err)?;
    let opt = |x: Option<f64>| x.map(fmt_num).unwrap_or_default();
    for t in tasks {
        wtr.write_record([
            fmt_num(t.arrival),
            opt(t.start),
            opt(t.departure),
            t.server.map(|s| s.to_string()).unwrap_or_default(),
            t.dropped.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::Config(format!("csv output failed: {e}")))
}

/// `t,lambda,q1..qB,delta0,delta1,u,xi,setups_completed` plus per-phase
/// columns; `lambda` is the arrival rate at the sample time.
pub fn write_fluid<W: Write>(samples: &[FluidSample], arrivals: &ArrivalProfile, w: W) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::EmptySample("trajectory has no samples".into()));
    };
    let (b, k) = (first.state.buffer(), first.state.phases());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string(), "lambda".to_string()];
    header.extend(level_columns(b));
    for h in ["delta0", "delta1", "u", "xi", "setups_completed"] {
        header.push(h.into());
    }
    header.extend(phase_columns(b, k));
    wtr.write_record(&header).map_err(csv_err)?;
    for s in samples {
        let mut row = vec![fmt_num(s.t), fmt_num(arrivals.rate(s.t))];
        row.extend(state_fields(&s.state));
        row.push(fmt_num(s.u));
        row.push(fmt_num(s.xi));
        row.push(fmt_num(s.setups_completed));
        row.extend(phase_fields(&s.state));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::Config(format!("csv output failed: {e}")))
}

/// Plain table with the given header; cells are written as given.
pub fn write_table<W: Write>(header: &[&str], rows: &[Vec<String>], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(header).map_err(csv_err)?;
    for row in rows {
        wtr.write_record(row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::Config(format!("csv output failed: {e}")))
}

/// Parameter tuple echoed on every metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scenario: String,
    pub policy: String,
    /// Which run the row summarizes, e.g. `rep3`, `mean` or `fluid`.
    pub run: String,
    pub n_servers: usize,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub report: MetricsReport,
    /// Outcome note for sweep rows (`ok` or an error message).
    pub status: Option<String>,
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "scenario",
    "policy",
    "run",
    "N",
    "lambda",
    "mu",
    "nu",
    "mean_wait",
    "mean_power",
    "normalized_power",
    "wastage",
    "loss_fraction",
    "msg_per_task",
];

/// Metrics CSV; a trailing `status` column is added when any row has one.
pub fn write_metrics<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let with_status = rows.iter().any(|r| r.status.is_some());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = METRICS_COLUMNS.to_vec();
    if with_status {
        header.push("status");
    }
    wtr.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let m = &r.report;
        let mut row = vec![
            r.scenario.clone(),
            r.policy.clone(),
            r.run.clone(),
            r.n_servers.to_string(),
            fmt_num(r.lambda),
            fmt_num(r.mu),
            fmt_num(r.nu),
            fmt_num(m.mean_wait),
            fmt_num(m.mean_power),
            fmt_num(m.normalized_power),
            fmt_num(m.wastage),
            fmt_num(m.loss_fraction),
            fmt_num(m.msg_per_task),
        ];
        if with_status {
            row.push(r.status.clone().unwrap_or_else(|| "ok".into()));
        }
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::Config(format!("csv output failed: {e}")))
}
