//! Waiting time, power and wastage estimates from simulated traces and
//! fluid states, plus the simulator-to-fluid trajectory gap.
//!
//! Power uses the three-level model: busy and setup servers draw
//! `p_full`, idle-on servers draw `p_idle`, idle-off servers draw nothing.

use crate::error::{Error, Result};
use crate::fluid::{assignment_probs, FluidParams, FluidSample, FluidTrajectory};
use crate::model::{EnergyParams, FluidState};
use crate::simulate::{SimOutput, TaskRecord, TraceSample};

/// Number of batches used for batch-means standard errors.
pub const BATCHES: usize = 10;

/// Default fraction of the horizon discarded before averaging.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.4;

/// A timestamped occupancy state, either simulated or integrated.
pub trait Snapshot {
    fn time(&self) -> f64;
    fn state(&self) -> &FluidState;
}

impl Snapshot for TraceSample {
    fn time(&self) -> f64 {
        self.t
    }

    fn state(&self) -> &FluidState {
        &self.fluid
    }
}

impl Snapshot for FluidSample {
    fn time(&self) -> f64 {
        self.t
    }

    fn state(&self) -> &FluidState {
        &self.state
    }
}

/// Little's-law waiting time: tasks beyond the head of each queue divided by
/// the arrival rate.
pub fn fluid_mean_wait(s: &FluidState, lambda: f64) -> f64 {
    let queued: f64 = (2..=s.buffer()).map(|i| s.q(i)).sum();
    queued / lambda
}

/// Mean of `start − arrival` over served tasks that arrived at or after
/// `warmup`. Tasks still waiting at the end of the run are not counted.
pub fn empirical_mean_wait(tasks: &[TaskRecord], warmup: f64) -> Result<f64> {
    let (sum, n) = tasks
        .iter()
        .filter(|t| !t.dropped && t.arrival >= warmup)
        .filter_map(TaskRecord::waiting_time)
        .fold((0.0, 0u64), |(s, n), w| (s + w, n + 1));
    if n == 0 {
        return Err(Error::EmptySample(format!("no served task arrived after t = {warmup}")));
    }
    Ok(sum / n as f64)
}

/// Power per server in state `s`.
pub fn energy_per_server(s: &FluidState, e: &EnergyParams) -> f64 {
    (s.q(1) + s.delta1) * e.p_full + s.u() * e.p_idle
}

/// Power above the minimum `λ̄ · p_full` needed to serve the admitted load.
/// Finite traces can report small negative values.
pub fn energy_wastage(mean_power: f64, lam_admitted: f64, e: &EnergyParams) -> f64 {
    mean_power - lam_admitted * e.p_full
}

/// Stationary power per server of plain JIQ, where idle servers never turn
/// off: `λ p_full (1 + (1/λ − 1) f)` with `f = p_idle / p_full`.
pub fn jiq_energy(lambda: f64, e: &EnergyParams) -> f64 {
    lambda * e.p_full * (1.0 + (1.0 / lambda - 1.0) * e.idle_ratio())
}

/// Fraction of the JIQ power that a policy reaching `λ p_full` saves.
pub fn relative_saving(lambda: f64, e: &EnergyParams) -> f64 {
    let x = (1.0 / lambda - 1.0) * e.idle_ratio();
    x / (1.0 + x)
}

fn component_gap(a: &FluidState, b: &FluidState) -> f64 {
    let (a, b) = (a.aggregated(), b.aggregated());
    let levels = a.buffer().max(b.buffer());
    let mut gap = (a.delta0 - b.delta0).abs().max((a.delta1 - b.delta1).abs());
    for i in 1..=levels {
        gap = gap.max((a.q(i) - b.q(i)).abs());
    }
    gap
}

/// Largest absolute difference over sample times and over the components
/// `q_1..q_B, δ0, δ1`. The fluid trajectory is linearly interpolated to the
/// simulator's sample times; samples outside its time range are skipped.
pub fn trajectory_gap<S: Snapshot>(sim: &[S], fl: &FluidTrajectory) -> Result<f64> {
    let mut gap: Option<f64> = None;
    for s in sim {
        if let Some(f) = fl.state_at(s.time()) {
            let g = component_gap(s.state(), &f);
            gap = Some(gap.map_or(g, |x| x.max(g)));
        }
    }
    gap.ok_or_else(|| Error::Alignment("simulated trace and fluid trajectory do not overlap in time".into()))
}

/// Gap between two traces sampled at the same times.
pub fn aligned_gap<A: Snapshot, B: Snapshot>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Alignment(format!("traces have {} and {} samples", a.len(), b.len())));
    }
    let mut gap = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        if (x.time() - y.time()).abs() > 1e-9 * x.time().abs().max(1.0) {
            return Err(Error::Alignment(format!("sample times {} and {} differ", x.time(), y.time())));
        }
        gap = gap.max(component_gap(x.state(), y.state()));
    }
    Ok(gap)
}

/// Time average of a trace with batch-means standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryEstimate {
    pub mean: FluidState,
    /// Standard errors in the layout of [`FluidState::to_vec`].
    pub std_err: Vec<f64>,
    pub samples: usize,
    pub batches: usize,
    pub warmup: f64,
}

impl StationaryEstimate {
    /// Standard errors of `(q_1, δ0, δ1)` with phases aggregated.
    pub fn headline_std_err(&self) -> [f64; 3] {
        let k = self.mean.phases();
        let n = self.std_err.len();
        // Batch means of q_1 are sums of the phase batch means; bound their
        // standard error by the sum of the phase errors.
        let q1: f64 = self.std_err[..k].iter().sum();
        [q1, self.std_err[n - 2], self.std_err[n - 1]]
    }
}

/// Averages the samples taken at or after `warmup` over ten contiguous
/// batches. Samples are assumed equally spaced.
pub fn stationary_estimate<S: Snapshot>(trace: &[S], warmup: f64) -> Result<StationaryEstimate> {
    let horizon = trace.last().map(Snapshot::time).unwrap_or(f64::NEG_INFINITY);
    if horizon <= warmup {
        return Err(Error::EmptySample(format!("trace ends at {horizon}, not after the warmup {warmup}")));
    }
    let first = trace.iter().find(|s| s.time() >= warmup).expect("window is non-empty").state();
    // Accumulate deviations from the first sample so a constant trace
    // averages to itself exactly.
    let origin = first.to_vec();
    let window: Vec<Vec<f64>> = trace
        .iter()
        .filter(|s| s.time() >= warmup)
        .map(|s| s.state().to_vec().iter().zip(&origin).map(|(x, o)| x - o).collect())
        .collect();
    let n = window.len();
    let dim = origin.len();
    let batches = BATCHES.min(n);
    let mut batch_means = vec![vec![0.0; dim]; batches];
    for (b, means) in batch_means.iter_mut().enumerate() {
        let (lo, hi) = (b * n / batches, (b + 1) * n / batches);
        for row in &window[lo..hi] {
            for (m, x) in means.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in means.iter_mut() {
            *m /= (hi - lo) as f64;
        }
    }
    let mut mean = vec![0.0; dim];
    for row in &window {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for (m, o) in mean.iter_mut().zip(&origin) {
        *m = o + *m / n as f64;
    }
    let std_err = (0..dim)
        .map(|c| {
            if batches < 2 {
                return 0.0;
            }
            let avg = batch_means.iter().map(|b| b[c]).sum::<f64>() / batches as f64;
            let var = batch_means.iter().map(|b| (b[c] - avg).powi(2)).sum::<f64>() / (batches - 1) as f64;
            (var / batches as f64).sqrt()
        })
        .collect();
    let mut mean = FluidState::from_slice(first.buffer(), first.phases(), &mean);
    if !mean.is_valid() {
        mean = mean.project()?;
    }
    Ok(StationaryEstimate { mean, std_err, samples: n, batches, warmup })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mean_wait: f64,
    /// Watts per server.
    pub mean_power: f64,
    pub wastage: f64,
    /// `mean_power / (p_full + p_idle)`.
    pub normalized_power: f64,
    pub loss_fraction: f64,
    pub msg_per_task: f64,
    /// Admitted tasks per server per unit time over the averaging window.
    pub admitted_load: f64,
    pub sample_count: usize,
    pub warmup_used: f64,
}

impl MetricsReport {
    /// Component-wise mean of several reports; used to aggregate replications.
    pub fn average(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let n = reports.len() as f64;
        let first = *reports.first()?;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            mean_wait: avg(|r| r.mean_wait),
            mean_power: avg(|r| r.mean_power),
            wastage: avg(|r| r.wastage),
            normalized_power: avg(|r| r.normalized_power),
            loss_fraction: avg(|r| r.loss_fraction),
            msg_per_task: avg(|r| r.msg_per_task),
            admitted_load: avg(|r| r.admitted_load),
            sample_count: reports.iter().map(|r| r.sample_count).sum(),
            warmup_used: first.warmup_used,
        })
    }
}

/// Summarizes one simulation run, discarding `warmup_fraction` of the
/// horizon. The waiting time comes from task records when they were kept,
/// and from Little's law on the sampled queues otherwise.
pub fn summarize(out: &SimOutput, energy: &EnergyParams, warmup_fraction: f64) -> Result<MetricsReport> {
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::Config(format!("warmup fraction must lie in [0, 1), got {warmup_fraction}")));
    }
    let warmup = warmup_fraction * out.horizon;
    let window: Vec<&TraceSample> = out.samples.iter().filter(|s| s.t >= warmup).collect();
    let (Some(first), Some(last)) = (window.first(), window.last()) else {
        return Err(Error::EmptySample(format!("no trace sample after t = {warmup}")));
    };
    let n = out.n_servers as f64;
    let mean_power = window.iter().map(|s| energy_per_server(&s.fluid, energy)).sum::<f64>() / window.len() as f64;

    let (arrivals, drops, span) = if last.t > first.t {
        (
            last.counters.arrivals - first.counters.arrivals,
            last.counters.drops - first.counters.drops,
            last.t - first.t,
        )
    } else {
        (out.counters.arrivals, out.counters.drops, out.horizon)
    };
    let admitted_load = (arrivals - drops) as f64 / (n * span);
    let loss_fraction = if arrivals == 0 { 0.0 } else { drops as f64 / arrivals as f64 };

    let mean_wait = if out.tasks.is_empty() {
        let queued = window
            .iter()
            .map(|s| (2..=s.fluid.buffer()).map(|i| s.fluid.q(i)).sum::<f64>() + s.central_queue as f64 / n)
            .sum::<f64>()
            / window.len() as f64;
        if admitted_load > 0.0 {
            queued / admitted_load
        } else {
            0.0
        }
    } else {
        empirical_mean_wait(&out.tasks, warmup)?
    };

    let total = out.counters.arrivals;
    Ok(MetricsReport {
        mean_wait,
        mean_power,
        wastage: energy_wastage(mean_power, admitted_load, energy),
        normalized_power: mean_power / (energy.p_full + energy.p_idle),
        loss_fraction,
        msg_per_task: if total == 0 { 0.0 } else { out.counters.messages() as f64 / total as f64 },
        admitted_load,
        sample_count: window.len(),
        warmup_used: warmup,
    })
}

/// Fluid counterpart of [`summarize`]: time averages over the samples after
/// the warmup, with the admitted load `λ(t)` minus the fluid drop rate.
pub fn summarize_fluid(
    traj: &FluidTrajectory,
    params: &FluidParams,
    energy: &EnergyParams,
    warmup_fraction: f64,
) -> Result<MetricsReport> {
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::Config(format!("warmup fraction must lie in [0, 1), got {warmup_fraction}")));
    }
    let horizon = traj.last().t;
    let warmup = warmup_fraction * horizon;
    let window: Vec<&FluidSample> = traj.samples.iter().filter(|s| s.t >= warmup).collect();
    if window.is_empty() {
        return Err(Error::EmptySample(format!("no fluid sample after t = {warmup}")));
    }
    let m = window.len() as f64;
    let (mut power, mut queued, mut offered, mut dropped) = (0.0, 0.0, 0.0, 0.0);
    for s in &window {
        let lambda = params.arrivals.rate(s.t);
        let agg = s.state.aggregated();
        power += energy_per_server(&s.state, energy);
        queued += (2..=agg.buffer()).map(|i| agg.q(i)).sum::<f64>();
        offered += lambda;
        dropped += lambda * assignment_probs(&agg, lambda, params.nu)?.lost();
    }
    let (power, queued, offered, dropped) = (power / m, queued / m, offered / m, dropped / m);
    let admitted = offered - dropped;
    Ok(MetricsReport {
        mean_wait: if admitted > 0.0 { queued / admitted } else { 0.0 },
        mean_power: power,
        wastage: energy_wastage(power, admitted, energy),
        normalized_power: power / (energy.p_full + energy.p_idle),
        loss_fraction: if offered > 0.0 { dropped / offered } else { 0.0 },
        msg_per_task: f64::NAN,
        admitted_load: admitted,
        sample_count: window.len(),
        warmup_used: warmup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::{fixed_point, integrate_fluid};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn task(arrival: f64, start: Option<f64>, dropped: bool) -> TaskRecord {
        TaskRecord { arrival, start, departure: None, server: None, dropped }
    }

    #[test]
    fn little_law_examples() {
        let s = FluidState::new(vec![0.5, 0.2, 0.1], 0.1, 0.1);
        close(fluid_mean_wait(&s, 0.5), 0.6, 1e-15);
        assert_eq!(fluid_mean_wait(&fixed_point(0.3, 5).unwrap(), 0.3), 0.0);
    }

    #[test]
    fn empirical_wait_filters_and_averages() {
        let tasks = [task(0.0, Some(5.0), false), task(1.0, Some(1.4), false), task(2.0, None, true)];
        close(empirical_mean_wait(&tasks, 0.5).unwrap(), 0.4, 1e-15);
        assert!(matches!(empirical_mean_wait(&tasks, 3.0), Err(Error::EmptySample(_))));
        assert_eq!(empirical_mean_wait(&[task(1.0, Some(1.0), false)], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn energy_examples() {
        let e = EnergyParams::default();
        let fp = fixed_point(0.3, 10).unwrap();
        close(energy_per_server(&fp, &e), 60.0, 1e-12);
        close(energy_per_server(&fp, &e) / 340.0, 3.0 / 17.0, 1e-15);
        close(energy_per_server(&FluidState::all_idle_on(3, 1), &e), 140.0, 0.0);
        close(energy_wastage(energy_per_server(&fp, &e), 0.3, &e), 0.0, 1e-12);
        close(jiq_energy(0.3, &e), 158.0, 1e-12);
        close(energy_wastage(jiq_energy(0.3, &e), 0.3, &e), 98.0, 1e-12);
        close(relative_saving(0.3, &e), 98.0 / 158.0, 1e-12);
        let free_idle = EnergyParams::new(200.0, 0.0).unwrap();
        close(jiq_energy(0.3, &free_idle), 60.0, 1e-12);
    }

    fn samples(values: &[(f64, f64)]) -> Vec<FluidSample> {
        values
            .iter()
            .map(|&(t, d0)| {
                let state = FluidState::new(vec![0.3, 0.0], d0, 0.0);
                FluidSample { t, u: state.u(), state, xi: 0.0, setups_completed: 0.0 }
            })
            .collect()
    }

    #[test]
    fn gap_examples() {
        let a = samples(&[(0.0, 0.5), (1.0, 0.6)]);
        let b = samples(&[(0.0, 0.51), (1.0, 0.61)]);
        close(aligned_gap(&a, &a).unwrap(), 0.0, 0.0);
        close(aligned_gap(&a, &b).unwrap(), 0.01, 1e-12);
        let traj = FluidTrajectory { samples: b, dt: 1.0 };
        close(trajectory_gap(&a, &traj).unwrap(), 0.01, 1e-12);
        let late = samples(&[(5.0, 0.5)]);
        assert!(matches!(trajectory_gap(&late, &traj), Err(Error::Alignment(_))));
    }

    #[test]
    fn stationary_estimate_of_equilibrium_and_constants() {
        let params = FluidParams::constant(0.3, 0.1, 0.1, 5).unwrap();
        let fp = fixed_point(0.3, 5).unwrap();
        let traj = integrate_fluid(&fp, &params, 50.0, 1e-2, 1.0).unwrap();
        let est = stationary_estimate(&traj.samples, 10.0).unwrap();
        assert!(est.mean.distance_inf(&fp) < 1e-14);
        assert!(est.std_err.iter().all(|&x| x < 1e-14));
        assert!(matches!(stationary_estimate(&traj.samples, 50.0), Err(Error::EmptySample(_))));
    }

    #[test]
    fn fluid_summary_at_fixed_point() {
        let params = FluidParams::constant(0.3, 0.1, 0.1, 5).unwrap();
        let fp = fixed_point(0.3, 5).unwrap();
        let traj = integrate_fluid(&fp, &params, 20.0, 1e-2, 1.0).unwrap();
        let r = summarize_fluid(&traj, &params, &EnergyParams::default(), 0.4).unwrap();
        close(r.mean_power, 60.0, 1e-9);
        close(r.wastage, 0.0, 1e-9);
        close(r.mean_wait, 0.0, 1e-12);
        close(r.loss_fraction, 0.0, 1e-12);
    }
}
