//! Seeded discrete-event simulation of `N` parallel servers.
//!
//! [`Policy::Tabs`] and [`Policy::Jiq`] run on the token engine in
//! [`tabs`]; [`Policy::DelayedOff`] runs the centralized-queue baseline in
//! [`delayed_off`]. All randomness comes from one ChaCha8 stream seeded by
//! [`SimConfig::seed`], so a configuration always reproduces the same trace.

pub mod delayed_off;
pub mod schedule;
pub mod tabs;

use crate::error::{Error, Result};
use crate::fluid::ServiceModel;
use crate::model::{ArrivalProfile, FluidState};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

pub use delayed_off::DelayedOffEngine;
pub use schedule::{Event, EventKind, EventSchedule};
pub use tabs::TabsEngine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Token-based auto-scaling with standby timers and dispatcher-driven setups.
    Tabs,
    /// Join-the-idle-queue: the same dispatcher, servers never turn off.
    Jiq,
    /// Centralized FCFS queue with delayed turn-off and cancellable setups.
    DelayedOff,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Tabs => "tabs",
            Policy::Jiq => "jiq",
            Policy::DelayedOff => "delayedoff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tabs" => Some(Policy::Tabs),
            "jiq" => Some(Policy::Jiq),
            "delayedoff" | "delayed_off" | "delayed-off" => Some(Policy::DelayedOff),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    AllIdleOn,
    AllIdleOff,
    /// Rounded to whole servers; see [`SimConfig::validate`].
    Fractions(FluidState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_servers: usize,
    pub buffer: usize,
    pub arrivals: ArrivalProfile,
    /// Standby rate: an idle-on server turns off after `Exp(mu)`.
    pub mu: f64,
    /// Setup rate: a server in setup turns on after `Exp(nu)`.
    pub nu: f64,
    pub service: ServiceModel,
    pub policy: Policy,
    pub horizon: f64,
    pub sample_interval: f64,
    pub seed: u64,
    pub initial: InitialCondition,
    /// Keep one [`TaskRecord`] per arrival.
    pub record_tasks: bool,
    /// Verify the ledger partition and per-server invariants after every
    /// event. O(N) per event; meant for small test systems.
    pub check_invariants: bool,
}

impl SimConfig {
    /// TABS with exponential service, constant load, all servers idle-on.
    pub fn tabs(n_servers: usize, lambda: f64, mu: f64, nu: f64, horizon: f64) -> Self {
        Self {
            n_servers,
            buffer: 10,
            arrivals: ArrivalProfile::Constant(lambda),
            mu,
            nu,
            service: ServiceModel::UnitExponential,
            policy: Policy::Tabs,
            horizon,
            sample_interval: 1.0,
            seed: 1,
            initial: InitialCondition::AllIdleOn,
            record_tasks: true,
            check_invariants: false,
        }
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_servers == 0 {
            errs.push("n_servers must be at least 1".to_string());
        }
        if self.buffer == 0 {
            errs.push("buffer must be at least 1".to_string());
        }
        if let Err(e) = self.arrivals.validate() {
            errs.push(e.to_string());
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            errs.push(format!("standby rate must be positive, got {}", self.mu));
        }
        if !(self.nu.is_finite() && self.nu > 0.0) {
            errs.push(format!("setup rate must be positive, got {}", self.nu));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            errs.push(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.sample_interval.is_finite() && self.sample_interval > 0.0) {
            errs.push(format!("sample_interval must be positive, got {}", self.sample_interval));
        }
        if self.policy == Policy::DelayedOff && !self.service.is_exponential() {
            errs.push("the delayed-off baseline requires exponential service".to_string());
        }
        match &self.initial {
            InitialCondition::Fractions(s) => {
                let v = s.violations();
                if !v.is_empty() {
                    errs.push(format!("initial state is invalid: {}", v.join("; ")));
                }
                if s.buffer() != self.buffer || s.phases() != self.service.phases() {
                    errs.push("initial state shape does not match buffer and service phases".to_string());
                }
                if self.policy == Policy::Jiq && (s.delta0 > 0.0 || s.delta1 > 0.0) {
                    errs.push("JIQ servers never turn off; the initial state must have no off or setup servers".into());
                }
                if self.policy == Policy::DelayedOff && (s.q(2) > 0.0 || s.delta1 > 0.0) {
                    errs.push("the delayed-off baseline starts without queued tasks or setups".to_string());
                }
            }
            InitialCondition::AllIdleOff if self.policy == Policy::Jiq => {
                errs.push("JIQ servers never turn off; start from all idle-on".to_string());
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Lifecycle of one task. `start` and `departure` stay `None` for tasks
/// that are dropped or still in the system at the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskRecord {
    pub arrival: f64,
    pub start: Option<f64>,
    pub departure: Option<f64>,
    pub server: Option<usize>,
    pub dropped: bool,
}

impl TaskRecord {
    pub fn waiting_time(&self) -> Option<f64> {
        self.start.map(|s| s - self.arrival)
    }
}

/// Cumulative event counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub arrivals: u64,
    pub departures: u64,
    pub drops: u64,
    /// Drops that found neither an idle-on nor a busy server.
    pub unroutable: u64,
    pub msgs_green: u64,
    pub msgs_red: u64,
    /// Setups initiated.
    pub setups: u64,
    /// Setups aborted (delayed-off baseline only).
    pub setups_cancelled: u64,
    /// Tasks present at time zero.
    pub initial_tasks: u64,
}

impl Counters {
    pub fn messages(&self) -> u64 {
        self.msgs_green + self.msgs_red
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    /// `Q_i/N`, `Δ0/N`, `Δ1/N`; phase-resolved for phase-type service.
    pub fluid: FluidState,
    pub u: f64,
    pub counters: Counters,
    /// Tasks queued at the dispatcher (delayed-off baseline only).
    pub central_queue: usize,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub n_servers: usize,
    pub policy: Policy,
    pub samples: Vec<TraceSample>,
    pub tasks: Vec<TaskRecord>,
    pub counters: Counters,
    pub horizon: f64,
}

/// Runs one replication.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    match cfg.policy {
        Policy::Tabs | Policy::Jiq => Ok(TabsEngine::new(cfg)?.run()),
        Policy::DelayedOff => Ok(DelayedOffEngine::new(cfg)?.run()),
    }
}

/// Runs `replications` independent copies of `cfg` in parallel, copy `k`
/// seeded with `cfg.seed + k`. Outputs are returned in replication order.
pub fn run_replications(cfg: &SimConfig, replications: usize) -> Result<Vec<SimOutput>> {
    cfg.validate()?;
    (0..replications as u64)
        .into_par_iter()
        .map(|k| run_simulation(&cfg.clone().with_seed(cfg.seed.wrapping_add(k))))
        .collect()
}

/// Runs the centralized delayed-off baseline; same as [`run_simulation`]
/// with the policy forced.
pub fn run_delayedoff(cfg: &SimConfig) -> Result<SimOutput> {
    let mut cfg = cfg.clone();
    cfg.policy = Policy::DelayedOff;
    run_simulation(&cfg)
}

/// A single draw from the service model: the full duration for exponential
/// service, the initial phase for phase-type service.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServiceDraw {
    Duration(f64),
    Phase(usize),
}

pub fn sample_service<R: Rng + ?Sized>(service: &ServiceModel, rng: &mut R) -> ServiceDraw {
    match service {
        ServiceModel::UnitExponential => ServiceDraw::Duration(exp(1.0, rng)),
        ServiceModel::PhaseType(d) => ServiceDraw::Phase(d.sample_initial(rng)),
    }
}

/// Complete service duration, walking the phase path when needed.
pub fn sample_service_time<R: Rng + ?Sized>(service: &ServiceModel, rng: &mut R) -> f64 {
    match service {
        ServiceModel::UnitExponential => exp(1.0, rng),
        ServiceModel::PhaseType(d) => d.sample_duration(rng),
    }
}

pub(crate) fn exp<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    Exp::new(rate).expect("rates validated positive").sample(rng)
}

/// Next arrival after `now` for a Poisson process of rate `n · λ(t)`,
/// generated by thinning against `n · sup λ`.
pub(crate) fn next_arrival<R: Rng + ?Sized>(
    profile: &ArrivalProfile,
    n: usize,
    now: f64,
    horizon: f64,
    rng: &mut R,
) -> Option<f64> {
    let sup = profile.sup_rate() * n as f64;
    let mut t = now;
    loop {
        t += exp(sup, rng);
        if t > horizon {
            return None;
        }
        if profile.is_constant() {
            return Some(t);
        }
        let accept: f64 = rng.random();
        if accept * sup < profile.rate(t) * n as f64 {
            return Some(t);
        }
    }
}

/// Whole-server counts for a fluid state: `(level-major Q_{i,j}, Δ0, Δ1)`.
pub(crate) fn round_fractions(s: &FluidState, n: usize) -> (Vec<usize>, usize, usize) {
    let (b, k) = (s.buffer(), s.phases());
    let nf = n as f64;
    let mut q: Vec<usize> = s.q_matrix().iter().map(|x| (x * nf).round() as usize).collect();
    for i in 1..b {
        for j in 0..k {
            q[i * k + j] = q[i * k + j].min(q[(i - 1) * k + j]);
        }
    }
    let busy: usize = q[..k].iter().sum();
    let busy = busy.min(n);
    let mut d1 = ((s.delta1 * nf).round() as usize).min(n - busy);
    let mut d0 = ((s.delta0 * nf).round() as usize).min(n - busy - d1);
    if busy + d0 + d1 > n {
        d0 = n - busy - d1;
    }
    if busy + d1 > n {
        d1 = n - busy;
    }
    (q, d0, d1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::PhaseTypeService;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(service: &ServiceModel, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = sample_service_time(service, &mut rng);
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        (mean, s2 / n as f64 - mean * mean)
    }

    #[test]
    fn unit_exponential_mean() {
        let (mean, _) = moments(&ServiceModel::UnitExponential, 1_000_000, 11);
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn hyper_exponential_moments() {
        // E[S²] = 2(0.75/4 + 0.25/0.16) = 3.5, so Var = 2.5.
        let d = ServiceModel::PhaseType(PhaseTypeService::reference_hyper_exponential());
        let (mean, var) = moments(&d, 1_000_000, 12);
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!((var - 2.5).abs() < 0.1, "{var}");
    }

    #[test]
    fn thinning_matches_integrated_rate() {
        let p = ArrivalProfile::Sinusoid { base: 0.3, amplitude: 0.2, period: 10.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let horizon = 100.0;
        let mut t = 0.0;
        let mut count = 0u64;
        while let Some(next) = next_arrival(&p, 1000, t, horizon, &mut rng) {
            t = next;
            count += 1;
        }
        // ∫_0^100 (0.3 + 0.2 sin(t/10)) dt = 30 + 2(1 − cos 10).
        let expected = 1000.0 * (30.0 + 2.0 * (1.0 - 10f64.cos()));
        assert!(((count as f64) - expected).abs() < 4.0 * expected.sqrt(), "{count} vs {expected}");
    }

    #[test]
    fn fraction_rounding_stays_feasible() {
        let s = FluidState::new(vec![0.333, 0.1, 0.0], 0.5, 0.167);
        let (q, d0, d1) = round_fractions(&s, 10);
        assert_eq!(q, vec![3, 1, 0]);
        assert!(q[0] + d0 + d1 <= 10);
    }

    #[test]
    fn replications_are_seeded_independently_and_reproducibly() {
        let cfg = SimConfig::tabs(20, 0.4, 0.2, 0.2, 30.0).with_seed(7);
        let a = run_replications(&cfg, 3).unwrap();
        let b = run_replications(&cfg, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.samples, y.samples);
            assert_eq!(x.tasks, y.tasks);
        }
        assert_eq!(a[2].samples, run_simulation(&cfg.clone().with_seed(9)).unwrap().samples);
        assert_ne!(a[0].counters, a[1].counters);
    }

    #[test]
    fn config_validation_collects_errors() {
        let mut cfg = SimConfig::tabs(0, 0.3, 0.0, 0.1, 10.0);
        cfg.sample_interval = 0.0;
        let Err(Error::Config(msg)) = cfg.validate() else { panic!("expected config error") };
        assert!(msg.contains("n_servers") && msg.contains("standby") && msg.contains("sample_interval"), "{msg}");
        let jiq = SimConfig::tabs(5, 0.3, 0.1, 0.1, 1.0).with_policy(Policy::Jiq);
        let mut off = jiq.clone();
        off.initial = InitialCondition::AllIdleOff;
        assert!(jiq.validate().is_ok());
        assert!(off.validate().is_err());
    }
}
