//! Token engine shared by TABS and plain JIQ.
//!
//! * A server that empties sends a green token and starts an `Exp(μ)`
//!   standby timer; when the timer fires it sends red and turns off.
//! * An arrival takes a uniformly random green token if one exists.
//!   Otherwise it joins a uniformly random busy server, and if a red token
//!   exists a uniformly random off server starts an `Exp(ν)` setup (orange).
//! * A completed setup sends green and starts a standby timer.
//!
//! JIQ is the same dispatcher with standby timers disabled.

use super::schedule::{Event, EventKind, EventSchedule};
use super::{exp, next_arrival, round_fractions, Counters, InitialCondition, Policy, SimConfig, SimOutput, TaskRecord, TraceSample};
use crate::error::{Error, Result};
use crate::fluid::ServiceModel;
use crate::model::{DispatcherLedger, FluidState, Mode, ServerState, Token};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Placeholder id for tasks present at time zero.
const UNTRACKED: usize = usize::MAX;

pub struct TabsEngine {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    now: f64,
    servers: Vec<ServerState>,
    epochs: Vec<u64>,
    /// Pre-drawn successor of the current phase; `None` means completion.
    next_phase: Vec<Option<usize>>,
    queues: Vec<VecDeque<usize>>,
    ledger: DispatcherLedger,
    schedule: EventSchedule,
    /// `Q_{i,j}` counts, level-major.
    occupancy: Vec<u64>,
    counters: Counters,
    tasks: Vec<TaskRecord>,
    samples: Vec<TraceSample>,
    sample_index: u64,
}

impl TabsEngine {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.policy == Policy::DelayedOff {
            return Err(Error::Config("the token engine runs TABS or JIQ only".into()));
        }
        let n = cfg.n_servers;
        let phase_type = !cfg.service.is_exponential();
        let mut servers = Vec::with_capacity(n);
        match &cfg.initial {
            InitialCondition::AllIdleOn => servers.resize(n, ServerState::idle_on()),
            InitialCondition::AllIdleOff => servers.resize(n, ServerState::idle_off()),
            InitialCondition::Fractions(s) => {
                let (q, d0, d1) = round_fractions(s, n);
                let (b, k) = (s.buffer(), s.phases());
                for i in 1..=b {
                    for j in 0..k {
                        let here = q[(i - 1) * k + j] - if i < b { q[i * k + j] } else { 0 };
                        let phase = phase_type.then_some(j);
                        servers.extend((0..here).map(|_| ServerState { mode: Mode::Busy, queue_len: i, phase }));
                    }
                }
                servers.extend((0..d1).map(|_| ServerState { mode: Mode::Setup, queue_len: 0, phase: None }));
                servers.extend((0..d0).map(|_| ServerState::idle_off()));
                servers.resize(n, ServerState::idle_on());
            }
        }
        Self::from_servers(cfg, servers)
    }

    /// Engine starting from explicit server states. Busy servers get
    /// untracked tasks and fresh service clocks; idle-on servers get standby
    /// timers (TABS only); setup servers get setup clocks.
    pub fn from_servers(cfg: &SimConfig, servers: Vec<ServerState>) -> Result<Self> {
        let n = servers.len();
        if n != cfg.n_servers {
            return Err(Error::Config(format!("{n} server states for n_servers = {}", cfg.n_servers)));
        }
        let k = cfg.service.phases();
        let phase_type = !cfg.service.is_exponential();
        for (id, s) in servers.iter().enumerate() {
            if !s.is_consistent(phase_type) || s.queue_len > cfg.buffer || s.phase.is_some_and(|p| p >= k) {
                return Err(Error::Config(format!("server {id} has an inconsistent initial state {s:?}")));
            }
        }
        let ledger = DispatcherLedger::from_modes(&servers);
        let mut engine = Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: 0.0,
            epochs: vec![0; n],
            next_phase: vec![None; n],
            queues: if cfg.record_tasks { vec![VecDeque::new(); n] } else { Vec::new() },
            ledger,
            schedule: EventSchedule::with_capacity(2 * n + 2),
            occupancy: vec![0; cfg.buffer * k],
            counters: Counters::default(),
            tasks: Vec::new(),
            samples: Vec::new(),
            sample_index: 0,
            servers,
            cfg: cfg.clone(),
        };
        engine.schedule_initial();
        Ok(engine)
    }

    fn schedule_initial(&mut self) {
        self.schedule.push(Event { time: 0.0, kind: EventKind::Sample, server: 0, epoch: 0 });
        self.schedule_next_arrival();
        for id in 0..self.servers.len() {
            match self.servers[id].mode {
                Mode::Busy => {
                    let len = self.servers[id].queue_len;
                    self.counters.initial_tasks += len as u64;
                    if self.cfg.record_tasks {
                        self.queues[id].extend(std::iter::repeat_n(UNTRACKED, len));
                    }
                    match self.servers[id].phase {
                        Some(p) => self.schedule_phase_end(id, p),
                        None => self.schedule_departure(id),
                    }
                    self.add_occupancy(id);
                }
                Mode::IdleOn => self.start_standby(id),
                Mode::Setup => self.schedule_setup(id),
                Mode::IdleOff => {}
            }
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn servers(&self) -> &[ServerState] {
        &self.servers
    }

    pub fn ledger(&self) -> &DispatcherLedger {
        &self.ledger
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn tasks(&self) -> &[TaskRecord] {
        &self.tasks
    }

    pub fn schedule(&self) -> &EventSchedule {
        &self.schedule
    }

    /// Current idle epoch of `server`; standby timers carry the epoch they
    /// were started in.
    pub fn epoch(&self, server: usize) -> u64 {
        self.epochs[server]
    }

    fn standby_enabled(&self) -> bool {
        self.cfg.policy == Policy::Tabs
    }

    fn schedule_next_arrival(&mut self) {
        if let Some(t) = next_arrival(&self.cfg.arrivals, self.cfg.n_servers, self.now, self.cfg.horizon, &mut self.rng)
        {
            self.schedule.push(Event { time: t, kind: EventKind::Arrival, server: 0, epoch: 0 });
        }
    }

    fn schedule_departure(&mut self, server: usize) {
        let t = self.now + exp(1.0, &mut self.rng);
        self.schedule.push(Event { time: t, kind: EventKind::Departure, server, epoch: 0 });
    }

    /// Draws the sojourn in `phase` and what follows it.
    fn schedule_phase_end(&mut self, server: usize, phase: usize) {
        let ServiceModel::PhaseType(d) = &self.cfg.service else {
            unreachable!("phase clocks only exist for phase-type service")
        };
        let t = self.now + d.sample_sojourn(phase, &mut self.rng);
        let next = d.sample_next(phase, &mut self.rng);
        self.next_phase[server] = next;
        let kind = if next.is_some() { EventKind::PhaseJump } else { EventKind::Departure };
        self.schedule.push(Event { time: t, kind, server, epoch: 0 });
    }

    /// Starts service of the head task at `server`.
    fn start_service(&mut self, server: usize) {
        match &self.cfg.service {
            ServiceModel::UnitExponential => self.schedule_departure(server),
            ServiceModel::PhaseType(d) => {
                let phase = d.sample_initial(&mut self.rng);
                self.servers[server].phase = Some(phase);
                self.schedule_phase_end(server, phase);
            }
        }
        if self.cfg.record_tasks {
            if let Some(&task) = self.queues[server].front() {
                if task != UNTRACKED {
                    self.tasks[task].start = Some(self.now);
                }
            }
        }
    }

    fn start_standby(&mut self, server: usize) {
        self.epochs[server] += 1;
        if self.standby_enabled() {
            let t = self.now + exp(self.cfg.mu, &mut self.rng);
            self.schedule.push(Event { time: t, kind: EventKind::StandbyExpiry, server, epoch: self.epochs[server] });
        }
    }

    fn schedule_setup(&mut self, server: usize) {
        let t = self.now + exp(self.cfg.nu, &mut self.rng);
        self.schedule.push(Event { time: t, kind: EventKind::SetupComplete, server, epoch: self.epochs[server] });
    }

    fn occupancy_delta(&mut self, server: usize, add: bool) {
        let k = self.cfg.service.phases();
        let s = self.servers[server];
        let j = s.phase.unwrap_or(0);
        for level in 1..=s.queue_len {
            let c = &mut self.occupancy[(level - 1) * k + j];
            if add {
                *c += 1;
            } else {
                *c -= 1;
            }
        }
    }

    fn add_occupancy(&mut self, server: usize) {
        self.occupancy_delta(server, true);
    }

    fn remove_occupancy(&mut self, server: usize) {
        self.occupancy_delta(server, false);
    }

    /// Dispatches one arriving task.
    pub fn on_arrival(&mut self) {
        self.counters.arrivals += 1;
        let task = if self.cfg.record_tasks {
            self.tasks.push(TaskRecord { arrival: self.now, start: None, departure: None, server: None, dropped: false });
            self.tasks.len() - 1
        } else {
            UNTRACKED
        };

        if let Some(s) = self.ledger.pick(Token::Green, &mut self.rng) {
            // The pending standby timer dies with the old epoch.
            self.epochs[s] += 1;
            self.ledger.set(s, Token::Yellow);
            self.servers[s].mode = Mode::Busy;
            self.servers[s].queue_len = 1;
            if self.cfg.record_tasks {
                self.queues[s].push_back(task);
                self.tasks[task].server = Some(s);
            }
            self.start_service(s);
            self.add_occupancy(s);
            return;
        }

        match self.ledger.pick(Token::Yellow, &mut self.rng) {
            Some(s) if self.servers[s].queue_len < self.cfg.buffer => {
                self.remove_occupancy(s);
                self.servers[s].queue_len += 1;
                self.add_occupancy(s);
                if self.cfg.record_tasks {
                    self.queues[s].push_back(task);
                    self.tasks[task].server = Some(s);
                }
            }
            target => {
                self.counters.drops += 1;
                if target.is_none() {
                    self.counters.unroutable += 1;
                }
                if self.cfg.record_tasks {
                    self.tasks[task].dropped = true;
                }
            }
        }

        if let Some(r) = self.ledger.pick(Token::Red, &mut self.rng) {
            self.ledger.set(r, Token::Orange);
            self.servers[r].mode = Mode::Setup;
            self.counters.setups += 1;
            self.schedule_setup(r);
        }
    }

    /// Completes the task in service at `server`.
    ///
    /// # Panics
    /// If `server` is not busy.
    pub fn on_departure(&mut self, server: usize) {
        assert!(
            self.servers[server].mode == Mode::Busy && self.servers[server].queue_len >= 1,
            "departure at non-busy server {server}: {:?}",
            self.servers[server]
        );
        self.remove_occupancy(server);
        self.counters.departures += 1;
        if self.cfg.record_tasks {
            if let Some(task) = self.queues[server].pop_front() {
                if task != UNTRACKED {
                    self.tasks[task].departure = Some(self.now);
                }
            }
        }
        let s = &mut self.servers[server];
        s.queue_len -= 1;
        s.phase = None;
        self.next_phase[server] = None;
        if s.queue_len == 0 {
            s.mode = Mode::IdleOn;
            self.ledger.set(server, Token::Green);
            self.counters.msgs_green += 1;
            self.start_standby(server);
        } else {
            self.start_service(server);
            self.add_occupancy(server);
        }
    }

    /// Moves the task in service at `server` to its pre-drawn next phase.
    pub fn on_phase_jump(&mut self, server: usize) {
        let next = self.next_phase[server].expect("phase jump without a successor phase");
        assert_eq!(self.servers[server].mode, Mode::Busy, "phase jump at non-busy server {server}");
        self.remove_occupancy(server);
        self.servers[server].phase = Some(next);
        self.add_occupancy(server);
        self.schedule_phase_end(server, next);
    }

    /// Turns `server` off if the timer is still current. Returns whether the
    /// event applied; stale timers are ignored.
    pub fn on_standby_expiry(&mut self, server: usize, epoch: u64) -> bool {
        if self.servers[server].mode != Mode::IdleOn || self.epochs[server] != epoch {
            return false;
        }
        self.servers[server].mode = Mode::IdleOff;
        self.ledger.set(server, Token::Red);
        self.counters.msgs_red += 1;
        true
    }

    /// Brings a server out of setup.
    ///
    /// # Panics
    /// If `server` is not in setup.
    pub fn on_setup_complete(&mut self, server: usize) {
        assert_eq!(self.servers[server].mode, Mode::Setup, "setup completion at server {server} not in setup");
        self.servers[server].mode = Mode::IdleOn;
        self.ledger.set(server, Token::Green);
        self.counters.msgs_green += 1;
        self.start_standby(server);
    }

    fn snapshot(&self) -> TraceSample {
        let n = self.cfg.n_servers as f64;
        let q: Vec<f64> = self.occupancy.iter().map(|&c| c as f64 / n).collect();
        let mut fluid = FluidState::with_phases(
            self.cfg.buffer,
            self.cfg.service.phases(),
            q,
            self.ledger.count(Token::Red) as f64 / n,
            self.ledger.count(Token::Orange) as f64 / n,
        );
        if !fluid.is_valid() {
            fluid = fluid.project().expect("count fractions are within rounding of the occupancy space");
        }
        TraceSample { t: self.now, u: fluid.u(), fluid, counters: self.counters, central_queue: 0 }
    }

    /// Full consistency check; panics with a description on failure.
    pub fn assert_invariants(&self) {
        let phase_type = !self.cfg.service.is_exponential();
        for (id, s) in self.servers.iter().enumerate() {
            assert!(s.is_consistent(phase_type), "server {id} inconsistent: {s:?}");
            assert!(s.queue_len <= self.cfg.buffer, "server {id} over buffer");
        }
        assert!(self.ledger.matches(&self.servers), "ledger does not match server modes");
        let busy = self.servers.iter().filter(|s| s.mode == Mode::Busy).count() as u64;
        let k = self.cfg.service.phases();
        assert_eq!(self.occupancy[..k].iter().sum::<u64>(), busy, "Q_1 differs from the busy count");
        let mut expect = vec![0u64; self.occupancy.len()];
        for s in &self.servers {
            for level in 1..=s.queue_len {
                expect[(level - 1) * k + s.phase.unwrap_or(0)] += 1;
            }
        }
        assert_eq!(expect, self.occupancy, "occupancy counts drifted");
        let c = &self.counters;
        assert!(c.departures + c.drops <= c.arrivals + c.initial_tasks, "more tasks left than entered");
    }

    /// Processes the next event if it falls within the horizon.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.schedule.peek().copied() else { return false };
        if ev.time > self.cfg.horizon {
            return false;
        }
        self.schedule.pop();
        self.now = ev.time;
        match ev.kind {
            EventKind::Arrival => {
                self.on_arrival();
                self.schedule_next_arrival();
            }
            EventKind::Departure => self.on_departure(ev.server),
            EventKind::PhaseJump => self.on_phase_jump(ev.server),
            EventKind::StandbyExpiry => {
                self.on_standby_expiry(ev.server, ev.epoch);
            }
            EventKind::SetupComplete => self.on_setup_complete(ev.server),
            EventKind::Sample => {
                self.samples.push(self.snapshot());
                self.sample_index += 1;
                let t = self.sample_index as f64 * self.cfg.sample_interval;
                if t <= self.cfg.horizon * (1.0 + 1e-12) {
                    self.schedule.push(Event { time: t, kind: EventKind::Sample, server: 0, epoch: 0 });
                }
            }
        }
        if self.cfg.check_invariants {
            self.assert_invariants();
        }
        true
    }

    pub fn run(mut self) -> SimOutput {
        while self.step() {}
        SimOutput {
            n_servers: self.cfg.n_servers,
            policy: self.cfg.policy,
            samples: self.samples,
            tasks: self.tasks,
            counters: self.counters,
            horizon: self.cfg.horizon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArrivalProfile;
    use crate::phase::PhaseTypeService;

    fn cfg(n: usize) -> SimConfig {
        let mut c = SimConfig::tabs(n, 0.3, 0.1, 0.1, 10.0);
        c.check_invariants = true;
        c
    }

    fn busy(len: usize) -> ServerState {
        ServerState { mode: Mode::Busy, queue_len: len, phase: None }
    }

    fn setup() -> ServerState {
        ServerState { mode: Mode::Setup, queue_len: 0, phase: None }
    }

    #[test]
    fn arrival_takes_the_only_green_token() {
        let servers = vec![busy(1), busy(2), ServerState::idle_off(), ServerState::idle_on()];
        let mut e = TabsEngine::from_servers(&cfg(4), servers).unwrap();
        let before = e.counters().setups;
        e.on_arrival();
        assert_eq!(e.servers()[3].mode, Mode::Busy);
        assert_eq!(e.ledger().token(3), Token::Yellow);
        assert_eq!(e.counters().setups, before);
        e.assert_invariants();
    }

    #[test]
    fn arrival_without_green_joins_busy_and_starts_setup() {
        let servers = vec![busy(1), busy(1), ServerState::idle_off()];
        let mut e = TabsEngine::from_servers(&cfg(3), servers).unwrap();
        e.on_arrival();
        let lens: Vec<usize> = e.servers()[..2].iter().map(|s| s.queue_len).collect();
        assert!(lens == vec![2, 1] || lens == vec![1, 2]);
        assert_eq!(e.servers()[2].mode, Mode::Setup);
        assert_eq!(e.ledger().orange(), &[2]);
        assert_eq!(e.counters().setups, 1);
        e.assert_invariants();
    }

    #[test]
    fn ongoing_setup_is_left_alone() {
        let servers = vec![busy(1), setup()];
        let mut e = TabsEngine::from_servers(&cfg(2), servers).unwrap();
        e.on_arrival();
        assert_eq!(e.servers()[0].queue_len, 2);
        assert_eq!(e.servers()[1].mode, Mode::Setup);
        assert_eq!(e.counters().setups, 0);
    }

    #[test]
    fn unroutable_arrival_is_dropped_but_triggers_setup() {
        let servers = vec![ServerState::idle_off(), setup()];
        let mut e = TabsEngine::from_servers(&cfg(2), servers).unwrap();
        e.on_arrival();
        assert_eq!(e.counters().drops, 1);
        assert_eq!(e.counters().unroutable, 1);
        assert_eq!(e.counters().setups, 1);
        assert!(e.tasks()[0].dropped);
        assert_eq!(e.servers()[0].mode, Mode::Setup);
    }

    #[test]
    fn full_buffer_drops() {
        let mut c = cfg(1);
        c.buffer = 2;
        let mut e = TabsEngine::from_servers(&c, vec![busy(2)]).unwrap();
        e.on_arrival();
        assert_eq!(e.counters().drops, 1);
        assert_eq!(e.counters().unroutable, 0);
        assert_eq!(e.servers()[0].queue_len, 2);
    }

    #[test]
    fn departure_paths() {
        let mut e = TabsEngine::from_servers(&cfg(2), vec![busy(2), busy(1)]).unwrap();
        e.on_departure(0);
        assert_eq!(e.servers()[0], busy(1));
        assert_eq!(e.counters().msgs_green, 0);
        e.on_departure(1);
        assert_eq!(e.servers()[1].mode, Mode::IdleOn);
        assert_eq!(e.ledger().token(1), Token::Green);
        assert_eq!(e.counters().msgs_green, 1);
        assert_eq!(e.schedule().pending(EventKind::StandbyExpiry, 1), 1);
        e.assert_invariants();
    }

    #[test]
    #[should_panic(expected = "departure at non-busy server")]
    fn departure_at_idle_server_aborts() {
        let mut e = TabsEngine::from_servers(&cfg(1), vec![ServerState::idle_on()]).unwrap();
        e.on_departure(0);
    }

    #[test]
    fn stale_standby_timer_is_ignored() {
        let mut e = TabsEngine::from_servers(&cfg(1), vec![ServerState::idle_on()]).unwrap();
        let stale = e.epoch(0);
        e.on_arrival();
        assert_eq!(e.servers()[0].mode, Mode::Busy);
        assert!(!e.on_standby_expiry(0, stale));
        e.on_departure(0);
        assert!(!e.on_standby_expiry(0, stale), "old epoch must not turn the new idle period off");
        assert!(e.on_standby_expiry(0, e.epoch(0)));
        assert_eq!(e.servers()[0].mode, Mode::IdleOff);
        assert!(!e.on_standby_expiry(0, e.epoch(0)), "second expiry in the same epoch is a no-op");
        assert_eq!(e.counters().msgs_red, 1);
    }

    #[test]
    fn setup_completion_sends_green_and_arms_standby() {
        let mut e = TabsEngine::from_servers(&cfg(2), vec![busy(1), setup()]).unwrap();
        e.on_setup_complete(1);
        assert_eq!(e.servers()[1].mode, Mode::IdleOn);
        assert_eq!(e.ledger().green(), &[1]);
        assert_eq!(e.schedule().pending(EventKind::StandbyExpiry, 1), 1);
        e.on_arrival();
        assert_eq!(e.servers()[1].mode, Mode::Busy);
    }

    #[test]
    fn single_server_turns_off_without_arrivals() {
        let mut c = SimConfig::tabs(1, 1e-9, 1e6, 0.1, 5.0);
        c.arrivals = ArrivalProfile::Constant(1e-12);
        c.check_invariants = true;
        let out = TabsEngine::new(&c).unwrap().run();
        assert_eq!(out.counters.arrivals, 0);
        assert_eq!(out.counters.msgs_red, 1);
        // The initial green token is part of the starting state.
        assert_eq!(out.counters.msgs_green, 0);
        assert_eq!(out.samples.last().unwrap().fluid.delta0, 1.0);
    }

    #[test]
    fn two_servers_first_arrival_snapshot() {
        let mut c = SimConfig::tabs(2, 0.3, 0.1, 0.1, 100.0);
        c.sample_interval = 1e-9;
        c.horizon = 1e-9;
        let mut e = TabsEngine::new(&c).unwrap();
        e.on_arrival();
        let snap = e.snapshot();
        assert_eq!(snap.fluid.q(1), 0.5);
        assert_eq!(snap.u, 0.5);
    }

    #[test]
    fn jiq_never_turns_servers_off() {
        let mut c = cfg(20).with_policy(Policy::Jiq);
        c.horizon = 50.0;
        let out = TabsEngine::new(&c).unwrap().run();
        assert!(out.samples.iter().all(|s| s.fluid.delta0 == 0.0 && s.fluid.delta1 == 0.0));
        assert_eq!(out.counters.msgs_red, 0);
    }

    #[test]
    fn fractions_initial_state_rounds_to_servers() {
        let mut c = cfg(10);
        c.initial = InitialCondition::Fractions(FluidState::new(vec![0.4, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.3, 0.1));
        let e = TabsEngine::new(&c).unwrap();
        let snap = e.snapshot();
        assert_eq!(snap.fluid.q(1), 0.4);
        assert_eq!(snap.fluid.q(2), 0.2);
        assert_eq!(snap.fluid.delta0, 0.3);
        assert_eq!(snap.fluid.delta1, 0.1);
        assert_eq!(e.counters().initial_tasks, 6);
        e.assert_invariants();
    }

    #[test]
    fn phase_type_run_keeps_invariants() {
        let mut c = cfg(30);
        c.service = ServiceModel::PhaseType(PhaseTypeService::erlang(2, 2.0).unwrap());
        c.horizon = 40.0;
        c.arrivals = ArrivalProfile::Constant(0.6);
        let out = TabsEngine::new(&c).unwrap().run();
        assert!(out.counters.departures > 0);
        assert!(out.samples.iter().all(|s| s.fluid.is_valid()));
    }
}
