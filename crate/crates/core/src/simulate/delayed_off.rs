//! Centralized baseline: one FCFS queue at the dispatcher, idle servers
//! turn off after an `Exp(μ)` delay, and every task that has to wait starts
//! the setup of one off server.
//!
//! Setups are associated with waiting tasks in FIFO order. Whenever a
//! busy server picks a task from the queue and the number of setups then
//! exceeds the number of waiting tasks, the oldest setup is cancelled and
//! its server returns to off.

use super::schedule::{Event, EventKind, EventSchedule};
use super::{exp, next_arrival, round_fractions, Counters, InitialCondition, SimConfig, SimOutput, TaskRecord, TraceSample};
use crate::error::{Error, Result};
use crate::model::{DispatcherLedger, FluidState, Mode, ServerState, Token};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

const UNTRACKED: usize = usize::MAX;

pub struct DelayedOffEngine {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    now: f64,
    servers: Vec<ServerState>,
    epochs: Vec<u64>,
    /// Pools by mode; token colours are reused only as mode labels.
    pools: DispatcherLedger,
    queue: VecDeque<usize>,
    /// Servers in setup, oldest first.
    setups: VecDeque<usize>,
    /// Task in service per server.
    serving: Vec<usize>,
    schedule: EventSchedule,
    counters: Counters,
    tasks: Vec<TaskRecord>,
    samples: Vec<TraceSample>,
    sample_index: u64,
}

impl DelayedOffEngine {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.service.is_exponential() {
            return Err(Error::Config("the delayed-off baseline requires exponential service".into()));
        }
        let n = cfg.n_servers;
        let mut servers = Vec::with_capacity(n);
        match &cfg.initial {
            InitialCondition::AllIdleOn => servers.resize(n, ServerState::idle_on()),
            InitialCondition::AllIdleOff => servers.resize(n, ServerState::idle_off()),
            InitialCondition::Fractions(s) => {
                let (q, d0, d1) = round_fractions(s, n);
                if d1 > 0 {
                    return Err(Error::Config(
                        "the delayed-off baseline starts without servers in setup, since no task is waiting".into(),
                    ));
                }
                let busy: usize = q[..s.phases()].iter().sum();
                servers.extend((0..busy).map(|_| ServerState { mode: Mode::Busy, queue_len: 1, phase: None }));
                servers.extend((0..d0).map(|_| ServerState::idle_off()));
                servers.resize(n, ServerState::idle_on());
            }
        }
        let mut engine = Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: 0.0,
            epochs: vec![0; n],
            pools: DispatcherLedger::from_modes(&servers),
            queue: VecDeque::new(),
            setups: VecDeque::new(),
            serving: vec![UNTRACKED; n],
            schedule: EventSchedule::with_capacity(2 * n + 2),
            counters: Counters::default(),
            tasks: Vec::new(),
            samples: Vec::new(),
            sample_index: 0,
            servers,
            cfg: cfg.clone(),
        };
        engine.schedule.push(Event { time: 0.0, kind: EventKind::Sample, server: 0, epoch: 0 });
        engine.schedule_next_arrival();
        for id in 0..n {
            match engine.servers[id].mode {
                Mode::Busy => {
                    engine.counters.initial_tasks += 1;
                    engine.schedule_departure(id);
                }
                Mode::IdleOn => engine.start_idle_timer(id),
                _ => {}
            }
        }
        Ok(engine)
    }

    pub fn servers(&self) -> &[ServerState] {
        &self.servers
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn waiting(&self) -> usize {
        self.queue.len()
    }

    pub fn setups_in_progress(&self) -> usize {
        self.setups.len()
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

    fn start_idle_timer(&mut self, server: usize) {
        self.epochs[server] += 1;
        let t = self.now + exp(self.cfg.mu, &mut self.rng);
        self.schedule.push(Event { time: t, kind: EventKind::StandbyExpiry, server, epoch: self.epochs[server] });
    }

    fn set_mode(&mut self, server: usize, mode: Mode) {
        self.servers[server].mode = mode;
        self.servers[server].queue_len = usize::from(mode == Mode::Busy);
        self.pools.set(server, Token::for_mode(mode));
    }

    fn serve(&mut self, server: usize, task: usize) {
        // Any idle timer or setup clock of this server is void from here on.
        self.epochs[server] += 1;
        self.set_mode(server, Mode::Busy);
        self.serving[server] = task;
        if task != UNTRACKED {
            self.tasks[task].start = Some(self.now);
            self.tasks[task].server = Some(server);
        }
        self.schedule_departure(server);
    }

    pub fn on_arrival(&mut self) {
        self.counters.arrivals += 1;
        let task = if self.cfg.record_tasks {
            self.tasks.push(TaskRecord { arrival: self.now, start: None, departure: None, server: None, dropped: false });
            self.tasks.len() - 1
        } else {
            UNTRACKED
        };
        if let Some(s) = self.pools.pick(Token::Green, &mut self.rng) {
            self.serve(s, task);
            return;
        }
        self.queue.push_back(task);
        if let Some(s) = self.pools.pick(Token::Red, &mut self.rng) {
            self.epochs[s] += 1;
            self.set_mode(s, Mode::Setup);
            self.setups.push_back(s);
            self.counters.setups += 1;
            let t = self.now + exp(self.cfg.nu, &mut self.rng);
            self.schedule.push(Event { time: t, kind: EventKind::SetupComplete, server: s, epoch: self.epochs[s] });
        }
    }

    pub fn on_departure(&mut self, server: usize) {
        assert_eq!(self.servers[server].mode, Mode::Busy, "departure at non-busy server {server}");
        self.counters.departures += 1;
        let done = std::mem::replace(&mut self.serving[server], UNTRACKED);
        if done != UNTRACKED {
            self.tasks[done].departure = Some(self.now);
        }
        match self.queue.pop_front() {
            Some(task) => {
                self.serve(server, task);
                if self.setups.len() > self.queue.len() {
                    let s = self.setups.pop_front().expect("setup count is positive");
                    self.epochs[s] += 1;
                    self.set_mode(s, Mode::IdleOff);
                    self.counters.setups_cancelled += 1;
                }
            }
            None => {
                self.set_mode(server, Mode::IdleOn);
                self.start_idle_timer(server);
            }
        }
    }

    /// Returns whether the completion applied; cancelled setups are ignored.
    pub fn on_setup_complete(&mut self, server: usize, epoch: u64) -> bool {
        if self.servers[server].mode != Mode::Setup || self.epochs[server] != epoch {
            return false;
        }
        let pos = self.setups.iter().position(|&s| s == server).expect("server in setup is tracked");
        self.setups.remove(pos);
        let task = self.queue.pop_front().expect("every setup has a waiting task");
        self.serve(server, task);
        true
    }

    pub fn on_idle_expiry(&mut self, server: usize, epoch: u64) -> bool {
        if self.servers[server].mode != Mode::IdleOn || self.epochs[server] != epoch {
            return false;
        }
        self.set_mode(server, Mode::IdleOff);
        true
    }

    pub fn assert_invariants(&self) {
        assert!(self.pools.matches(&self.servers), "pools do not match server modes");
        assert!(self.setups.len() <= self.queue.len(), "{} setups for {} waiting", self.setups.len(), self.queue.len());
        assert_eq!(self.setups.len(), self.pools.count(Token::Orange), "setup list out of sync");
        assert!(self.queue.is_empty() || self.pools.count(Token::Green) == 0, "task waits while a server idles");
    }

    fn snapshot(&self) -> TraceSample {
        let n = self.cfg.n_servers as f64;
        let mut q = vec![0.0; self.cfg.buffer];
        q[0] = self.pools.count(Token::Yellow) as f64 / n;
        let mut fluid = FluidState::new(
            q,
            self.pools.count(Token::Red) as f64 / n,
            self.pools.count(Token::Orange) as f64 / n,
        );
        if !fluid.is_valid() {
            fluid = fluid.project().expect("count fractions are within rounding of the occupancy space");
        }
        TraceSample { t: self.now, u: fluid.u(), fluid, counters: self.counters, central_queue: self.queue.len() }
    }

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
            EventKind::SetupComplete => {
                self.on_setup_complete(ev.server, ev.epoch);
            }
            EventKind::StandbyExpiry => {
                self.on_idle_expiry(ev.server, ev.epoch);
            }
            EventKind::PhaseJump => unreachable!("the baseline uses exponential service"),
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
    use crate::simulate::Policy;

    fn cfg(n: usize, lambda: f64) -> SimConfig {
        let mut c = SimConfig::tabs(n, lambda, 0.1, 0.1, 10.0).with_policy(Policy::DelayedOff);
        c.check_invariants = true;
        c
    }

    #[test]
    fn arrival_with_idle_server_starts_immediately() {
        let mut e = DelayedOffEngine::new(&cfg(3, 0.3)).unwrap();
        e.on_arrival();
        assert_eq!(e.servers().iter().filter(|s| s.mode == Mode::Busy).count(), 1);
        assert_eq!(e.waiting(), 0);
        assert_eq!(e.tasks[0].start, Some(0.0));
        e.assert_invariants();
    }

    #[test]
    fn waiting_task_starts_setup_and_is_served_on_completion() {
        let mut c = cfg(2, 0.3);
        c.initial = InitialCondition::AllIdleOff;
        let mut e = DelayedOffEngine::new(&c).unwrap();
        e.on_arrival();
        assert_eq!(e.waiting(), 1);
        assert_eq!(e.setups_in_progress(), 1);
        let s = e.setups[0];
        let epoch = e.epochs[s];
        assert!(!e.on_setup_complete(s, epoch - 1));
        assert!(e.on_setup_complete(s, epoch));
        assert_eq!(e.waiting(), 0);
        assert_eq!(e.servers()[s].mode, Mode::Busy);
        e.assert_invariants();
    }

    #[test]
    fn departure_taking_queued_task_cancels_oldest_setup() {
        let mut c = cfg(3, 0.3);
        c.initial = InitialCondition::AllIdleOff;
        let mut e = DelayedOffEngine::new(&c).unwrap();
        e.on_arrival();
        let first = e.setups[0];
        let epoch = e.epochs[first];
        assert!(e.on_setup_complete(first, epoch));
        e.on_arrival();
        e.on_arrival();
        assert_eq!((e.waiting(), e.setups_in_progress()), (2, 2));
        let oldest = e.setups[0];
        e.on_departure(first);
        assert_eq!((e.waiting(), e.setups_in_progress()), (1, 1));
        assert_eq!(e.servers()[oldest].mode, Mode::IdleOff);
        assert_eq!(e.counters().setups_cancelled, 1);
        e.assert_invariants();
    }

    #[test]
    fn idle_server_turns_off_after_timer() {
        let mut e = DelayedOffEngine::new(&cfg(1, 0.3)).unwrap();
        let epoch = e.epochs[0];
        assert!(e.on_idle_expiry(0, epoch));
        assert_eq!(e.servers()[0].mode, Mode::IdleOff);
    }

    #[test]
    fn long_run_keeps_invariants_and_conserves_tasks() {
        let mut c = cfg(50, 0.7);
        c.horizon = 200.0;
        let out = DelayedOffEngine::new(&c).unwrap().run();
        let last = out.samples.last().unwrap();
        let in_system = (last.fluid.q(1) * 50.0).round() as u64 + last.central_queue as u64;
        assert_eq!(out.counters.arrivals, out.counters.departures + in_system);
        assert_eq!(out.counters.drops, 0);
        assert_eq!(out.counters.messages(), 0);
    }
}
