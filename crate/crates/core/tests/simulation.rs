use proptest::prelude::*;
use tabs_core::fluid::integrate_fluid;
use tabs_core::metrics::{summarize, trajectory_gap};
use tabs_core::simulate::{run_simulation, TabsEngine};
use tabs_core::{
    ArrivalProfile, EnergyParams, FluidParams, FluidState, InitialCondition, Mode, PhaseTypeService, Policy,
    ServiceModel, SimConfig,
};

fn small(n: usize, lambda: f64, policy: Policy, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::tabs(n, lambda, 0.4, 0.3, 40.0).with_policy(policy).with_seed(seed);
    cfg.buffer = 3;
    cfg.sample_interval = 0.25;
    cfg.check_invariants = true;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_systems_keep_their_invariants(
        n in 1usize..25,
        lambda in 0.05f64..1.4,
        policy in prop_oneof![Just(Policy::Tabs), Just(Policy::Jiq), Just(Policy::DelayedOff)],
        seed in any::<u64>(),
    ) {
        let out = run_simulation(&small(n, lambda, policy, seed)).unwrap();
        let n = n as u64;
        for s in &out.samples {
            let c = s.counters;
            prop_assert!(s.fluid.is_valid(), "{:?}", s.fluid.violations());
            prop_assert!((s.fluid.q(1) + s.fluid.delta0 + s.fluid.delta1 + s.u - 1.0).abs() < 1e-12);
            prop_assert!(c.messages() <= 2 * c.arrivals + 2 * n);
            prop_assert!(c.departures <= c.arrivals - c.drops);
        }
        if policy == Policy::DelayedOff {
            prop_assert_eq!(out.counters.drops, 0);
        }
    }
}

#[test]
fn same_seed_same_trace() {
    for policy in [Policy::Tabs, Policy::Jiq, Policy::DelayedOff] {
        let cfg = small(30, 0.7, policy, 99);
        let (a, b) = (run_simulation(&cfg).unwrap(), run_simulation(&cfg).unwrap());
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.tasks, b.tasks);
        let other = run_simulation(&cfg.clone().with_seed(100)).unwrap();
        assert_ne!(a.tasks, other.tasks);
    }
}

#[test]
fn ledger_tracks_modes_through_a_long_run() {
    let mut cfg = small(50, 0.5, Policy::Tabs, 4);
    cfg.horizon = 200.0;
    cfg.service = ServiceModel::PhaseType(PhaseTypeService::reference_hyper_exponential());
    let mut engine = TabsEngine::new(&cfg).unwrap();
    let mut events = 0;
    while engine.step() {
        events += 1;
        let busy = engine.servers().iter().filter(|s| s.mode == Mode::Busy).count();
        assert_eq!(engine.ledger().yellow().len(), busy);
        // Every idle-on server has a standby timer pending.
        if events % 97 == 0 {
            for &s in engine.ledger().green() {
                assert!(engine.schedule().pending(tabs_core::simulate::EventKind::StandbyExpiry, s) >= 1);
            }
        }
    }
    assert!(events > 10_000);
}

#[test]
fn served_tasks_have_ordered_timestamps() {
    let out = run_simulation(&small(20, 0.9, Policy::Tabs, 8)).unwrap();
    for t in out.tasks.iter().filter(|t| !t.dropped) {
        if let Some(start) = t.start {
            assert!(start >= t.arrival);
            if let Some(dep) = t.departure {
                assert!(dep >= start);
            }
        }
    }
    assert!(out.tasks.iter().any(|t| t.waiting_time().is_some_and(|w| w > 0.0)));
}

#[test]
fn jiq_and_tabs_agree_before_servers_turn_off() {
    // Below λ + μ < 1 the idle pool does not empty early on, so the first
    // time units see the same busy fraction under both policies.
    let mut tabs = SimConfig::tabs(5000, 0.3, 0.1, 0.1, 8.0);
    tabs.record_tasks = false;
    let jiq = tabs.clone().with_policy(Policy::Jiq);
    let (a, b) = (run_simulation(&tabs).unwrap(), run_simulation(&jiq).unwrap());
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert!((x.fluid.q(1) - y.fluid.q(1)).abs() < 0.05, "t = {}", x.t);
    }
}

#[test]
fn moderate_system_tracks_fluid_transient() {
    let mut cfg = SimConfig::tabs(3000, 0.3, 0.1, 0.1, 50.0);
    cfg.record_tasks = false;
    let out = run_simulation(&cfg).unwrap();
    let params = FluidParams::constant(0.3, 0.1, 0.1, 10).unwrap();
    let fluid = integrate_fluid(&FluidState::all_idle_on(10, 1), &params, 50.0, 1e-3, 1.0).unwrap();
    let gap = trajectory_gap(&out.samples, &fluid).unwrap();
    assert!(gap < 0.05, "{gap}");
}

#[test]
fn sinusoidal_load_keeps_little_waiting() {
    let mut cfg = SimConfig::tabs(2000, 0.3, 0.1, 0.1, 120.0);
    cfg.arrivals = ArrivalProfile::Sinusoid { base: 0.3, amplitude: 0.2, period: 10.0 };
    let out = run_simulation(&cfg).unwrap();
    let r = summarize(&out, &EnergyParams::default(), 0.4).unwrap();
    assert!(r.mean_wait < 0.2, "{r:?}");
    assert!(r.loss_fraction < 1e-3);
}

#[test]
fn all_off_start_recovers_capacity() {
    let mut cfg = SimConfig::tabs(500, 0.3, 0.1, 0.1, 150.0);
    cfg.initial = InitialCondition::AllIdleOff;
    let out = run_simulation(&cfg).unwrap();
    assert_eq!(out.samples[0].fluid.delta0, 1.0);
    assert!(out.counters.unroutable > 0, "early arrivals find no server on");
    let last = out.samples.last().unwrap();
    assert!((last.fluid.q(1) - 0.3).abs() < 0.08);
}

#[test]
fn fluid_tracks_an_all_off_start() {
    let mut cfg = SimConfig::tabs(3000, 0.3, 0.1, 0.1, 60.0);
    cfg.initial = InitialCondition::AllIdleOff;
    cfg.record_tasks = false;
    let out = run_simulation(&cfg).unwrap();
    let params = FluidParams::constant(0.3, 0.1, 0.1, 10).unwrap();
    let fluid = integrate_fluid(&FluidState::all_idle_off(10, 1), &params, 60.0, 1e-3, 1.0).unwrap();
    let gap = trajectory_gap(&out.samples, &fluid).unwrap();
    assert!(gap < 0.05, "{gap}");
}

/// Runs the constant-load scenario at N = 10^5, where the desk-scale
/// thresholds are met. Takes about half a minute in release mode.
#[test]
#[ignore]
fn large_system_meets_desk_thresholds() {
    let mut cfg = SimConfig::tabs(100_000, 0.3, 0.1, 0.1, 250.0);
    cfg.record_tasks = false;
    let out = run_simulation(&cfg).unwrap();
    let params = FluidParams::constant(0.3, 0.1, 0.1, 10).unwrap();
    let fluid = integrate_fluid(&FluidState::all_idle_on(10, 1), &params, 250.0, 1e-3, 1.0).unwrap();
    let gap = trajectory_gap(&out.samples, &fluid).unwrap();
    let r = summarize(&out, &EnergyParams::default(), 0.4).unwrap();
    println!("N = 1e5: gap {gap:.4}, power {:.2} W, wait {:.4}", r.mean_power, r.mean_wait);
    assert!(gap <= 0.02);
    assert!((r.mean_power - 60.0).abs() <= 3.0);
}
