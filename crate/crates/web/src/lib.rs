//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function takes plain numbers and returns a JSON string of
//! column arrays ready for plotting. The `*_json` functions hold the logic
//! and are callable from native code and tests.

use serde_json::{json, Value};
use tabs_core::fluid::{integrate_fluid, FluidSample};
use tabs_core::metrics::{summarize, trajectory_gap};
use tabs_core::{
    run_simulation, ArrivalProfile, EnergyParams, FluidParams, FluidState, InitialCondition, Policy, ServiceModel,
    SimConfig, TraceSample,
};
use wasm_bindgen::prelude::*;

/// Largest system the page will simulate; keeps a run under a few seconds.
pub const MAX_SERVERS: usize = 20_000;
pub const MAX_HORIZON: f64 = 1000.0;
const BUFFER: usize = 10;
const DT: f64 = 0.01;

fn check(n_servers: usize, horizon: f64) -> Result<(), String> {
    if n_servers == 0 || n_servers > MAX_SERVERS {
        return Err(format!("number of servers must be between 1 and {MAX_SERVERS}"));
    }
    if !(horizon > 0.0 && horizon <= MAX_HORIZON) {
        return Err(format!("horizon must be in (0, {MAX_HORIZON}]"));
    }
    Ok(())
}

fn arrivals(lambda: f64, amplitude: f64, period: f64) -> ArrivalProfile {
    if amplitude == 0.0 {
        ArrivalProfile::Constant(lambda)
    } else {
        ArrivalProfile::Sinusoid { base: lambda, amplitude, period }
    }
}

fn fluid_columns(samples: &[FluidSample], profile: &ArrivalProfile) -> Value {
    json!({
        "t": samples.iter().map(|s| s.t).collect::<Vec<_>>(),
        "lambda": samples.iter().map(|s| profile.rate(s.t)).collect::<Vec<_>>(),
        "q1": samples.iter().map(|s| s.state.q(1)).collect::<Vec<_>>(),
        "q2": samples.iter().map(|s| s.state.q(2)).collect::<Vec<_>>(),
        "delta0": samples.iter().map(|s| s.state.delta0).collect::<Vec<_>>(),
        "delta1": samples.iter().map(|s| s.state.delta1).collect::<Vec<_>>(),
        "u": samples.iter().map(|s| s.u).collect::<Vec<_>>(),
    })
}

fn trace_columns(samples: &[TraceSample]) -> Value {
    json!({
        "t": samples.iter().map(|s| s.t).collect::<Vec<_>>(),
        "q1": samples.iter().map(|s| s.fluid.q(1)).collect::<Vec<_>>(),
        "q2": samples.iter().map(|s| s.fluid.q(2)).collect::<Vec<_>>(),
        "delta0": samples.iter().map(|s| s.fluid.delta0).collect::<Vec<_>>(),
        "delta1": samples.iter().map(|s| s.fluid.delta1).collect::<Vec<_>>(),
        "u": samples.iter().map(|s| s.u).collect::<Vec<_>>(),
    })
}

fn fluid_params(lambda: f64, amplitude: f64, period: f64, mu_inv: f64, nu_inv: f64) -> Result<FluidParams, String> {
    if !(mu_inv > 0.0 && nu_inv > 0.0) {
        return Err("standby and setup periods must be positive".into());
    }
    FluidParams::new(arrivals(lambda, amplitude, period), 1.0 / mu_inv, 1.0 / nu_inv, BUFFER, ServiceModel::UnitExponential)
        .map_err(|e| e.to_string())
}

/// Fluid trajectory for a constant (`amplitude = 0`) or sinusoidal load.
pub fn fluid_trajectory_json(
    lambda: f64,
    amplitude: f64,
    period: f64,
    mu_inv: f64,
    nu_inv: f64,
    horizon: f64,
    start_off: bool,
) -> Result<Value, String> {
    check(1, horizon)?;
    let params = fluid_params(lambda, amplitude, period, mu_inv, nu_inv)?;
    let initial =
        if start_off { FluidState::all_idle_off(BUFFER, 1) } else { FluidState::all_idle_on(BUFFER, 1) };
    let traj = integrate_fluid(&initial, &params, horizon, DT, horizon / 500.0).map_err(|e| e.to_string())?;
    Ok(fluid_columns(&traj.samples, &params.arrivals))
}

/// One TABS run of `n_servers` beside the fluid trajectory, with the
/// sup-norm gap between them.
pub fn simulate_vs_fluid_json(
    n_servers: usize,
    lambda: f64,
    mu_inv: f64,
    nu_inv: f64,
    horizon: f64,
    seed: u64,
) -> Result<Value, String> {
    check(n_servers, horizon)?;
    let params = fluid_params(lambda, 0.0, 1.0, mu_inv, nu_inv)?;
    let mut cfg = SimConfig::tabs(n_servers, lambda, params.mu, params.nu, horizon).with_seed(seed);
    cfg.sample_interval = horizon / 250.0;
    cfg.record_tasks = false;
    let out = run_simulation(&cfg).map_err(|e| e.to_string())?;
    let traj = integrate_fluid(&FluidState::all_idle_on(BUFFER, 1), &params, horizon, DT, cfg.sample_interval)
        .map_err(|e| e.to_string())?;
    let gap = trajectory_gap(&out.samples, &traj).map_err(|e| e.to_string())?;
    Ok(json!({
        "sim": trace_columns(&out.samples),
        "fluid": fluid_columns(&traj.samples, &params.arrivals),
        "gap": gap,
    }))
}

/// Mean power, waiting time and loss of TABS, JIQ and the delayed-off
/// queue on the same seed, with 40% of the horizon discarded.
pub fn energy_comparison_json(
    n_servers: usize,
    lambda: f64,
    mu_inv: f64,
    nu_inv: f64,
    horizon: f64,
    seed: u64,
) -> Result<Value, String> {
    check(n_servers, horizon)?;
    let params = fluid_params(lambda, 0.0, 1.0, mu_inv, nu_inv)?;
    let energy = EnergyParams::default();
    let mut rows = Vec::new();
    for policy in [Policy::Tabs, Policy::Jiq, Policy::DelayedOff] {
        let mut cfg = SimConfig::tabs(n_servers, lambda, params.mu, params.nu, horizon)
            .with_policy(policy)
            .with_seed(seed);
        cfg.initial = InitialCondition::AllIdleOn;
        let out = run_simulation(&cfg).map_err(|e| e.to_string())?;
        let r = summarize(&out, &energy, 0.4).map_err(|e| e.to_string())?;
        rows.push(json!({
            "policy": policy.name(),
            "mean_power": r.mean_power,
            "mean_wait": r.mean_wait,
            "loss_fraction": r.loss_fraction,
            "msg_per_task": r.msg_per_task,
        }));
    }
    Ok(json!({ "optimum": lambda.min(1.0) * energy.p_full, "rows": rows }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn fluid_trajectory(
    lambda: f64,
    amplitude: f64,
    period: f64,
    mu_inv: f64,
    nu_inv: f64,
    horizon: f64,
    start_off: bool,
) -> Result<String, JsValue> {
    to_js(fluid_trajectory_json(lambda, amplitude, period, mu_inv, nu_inv, horizon, start_off))
}

#[wasm_bindgen]
pub fn simulate_vs_fluid(
    n_servers: usize,
    lambda: f64,
    mu_inv: f64,
    nu_inv: f64,
    horizon: f64,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(simulate_vs_fluid_json(n_servers, lambda, mu_inv, nu_inv, horizon, u64::from(seed)))
}

#[wasm_bindgen]
pub fn energy_comparison(
    n_servers: usize,
    lambda: f64,
    mu_inv: f64,
    nu_inv: f64,
    horizon: f64,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(energy_comparison_json(n_servers, lambda, mu_inv, nu_inv, horizon, u64::from(seed)))
}
