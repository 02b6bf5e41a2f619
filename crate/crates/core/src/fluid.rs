//! Deterministic many-server limit of TABS.
//!
//! The state is the fluid occupancy `(q, δ0, δ1)`. Arrivals go to idle-on
//! servers while any exist (`u > 0`); once the idle pool is empty only the
//! rate at which idle servers are being created (departures plus completed
//! setups) can be absorbed, the rest spills uniformly over busy servers and
//! each spilled task starts one setup while off servers remain.
//!
//! The right-hand side is discontinuous on `{u = 0}` and `{δ0 = 0}`. The
//! integrator is fixed-step RK4 with the two indicators frozen at the start
//! of every step; when a step would carry `u` or `δ0` below zero the crossing
//! is located by root finding and the rest of the step is taken in the new
//! regime. Each step ends with [`project_components`].
//!
//! When the busy pool is small and arrivals spill over it, moving servers up
//! the queue levels happens at rate `λ·spill/q_1`, far too fast for an
//! explicit step. Such steps are split: that transfer is a pure-birth process
//! with a common rate and is applied exactly (Poisson tails) for half a step
//! on either side of an RK4 step of the remaining dynamics.

use crate::error::{Error, Result};
use crate::model::{project_components, ArrivalProfile, FluidState};
use crate::phase::PhaseTypeService;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

/// `u` at or below this value counts as an empty idle-on pool.
pub const TOL_U: f64 = 1e-12;
/// `δ0` at or below this value counts as no server left to set up.
pub const TOL_DELTA: f64 = 1e-12;
pub const DEFAULT_DT: f64 = 1e-3;

/// Regime switches allowed within a single step.
const MAX_SWITCHES: usize = 4;
/// Accuracy of a located regime crossing.
const CROSSING_TOL: f64 = 1e-14;
/// Steps with `λ·h > STIFF_RATIO·q_1` in the empty-idle-pool regime take
/// the level transfer exactly.
const STIFF_RATIO: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub enum ServiceModel {
    UnitExponential,
    PhaseType(PhaseTypeService),
}

impl ServiceModel {
    pub fn phases(&self) -> usize {
        match self {
            ServiceModel::UnitExponential => 1,
            ServiceModel::PhaseType(d) => d.phases(),
        }
    }

    pub fn is_exponential(&self) -> bool {
        matches!(self, ServiceModel::UnitExponential)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidParams {
    pub arrivals: ArrivalProfile,
    /// Standby (turn-off) rate.
    pub mu: f64,
    /// Setup completion rate.
    pub nu: f64,
    pub buffer: usize,
    pub service: ServiceModel,
}

impl FluidParams {
    pub fn new(arrivals: ArrivalProfile, mu: f64, nu: f64, buffer: usize, service: ServiceModel) -> Result<Self> {
        arrivals.validate()?;
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::InvalidRate(format!("standby rate must be positive, got {mu}")));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidRate(format!("setup rate must be positive, got {nu}")));
        }
        if buffer == 0 {
            return Err(Error::Config("buffer must be at least 1".into()));
        }
        Ok(Self { arrivals, mu, nu, buffer, service })
    }

    /// Constant load with exponential service.
    pub fn constant(lambda: f64, mu: f64, nu: f64, buffer: usize) -> Result<Self> {
        Self::new(ArrivalProfile::Constant(lambda), mu, nu, buffer, ServiceModel::UnitExponential)
    }

    pub fn phases(&self) -> usize {
        self.service.phases()
    }

    fn check_shape(&self, s: &FluidState) -> Result<()> {
        if s.buffer() != self.buffer || s.phases() != self.phases() {
            return Err(Error::Domain(format!(
                "state shape {}x{} does not match parameters {}x{}",
                s.buffer(),
                s.phases(),
                self.buffer,
                self.phases()
            )));
        }
        Ok(())
    }
}

/// Assignment fractions `p_0..p_B` for exponential service: `p_0` goes to
/// idle servers, `p_i` to servers holding exactly `i` tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProbs {
    pub p: Vec<f64>,
    /// Arrival fraction that has nowhere to go (`u = 0` with no busy server).
    pub dropped: f64,
}

impl AssignmentProbs {
    /// Fraction of arrivals lost: unroutable plus those sent to full servers.
    pub fn lost(&self) -> f64 {
        self.dropped + self.p.last().copied().unwrap_or(0.0)
    }
}

/// Assignment fractions for phase-type service.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseAssignmentProbs {
    /// `p_{0,j}`: fraction joining an idle server and starting in phase `j`.
    pub idle: Vec<f64>,
    /// `p_{i,j}` for `i = 1..B`, level-major: fraction joining a server with
    /// exactly `i` tasks whose task in service is in phase `j`.
    pub busy: Vec<f64>,
    pub dropped: f64,
}

/// Time derivative of the fluid state plus the setup-initiation rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidDerivative {
    /// Level-major, same layout as [`FluidState::q_matrix`].
    pub dq: Vec<f64>,
    pub ddelta0: f64,
    pub ddelta1: f64,
    /// `χ`, the rate at which setups are initiated (integrand of `ξ`).
    pub setup_rate: f64,
    phases: usize,
}

impl FluidDerivative {
    /// `du = −(dq_1 + dδ0 + dδ1)`.
    pub fn du(&self) -> f64 {
        -(self.dq[..self.phases].iter().sum::<f64>() + self.ddelta0 + self.ddelta1)
    }

    /// Aggregated level derivatives `dq_1..dq_B`.
    pub fn dq_levels(&self) -> Vec<f64> {
        self.dq.chunks(self.phases).map(|c| c.iter().sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.dq.iter().chain([&self.ddelta0, &self.ddelta1]).fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Regime {
    idle_on: bool,
    off_available: bool,
    /// Leave spilled arrivals' level transfer out of the right-hand side.
    split: bool,
}

impl Regime {
    fn of(y: &[f64], n: usize, k: usize) -> Self {
        let u = 1.0 - (y[..k].iter().sum::<f64>() + y[n] + y[n + 1]);
        Self { idle_on: u > TOL_U, off_available: y[n] > TOL_DELTA, split: false }
    }
}

/// Fraction of arrivals that finds no idle-on server, on the extended state.
fn spill_of(params: &FluidParams, lambda: f64, y: &[f64], regime: Regime) -> f64 {
    if regime.idle_on {
        return 0.0;
    }
    let k = params.phases();
    let n = params.buffer * k;
    let at = |i: usize, j: usize| if i <= params.buffer { y[(i - 1) * k + j] } else { 0.0 };
    let from_setups = y[n + 1] * params.nu;
    let from_service: f64 = match &params.service {
        ServiceModel::UnitExponential => at(1, 0) - at(2, 0),
        ServiceModel::PhaseType(d) => {
            (0..k).map(|j| (at(1, j) - at(2, j)) * d.rates()[j] * d.exit_prob(j)).sum()
        }
    };
    1.0 - ((from_setups + from_service) / lambda).min(1.0)
}

fn ensure_valid(s: &FluidState) -> Result<()> {
    let v = s.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Domain(v.join("; ")))
    }
}

fn ensure_rate(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidRate(format!("arrival rate must be positive, got {lambda}")))
    }
}

/// Assignment fractions for exponential service at state `s`.
pub fn assignment_probs(s: &FluidState, lambda: f64, nu: f64) -> Result<AssignmentProbs> {
    ensure_valid(s)?;
    ensure_rate(lambda)?;
    let s = s.aggregated();
    let b = s.buffer();
    let mut p = vec![0.0; b + 1];
    if s.u() > TOL_U {
        p[0] = 1.0;
        return Ok(AssignmentProbs { p, dropped: 0.0 });
    }
    let q1 = s.q(1);
    p[0] = ((s.delta1 * nu + q1 - s.q(2)) / lambda).min(1.0);
    let spill = 1.0 - p[0];
    if q1 > 0.0 {
        for i in 1..=b {
            p[i] = spill * (s.q(i) - s.q(i + 1)) / q1;
        }
    }
    let dropped = if q1 > 0.0 { 0.0 } else { spill };
    Ok(AssignmentProbs { p, dropped })
}

/// Assignment fractions for phase-type service at state `s`.
pub fn assignment_probs_phase(
    s: &FluidState,
    lambda: f64,
    nu: f64,
    service: &PhaseTypeService,
) -> Result<PhaseAssignmentProbs> {
    ensure_valid(s)?;
    ensure_rate(lambda)?;
    let k = service.phases();
    if s.phases() != k {
        return Err(Error::Domain(format!("state has {} phases, service has {k}", s.phases())));
    }
    let b = s.buffer();
    let p0 = if s.u() > TOL_U {
        1.0
    } else {
        let idle_rate = s.delta1 * nu
            + (0..k)
                .map(|j| (s.q_phase(1, j) - s.q_phase(2, j)) * service.rates()[j] * service.exit_prob(j))
                .sum::<f64>();
        (idle_rate / lambda).min(1.0)
    };
    let idle: Vec<f64> = service.initial().iter().map(|r| r * p0).collect();
    let spill = 1.0 - p0;
    let q1 = s.q(1);
    let mut busy = vec![0.0; b * k];
    if q1 > 0.0 {
        for i in 1..=b {
            for j in 0..k {
                busy[(i - 1) * k + j] = spill * (s.q_phase(i, j) - s.q_phase(i + 1, j)) / q1;
            }
        }
    }
    let dropped = if q1 > 0.0 { 0.0 } else { spill };
    Ok(PhaseAssignmentProbs { idle, busy, dropped })
}

/// Right-hand side for exponential service.
///
/// `dq_i = λ p_{i−1} − (q_i − q_{i+1})`, `dδ0 = μu − χ`, `dδ1 = χ − νδ1`
/// with `χ = λ(1 − p_0)·[δ0 > 0]`.
pub fn fluid_rhs(s: &FluidState, t: f64, params: &FluidParams) -> Result<FluidDerivative> {
    if !params.service.is_exponential() || s.phases() != 1 {
        return Err(Error::Domain("fluid_rhs expects exponential service; use fluid_rhs_phase".into()));
    }
    params.check_shape(s)?;
    ensure_valid(s)?;
    let y = with_aux(s);
    let n = params.buffer;
    let mut dy = vec![0.0; n + 4];
    let lambda = params.arrivals.rate(t);
    rhs_exponential(params, lambda, &y, Regime::of(&y, n, 1), &mut dy);
    Ok(derivative_from(&dy, n, 1))
}

/// Right-hand side for phase-type service.
pub fn fluid_rhs_phase(s: &FluidState, t: f64, params: &FluidParams) -> Result<FluidDerivative> {
    let ServiceModel::PhaseType(service) = &params.service else {
        return Err(Error::Domain("fluid_rhs_phase expects a phase-type service".into()));
    };
    params.check_shape(s)?;
    ensure_valid(s)?;
    let k = service.phases();
    let n = params.buffer * k;
    let y = with_aux(s);
    let mut dy = vec![0.0; n + 4];
    let lambda = params.arrivals.rate(t);
    rhs_phase(params, service, lambda, &y, Regime::of(&y, n, k), &mut dy);
    Ok(derivative_from(&dy, n, k))
}

fn with_aux(s: &FluidState) -> Vec<f64> {
    let mut y = s.to_vec();
    y.extend([0.0, 0.0]);
    y
}

fn derivative_from(dy: &[f64], n: usize, k: usize) -> FluidDerivative {
    FluidDerivative {
        dq: dy[..n].to_vec(),
        ddelta0: dy[n],
        ddelta1: dy[n + 1],
        setup_rate: dy[n + 2],
        phases: k,
    }
}

/// Extended state layout: `q (B·K)`, `δ0`, `δ1`, `ξ`, `ν∫δ1`.
fn rhs_exponential(params: &FluidParams, lambda: f64, y: &[f64], regime: Regime, dy: &mut [f64]) {
    let b = params.buffer;
    let q = &y[..b];
    let (d0, d1) = (y[b], y[b + 1]);
    let level = |i: usize| if i <= b { q[i - 1] } else { 0.0 };
    let q1 = q[0];
    let u = 1.0 - (q1 + d0 + d1);

    let spill = spill_of(params, lambda, y, regime);
    let p0 = 1.0 - spill;
    let busy_share = |i: usize| {
        if q1 > 0.0 && !regime.split { spill * (level(i) - level(i + 1)) / q1 } else { 0.0 }
    };

    for i in 1..=b {
        let inflow = if i == 1 { p0 } else { busy_share(i - 1) };
        dy[i - 1] = lambda * inflow - (level(i) - level(i + 1));
    }
    let chi = if regime.off_available { lambda * spill } else { 0.0 };
    dy[b] = params.mu * u - chi;
    dy[b + 1] = chi - params.nu * d1;
    dy[b + 2] = chi;
    dy[b + 3] = params.nu * d1;
}

fn rhs_phase(
    params: &FluidParams,
    service: &PhaseTypeService,
    lambda: f64,
    y: &[f64],
    regime: Regime,
    dy: &mut [f64],
) {
    let b = params.buffer;
    let k = service.phases();
    let n = b * k;
    let q = &y[..n];
    let (d0, d1) = (y[n], y[n + 1]);
    let at = |i: usize, j: usize| if i <= b { q[(i - 1) * k + j] } else { 0.0 };
    let gamma = service.rates();
    let r0 = service.initial();
    let routing = service.transitions();

    let q1: f64 = q[..k].iter().sum();
    let u = 1.0 - (q1 + d0 + d1);
    let spill = spill_of(params, lambda, y, regime);
    let p0 = 1.0 - spill;

    for i in 1..=b {
        // Completions at servers with more than i tasks restart a fresh
        // service and keep the server at level >= i.
        let restart: f64 = (0..k).map(|m| at(i + 1, m) * gamma[m] * service.exit_prob(m)).sum();
        for j in 0..k {
            let inflow = if i == 1 {
                lambda * p0 * r0[j]
            } else if q1 > 0.0 && !regime.split {
                lambda * spill * (at(i - 1, j) - at(i, j)) / q1
            } else {
                0.0
            };
            let transfer: f64 = (0..k).map(|m| at(i, m) * gamma[m] * routing[m][j]).sum();
            dy[(i - 1) * k + j] = inflow + transfer - gamma[j] * at(i, j) + restart * r0[j];
        }
    }
    let chi = if regime.off_available { lambda * spill } else { 0.0 };
    dy[n] = params.mu * u - chi;
    dy[n + 1] = chi - params.nu * d1;
    dy[n + 2] = chi;
    dy[n + 3] = params.nu * d1;
}

/// Constant-load equilibrium for exponential service: `q_1 = λ`,
/// `q_{i≥2} = 0`, `δ0 = 1 − λ`, `δ1 = 0`, for any standby and setup rates.
pub fn fixed_point(lambda: f64, buffer: usize) -> Result<FluidState> {
    if !(lambda.is_finite() && lambda > 0.0 && lambda < 1.0) {
        return Err(Error::NoFixedPoint(lambda));
    }
    if buffer == 0 {
        return Err(Error::Config("buffer must be at least 1".into()));
    }
    let mut q = vec![0.0; buffer];
    q[0] = lambda;
    Ok(FluidState::new(q, 1.0 - lambda, 0.0))
}

/// Constant-load equilibrium for phase-type service:
/// `q_{1,j} = λ η_j / (η_0 γ_j)`, deeper levels empty, `δ0 = 1 − λ`, `δ1 = 0`.
pub fn fixed_point_phase(lambda: f64, service: &PhaseTypeService, buffer: usize) -> Result<FluidState> {
    if !(lambda.is_finite() && lambda > 0.0 && lambda < 1.0) {
        return Err(Error::NoFixedPoint(lambda));
    }
    if buffer == 0 {
        return Err(Error::Config("buffer must be at least 1".into()));
    }
    let k = service.phases();
    let mut s = FluidState::zeros(buffer, k);
    for j in 0..k {
        s.set_q_phase(1, j, lambda * service.phase_occupancy(j));
    }
    s.delta0 = 1.0 - lambda;
    Ok(s)
}

/// Fixed point matching the parameters' service model.
pub fn fixed_point_for(params: &FluidParams) -> Result<FluidState> {
    let ArrivalProfile::Constant(lambda) = params.arrivals else {
        return Err(Error::Config("a fixed point needs a constant arrival rate".into()));
    };
    match &params.service {
        ServiceModel::UnitExponential => fixed_point(lambda, params.buffer),
        ServiceModel::PhaseType(d) => fixed_point_phase(lambda, d, params.buffer),
    }
}

/// JIQ transient from an all-idle-on start: `q_1(t) = λ(1 − e^{−t})` and the
/// non-busy, non-off fraction
/// `y(t) = e^{−(1+μ)t}(e^t(λ+μ−1) − λe^{μt})/(μ−1)`.
pub fn jiq_closed_form(t: f64, lambda: f64, mu: f64) -> (f64, f64) {
    let q1 = lambda * (1.0 - (-t).exp());
    let y = if (mu - 1.0).abs() < 1e-9 {
        // Removable singularity: differentiating numerator and denominator
        // in μ at μ = 1 gives e^{−t}(1 − λt).
        (-t).exp() * (1.0 - lambda * t)
    } else {
        (-(1.0 + mu) * t).exp() * (t.exp() * (lambda + mu - 1.0) - lambda * (mu * t).exp()) / (mu - 1.0)
    };
    (q1, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidSample {
    pub t: f64,
    pub state: FluidState,
    pub u: f64,
    /// Cumulative setups initiated, `ξ(t)`.
    pub xi: f64,
    /// Cumulative setups completed, `ν∫δ1`.
    pub setups_completed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidTrajectory {
    pub samples: Vec<FluidSample>,
    pub dt: f64,
}

impl FluidTrajectory {
    pub fn last(&self) -> &FluidSample {
        self.samples.last().expect("trajectories hold at least the initial sample")
    }

    /// State at time `t` by linear interpolation between samples.
    pub fn state_at(&self, t: f64) -> Option<FluidState> {
        let s = &self.samples;
        if s.is_empty() || t < s[0].t || t > s[s.len() - 1].t {
            return None;
        }
        let idx = s.partition_point(|x| x.t <= t);
        if idx == 0 {
            return Some(s[0].state.clone());
        }
        if idx == s.len() {
            return Some(s[idx - 1].state.clone());
        }
        let (a, b) = (&s[idx - 1], &s[idx]);
        let w = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        let va = a.state.to_vec();
        let vb = b.state.to_vec();
        let v: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x + w * (y - x)).collect();
        Some(FluidState::from_slice(a.state.buffer(), a.state.phases(), &v))
    }
}

struct Stepper<'a> {
    params: &'a FluidParams,
    n: usize,
    k: usize,
    stages: [Vec<f64>; 4],
    tmp: Vec<f64>,
    cand: Vec<f64>,
    probe: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(params: &'a FluidParams) -> Self {
        let k = params.phases();
        let n = params.buffer * k;
        let len = n + 4;
        Self {
            params,
            n,
            k,
            stages: [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]],
            tmp: vec![0.0; len],
            cand: vec![0.0; len],
            probe: vec![0.0; len],
        }
    }

    fn eval(&self, t: f64, y: &[f64], regime: Regime, dy: &mut [f64]) {
        let lambda = self.params.arrivals.rate(t);
        match &self.params.service {
            ServiceModel::UnitExponential => rhs_exponential(self.params, lambda, y, regime, dy),
            ServiceModel::PhaseType(d) => rhs_phase(self.params, d, lambda, y, regime, dy),
        }
    }

    fn rk4(&mut self, y: &[f64], t: f64, h: f64, regime: Regime, out: &mut [f64]) {
        let len = y.len();
        let mut stages = std::mem::take(&mut self.stages);
        let mut tmp = std::mem::take(&mut self.tmp);
        self.eval(t, y, regime, &mut stages[0]);
        for c in 0..len {
            tmp[c] = y[c] + 0.5 * h * stages[0][c];
        }
        self.eval(t + 0.5 * h, &tmp, regime, &mut stages[1]);
        for c in 0..len {
            tmp[c] = y[c] + 0.5 * h * stages[1][c];
        }
        self.eval(t + 0.5 * h, &tmp, regime, &mut stages[2]);
        for c in 0..len {
            tmp[c] = y[c] + h * stages[2][c];
        }
        self.eval(t + h, &tmp, regime, &mut stages[3]);
        for c in 0..len {
            out[c] = y[c] + h / 6.0 * (stages[0][c] + 2.0 * stages[1][c] + 2.0 * stages[2][c] + stages[3][c]);
        }
        self.stages = stages;
        self.tmp = tmp;
    }

    fn idle(&self, y: &[f64]) -> f64 {
        1.0 - (y[..self.k].iter().sum::<f64>() + y[self.n] + y[self.n + 1])
    }

    /// Component that changed sign under the frozen regime, with a linear
    /// estimate of where.
    fn crossing(&self, from: &[f64], to: &[f64], regime: Regime) -> Option<(Crossing, f64)> {
        let mut best: Option<(Crossing, f64)> = None;
        let mut consider = |c: Crossing, a: f64, b: f64| {
            if b < -CROSSING_TOL && a > b {
                let theta = (a / (a - b)).clamp(0.0, 1.0);
                if best.is_none_or(|(_, t)| theta < t) {
                    best = Some((c, theta));
                }
            }
        };
        if regime.idle_on {
            consider(Crossing::IdlePool, self.idle(from), self.idle(to));
        }
        if regime.off_available {
            consider(Crossing::OffPool, from[self.n], to[self.n]);
        }
        best
    }

    fn crossing_value(&self, c: Crossing, y: &[f64]) -> f64 {
        match c {
            Crossing::IdlePool => self.idle(y),
            Crossing::OffPool => y[self.n],
        }
    }

    /// Advances `y` by `h` in place.
    fn advance(&mut self, y: &mut [f64], t: f64, h: f64) {
        let start = Regime::of(y, self.n, self.k);
        let q1: f64 = y[..self.k].iter().sum();
        let lambda = self.params.arrivals.rate(t);
        if start.idle_on || lambda * h <= STIFF_RATIO * q1 {
            self.advance_segments(y, t, h, false);
        } else {
            self.spill_transfer(y, t, 0.5 * h);
            self.advance_segments(y, t, h, true);
            self.spill_transfer(y, t + h, 0.5 * h);
        }
    }

    /// Moves busy servers up the levels as spilled arrivals do over `tau`,
    /// with the rate frozen at its value in `y`. Servers with `i` tasks
    /// receive Poisson(`λ·spill·tau/q_1`) arrivals each, capped at the buffer;
    /// `q_1` and the off and setup fractions are unchanged.
    fn spill_transfer(&self, y: &mut [f64], t: f64, tau: f64) {
        let (b, k) = (self.params.buffer, self.k);
        let q1: f64 = y[..k].iter().sum();
        let lambda = self.params.arrivals.rate(t);
        let spill = spill_of(self.params, lambda, y, Regime::of(y, self.n, k));
        if q1 <= 0.0 || spill <= 0.0 {
            return;
        }
        let theta = lambda * spill * tau / q1;
        // tail[m] = P(Poisson(theta) >= m)
        let mut tail = vec![1.0; b];
        let mut log_pmf = -theta;
        let mut below = 0.0;
        for (m, slot) in tail.iter_mut().enumerate().skip(1) {
            below += log_pmf.exp();
            *slot = (1.0 - below).max(0.0);
            log_pmf += (theta / m as f64).ln();
        }
        for j in 0..k {
            let at = |i: usize| if i <= b { y[(i - 1) * k + j] } else { 0.0 };
            let exact: Vec<f64> = (1..=b).map(|l| (at(l) - at(l + 1)).max(0.0)).collect();
            for i in (2..=b).rev() {
                y[(i - 1) * k + j] = (1..=b).map(|l| exact[l - 1] * if l >= i { 1.0 } else { tail[i - l] }).sum();
            }
        }
    }

    fn advance_segments(&mut self, y: &mut [f64], t: f64, h: f64, split: bool) {
        let regime_of = |y: &[f64], n, k| Regime { split, ..Regime::of(y, n, k) };
        let mut cand = std::mem::take(&mut self.cand);
        let mut t_cur = t;
        let mut remaining = h;
        for _ in 0..MAX_SWITCHES {
            let regime = regime_of(y, self.n, self.k);
            self.rk4(y, t_cur, remaining, regime, &mut cand);
            let Some((which, guess)) = self.crossing(y, &cand, regime) else {
                y.copy_from_slice(&cand);
                self.cand = cand;
                return;
            };
            let theta = self.locate(y, t_cur, remaining, regime, which, guess);
            self.rk4(y, t_cur, theta * remaining, regime, &mut cand);
            if which == Crossing::OffPool {
                cand[self.n] = cand[self.n].max(0.0);
            }
            y.copy_from_slice(&cand);
            t_cur += theta * remaining;
            remaining *= 1.0 - theta;
            if remaining <= 0.0 {
                self.cand = cand;
                return;
            }
        }
        let regime = regime_of(y, self.n, self.k);
        self.rk4(y, t_cur, remaining, regime, &mut cand);
        y.copy_from_slice(&cand);
        self.cand = cand;
    }

    /// Illinois false position for the fraction of the step at which the
    /// crossing component reaches zero.
    fn locate(&mut self, y: &[f64], t: f64, h: f64, regime: Regime, which: Crossing, guess: f64) -> f64 {
        let mut probe = std::mem::take(&mut self.probe);
        let (mut lo, mut g_lo) = (0.0, self.crossing_value(which, y));
        let (mut hi, mut g_hi) = (1.0, {
            self.rk4(y, t, h, regime, &mut probe);
            self.crossing_value(which, &probe)
        });
        let mut theta = guess;
        let mut side = 0i8;
        for _ in 0..60 {
            self.rk4(y, t, theta * h, regime, &mut probe);
            let g = self.crossing_value(which, &probe);
            if g.abs() <= CROSSING_TOL || hi - lo < 1e-15 {
                break;
            }
            if g > 0.0 {
                lo = theta;
                g_lo = g;
                if side == 1 {
                    g_hi *= 0.5;
                }
                side = 1;
            } else {
                hi = theta;
                g_hi = g;
                if side == -1 {
                    g_lo *= 0.5;
                }
                side = -1;
            }
            theta = (lo * g_hi - hi * g_lo) / (g_hi - g_lo);
            if !(theta > lo && theta < hi) {
                theta = 0.5 * (lo + hi);
            }
        }
        self.probe = probe;
        theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Crossing {
    IdlePool,
    OffPool,
}

/// Integrates the fluid dynamics from `initial` over `[0, horizon]` with step
/// `dt`, keeping a sample every `sample_interval` (rounded to whole steps)
/// plus the final state.
pub fn integrate_fluid(
    initial: &FluidState,
    params: &FluidParams,
    horizon: f64,
    dt: f64,
    sample_interval: f64,
) -> Result<FluidTrajectory> {
    params.check_shape(initial)?;
    ensure_valid(initial)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::Config(format!("horizon must be non-negative, got {horizon}")));
    }
    if !(sample_interval.is_finite() && sample_interval > 0.0) {
        return Err(Error::Config(format!("sample interval must be positive, got {sample_interval}")));
    }
    let (buffer, k) = (params.buffer, params.phases());
    let n = buffer * k;
    let mut stepper = Stepper::new(params);
    let mut y = with_aux(initial);

    let steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as u64;
    let stride = ((sample_interval / dt).round() as u64).max(1);
    let sample = |t: f64, y: &[f64]| {
        let state = FluidState::from_slice(buffer, k, y);
        FluidSample { t, u: state.u(), state, xi: y[n + 2], setups_completed: y[n + 3] }
    };
    let mut samples = vec![sample(0.0, &y)];
    for step in 1..=steps {
        let t0 = (step - 1) as f64 * dt;
        let t1 = (step as f64 * dt).min(horizon);
        stepper.advance(&mut y, t0, t1 - t0);
        project_components(&mut y, buffer, k).map_err(|e| Error::Divergence {
            step,
            t: t1,
            reason: e.to_string(),
        })?;
        if step % stride == 0 || step == steps {
            samples.push(sample(t1, &y));
        }
    }
    Ok(FluidTrajectory { samples, dt })
}

/// Outcome of integrating many random initial states towards the fixed point.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub fixed_point: FluidState,
    pub initials: Vec<FluidState>,
    /// Final L∞ distance to the fixed point, per initial state.
    pub distances: Vec<f64>,
    pub tolerance: f64,
}

impl StabilityReport {
    pub fn converged(&self) -> usize {
        self.distances.iter().filter(|&&d| d <= self.tolerance).count()
    }

    pub fn worst_distance(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_initial(&self) -> Option<&FluidState> {
        self.distances
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| &self.initials[i])
    }
}

/// Draws a state uniformly from the occupancy space: a flat Dirichlet split
/// of unit mass over "exactly `i` tasks in phase `j`", off, setup and
/// idle-on, summed into monotone levels.
pub fn random_state<R: rand::Rng + ?Sized>(buffer: usize, phases: usize, rng: &mut R) -> FluidState {
    let parts = buffer * phases + 3;
    let w: Vec<f64> = (0..parts).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x / total).collect();
    let mut q = vec![0.0; buffer * phases];
    for j in 0..phases {
        let mut acc = 0.0;
        for i in (0..buffer).rev() {
            acc += w[i * phases + j];
            q[i * phases + j] = acc;
        }
    }
    let n = buffer * phases;
    let mut s = FluidState::with_phases(buffer, phases, q, w[n], w[n + 1]);
    if !s.is_valid() {
        s = s.project().expect("Dirichlet draws lie within rounding of the occupancy space");
    }
    s
}

/// Integrates `n_initials` random initial states to
/// `horizon` and measures their distance to the fixed point.
pub fn stability_sweep(
    params: &FluidParams,
    n_initials: usize,
    horizon: f64,
    tol: f64,
    dt: f64,
    seed: u64,
) -> Result<StabilityReport> {
    let fp = fixed_point_for(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initials: Vec<FluidState> =
        (0..n_initials).map(|_| random_state(params.buffer, params.phases(), &mut rng)).collect();
    stability_from(params, initials, horizon, tol, dt, fp)
}

/// Same as [`stability_sweep`] for caller-chosen initial states.
pub fn stability_from(
    params: &FluidParams,
    initials: Vec<FluidState>,
    horizon: f64,
    tol: f64,
    dt: f64,
    fixed_point: FluidState,
) -> Result<StabilityReport> {
    let fp_vec = fixed_point.to_vec();
    let distances = initials
        .par_iter()
        .map(|init| {
            let traj = integrate_fluid(init, params, horizon, dt, horizon.max(dt))
                .map_err(|e| Error::Divergence {
                    step: match &e {
                        Error::Divergence { step, .. } => *step,
                        _ => 0,
                    },
                    t: match &e {
                        Error::Divergence { t, .. } => *t,
                        _ => 0.0,
                    },
                    reason: format!("{e} (initial state {init:?})"),
                })?;
            let end = traj.last().state.to_vec();
            Ok(end.iter().zip(&fp_vec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(StabilityReport { fixed_point, initials, distances, tolerance: tol })
}
