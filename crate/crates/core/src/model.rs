//! Shared domain types: server modes, the dispatcher's token ledger,
//! fluid-scaled occupancy states, arrival profiles and energy parameters.

use crate::error::{Error, Result};
use rand::Rng;

/// Largest L∞ distance from the occupancy space that [`FluidState::project`]
/// will silently repair.
pub const PROJECTION_TOLERANCE: f64 = 1e-6;

/// Operating mode of a single server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Busy,
    /// On and idle, with a pending standby timer.
    IdleOn,
    IdleOff,
    Setup,
}

/// Microscopic state of one server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerState {
    pub mode: Mode,
    /// Tasks at the server, including the one in service.
    pub queue_len: usize,
    /// Current service phase (0-based) of the task in service, phase-type runs only.
    pub phase: Option<usize>,
}

impl ServerState {
    pub const fn idle_on() -> Self {
        Self { mode: Mode::IdleOn, queue_len: 0, phase: None }
    }

    pub const fn idle_off() -> Self {
        Self { mode: Mode::IdleOff, queue_len: 0, phase: None }
    }

    /// Checks the mode/queue coupling. `phase_type` selects whether a busy
    /// server must carry a phase.
    pub fn is_consistent(&self, phase_type: bool) -> bool {
        let busy_ok = (self.mode == Mode::Busy) == (self.queue_len >= 1);
        let phase_ok = if phase_type {
            self.phase.is_some() == (self.mode == Mode::Busy)
        } else {
            self.phase.is_none()
        };
        busy_ok && phase_ok
    }
}

/// Token colour held by the dispatcher for a server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Green,
    Yellow,
    Red,
    Orange,
}

impl Token {
    pub const ALL: [Token; 4] = [Token::Green, Token::Yellow, Token::Red, Token::Orange];

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::IdleOn => Token::Green,
            Mode::Busy => Token::Yellow,
            Mode::IdleOff => Token::Red,
            Mode::Setup => Token::Orange,
        }
    }

    fn slot(self) -> usize {
        match self {
            Token::Green => 0,
            Token::Yellow => 1,
            Token::Red => 2,
            Token::Orange => 3,
        }
    }
}

/// The dispatcher's view of the farm: one token per server, partitioned into
/// four colour pools that support O(1) moves and uniform random picks.
#[derive(Debug, Clone)]
pub struct DispatcherLedger {
    colors: Vec<Token>,
    pools: [Vec<usize>; 4],
    pos: Vec<usize>,
}

impl DispatcherLedger {
    /// All `n` servers start with the given token.
    pub fn uniform(n: usize, token: Token) -> Self {
        let mut pools: [Vec<usize>; 4] = Default::default();
        pools[token.slot()] = (0..n).collect();
        Self { colors: vec![token; n], pools, pos: (0..n).collect() }
    }

    pub fn from_modes(servers: &[ServerState]) -> Self {
        let mut pools: [Vec<usize>; 4] = Default::default();
        let mut colors = Vec::with_capacity(servers.len());
        let mut pos = Vec::with_capacity(servers.len());
        for (id, s) in servers.iter().enumerate() {
            let token = Token::for_mode(s.mode);
            let pool = &mut pools[token.slot()];
            pos.push(pool.len());
            pool.push(id);
            colors.push(token);
        }
        Self { colors, pools, pos }
    }

    pub fn n_servers(&self) -> usize {
        self.colors.len()
    }

    pub fn token(&self, server: usize) -> Token {
        self.colors[server]
    }

    pub fn members(&self, token: Token) -> &[usize] {
        &self.pools[token.slot()]
    }

    pub fn green(&self) -> &[usize] {
        self.members(Token::Green)
    }

    pub fn yellow(&self) -> &[usize] {
        self.members(Token::Yellow)
    }

    pub fn red(&self) -> &[usize] {
        self.members(Token::Red)
    }

    pub fn orange(&self) -> &[usize] {
        self.members(Token::Orange)
    }

    pub fn count(&self, token: Token) -> usize {
        self.pools[token.slot()].len()
    }

    /// Replaces the token of `server`.
    pub fn set(&mut self, server: usize, token: Token) {
        let from = self.colors[server];
        if from == token {
            return;
        }
        let pool = &mut self.pools[from.slot()];
        let idx = self.pos[server];
        pool.swap_remove(idx);
        if let Some(&moved) = pool.get(idx) {
            self.pos[moved] = idx;
        }
        let pool = &mut self.pools[token.slot()];
        self.pos[server] = pool.len();
        pool.push(server);
        self.colors[server] = token;
    }

    /// Uniformly random holder of `token`, if any.
    pub fn pick<R: Rng + ?Sized>(&self, token: Token, rng: &mut R) -> Option<usize> {
        let pool = &self.pools[token.slot()];
        match pool.len() {
            0 => None,
            1 => Some(pool[0]),
            n => Some(pool[rng.random_range(0..n)]),
        }
    }

    /// True when the four pools partition the servers and every token matches
    /// the server's mode.
    pub fn matches(&self, servers: &[ServerState]) -> bool {
        if servers.len() != self.colors.len() {
            return false;
        }
        let total: usize = self.pools.iter().map(Vec::len).sum();
        if total != servers.len() {
            return false;
        }
        for token in Token::ALL {
            for (idx, &s) in self.pools[token.slot()].iter().enumerate() {
                if self.colors[s] != token || self.pos[s] != idx {
                    return false;
                }
            }
        }
        servers
            .iter()
            .enumerate()
            .all(|(id, s)| self.colors[id] == Token::for_mode(s.mode))
    }
}

/// Fluid-scaled occupancy state `(q, δ0, δ1)`.
///
/// `q` is stored level-major as a `buffer × phases` matrix: entry `(i, j)` is
/// the fraction of servers holding at least `i` tasks whose task in service
/// is in phase `j`. Exponential service uses a single phase.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidState {
    buffer: usize,
    phases: usize,
    q: Vec<f64>,
    pub delta0: f64,
    pub delta1: f64,
}

impl FluidState {
    /// Single-phase state from the level fractions `q_1..q_B`.
    pub fn new(q: Vec<f64>, delta0: f64, delta1: f64) -> Self {
        assert!(!q.is_empty(), "buffer must be at least 1");
        Self { buffer: q.len(), phases: 1, q, delta0, delta1 }
    }

    /// Phase-resolved state; `q` is level-major with `buffer * phases` entries.
    pub fn with_phases(buffer: usize, phases: usize, q: Vec<f64>, delta0: f64, delta1: f64) -> Self {
        assert!(buffer >= 1 && phases >= 1, "buffer and phase count must be positive");
        assert_eq!(q.len(), buffer * phases, "q must have buffer * phases entries");
        Self { buffer, phases, q, delta0, delta1 }
    }

    pub fn zeros(buffer: usize, phases: usize) -> Self {
        Self::with_phases(buffer, phases, vec![0.0; buffer * phases], 0.0, 0.0)
    }

    /// Every server idle and on (`u = 1`).
    pub fn all_idle_on(buffer: usize, phases: usize) -> Self {
        Self::zeros(buffer, phases)
    }

    /// Every server switched off (`δ0 = 1`).
    pub fn all_idle_off(buffer: usize, phases: usize) -> Self {
        let mut s = Self::zeros(buffer, phases);
        s.delta0 = 1.0;
        s
    }

    pub fn buffer(&self) -> usize {
        self.buffer
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    /// Raw level-major phase matrix.
    pub fn q_matrix(&self) -> &[f64] {
        &self.q
    }

    pub fn q_matrix_mut(&mut self) -> &mut [f64] {
        &mut self.q
    }

    /// `q_{i,j}` with 1-based level and 0-based phase; zero beyond the buffer.
    pub fn q_phase(&self, level: usize, phase: usize) -> f64 {
        assert!(level >= 1, "levels are 1-based");
        if level > self.buffer {
            0.0
        } else {
            self.q[(level - 1) * self.phases + phase]
        }
    }

    pub fn set_q_phase(&mut self, level: usize, phase: usize, value: f64) {
        assert!(level >= 1 && level <= self.buffer, "level out of range");
        self.q[(level - 1) * self.phases + phase] = value;
    }

    /// Aggregated `q_i = Σ_j q_{i,j}` with a 1-based level; zero beyond the buffer.
    pub fn q(&self, level: usize) -> f64 {
        assert!(level >= 1, "levels are 1-based");
        if level > self.buffer {
            return 0.0;
        }
        let start = (level - 1) * self.phases;
        self.q[start..start + self.phases].iter().sum()
    }

    /// Aggregated levels `q_1..q_B`.
    pub fn levels(&self) -> Vec<f64> {
        (1..=self.buffer).map(|i| self.q(i)).collect()
    }

    fn occupied(&self) -> f64 {
        self.q(1) + self.delta0 + self.delta1
    }

    /// Fraction of idle-on servers, `1 − q_1 − δ0 − δ1`.
    pub fn u(&self) -> f64 {
        1.0 - self.occupied()
    }

    /// Flat component vector `(q.., δ0, δ1)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.push(self.delta0);
        v.push(self.delta1);
        v
    }

    /// Inverse of [`FluidState::to_vec`] for the same shape.
    pub fn from_slice(buffer: usize, phases: usize, v: &[f64]) -> Self {
        let n = buffer * phases;
        assert!(v.len() >= n + 2, "component vector too short");
        Self::with_phases(buffer, phases, v[..n].to_vec(), v[n], v[n + 1])
    }

    /// Aggregated comparison vector `(q_1..q_B, δ0, δ1)`, phase-independent.
    pub fn aggregate_vec(&self) -> Vec<f64> {
        let mut v = self.levels();
        v.push(self.delta0);
        v.push(self.delta1);
        v
    }

    /// L∞ distance over the aggregated components.
    pub fn distance_inf(&self, other: &FluidState) -> f64 {
        let a = self.aggregate_vec();
        let b = other.aggregate_vec();
        let n = a.len().max(b.len());
        (0..n)
            .map(|k| {
                let x = a.get(k).copied().unwrap_or(0.0);
                let y = b.get(k).copied().unwrap_or(0.0);
                (x - y).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Every violated condition of membership in the occupancy space; empty
    /// iff the state is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let k = self.phases;
        for i in 1..=self.buffer {
            for j in 0..k {
                let v = self.q_phase(i, j);
                let name = if k == 1 { format!("q_{i}") } else { format!("q_{{{i},{}}}", j + 1) };
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    out.push(format!("{name} = {v} outside [0, 1]"));
                }
                if i > 1 && v > self.q_phase(i - 1, j) {
                    let prev = if k == 1 {
                        format!("q_{}", i - 1)
                    } else {
                        format!("q_{{{},{}}}", i - 1, j + 1)
                    };
                    out.push(format!("{name} > {prev}"));
                }
            }
        }
        for (name, v) in [("delta0", self.delta0), ("delta1", self.delta1)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} = {v} outside [0, 1]"));
            }
        }
        let mass = self.occupied();
        if mass > 1.0 {
            out.push(format!("mass {mass} > 1"));
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }

    /// Repairs a state that drifted slightly out of the occupancy space.
    ///
    /// Clamps every component to `[0, 1]`, restores monotonicity in the level
    /// index by a running minimum, then shrinks `(q_1, δ0, δ1)` proportionally
    /// if their sum exceeds one. Fails if the input was farther than
    /// [`PROJECTION_TOLERANCE`] from the result.
    pub fn project(&self) -> Result<FluidState> {
        let mut v = self.to_vec();
        project_components(&mut v, self.buffer, self.phases)?;
        Ok(Self::from_slice(self.buffer, self.phases, &v))
    }

    /// Collapses the phase dimension.
    pub fn aggregated(&self) -> FluidState {
        FluidState::new(self.levels(), self.delta0, self.delta1)
    }
}

/// In-place projection of a flat `(q.., δ0, δ1)` component slice; see
/// [`FluidState::project`]. Trailing entries past `δ1` are left untouched.
pub fn project_components(v: &mut [f64], buffer: usize, phases: usize) -> Result<()> {
    let k = phases;
    let n = buffer * phases;
    let comps = &mut v[..n + 2];
    if comps.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite component".into()));
    }
    let mut dist: f64 = 0.0;
    for x in comps.iter_mut() {
        let c = x.clamp(0.0, 1.0);
        dist = dist.max((c - *x).abs());
        *x = c;
    }
    dist = dist.max(running_min(&mut comps[..n], buffer, k));

    let occupied = |c: &[f64]| c[..k].iter().sum::<f64>() + c[n] + c[n + 1];
    if occupied(comps) > 1.0 {
        let before: Vec<f64> = comps[..k].iter().copied().chain([comps[n], comps[n + 1]]).collect();
        let scale = 1.0 / occupied(comps);
        for x in comps[..k].iter_mut() {
            *x *= scale;
        }
        comps[n] *= scale;
        comps[n + 1] *= scale;
        // Rounding may leave the sum a few ulps above one.
        for _ in 0..8 {
            let excess = occupied(comps) - 1.0;
            if excess <= 0.0 {
                break;
            }
            let idx = if comps[n] >= excess {
                n
            } else if comps[n + 1] >= excess {
                n + 1
            } else {
                (0..k).max_by(|&a, &b| comps[a].total_cmp(&comps[b])).unwrap_or(0)
            };
            comps[idx] = (comps[idx] - excess).next_down().max(0.0);
        }
        let after = comps[..k].iter().copied().chain([comps[n], comps[n + 1]]);
        for (b, a) in before.iter().zip(after) {
            dist = dist.max((b - a).abs());
        }
        dist = dist.max(running_min(&mut comps[..n], buffer, k));
    }
    if dist > PROJECTION_TOLERANCE {
        return Err(Error::Domain(format!(
            "state is {dist:.3e} away from the occupancy space (tolerance {PROJECTION_TOLERANCE:e})"
        )));
    }
    Ok(())
}

/// Enforces `q_{i+1,j} <= q_{i,j}`; returns the largest adjustment.
fn running_min(q: &mut [f64], buffer: usize, k: usize) -> f64 {
    let mut moved: f64 = 0.0;
    for i in 1..buffer {
        for j in 0..k {
            let prev = q[(i - 1) * k + j];
            let cur = &mut q[i * k + j];
            if *cur > prev {
                moved = moved.max(*cur - prev);
                *cur = prev;
            }
        }
    }
    moved
}

/// Every violated invariant of membership in the occupancy space.
pub fn validate_fluid_state(s: &FluidState) -> Vec<String> {
    s.violations()
}

/// Nearest valid occupancy state; see [`FluidState::project`].
pub fn project_to_e(s: &FluidState) -> Result<FluidState> {
    s.project()
}

/// Per-server arrival rate `λ(t)`, in tasks per unit mean service time.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalProfile {
    Constant(f64),
    /// `base + amplitude · sin(t / period)`.
    Sinusoid { base: f64, amplitude: f64, period: f64 },
    /// Piecewise constant: `rates[k]` holds on `[times[k], times[k+1])`; the
    /// first rate also covers times before `times[0]`.
    Table { times: Vec<f64>, rates: Vec<f64> },
}

impl ArrivalProfile {
    pub fn rate(&self, t: f64) -> f64 {
        match self {
            ArrivalProfile::Constant(l) => *l,
            ArrivalProfile::Sinusoid { base, amplitude, period } => base + amplitude * (t / period).sin(),
            ArrivalProfile::Table { times, rates } => {
                let idx = times.partition_point(|&b| b <= t);
                rates[idx.saturating_sub(1)]
            }
        }
    }

    /// Upper bound on `λ(t)`, used for thinning.
    pub fn sup_rate(&self) -> f64 {
        match self {
            ArrivalProfile::Constant(l) => *l,
            ArrivalProfile::Sinusoid { base, amplitude, .. } => base + amplitude.abs(),
            ArrivalProfile::Table { rates, .. } => rates.iter().copied().fold(0.0, f64::max),
        }
    }

    /// Lower bound on `λ(t)`.
    pub fn inf_rate(&self) -> f64 {
        match self {
            ArrivalProfile::Constant(l) => *l,
            ArrivalProfile::Sinusoid { base, amplitude, .. } => base - amplitude.abs(),
            ArrivalProfile::Table { rates, .. } => rates.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Representative load used when echoing parameters: the constant rate,
    /// the sinusoid's base, or the table's first rate.
    pub fn nominal(&self) -> f64 {
        match self {
            ArrivalProfile::Constant(l) => *l,
            ArrivalProfile::Sinusoid { base, .. } => *base,
            ArrivalProfile::Table { rates, .. } => rates.first().copied().unwrap_or(0.0),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ArrivalProfile::Constant(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArrivalProfile::Constant(l) => {
                if !(l.is_finite() && *l > 0.0) {
                    return Err(Error::InvalidRate(format!("arrival rate must be positive, got {l}")));
                }
            }
            ArrivalProfile::Sinusoid { base, amplitude, period } => {
                if !(base.is_finite() && amplitude.is_finite() && period.is_finite()) {
                    return Err(Error::InvalidRate("sinusoid parameters must be finite".into()));
                }
                if *period <= 0.0 {
                    return Err(Error::InvalidRate(format!("sinusoid period must be positive, got {period}")));
                }
                if base - amplitude.abs() <= 0.0 {
                    return Err(Error::InvalidRate(format!(
                        "sinusoid must stay positive: base {base} - |amplitude| {amplitude} <= 0"
                    )));
                }
            }
            ArrivalProfile::Table { times, rates } => {
                if times.is_empty() || times.len() != rates.len() {
                    return Err(Error::InvalidRate(
                        "rate table needs equally many (at least one) times and rates".into(),
                    ));
                }
                if times.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::InvalidRate("rate table times must be strictly increasing".into()));
                }
                if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                    return Err(Error::InvalidRate("rate table entries must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Three-level power model: full power when busy or in setup, idle power
/// when idle-on, nothing when off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub p_full: f64,
    pub p_idle: f64,
}

impl EnergyParams {
    pub fn new(p_full: f64, p_idle: f64) -> Result<Self> {
        if !(p_full.is_finite() && p_idle.is_finite() && 0.0 <= p_idle && p_idle <= p_full && p_full > 0.0) {
            return Err(Error::Config(format!(
                "power levels must satisfy 0 <= p_idle <= p_full and p_full > 0 (got p_full = {p_full}, p_idle = {p_idle})"
            )));
        }
        Ok(Self { p_full, p_idle })
    }

    /// Relative consumption of an idle-on server, `p_idle / p_full`.
    pub fn idle_ratio(&self) -> f64 {
        self.p_idle / self.p_full
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self { p_full: 200.0, p_idle: 140.0 }
    }
}
