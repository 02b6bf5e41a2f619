//! Phase-type service-time distributions.
//!
//! A service is an absorbing Markov chain on phases `1..K` with absorption
//! (service completion) in state 0. The embedded jump chain that restarts a
//! fresh service from state 0 has a stationary vector `η`, from which the
//! mean and the fluid fixed point follow.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Exp};

/// Largest phase count accepted by the dense solver.
pub const MAX_PHASES: usize = 32;

const RESIDUAL_TOL: f64 = 1e-12;
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTypeService {
    initial: Vec<f64>,
    transitions: Vec<Vec<f64>>,
    rates: Vec<f64>,
    stationary: Vec<f64>,
}

impl PhaseTypeService {
    /// Validates the chain and computes the embedded stationary vector. The
    /// rates are taken as given; see [`PhaseTypeService::normalized`].
    pub fn new(initial: Vec<f64>, transitions: Vec<Vec<f64>>, rates: Vec<f64>) -> Result<Self> {
        let k = initial.len();
        if rates.len() != k {
            return Err(Error::InvalidPhaseType(format!("{} rates for {k} phases", rates.len())));
        }
        if let Some((j, g)) = rates.iter().enumerate().find(|(_, g)| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::InvalidRate(format!("phase {} rate must be positive, got {g}", j + 1)));
        }
        let stationary = embedded_stationary(&initial, &transitions)?;
        Ok(Self { initial, transitions, rates, stationary })
    }

    /// Like [`PhaseTypeService::new`], but rescales every rate so the mean
    /// service time is exactly one.
    pub fn normalized(initial: Vec<f64>, transitions: Vec<Vec<f64>>, rates: Vec<f64>) -> Result<Self> {
        let mut d = Self::new(initial, transitions, rates)?;
        let mean = d.mean_service_time();
        for g in &mut d.rates {
            *g *= mean;
        }
        Ok(d)
    }

    /// Single exponential phase with the given rate.
    pub fn exponential(rate: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![vec![0.0]], vec![rate])
    }

    /// Mixture of exponentials: phase `j` is entered with `probs[j]` and left
    /// straight to completion.
    pub fn hyper_exponential(probs: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        let k = probs.len();
        Self::new(probs, vec![vec![0.0; k]; k], rates)
    }

    /// `k` phases in series, each with rate `rate`.
    pub fn erlang(k: usize, rate: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidPhaseType("Erlang needs at least one phase".into()));
        }
        let mut initial = vec![0.0; k];
        initial[0] = 1.0;
        let mut transitions = vec![vec![0.0; k]; k];
        for (j, row) in transitions.iter_mut().enumerate().take(k - 1) {
            row[j + 1] = 1.0;
        }
        Self::new(initial, transitions, vec![rate; k])
    }

    /// The two-branch hyper-exponential with rates 2 and 0.4, mixed 3:1.
    pub fn reference_hyper_exponential() -> Self {
        Self::hyper_exponential(vec![0.75, 0.25], vec![2.0, 0.4]).expect("reference distribution is valid")
    }

    pub fn phases(&self) -> usize {
        self.initial.len()
    }

    /// Initial phase distribution `r`.
    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Phase-to-phase routing probabilities `r_{j,k}`.
    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    /// Phase rates `γ_j`.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Completion probability `r_{j,0}` on leaving phase `j`.
    pub fn exit_prob(&self, phase: usize) -> f64 {
        (1.0 - self.transitions[phase].iter().sum::<f64>()).max(0.0)
    }

    /// Stationary vector `(η_0, η_1, .., η_K)` of the embedded chain.
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// `(Σ_i η_i / (γ_i η_0))⁻¹`, the expression quoted for the mean.
    ///
    /// The sum inside is the expected time to absorption, so this value is
    /// the reciprocal of the mean; both read 1 for a unit-mean service.
    pub fn phase_type_mean(&self) -> f64 {
        1.0 / self.mean_service_time()
    }

    /// Expected service time `Σ_i η_i / (γ_i η_0)`.
    pub fn mean_service_time(&self) -> f64 {
        let eta0 = self.stationary[0];
        self.stationary[1..].iter().zip(&self.rates).map(|(e, g)| e / (g * eta0)).sum()
    }

    /// Expected time spent in phase `j` per service, `η_j / (η_0 γ_j)`.
    pub fn phase_occupancy(&self, phase: usize) -> f64 {
        self.stationary[phase + 1] / (self.stationary[0] * self.rates[phase])
    }

    /// Draws a phase from `r`.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial, rng).unwrap_or(self.phases() - 1)
    }

    /// Draws the successor of `phase`: `None` means service completion.
    pub fn sample_next<R: Rng + ?Sized>(&self, phase: usize, rng: &mut R) -> Option<usize> {
        sample_categorical(&self.transitions[phase], rng)
    }

    /// Sojourn time in `phase`.
    pub fn sample_sojourn<R: Rng + ?Sized>(&self, phase: usize, rng: &mut R) -> f64 {
        Exp::new(self.rates[phase]).expect("rates validated positive").sample(rng)
    }

    /// A complete service duration, walking the phase path.
    pub fn sample_duration<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut phase = self.sample_initial(rng);
        let mut total = 0.0;
        loop {
            total += self.sample_sojourn(phase, rng);
            match self.sample_next(phase, rng) {
                Some(next) => phase = next,
                None => return total,
            }
        }
    }
}

/// Index drawn with probabilities `weights`; `None` for the leftover mass
/// `1 − Σ weights`.
fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if x < acc {
            return Some(j);
        }
    }
    None
}

/// Stationary distribution `η` of the embedded chain on `{0, 1, .., K}` with
/// `p_{0,j} = r_j`, `p_{j,k} = r_{j,k}` and `p_{j,0} = 1 − Σ_k r_{j,k}`.
///
/// Solves `η_0 r_i + Σ_j r_{j,i} η_j = η_i` for `i ≥ 1` together with
/// `Σ η = 1` by Gaussian elimination with partial pivoting.
pub fn embedded_stationary(initial: &[f64], transitions: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = initial.len();
    validate_chain(initial, transitions)?;

    // Unknowns η_0..η_K; rows 0..K-1 are the balance equations for phases
    // 1..K, row K is normalization.
    let n = k + 1;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for i in 0..k {
        a[i][0] = initial[i];
        for j in 0..k {
            a[i][j + 1] += transitions[j][i];
        }
        a[i][i + 1] -= 1.0;
    }
    a[k] = vec![1.0; n];
    b[k] = 1.0;

    let eta = solve_dense(a.clone(), b.clone())
        .ok_or_else(|| Error::InvalidPhaseType("embedded chain system is singular".into()))?;

    let residual = a
        .iter()
        .zip(&b)
        .map(|(row, rhs)| (row.iter().zip(&eta).map(|(x, y)| x * y).sum::<f64>() - rhs).abs())
        .fold(0.0, f64::max);
    if residual > RESIDUAL_TOL {
        return Err(Error::InvalidPhaseType(format!("stationary solve is ill-conditioned (residual {residual:e})")));
    }
    if eta.iter().any(|&e| e < -RESIDUAL_TOL) || eta[0] <= PIVOT_TOL {
        return Err(Error::InvalidPhaseType("embedded chain has no proper stationary vector".into()));
    }
    Ok(eta.into_iter().map(|e| e.max(0.0)).collect())
}

fn validate_chain(initial: &[f64], transitions: &[Vec<f64>]) -> Result<()> {
    let k = initial.len();
    if k == 0 {
        return Err(Error::InvalidPhaseType("at least one phase is required".into()));
    }
    if k > MAX_PHASES {
        return Err(Error::InvalidPhaseType(format!("{k} phases exceed the limit of {MAX_PHASES}")));
    }
    if transitions.len() != k || transitions.iter().any(|row| row.len() != k) {
        return Err(Error::InvalidPhaseType(format!("transition matrix must be {k}x{k}")));
    }
    if initial.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidPhaseType("initial probabilities must be non-negative".into()));
    }
    let total: f64 = initial.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPhaseType(format!("initial distribution sums to {total}, not 1")));
    }
    for (j, row) in transitions.iter().enumerate() {
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidPhaseType(format!("row {} has negative entries", j + 1)));
        }
        if row[j] != 0.0 {
            return Err(Error::InvalidPhaseType(format!("self-transition r_{{{0},{0}}} must be zero", j + 1)));
        }
        let s: f64 = row.iter().sum();
        if s > 1.0 + 1e-12 {
            return Err(Error::InvalidPhaseType(format!("row {} sums to {s} > 1", j + 1)));
        }
    }
    // Every phase must reach absorption.
    let mut reaches_exit: Vec<bool> =
        (0..k).map(|j| 1.0 - transitions[j].iter().sum::<f64>() > 1e-12).collect();
    loop {
        let mut changed = false;
        for j in 0..k {
            if !reaches_exit[j] && (0..k).any(|m| transitions[j][m] > 0.0 && reaches_exit[m]) {
                reaches_exit[j] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if let Some(j) = reaches_exit.iter().position(|r| !r) {
        return Err(Error::InvalidPhaseType(format!("phase {} never reaches completion", j + 1)));
    }
    Ok(())
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < PIVOT_TOL {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}
