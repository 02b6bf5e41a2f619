use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabs_core::fluid::{assignment_probs, fixed_point, fixed_point_phase, fluid_rhs, integrate_fluid, random_state};
use tabs_core::metrics::{aligned_gap, energy_per_server, energy_wastage, fluid_mean_wait, jiq_energy, stationary_estimate};
use tabs_core::model::project_components;
use tabs_core::phase::embedded_stationary;
use tabs_core::{ArrivalProfile, EnergyParams, FluidParams, FluidSample, FluidState, PhaseTypeService, ServiceModel};

fn state(seed: u64, buffer: usize, phases: usize) -> FluidState {
    random_state(buffer, phases, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sample(t: f64, s: FluidState) -> FluidSample {
    FluidSample { t, u: s.u(), state: s, xi: 0.0, setups_completed: 0.0 }
}

/// Random absorbing chain: rows keep at least `exit_floor` exit mass.
fn chain() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=4).prop_flat_map(|k| {
        (
            prop::collection::vec(0.01f64..1.0, k),
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, k), k),
            prop::collection::vec(0.05f64..1.0, k),
            prop::collection::vec(0.1f64..5.0, k),
        )
            .prop_map(move |(r, raw, exit, gamma)| {
                let total: f64 = r.iter().sum();
                let r: Vec<f64> = r.iter().map(|x| x / total).collect();
                let rows = raw
                    .iter()
                    .enumerate()
                    .map(|(j, row)| {
                        let mut row = row.clone();
                        row[j] = 0.0;
                        let s: f64 = row.iter().sum();
                        let keep = 1.0 - exit[j];
                        row.iter().map(|x| if s > 0.0 { x / s * keep } else { 0.0 }).collect()
                    })
                    .collect();
                (r, rows, gamma)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_phase_type_has_unit_mean((r, rows, gamma) in chain()) {
        let d = PhaseTypeService::normalized(r, rows, gamma).unwrap();
        prop_assert!((d.mean_service_time() - 1.0).abs() <= 1e-9);
        prop_assert!((d.phase_type_mean() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn embedded_chain_is_stationary((r, rows, _gamma) in chain()) {
        let eta = embedded_stationary(&r, &rows).unwrap();
        let k = r.len();
        prop_assert!(eta.iter().all(|&x| x >= 0.0));
        prop_assert!((eta.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // Balance: η_0 = Σ_k η_k r_{k,0} and η_j = η_0 r_j + Σ_k η_k r_{k,j}.
        let exit = |m: usize| 1.0 - rows[m].iter().sum::<f64>();
        let back: f64 = (0..k).map(|m| eta[m + 1] * exit(m)).sum();
        prop_assert!((eta[0] - back).abs() <= 1e-12);
        for j in 0..k {
            let inflow = eta[0] * r[j] + (0..k).map(|m| eta[m + 1] * rows[m][j]).sum::<f64>();
            prop_assert!((eta[j + 1] - inflow).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), noise in prop::collection::vec(-1e-7f64..1e-7, 13)) {
        let s = state(seed, 10, 1);
        let mut v: Vec<f64> = s.to_vec().iter().zip(&noise).map(|(x, e)| x + e).collect();
        project_components(&mut v, 10, 1).unwrap();
        let once = FluidState::from_slice(10, 1, &v);
        prop_assert!(once.is_valid(), "{:?}", once.violations());
        let twice = once.project().unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn assignment_probs_form_a_distribution(seed in any::<u64>(), lambda in 0.01f64..1.5, nu in 0.01f64..2.0) {
        let s = state(seed, 6, 1);
        let p = assignment_probs(&s, lambda, nu).unwrap();
        prop_assert!(p.p.iter().all(|&x| x >= -1e-15) && p.dropped >= -1e-15);
        prop_assert!((p.p.iter().sum::<f64>() + p.dropped - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fluid_trajectories_stay_in_the_occupancy_space(
        seed in any::<u64>(),
        lambda in 0.05f64..0.95,
        mu in 0.05f64..1.0,
        nu in 0.05f64..1.0,
    ) {
        let params = FluidParams::constant(lambda, mu, nu, 6).unwrap();
        let traj = integrate_fluid(&state(seed, 6, 1), &params, 30.0, 1e-2, 1e-2).unwrap();
        let mut prev_xi = 0.0;
        let (d1_start, _) = (traj.samples[0].state.delta1, ());
        for w in traj.samples.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let total = b.state.q(1) + b.state.delta0 + b.state.delta1 + b.u;
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(b.state.is_valid(), "{:?}", b.state.violations());
            prop_assert!(b.xi >= prev_xi);
            prev_xi = b.xi;
            // Setup flow balances: δ1(t) − δ1(0) + ν∫δ1 = ξ(t).
            prop_assert!((b.state.delta1 - d1_start + b.setups_completed - b.xi).abs() <= 1e-9);
            // While q1 − q2 ≤ λ the busy fraction cannot drop by more than O(dt²).
            if a.state.q(1) - a.state.q(2) <= lambda {
                prop_assert!(b.state.q(1) >= a.state.q(1) - 1e-3, "q1 fell from {} to {}", a.state.q(1), b.state.q(1));
            }
        }
    }

    #[test]
    fn gap_is_a_metric(s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>()) {
        let trace = |seed: u64| -> Vec<FluidSample> {
            (0..5).map(|i| sample(i as f64, state(seed.wrapping_add(i), 4, 1))).collect()
        };
        let (a, b, c) = (trace(s1), trace(s2), trace(s3));
        let ab = aligned_gap(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, aligned_gap(&b, &a).unwrap());
        prop_assert_eq!(aligned_gap(&a, &a).unwrap(), 0.0);
        prop_assert!(aligned_gap(&a, &c).unwrap() <= ab + aligned_gap(&b, &c).unwrap() + 1e-15);
        if s1 != s2 {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn stationary_estimate_of_constant_trace(seed in any::<u64>(), len in 1usize..60) {
        let s = state(seed, 5, 2);
        let trace: Vec<FluidSample> = (0..=len).map(|i| sample(i as f64, s.clone())).collect();
        let est = stationary_estimate(&trace, 0.0).unwrap();
        prop_assert_eq!(&est.mean, &s);
        prop_assert!(est.std_err.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn fixed_point_identities_on_a_grid() {
    let e = EnergyParams::default();
    for i in 1..=100 {
        let lambda = i as f64 / 101.0;
        let fp = fixed_point(lambda, 10).unwrap();
        assert_eq!(fluid_mean_wait(&fp, lambda), 0.0);
        let power = energy_per_server(&fp, &e);
        assert!(energy_wastage(power, lambda, &e).abs() <= 1e-12);
        assert!((jiq_energy(lambda, &e) - power - (1.0 - lambda) * e.p_idle).abs() <= 1e-12);
        let params = FluidParams::constant(lambda, 0.1, 0.1, 10).unwrap();
        assert!(fluid_rhs(&fp, 0.0, &params).unwrap().max_abs() <= 1e-14);
    }
}

#[test]
fn phase_fixed_point_matches_occupancy_formula() {
    let d = PhaseTypeService::reference_hyper_exponential();
    let fp = fixed_point_phase(0.3, &d, 10).unwrap();
    assert!((fp.q_phase(1, 0) - 0.1125).abs() < 1e-15);
    assert!((fp.q_phase(1, 1) - 0.1875).abs() < 1e-15);
    let params = FluidParams::new(ArrivalProfile::Constant(0.3), 0.1, 0.1, 10, ServiceModel::PhaseType(d)).unwrap();
    let traj = integrate_fluid(&fp, &params, 5.0, 1e-3, 1.0).unwrap();
    assert!(traj.last().state.distance_inf(&fp) < 1e-13);
}
