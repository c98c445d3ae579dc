use nalgebra::DMatrix;
use proptest::prelude::*;
use switchcert::comparison::MonotoneFn;
use switchcert::falsify::{find_destabilizing, unroll_policy, PolicySpec, SwitchPolicy};
use switchcert::integrator::{simulate, simulate_with_breaks, SimOptions, Trajectory};
use switchcert::signals::{concatenate, sample_signal_set, InputSignal, SignalSetSpec, SwitchingSignal};
use switchcert::systems::{inverter_matrices, make_inverter, make_switched_linear, prop4_pair, InverterParams, LoadProfile};

fn params() -> impl Strategy<Value = InverterParams> {
    (0.2f64..3.0, 0.2f64..3.0, 0.2f64..3.0, 0.2f64..3.0, any::<bool>()).prop_map(|(l1, l2, c1, c2, sinus)| InverterParams {
        l1,
        l2,
        c1,
        c2,
        load: if sinus { LoadProfile::Sinusoidal } else { LoadProfile::Constant { a: 1.0, r: 0.8 } },
        ..Default::default()
    })
}

fn dwell() -> SignalSetSpec {
    SignalSetSpec::DwellTime { d_min: 0.1, d_max: 1.0, modes: vec![1, 2] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn origin_is_an_equilibrium(p in params(), t in -50.0f64..50.0, mode in 1usize..3) {
        let inv = make_inverter(p).unwrap();
        prop_assert_eq!(inv.eval(t, &[0.0; 4], &[0.0], mode), vec![0.0; 4]);
        prop_assert_eq!(prop4_pair().eval(t, &[0.0; 2], &[0.0], mode), vec![0.0; 2]);
    }

    #[test]
    fn inverter_linear_part_is_skew_in_p(p in params(), x in prop::collection::vec(-10.0f64..10.0, 4)) {
        let (a, _) = inverter_matrices(&p);
        let d = p.p_diag();
        for ai in &a {
            let ax = ai * DMatrix::from_column_slice(4, 1, &x);
            let q: f64 = (0..4).map(|i| x[i] * d[i] * ax[i]).sum();
            prop_assert!(q.abs() <= 1e-12 * (1.0 + x.iter().map(|v| v * v).sum::<f64>()));
        }
    }

    #[test]
    fn inverter_load_dissipates(p in params(), t in 0.0f64..100.0, x in prop::collection::vec(-10.0f64..10.0, 4), mode in 1usize..3) {
        prop_assert!(p.dissipation(t, &x, mode) >= 0.0);
    }

    #[test]
    fn sampled_vector_field_respects_declared_bounds(p in params(), t in 0.0f64..20.0, x in prop::collection::vec(-10.0f64..10.0, 4), u in -20.0f64..20.0, mode in 1usize..3) {
        let sys = make_inverter(p).unwrap();
        let bounds = sys.bounds();
        let (n, gamma) = (bounds.n.as_ref().unwrap(), bounds.gamma.as_ref().unwrap());
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let f = sys.eval(t, &x, &[u], mode);
        let fn_ = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(fn_ <= n.at(xn) * (1.0 + gamma.at(u.abs())) * (1.0 + 1e-12));
    }

    #[test]
    fn no_step_straddles_a_switch_or_input_break(seed in any::<u64>(), holds in prop::collection::vec(0.05f64..0.7, 1..6)) {
        let sys = make_inverter(InverterParams::default()).unwrap();
        let sigma = sample_signal_set(&dwell(), 3.0, seed).unwrap();
        let mut times = Vec::new();
        let mut t = 0.0;
        for h in holds {
            t += h;
            times.push(t);
        }
        let values = (0..=times.len()).map(|k| vec![k as f64 - 1.0]).collect();
        let u = InputSignal::piecewise_constant(times.clone(), values).unwrap();
        let traj = simulate(&sys, &[1.0, 0.0, 0.0, -1.0], 0.0, &u, &sigma, 3.0, &SimOptions::default()).unwrap();
        for w in traj.times().windows(2) {
            for &s in sigma.switch_times().iter().chain(&times) {
                prop_assert!(!(w[0] < s && s < w[1]), "break {} inside ({}, {})", s, w[0], w[1]);
            }
        }
    }

    #[test]
    fn concatenated_run_restarts_cleanly(s1 in any::<u64>(), s2 in any::<u64>(), cut in 0.3f64..2.7, x0 in prop::collection::vec(-2.0f64..2.0, 4)) {
        let sys = make_inverter(InverterParams::default()).unwrap();
        let sim = SimOptions::default();
        let u = InputSignal::zero(1);
        let (a, b) = (sample_signal_set(&dwell(), 3.0, s1).unwrap(), sample_signal_set(&dwell(), 3.0, s2).unwrap());
        let joined = concatenate(&[a.clone(), b.clone()], &[cut]).unwrap();
        let full = simulate_with_breaks(&sys, &x0, 0.0, &u, &joined, 3.0, &sim, &[cut]).unwrap();
        let head = simulate(&sys, &x0, 0.0, &u, &a, cut, &sim).unwrap();
        let k = full.times().iter().position(|&t| t == cut).unwrap();
        prop_assert_eq!(k + 1, head.len());
        for i in 0..head.len() {
            prop_assert_eq!(full.state(i), head.state(i));
        }
        let tail = simulate(&sys, full.state(k), cut, &u, &b, 3.0, &sim).unwrap();
        for (p, q) in full.final_state().iter().zip(tail.final_state()) {
            prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn trajectory_csv_round_trip(seed in any::<u64>(), x0 in prop::collection::vec(-3.0f64..3.0, 4)) {
        let sys = make_inverter(InverterParams::default()).unwrap();
        let sigma = sample_signal_set(&dwell(), 0.5, seed).unwrap();
        let traj = simulate(&sys, &x0, 0.0, &InputSignal::zero(1), &sigma, 0.5, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.times(), traj.times());
        for k in 0..traj.len() {
            prop_assert_eq!(back.state(k), traj.state(k));
            prop_assert_eq!(back.mode(k), traj.mode(k));
        }
    }

    #[test]
    fn unrolled_signals_are_valid(seed in any::<u64>(), th in 0.0f64..6.3, guard in 1e-3f64..0.2, rule in prop::array::uniform4(1usize..3)) {
        let sys = prop4_pair();
        let policies = [
            SwitchPolicy::QuadrantRule { table: rule },
            SwitchPolicy::GrowthGreedy { weight: vec![1.0, 10.0] },
            SwitchPolicy::RandomDwell { d_min: 0.05, d_max: 0.5, seed },
        ];
        for policy in policies {
            let spec = PolicySpec { policy, guard };
            let un = unroll_policy(&sys, &spec, &[th.cos(), th.sin()], 0.0, 2.0, &InputSignal::zero(1), &SimOptions::default()).unwrap();
            let rebuilt = SwitchingSignal::new(un.sigma.switch_times().to_vec(), un.sigma.modes().to_vec(), un.sigma.horizon());
            prop_assert!(rebuilt.is_ok());
            for w in un.sigma.switch_times().windows(2) {
                prop_assert!(w[1] - w[0] >= guard * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn normal_hurwitz_modes_never_grow(d1 in 0.1f64..3.0, d2 in 0.1f64..3.0, w in -5.0f64..5.0, target in 1.05f64..3.0) {
        // -d I + skew is normal, so ‖e^{At}‖ ≤ 1 for each mode and any switching.
        let a1 = DMatrix::from_row_slice(2, 2, &[-d1, w, -w, -d1]);
        let a2 = DMatrix::from_row_slice(2, 2, &[-d2, 0.0, 0.0, -d2]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sys = make_switched_linear(vec![a1, a2], vec![b.clone(), b]).unwrap();
        let policies = switchcert::falsify::default_policy_family(&sys);
        let grid = switchcert::falsify::unit_sphere_grid(2, 4, 1);
        prop_assert!(find_destabilizing(&sys, &policies, &grid, target, 2.0, &SimOptions::default()).unwrap().is_none());
    }
}

#[test]
fn identity_gain_is_its_own_inverse() {
    let id = MonotoneFn::identity();
    assert_eq!(id.inverse().unwrap().at(3.5), 3.5);
}
