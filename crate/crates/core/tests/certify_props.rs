use proptest::prelude::*;
use switchcert::certify::{check_0guas, check_iiss, fit_zero_guas_beta, generate_ensemble, CheckOptions, EnsembleSpec, IissCertificate, InputFamily};
use switchcert::comparison::MonotoneFn;
use switchcert::integrator::SimOptions;
use switchcert::signals::SignalSetSpec;
use switchcert::systems::{make_inverter, InverterParams};

fn dwell() -> SignalSetSpec {
    SignalSetSpec::DwellTime { d_min: 0.1, d_max: 1.0, modes: vec![1, 2] }
}

fn zero_spec(seed: u64) -> EnsembleSpec {
    EnsembleSpec { seed, count: 6, radius_min: 0.1, radius_max: 5.0, horizon: 4.0, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    // Enlarging the bound never turns a pass into a violation, and shrinking
    // it far enough always yields a witness whose replay reproduces the LHS.
    #[test]
    fn scaling_beta_is_monotone_and_witnesses_replay(seed in 0u64..1000, up in 1.0f64..4.0) {
        let sys = make_inverter(InverterParams::default()).unwrap();
        let sim = SimOptions::default();
        let ens = generate_ensemble(&sys, &dwell(), &zero_spec(seed), &sim).unwrap();
        let opts = CheckOptions::default();
        let beta = fit_zero_guas_beta(&ens, 1.5).unwrap();
        prop_assert!(check_0guas(&ens, &beta, &opts).unwrap().holds());
        prop_assert!(check_0guas(&ens, &beta.scaled(up).unwrap(), &opts).unwrap().holds());

        let report = check_0guas(&ens, &beta.scaled(0.05).unwrap(), &opts).unwrap();
        prop_assert!(report.violated());
        let w = report.witness.unwrap();
        prop_assert!(w.lhs > w.rhs);
        let replay = w.replay(&sys, &sim).unwrap();
        let k = replay.times().iter().position(|t| (t - w.t).abs() < 1e-9);
        prop_assert!(k.is_some(), "replay grid misses t = {}", w.t);
        prop_assert!((replay.state_norm(k.unwrap()) - w.lhs).abs() <= 1e-9 * (1.0 + w.lhs));
    }

    // With zero input the energy term vanishes, so an iISS certificate
    // reduces to the 0-GUAS bound with the same beta.
    #[test]
    fn iiss_on_zero_input_matches_0guas(seed in 0u64..1000, c in 0.01f64..0.5) {
        let sys = make_inverter(InverterParams::default()).unwrap();
        let sim = SimOptions::default();
        let ens = generate_ensemble(&sys, &dwell(), &zero_spec(seed), &sim).unwrap();
        let opts = CheckOptions::default();
        let beta = fit_zero_guas_beta(&ens, 1.5).unwrap().scaled(c).unwrap();
        let cert = IissCertificate { beta: beta.clone(), rho: MonotoneFn::linear(1.0).unwrap(), chi: MonotoneFn::identity() };
        let a = check_iiss(&ens, &cert, &opts).unwrap();
        let b = check_0guas(&ens, &beta, &opts).unwrap();
        prop_assert_eq!(a.verdict, b.verdict);
        prop_assert_eq!(a.worst_run, b.worst_run);
        prop_assert!((a.worst_margin.unwrap() - b.worst_margin.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn nonzero_input_is_rejected_by_0guas() {
    let sys = make_inverter(InverterParams::default()).unwrap();
    let sim = SimOptions::default();
    let beta = fit_zero_guas_beta(&generate_ensemble(&sys, &dwell(), &zero_spec(3), &sim).unwrap(), 1.5).unwrap();
    let spec = EnsembleSpec { input: InputFamily::Constant { value: vec![1.0] }, ..zero_spec(3) };
    let ens = generate_ensemble(&sys, &dwell(), &spec, &sim).unwrap();
    assert!(check_0guas(&ens, &beta, &CheckOptions::default()).is_err());
}
