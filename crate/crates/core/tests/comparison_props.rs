use proptest::prelude::*;
use switchcert::comparison::{fit_k_envelope, fit_kl_envelope, EnvelopeMode, GainClass, KlFitOptions, MonotoneFn};

fn monotone() -> impl Strategy<Value = MonotoneFn> {
    (
        prop::collection::vec((1e-3f64..3.0, 0.0f64..5.0), 1..12),
        1e-3f64..4.0,
        any::<bool>(),
    )
        .prop_map(|(steps, tail, kinf)| {
            let mut knots = vec![0.0];
            let mut values = vec![0.0];
            for (dk, dv) in steps {
                knots.push(knots.last().unwrap() + dk);
                values.push(values.last().unwrap() + dv);
            }
            let class = if kinf { GainClass::KInf } else { GainClass::K };
            MonotoneFn::new_repaired(knots, values, tail, class).unwrap()
        })
}

proptest! {
    #[test]
    fn strictly_increasing_and_zero_at_zero(f in monotone(), a in 0.0f64..40.0, b in 0.0f64..40.0) {
        prop_assert_eq!(f.eval(0.0).unwrap(), 0.0);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assume!(lo < hi);
        prop_assert!(f.at(lo) < f.at(hi));
    }

    #[test]
    fn inverse_round_trips_at_knots(f in monotone()) {
        let inv = f.inverse().unwrap();
        for &s in f.knots() {
            prop_assert!((inv.at(f.at(s)) - s).abs() <= 1e-9, "s = {}", s);
        }
    }

    #[test]
    fn pointwise_max_is_exact(f in monotone(), g in monotone(), pts in prop::collection::vec(0.0f64..60.0, 50)) {
        let m = MonotoneFn::pointwise_max(&f, &g).unwrap();
        for s in pts {
            let want = f.at(s).max(g.at(s));
            prop_assert!((m.at(s) - want).abs() <= 1e-12 * (1.0 + want));
        }
    }

    #[test]
    fn compose_matches_nested_evaluation(f in monotone(), g in monotone(), pts in prop::collection::vec(0.0f64..20.0, 30)) {
        let h = MonotoneFn::compose(&f, &g).unwrap();
        for s in pts {
            let want = f.at(g.at(s));
            prop_assert!((h.at(s) - want).abs() <= 1e-9 * (1.0 + want));
        }
    }

    #[test]
    fn json_round_trip(f in monotone()) {
        let text = serde_json::to_string(&f).unwrap();
        prop_assert_eq!(serde_json::from_str::<MonotoneFn>(&text).unwrap(), f);
    }

    #[test]
    fn upper_envelope_is_minimal_majorant(pts in prop::collection::vec((1e-3f64..50.0, 0.0f64..10.0), 1..40)) {
        let f = fit_k_envelope(&pts, EnvelopeMode::UpperMajorant).unwrap();
        for &(s, y) in &pts {
            let running = pts.iter().filter(|p| p.0 <= s).map(|p| p.1).fold(0.0, f64::max);
            prop_assert!(f.at(s) >= y);
            prop_assert!(f.at(s) - running <= 1e-9 * (1.0 + running), "{} vs {}", f.at(s), running);
        }
    }

    #[test]
    fn kl_envelope_shape(samples in prop::collection::vec((1e-2f64..10.0, 0.0f64..20.0, 0.0f64..5.0), 3..60),
                         probes in prop::collection::vec((0.0f64..15.0, 0.0f64..30.0, 0.0f64..1.0, 0.0f64..3.0), 20)) {
        let beta = fit_kl_envelope(&samples, KlFitOptions::default()).unwrap();
        for &(r, t, y) in &samples {
            prop_assert!(beta.at(r, t) >= y - 1e-12);
        }
        for (r, t, dr, dt) in probes {
            prop_assert!(beta.at(r + dr, t) >= beta.at(r, t));
            prop_assert!(beta.at(r, t + dt) <= beta.at(r, t));
        }
    }
}
