use crabloop::waveform::{sample_waveform, ControlField, CrabCorrection, ExponentialRamp, FieldError, FrequencyPolicy};
use proptest::prelude::*;

fn ramp() -> impl Strategy<Value = ExponentialRamp> {
    (1.0..40.0f64, 1.0..200.0f64, prop_oneof![0.3..50.0f64, -50.0..-0.3f64])
        .prop_map(|(s, d, tau)| ExponentialRamp::new(s, d, tau).unwrap())
}

fn correction(delta_t: f64) -> impl Strategy<Value = CrabCorrection> {
    (1usize..5, any::<u64>(), proptest::collection::vec(-1.0..1.0f64, 8)).prop_map(move |(n_f, seed, c)| {
        let freqs = FrequencyPolicy::Randomized { seed }.frequencies(n_f, delta_t);
        CrabCorrection::from_flat(&c[..2 * n_f], freqs).unwrap()
    })
}

fn field() -> impl Strategy<Value = ControlField> {
    ramp().prop_flat_map(|base| correction(base.delta_t).prop_map(move |c| ControlField::corrected(base, c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn corrected_field_keeps_endpoints(f in field()) {
        let c = f.correction.as_ref().unwrap();
        match f.eval(f.delta_t()) {
            Ok(end) => {
                prop_assert_eq!(end, f.base.s_max);
                prop_assert_eq!(c.eval(f.delta_t(), f.delta_t()).unwrap(), 1.0);
                prop_assert_eq!(f.eval(0.0).unwrap(), 0.0);
            }
            Err(FieldError::Singular { denominator }) => prop_assert!(denominator.abs() < 1e-6),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn sampled_waveform_matches_field(f in field(), n in 2usize..300) {
        if let Ok(w) = sample_waveform(&f, n) {
            prop_assert_eq!(w.len(), n);
            prop_assert_eq!(w.first(), 0.0);
            prop_assert_eq!(w.last(), f.base.s_max);
            prop_assert!((w.duration() - f.delta_t()).abs() <= 1e-12 * f.delta_t());
        }
    }

    #[test]
    fn bare_ramp_is_monotone_and_bounded(r in ramp()) {
        let mut prev = 0.0;
        for i in 0..=200 {
            let t = if i == 200 { r.delta_t } else { r.delta_t * i as f64 / 200.0 };
            let s = r.eval(t).unwrap();
            prop_assert!(s >= prev - 1e-12 * r.s_max && s <= r.s_max * (1.0 + 1e-12));
            prev = s;
        }
    }
}
