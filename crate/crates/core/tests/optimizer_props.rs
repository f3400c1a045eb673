use crabloop::optimizer::{minimize, OptimizerOptions};
use proptest::prelude::*;

const Q: f64 = 1024.0;

/// Shifted bowl rounded to multiples of 1/1024, so adding a multiple of
/// 1/1024 of moderate size is exact.
fn quantized_bowl(x: &[f64], c: (f64, f64), shift: f64) -> f64 {
    let v = 3.0 * (x[0] - c.0).powi(2) + (x[1] - c.1).powi(2) + 0.5 * x[0] * x[1];
    (v.min(4096.0) * Q).round() / Q + shift
}

fn options(max_evals: usize, restarts: usize, seed: u64) -> OptimizerOptions {
    OptimizerOptions {
        max_evals,
        f_tol: 1.0 / Q,
        x_tol: 1.0 / 256.0,
        restarts,
        init_scale: vec![0.5, 0.25],
        reeval_best: true,
        randomize_init: false,
        rng_seed: seed,
    }
}

fn centre() -> impl Strategy<Value = (f64, f64)> {
    (-16i32..16, -16i32..16).prop_map(|(a, b)| (a as f64 / 8.0, b as f64 / 8.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identical_inputs_give_identical_runs(c in centre(), seed in any::<u64>(), restarts in 0usize..3) {
        let o = options(60, restarts, seed);
        let a = minimize(|x| quantized_bowl(x, c, 0.0), &[0.0, 0.0], &o).unwrap();
        let b = minimize(|x| quantized_bowl(x, c, 0.0), &[0.0, 0.0], &o).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn moves_are_invariant_under_constant_shift(c in centre(), k in -4096i32..4096, seed in any::<u64>()) {
        let shift = k as f64 / Q;
        let o = options(60, 1, seed);
        let a = minimize(|x| quantized_bowl(x, c, 0.0), &[0.0, 0.0], &o).unwrap();
        let b = minimize(|x| quantized_bowl(x, c, shift), &[0.0, 0.0], &o).unwrap();
        prop_assert_eq!(&a.moves, &b.moves);
        prop_assert_eq!(&a.best_params, &b.best_params);
        prop_assert_eq!(a.best_fom + shift, b.best_fom);
        let pa: Vec<_> = a.history.iter().map(|e| &e.params).collect();
        let pb: Vec<_> = b.history.iter().map(|e| &e.params).collect();
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn budget_and_incumbent(c in centre(), max_evals in 4usize..120, restarts in 0usize..4, seed in any::<u64>()) {
        let o = options(max_evals, restarts, seed);
        let r = minimize(|x| quantized_bowl(x, c, 0.0), &[0.0, 0.0], &o).unwrap();
        prop_assert!(r.eval_count() <= max_evals);
        prop_assert!(r.restarts_used <= restarts);
        prop_assert_eq!(r.best_fom, r.history[r.best_index].fom);
        let live_min = r.history.iter().filter(|e| !e.superseded).map(|e| e.fom).fold(f64::INFINITY, f64::min);
        prop_assert!(r.best_fom <= live_min + o.f_tol);
        // The running incumbent never gets worse.
        let mut best = f64::INFINITY;
        for e in &r.history {
            let next = best.min(e.fom);
            prop_assert!(next <= best);
            best = next;
        }
        prop_assert!(best <= quantized_bowl(&[0.0, 0.0], c, 0.0));
    }
}
