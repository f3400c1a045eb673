use crabloop::tof::{bimodal_fit, synth_profile, uniform_grid, BimodalModel, DensityProfile};
use proptest::prelude::*;

/// Condensate plus thermal cloud with thermal fraction `tf` and unit peak TF density.
fn model_with_fraction(tf: f64) -> BimodalModel {
    let (radius, sigma_t) = (2.0, 4.0);
    let n_c = radius * 16.0 / 15.0;
    let n_t = n_c * tf / (1.0 - tf);
    BimodalModel { n_c0: 1.0, radius, n_t0: n_t / (sigma_t * (2.0 * std::f64::consts::PI).sqrt()), sigma_t, x0: 0.3 }
}

fn peak(p: &DensityProfile) -> f64 {
    p.n.iter().cloned().fold(0.0, f64::max)
}

#[test]
fn thermal_fraction_recovered_at_snr_20() {
    let m = model_with_fraction(0.30);
    assert!((m.thermal_fraction() - 0.30).abs() < 1e-12);
    let grid = uniform_grid(-12.0, 12.0, 2048);
    let clean_peak = m.eval(m.x0);
    let sigma = clean_peak / 20.0;
    let mut errors = Vec::new();
    for seed in 0..50 {
        let p = synth_profile(&m, &grid, sigma, seed).unwrap();
        let fit = bimodal_fit(&p).unwrap();
        errors.push((fit.thermal_fraction - 0.30).abs());
    }
    let within = errors.iter().filter(|e| **e <= 0.02).count();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    println!("within +-0.02: {within}/50, worst {worst:.4}");
    assert!(within >= 45);
}

#[test]
fn csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.csv");
    let p = synth_profile(&model_with_fraction(0.2), &uniform_grid(-10.0, 10.0, 128), 0.01, 3).unwrap();
    p.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let back = DensityProfile::read_csv(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back.n, p.n);
    let a = bimodal_fit(&DensityProfile { noise_sigma: 0.0, ..p }).unwrap();
    let b = bimodal_fit(&back).unwrap();
    assert_eq!(a.thermal_fraction, b.thermal_fraction);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fraction_invariant_under_density_scaling(c in 0.01f64..100.0, seed in 0u64..1000) {
        let grid = uniform_grid(-15.0, 15.0, 200);
        let p = synth_profile(&model_with_fraction(0.3), &grid, 0.02, seed).unwrap();
        let scaled = DensityProfile::new(p.x.clone(), p.n.iter().map(|n| n * c).collect(), p.noise_sigma * c).unwrap();
        let a = bimodal_fit(&p).unwrap().thermal_fraction;
        let b = bimodal_fit(&scaled).unwrap().thermal_fraction;
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        prop_assert!(peak(&scaled) > 0.0);
    }

    #[test]
    fn fraction_invariant_under_translation(shift in -50.0f64..50.0, seed in 0u64..1000) {
        let grid = uniform_grid(-15.0, 15.0, 200);
        let p = synth_profile(&model_with_fraction(0.3), &grid, 0.02, seed).unwrap();
        let moved = DensityProfile::new(p.x.iter().map(|x| x + shift).collect(), p.n.clone(), p.noise_sigma).unwrap();
        let a = bimodal_fit(&p).unwrap();
        let b = bimodal_fit(&moved).unwrap();
        prop_assert!((a.thermal_fraction - b.thermal_fraction).abs() <= 1e-9,
            "{} vs {}", a.thermal_fraction, b.thermal_fraction);
        prop_assert!((b.model.x0 - a.model.x0 - shift).abs() <= 1e-6);
    }
}
