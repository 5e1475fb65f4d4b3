//! Frozen values computed independently in extended precision.

use stsl_core::metrics::{ssim, ImagePair, SsimParams};
use stsl_core::operators::{LinearOperator, MeasurementTask};
use stsl_core::schedule::NoiseSchedule;
use stsl_core::scoremodels::GaussianPrior;
use stsl_core::tweedie::jensen_gap;
use stsl_core::{rng_from_seed, Vector};

#[test]
fn default_schedule_final_alpha_bar() {
    let s = NoiseSchedule::default_linear();
    let want = 0.004_616_111_011_266_995_8;
    assert!((s.alpha_bar(50) - want).abs() <= 1e-12 * want);
}

#[test]
fn ssim_of_sinusoid_pair() {
    let n = 16;
    let reference = Vector::from_fn(n * n, |i, _| 0.5 + 0.4 * (0.37 * i as f64).sin());
    let candidate = Vector::from_fn(n * n, |i, _| reference[i] + 0.1 * (0.91 * i as f64).cos());
    let params = SsimParams { window: 8, k1: 0.01, k2: 0.03 };
    let value = ssim(&ImagePair::new(&reference, &candidate, n, n, 1.0).unwrap(), params).unwrap();
    assert!((value - 0.960_611_861_920_563_9).abs() <= 1e-12, "{value}");
}

/// N(0, 1) prior, ᾱ = 0.5, σ_y = 0.5, A = 1, z = 0.7, y = 0.3.
#[test]
fn scalar_jensen_gap_and_bound() {
    let task = MeasurementTask::new(LinearOperator::identity(1), 0.5, Vector::from_vec(vec![0.3])).unwrap();
    let prior = GaussianPrior::standard(1);
    let z = Vector::from_vec(vec![0.7]);
    let jg = jensen_gap(&task, &prior, &z, 0.5, 10, &mut rng_from_seed(0)).unwrap();
    assert!((jg.gap - 0.290_339_048_364_497_37).abs() <= 1e-13, "{}", jg.gap);
    assert!((jg.m1 - 0.564_189_583_547_756_29).abs() <= 1e-14, "{}", jg.m1);
    assert!((jg.bound - 0.060_922_281_824_832_845).abs() <= 1e-14, "{}", jg.bound);
    assert_eq!(jg.m1_standard_error, 0.0);
}
