//! Property tests for invariants that hold for every input.

use proptest::prelude::*;
use stsl_core::editing::{edit_step, f_predict, null_optimize, NullOptConfig};
use stsl_core::io::{read_f64, write_f64};
use stsl_core::metrics::{psnr_from_mse, sliced_wasserstein, ssim, ImagePair, SsimParams};
use stsl_core::operators::{Kernel, LatentCodec, LinearOperator, MeasurementTask};
use stsl_core::schedule::{NoiseSchedule, ScheduleFamily};
use stsl_core::scoremodels::{ConditionalShiftPrior, Covariance, GaussianMixturePrior, GaussianPrior};
use stsl_core::tweedie::{posterior_mean, SurrogateTerms};
use stsl_core::{rng_from_seed, standard_normal, Matrix, Vector};

fn family() -> impl Strategy<Value = ScheduleFamily> {
    prop_oneof![
        (1e-5f64..0.05, 0.05f64..0.5).prop_map(|(beta_start, beta_end)| ScheduleFamily::LinearBeta { beta_start, beta_end }),
        (1e-4f64..0.05).prop_map(|offset| ScheduleFamily::Cosine { offset }),
        (0.5f64..1.0).prop_map(|alpha| ScheduleFamily::ConstantAlpha { alpha }),
    ]
}

fn mixture(seed: u64, d: usize) -> GaussianMixturePrior {
    let mut rng = rng_from_seed(seed);
    GaussianMixturePrior::new(
        vec![0.4, 0.6],
        vec![standard_normal(d, &mut rng), standard_normal(d, &mut rng)],
        vec![Covariance::Scalar(0.3), Covariance::Diagonal(Vector::from_element(d, 0.6))],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_starts_at_one_and_never_rises(steps in 1usize..200, fam in family()) {
        let s = NoiseSchedule::new(steps, fam).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for k in 1..=steps {
            prop_assert!(s.alpha_bar(k) <= s.alpha_bar(k - 1));
            prop_assert!(s.alpha_bar(k) > 0.0);
        }
    }

    #[test]
    fn operators_are_adjoint_and_linear(seed in any::<u64>(), half in 2usize..6, ksize in 0usize..3, a in -3.0f64..3.0) {
        let mut rng = rng_from_seed(seed);
        let side = 2 * half;
        let d = side * side;
        let kside = 2 * ksize + 1;
        let kernel = Kernel::new(kside, standard_normal(kside * kside, &mut rng).iter().cloned().collect()).unwrap();
        let ops = [
            LinearOperator::random_mask(d, 0.4, &mut rng).unwrap(),
            LinearOperator::convolution(side, side, kernel),
            LinearOperator::downsample(side, side, 2).unwrap(),
        ];
        for op in &ops {
            let x = standard_normal(op.input_dim(), &mut rng);
            let x2 = standard_normal(op.input_dim(), &mut rng);
            let y = standard_normal(op.output_dim(), &mut rng);
            let lhs = op.apply(&x).unwrap().dot(&y);
            let rhs = x.dot(&op.adjoint(&y).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
            let combined = op.apply(&(&x * a + &x2)).unwrap();
            let separate = op.apply(&x).unwrap() * a + op.apply(&x2).unwrap();
            prop_assert!((combined - separate).amax() <= 1e-10 * (1.0 + a.abs()) * 10.0);
        }
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-8f64..1.0, b in 1e-8f64..1.0, max in 0.5f64..4.0) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(psnr_from_mse(lo, max) > psnr_from_mse(hi, max));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), side in 8usize..14) {
        let mut rng = rng_from_seed(seed);
        let x = standard_normal(side * side, &mut rng);
        let y = &x * 0.5 + standard_normal(side * side, &mut rng) * 0.5;
        let params = SsimParams { window: 7, k1: 0.01, k2: 0.03 };
        let xy = ssim(&ImagePair::new(&x, &y, side, side, 2.0).unwrap(), params).unwrap();
        let yx = ssim(&ImagePair::new(&y, &x, side, side, 2.0).unwrap(), params).unwrap();
        prop_assert!((xy - yx).abs() <= 1e-14);
        prop_assert!((-1.0..=1.0).contains(&xy));
    }

    #[test]
    fn sliced_wasserstein_is_symmetric(seed in any::<u64>(), n in 2usize..40, m in 2usize..40) {
        let mut rng = rng_from_seed(seed);
        let a: Vec<Vector> = (0..n).map(|_| standard_normal(3, &mut rng)).collect();
        let b: Vec<Vector> = (0..m).map(|_| standard_normal(3, &mut rng).add_scalar(0.3)).collect();
        let ab = sliced_wasserstein(&a, &b, 16, &mut rng_from_seed(seed ^ 1)).unwrap();
        let ba = sliced_wasserstein(&b, &a, 16, &mut rng_from_seed(seed ^ 1)).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn posterior_mean_matches_conditioning(seed in any::<u64>(), d in 1usize..5, k in 1usize..=50) {
        let mut rng = rng_from_seed(seed);
        let mu = standard_normal(d, &mut rng);
        let var = Vector::from_fn(d, |i, _| 0.2 + i as f64 * 0.7);
        let prior = GaussianPrior::new(mu.clone(), Covariance::Diagonal(var.clone())).unwrap();
        let ab = NoiseSchedule::default_linear().alpha_bar(k);
        let z = standard_normal(d, &mut rng);
        let got = posterior_mean(&prior, &z, ab);
        for i in 0..d {
            // Scalar conditioning: gain = √ᾱ v / (ᾱ v + 1 - ᾱ).
            let gain = ab.sqrt() * var[i] / (ab * var[i] + 1.0 - ab);
            let want = mu[i] + gain * (z[i] - ab.sqrt() * mu[i]);
            prop_assert!((got[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn null_optimisation_residuals_never_rise(seed in any::<u64>()) {
        let sched = NoiseSchedule::new(8, ScheduleFamily::default()).unwrap();
        let mut rng = rng_from_seed(seed);
        let model = ConditionalShiftPrior::new(mixture(seed, 3), Matrix::from_iterator(3, 2, standard_normal(6, &mut rng).iter().cloned())).unwrap();
        let traj: Vec<Vector> = (0..=8).map(|_| standard_normal(3, &mut rng)).collect();
        let fit = null_optimize(&traj, &model, &sched, &NullOptConfig::default()).unwrap();
        for history in &fit.residuals {
            prop_assert!(history.windows(2).all(|w| w[1] <= w[0]));
        }
        // A trajectory generated with the null embedding is already fitted.
        let mut null_traj = vec![traj[0].clone()];
        for t in 0..8 {
            let next = f_predict(&model, &null_traj[t], 8 - t, &Vector::zeros(2), &sched).unwrap();
            null_traj.push(next);
        }
        let fit = null_optimize(&null_traj, &model, &sched, &NullOptConfig::default()).unwrap();
        prop_assert!(fit.residuals.iter().all(|h| h.iter().all(|&r| r == 0.0)));
    }

    #[test]
    fn zero_weight_edit_step_is_identity(seed in any::<u64>(), k in 1usize..=50) {
        let sched = NoiseSchedule::default_linear();
        let mut rng = rng_from_seed(seed);
        let model = ConditionalShiftPrior::new(mixture(seed, 3), Matrix::identity(3, 3)).unwrap();
        let task = MeasurementTask::simulate(LinearOperator::identity(3), 0.1, &standard_normal(3, &mut rng), &mut rng).unwrap();
        let z_next = standard_normal(3, &mut rng);
        let state = standard_normal(3, &mut rng);
        let zero = SurrogateTerms { lambda: 0.0, eta: 0.0, nu: 0.0, ..SurrogateTerms::default() };
        let phi = standard_normal(3, &mut rng);
        let out = edit_step(&z_next, &state, &task, &model, &phi, &LatentCodec::identity(3), &sched, k, zero, 2, &mut rng).unwrap();
        prop_assert_eq!(out, z_next);
    }

    #[test]
    fn raw_float_files_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let m = Matrix::from_iterator(rows, cols, standard_normal(rows * cols, &mut rng).iter().cloned());
        let mut buf = Vec::new();
        write_f64(&mut buf, &m).unwrap();
        prop_assert!(buf.starts_with(b"STSLF64"));
        prop_assert_eq!(read_f64(&mut buf.as_slice()).unwrap(), m);
    }
}
