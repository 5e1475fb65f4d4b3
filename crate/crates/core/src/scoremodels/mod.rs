//! Score providers `∇ log p_k(z)`.
//!
//! Models are evaluated at a noise level given by `ᾱ_k` rather than the raw
//! index, so one model serves any schedule. The oracle priors
//! ([`GaussianPrior`], [`GaussianMixturePrior`], [`ConditionalShiftPrior`])
//! have exact diffused marginals, so their scores, Hessians and
//! Hessian-vector products are analytic. [`FiniteDifference`] adds central
//! difference Hessians to any model that only provides a score.

mod conditional;
mod gaussian;
mod mixture;

use std::sync::atomic::{AtomicU64, Ordering};

pub use conditional::{ConditionalShiftPrior, Conditioned};
pub use gaussian::{Covariance, GaussianPrior};
pub use mixture::GaussianMixturePrior;

use crate::schedule::NoiseSchedule;
use crate::{Error, Matrix, Result, Vector};

/// Which optional operations a model implements analytically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub hessian: bool,
    pub hvp: bool,
    pub log_marginal: bool,
}

impl Capabilities {
    pub const ANALYTIC: Capabilities = Capabilities {
        hessian: true,
        hvp: true,
        log_marginal: true,
    };
    pub const SCORE_ONLY: Capabilities = Capabilities {
        hessian: false,
        hvp: false,
        log_marginal: false,
    };
}

/// A provider of `∇_z log p_k(z)` at noise level `ᾱ_k`.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, z: &Vector, alpha_bar: f64) -> Vector;

    fn capabilities(&self) -> Capabilities {
        Capabilities::SCORE_ONLY
    }

    fn hessian(&self, _z: &Vector, _alpha_bar: f64) -> Result<Matrix> {
        Err(Error::Capability("hessian"))
    }

    fn hvp(&self, _z: &Vector, _alpha_bar: f64, _v: &Vector) -> Result<Vector> {
        Err(Error::Capability("hvp"))
    }

    fn log_marginal(&self, _z: &Vector, _alpha_bar: f64) -> Result<f64> {
        Err(Error::Capability("log_marginal"))
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, z: &Vector, alpha_bar: f64) -> Vector {
        (**self).score(z, alpha_bar)
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn hessian(&self, z: &Vector, alpha_bar: f64) -> Result<Matrix> {
        (**self).hessian(z, alpha_bar)
    }
    fn hvp(&self, z: &Vector, alpha_bar: f64, v: &Vector) -> Result<Vector> {
        (**self).hvp(z, alpha_bar, v)
    }
    fn log_marginal(&self, z: &Vector, alpha_bar: f64) -> Result<f64> {
        (**self).log_marginal(z, alpha_bar)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, z: &Vector, alpha_bar: f64) -> Vector {
        (**self).score(z, alpha_bar)
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn hessian(&self, z: &Vector, alpha_bar: f64) -> Result<Matrix> {
        (**self).hessian(z, alpha_bar)
    }
    fn hvp(&self, z: &Vector, alpha_bar: f64, v: &Vector) -> Result<Vector> {
        (**self).hvp(z, alpha_bar, v)
    }
    fn log_marginal(&self, z: &Vector, alpha_bar: f64) -> Result<f64> {
        (**self).log_marginal(z, alpha_bar)
    }
}

/// Convenience: score at schedule index `k`.
pub fn score_at<M: ScoreModel + ?Sized>(
    model: &M,
    z: &Vector,
    schedule: &NoiseSchedule,
    k: usize,
) -> Result<Vector> {
    schedule.check_index(k)?;
    if z.len() != model.dim() {
        return Err(Error::dim("score input", model.dim(), z.len()));
    }
    Ok(model.score(z, schedule.alpha_bar(k)))
}

/// One Gaussian term of a closed-form clean-data posterior `p(X0 | X_k = z)`.
#[derive(Debug, Clone)]
pub struct PosteriorComponent {
    pub weight: f64,
    pub mean: Vector,
    pub cov: Matrix,
}

/// Oracle models whose clean-data posterior is a closed-form Gaussian mixture.
pub trait CleanPosterior: ScoreModel {
    fn clean_posterior(&self, z: &Vector, alpha_bar: f64) -> Vec<PosteriorComponent>;
}

/// Adds central-difference Hessians and Hessian-vector products to a model.
///
/// The step is applied along unit directions, so `hvp` costs two score calls
/// and `hessian` costs `2d`.
#[derive(Debug, Clone)]
pub struct FiniteDifference<M> {
    pub inner: M,
    pub step: f64,
}

impl<M> FiniteDifference<M> {
    pub const DEFAULT_STEP: f64 = 1e-5;

    pub fn new(inner: M) -> Self {
        Self {
            inner,
            step: Self::DEFAULT_STEP,
        }
    }
}

impl<M: ScoreModel> ScoreModel for FiniteDifference<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score(&self, z: &Vector, alpha_bar: f64) -> Vector {
        self.inner.score(z, alpha_bar)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            hessian: true,
            hvp: true,
            log_marginal: self.inner.capabilities().log_marginal,
        }
    }

    fn hessian(&self, z: &Vector, alpha_bar: f64) -> Result<Matrix> {
        let d = z.len();
        let h = self.step;
        let mut out = Matrix::zeros(d, d);
        for j in 0..d {
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let col = (self.inner.score(&zp, alpha_bar) - self.inner.score(&zm, alpha_bar)) / (2.0 * h);
            out.set_column(j, &col);
        }
        Ok((&out + out.transpose()) * 0.5)
    }

    fn hvp(&self, z: &Vector, alpha_bar: f64, v: &Vector) -> Result<Vector> {
        let norm = v.norm();
        if norm == 0.0 {
            return Ok(Vector::zeros(z.len()));
        }
        let dir = v / norm;
        let h = self.step;
        let plus = self.inner.score(&(z + &dir * h), alpha_bar);
        let minus = self.inner.score(&(z - &dir * h), alpha_bar);
        Ok((plus - minus) * (norm / (2.0 * h)))
    }

    fn log_marginal(&self, z: &Vector, alpha_bar: f64) -> Result<f64> {
        self.inner.log_marginal(z, alpha_bar)
    }
}

/// Instrumented wrapper counting forward score calls and Hessian-vector
/// products, independent of any bookkeeping done by the samplers.
#[derive(Debug)]
pub struct Counting<M> {
    pub inner: M,
    score_calls: AtomicU64,
    hvp_calls: AtomicU64,
}

impl<M> Counting<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            score_calls: AtomicU64::new(0),
            hvp_calls: AtomicU64::new(0),
        }
    }

    pub fn score_calls(&self) -> u64 {
        self.score_calls.load(Ordering::Relaxed)
    }

    pub fn hvp_calls(&self) -> u64 {
        self.hvp_calls.load(Ordering::Relaxed)
    }
}

impl<M: ScoreModel> ScoreModel for Counting<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn score(&self, z: &Vector, alpha_bar: f64) -> Vector {
        self.score_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(z, alpha_bar)
    }
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn hessian(&self, z: &Vector, alpha_bar: f64) -> Result<Matrix> {
        self.inner.hessian(z, alpha_bar)
    }
    fn hvp(&self, z: &Vector, alpha_bar: f64, v: &Vector) -> Result<Vector> {
        self.hvp_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.hvp(z, alpha_bar, v)
    }
    fn log_marginal(&self, z: &Vector, alpha_bar: f64) -> Result<f64> {
        self.inner.log_marginal(z, alpha_bar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    /// Score-only model: standard normal.
    struct Plain;
    impl ScoreModel for Plain {
        fn dim(&self) -> usize {
            3
        }
        fn score(&self, z: &Vector, _ab: f64) -> Vector {
            -z
        }
    }

    #[test]
    fn score_only_model_reports_capability_errors() {
        let z = Vector::zeros(3);
        assert!(matches!(Plain.hessian(&z, 0.5), Err(Error::Capability(_))));
        assert!(matches!(Plain.hvp(&z, 0.5, &z), Err(Error::Capability(_))));
        let fd = FiniteDifference::new(Plain);
        let h = fd.hessian(&z, 0.5).unwrap();
        assert!((h + Matrix::identity(3, 3)).amax() < 1e-9);
    }

    #[test]
    fn finite_difference_matches_mixture_hessian() {
        let mut rng = rng_from_seed(3);
        let gmm = GaussianMixturePrior::new(
            vec![0.4, 0.6],
            vec![
                Vector::from_vec(vec![1.0, 0.0]),
                Vector::from_vec(vec![-1.0, 1.0]),
            ],
            vec![Covariance::Scalar(0.2), Covariance::Diagonal(Vector::from_vec(vec![0.3, 0.5]))],
        )
        .unwrap();
        let fd = FiniteDifference::new(gmm.clone());
        for _ in 0..20 {
            let z = crate::standard_normal(2, &mut rng);
            let ab = 0.2 + 0.7 * rand::Rng::random::<f64>(&mut rng);
            let exact = gmm.hessian(&z, ab).unwrap();
            let approx = fd.hessian(&z, ab).unwrap();
            assert!((&exact - &approx).amax() <= 1e-5 * exact.amax().max(1.0));
        }
    }

    #[test]
    fn counting_wrapper_counts() {
        let c = Counting::new(GaussianPrior::standard(2));
        let z = Vector::zeros(2);
        c.score(&z, 0.5);
        c.score(&z, 0.5);
        c.hvp(&z, 0.5, &z).unwrap();
        assert_eq!(c.score_calls(), 2);
        assert_eq!(c.hvp_calls(), 1);
    }

    #[test]
    fn score_at_checks_index_and_dimension() {
        let s = NoiseSchedule::default_linear();
        let p = GaussianPrior::standard(2);
        assert!(score_at(&p, &Vector::zeros(2), &s, 51).is_err());
        assert!(score_at(&p, &Vector::zeros(3), &s, 5).is_err());
    }
}
