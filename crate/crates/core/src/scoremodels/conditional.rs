use serde::{Deserialize, Serialize};

use super::mixture::GaussianMixturePrior;
use super::{Capabilities, ScoreModel};
use crate::{Error, Matrix, Result, Vector};

/// Embedding-conditioned mixture: every component mean of `base` is
/// translated by `W φ` before diffusion. `φ = 0` is the null embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalShiftPrior {
    pub base: GaussianMixturePrior,
    /// `d × h` map from embedding space to data space.
    pub shift_map: Matrix,
}

impl ConditionalShiftPrior {
    pub fn new(base: GaussianMixturePrior, shift_map: Matrix) -> Result<Self> {
        if shift_map.nrows() != base.dim() {
            return Err(Error::dim("shift map rows", base.dim(), shift_map.nrows()));
        }
        if shift_map.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("shift map must be finite".into()));
        }
        Ok(Self { base, shift_map })
    }

    pub fn embed_dim(&self) -> usize {
        self.shift_map.ncols()
    }

    fn check_embedding(&self, phi: &Vector) -> Result<()> {
        if phi.len() != self.embed_dim() {
            return Err(Error::dim("embedding", self.embed_dim(), phi.len()));
        }
        Ok(())
    }

    /// Point at which the base score is evaluated: `z - √ᾱ W φ`.
    fn base_point(&self, z: &Vector, alpha_bar: f64, phi: &Vector) -> Vector {
        z - (&self.shift_map * phi) * alpha_bar.sqrt()
    }

    pub fn conditional_score(&self, z: &Vector, alpha_bar: f64, phi: &Vector) -> Result<Vector> {
        self.check_embedding(phi)?;
        Ok(self.base.score(&self.base_point(z, alpha_bar, phi), alpha_bar))
    }

    /// `(∂ score / ∂ φ)ᵀ u = -√ᾱ Wᵀ H(z - √ᾱ W φ) u`.
    pub fn score_embedding_vjp(
        &self,
        z: &Vector,
        alpha_bar: f64,
        phi: &Vector,
        u: &Vector,
    ) -> Result<Vector> {
        self.check_embedding(phi)?;
        let hu = self.base.hvp(&self.base_point(z, alpha_bar, phi), alpha_bar, u)?;
        Ok(self.shift_map.transpose() * hu * (-alpha_bar.sqrt()))
    }

    /// `(∂ score / ∂ φ) v = -√ᾱ H(z - √ᾱ W φ) W v`.
    pub fn score_embedding_jvp(
        &self,
        z: &Vector,
        alpha_bar: f64,
        phi: &Vector,
        v: &Vector,
    ) -> Result<Vector> {
        self.check_embedding(phi)?;
        self.check_embedding(v)?;
        let hv = self
            .base
            .hvp(&self.base_point(z, alpha_bar, phi), alpha_bar, &(&self.shift_map * v))?;
        Ok(hv * (-alpha_bar.sqrt()))
    }

    /// The prior conditioned on a fixed embedding, usable wherever a plain
    /// [`ScoreModel`] is expected.
    pub fn with_embedding(&self, phi: &Vector) -> Result<Conditioned<'_>> {
        self.check_embedding(phi)?;
        Ok(Conditioned {
            prior: self,
            shift: &self.shift_map * phi,
        })
    }
}

/// [`ConditionalShiftPrior`] at a fixed embedding.
#[derive(Debug, Clone)]
pub struct Conditioned<'a> {
    prior: &'a ConditionalShiftPrior,
    shift: Vector,
}

impl Conditioned<'_> {
    fn point(&self, z: &Vector, alpha_bar: f64) -> Vector {
        z - &self.shift * alpha_bar.sqrt()
    }
}

impl ScoreModel for Conditioned<'_> {
    fn dim(&self) -> usize {
        self.prior.base.dim()
    }

    fn score(&self, z: &Vector, alpha_bar: f64) -> Vector {
        self.prior.base.score(&self.point(z, alpha_bar), alpha_bar)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ANALYTIC
    }

    fn hessian(&self, z: &Vector, alpha_bar: f64) -> Result<Matrix> {
        self.prior.base.hessian(&self.point(z, alpha_bar), alpha_bar)
    }

    fn hvp(&self, z: &Vector, alpha_bar: f64, v: &Vector) -> Result<Vector> {
        self.prior.base.hvp(&self.point(z, alpha_bar), alpha_bar, v)
    }

    fn log_marginal(&self, z: &Vector, alpha_bar: f64) -> Result<f64> {
        self.prior.base.log_marginal(&self.point(z, alpha_bar), alpha_bar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoremodels::Covariance;

    fn prior() -> ConditionalShiftPrior {
        let base = GaussianMixturePrior::new(
            vec![0.5, 0.5],
            vec![
                Vector::from_vec(vec![-1.0, 0.0]),
                Vector::from_vec(vec![1.0, 0.5]),
            ],
            vec![Covariance::Scalar(0.3), Covariance::Scalar(0.6)],
        )
        .unwrap();
        let w = Matrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, -0.2, 1.0, 0.3]);
        ConditionalShiftPrior::new(base, w).unwrap()
    }

    #[test]
    fn null_embedding_recovers_base_score() {
        let p = prior();
        let z = Vector::from_vec(vec![0.2, -0.4]);
        let s = p.conditional_score(&z, 0.4, &Vector::zeros(3)).unwrap();
        assert_eq!(s, p.base.score(&z, 0.4));
    }

    #[test]
    fn shifted_standard_normal() {
        let base = GaussianMixturePrior::new(
            vec![1.0],
            vec![Vector::zeros(2)],
            vec![Covariance::Scalar(1.0)],
        )
        .unwrap();
        let p = ConditionalShiftPrior::new(base, Matrix::identity(2, 2)).unwrap();
        let mu = Vector::from_vec(vec![0.7, -1.1]);
        let z = Vector::from_vec(vec![0.3, 0.4]);
        let ab = 0.64;
        let s = p.conditional_score(&z, ab, &mu).unwrap();
        let expect = -(&z - &mu * ab.sqrt());
        assert!((s - expect).amax() < 1e-14);
    }

    #[test]
    fn embedding_vjp_matches_finite_differences() {
        let p = prior();
        let z = Vector::from_vec(vec![0.2, -0.4]);
        let phi = Vector::from_vec(vec![0.1, -0.3, 0.5]);
        let u = Vector::from_vec(vec![0.6, -1.0]);
        let ab = 0.55;
        let vjp = p.score_embedding_vjp(&z, ab, &phi, &u).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut pp = phi.clone();
            pp[j] += h;
            let mut pm = phi.clone();
            pm[j] -= h;
            let d = (p.conditional_score(&z, ab, &pp).unwrap()
                - p.conditional_score(&z, ab, &pm).unwrap())
                / (2.0 * h);
            let fd = d.dot(&u);
            assert!((fd - vjp[j]).abs() <= 1e-5 * vjp[j].abs().max(1.0), "{fd} vs {}", vjp[j]);
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let p = prior();
        let z = Vector::zeros(2);
        assert!(p.conditional_score(&z, 0.5, &Vector::zeros(2)).is_err());
    }
}
