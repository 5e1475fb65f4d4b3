use serde::{Deserialize, Serialize};

use super::gaussian::{gaussian_conditioning, Covariance, Factored};
use super::{Capabilities, CleanPosterior, PosteriorComponent, ScoreModel};
use crate::{Error, Matrix, Result, Vector};

/// Gaussian mixture prior `Σ_i w_i N(μ_i, Σ_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixturePrior {
    pub weights: Vec<f64>,
    pub means: Vec<Vector>,
    pub covariances: Vec<Covariance>,
}

/// Per-component quantities at a point: responsibilities `r_i` and the
/// component scores `g_i = -C_i⁻¹ (z - m_i)`.
pub(crate) struct MixtureEval {
    pub log_marginal: f64,
    pub resp: Vec<f64>,
    pub scores: Vec<Vector>,
    pub score: Vector,
    pub components: Vec<Factored>,
}

impl GaussianMixturePrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vector>, covariances: Vec<Covariance>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        if means.len() != weights.len() || covariances.len() != weights.len() {
            return Err(Error::dim("mixture components", weights.len(), means.len()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let dim = means[0].len();
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != dim {
                return Err(Error::dim("mixture mean", dim, m.len()));
            }
            c.validate(dim)?;
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Exact diffused marginal: means scale by `√ᾱ`, covariances become
    /// `ᾱ Σ_i + (1-ᾱ) I`, weights unchanged.
    pub fn marginal(&self, alpha_bar: f64) -> GaussianMixturePrior {
        let sa = alpha_bar.sqrt();
        GaussianMixturePrior {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * sa).collect(),
            covariances: self.covariances.iter().map(|c| c.diffused(alpha_bar)).collect(),
        }
    }

    /// Same mixture with every component mean translated by `shift`.
    pub fn translated(&self, shift: &Vector) -> GaussianMixturePrior {
        GaussianMixturePrior {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m + shift).collect(),
            covariances: self.covariances.clone(),
        }
    }

    /// Posterior component probabilities of the diffused mixture at `z`.
    pub fn responsibilities(&self, z: &Vector, alpha_bar: f64) -> Vec<f64> {
        self.eval(z, alpha_bar).resp
    }

    pub(crate) fn eval(&self, z: &Vector, alpha_bar: f64) -> MixtureEval {
        let sa = alpha_bar.sqrt();
        let mut logs = Vec::with_capacity(self.components());
        let mut scores = Vec::with_capacity(self.components());
        let mut components = Vec::with_capacity(self.components());
        for ((w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let f = Factored::new(m * sa, c.diffused(alpha_bar));
            let (lp, g) = f.log_density_and_score(z);
            logs.push(w.ln() + lp);
            scores.push(g);
            components.push(f);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_marginal = max + sum.ln();
        let resp: Vec<f64> = logs.iter().map(|l| (l - log_marginal).exp()).collect();
        let mut score = Vector::zeros(z.len());
        for (r, g) in resp.iter().zip(&scores) {
            score.axpy(*r, g, 1.0);
        }
        MixtureEval {
            log_marginal,
            resp,
            scores,
            score,
            components,
        }
    }

    pub(crate) fn hvp_from(eval: &MixtureEval, v: &Vector) -> Vector {
        // H v = Σ r_i (-C_i⁻¹ v + g_i g_iᵀ v) - ḡ ḡᵀ v
        let mut out = &eval.score * (-eval.score.dot(v));
        for ((r, g), f) in eval.resp.iter().zip(&eval.scores).zip(&eval.components) {
            if *r == 0.0 {
                continue;
            }
            out.axpy(-*r, &f.solve(v), 1.0);
            out.axpy(*r * g.dot(v), g, 1.0);
        }
        out
    }

    pub(crate) fn hessian_from(eval: &MixtureEval) -> Matrix {
        let d = eval.score.len();
        let mut h = -(&eval.score * eval.score.transpose());
        for ((r, g), f) in eval.resp.iter().zip(&eval.scores).zip(&eval.components) {
            if *r == 0.0 {
                continue;
            }
            h -= f.precision_matrix() * *r;
            h += (g * g.transpose()) * *r;
        }
        debug_assert_eq!(h.nrows(), d);
        (&h + h.transpose()) * 0.5
    }
}

impl ScoreModel for GaussianMixturePrior {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn score(&self, z: &Vector, alpha_bar: f64) -> Vector {
        self.eval(z, alpha_bar).score
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ANALYTIC
    }

    fn hessian(&self, z: &Vector, alpha_bar: f64) -> Result<Matrix> {
        Ok(Self::hessian_from(&self.eval(z, alpha_bar)))
    }

    fn hvp(&self, z: &Vector, alpha_bar: f64, v: &Vector) -> Result<Vector> {
        Ok(Self::hvp_from(&self.eval(z, alpha_bar), v))
    }

    fn log_marginal(&self, z: &Vector, alpha_bar: f64) -> Result<f64> {
        Ok(self.eval(z, alpha_bar).log_marginal)
    }
}

impl CleanPosterior for GaussianMixturePrior {
    /// Posterior responsibilities times per-component Gaussian conditionals.
    fn clean_posterior(&self, z: &Vector, alpha_bar: f64) -> Vec<PosteriorComponent> {
        let eval = self.eval(z, alpha_bar);
        self.means
            .iter()
            .zip(&self.covariances)
            .zip(&eval.resp)
            .map(|((m, c), r)| PosteriorComponent {
                weight: *r,
                ..gaussian_conditioning(m, c, z, alpha_bar)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_component() -> GaussianMixturePrior {
        GaussianMixturePrior::new(
            vec![0.3, 0.7],
            vec![
                Vector::from_vec(vec![-1.0, 0.5]),
                Vector::from_vec(vec![1.5, -0.5]),
            ],
            vec![
                Covariance::Dense(Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])),
                Covariance::Diagonal(Vector::from_vec(vec![0.2, 0.8])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn marginal_example_halves_means() {
        let p = two_component();
        let m = p.marginal(0.5);
        assert_eq!(m.weights, p.weights);
        for (a, b) in m.means.iter().zip(&p.means) {
            assert!((a - b * 0.5f64.sqrt()).amax() < 1e-15);
        }
        let c0 = m.covariances[0].to_matrix(2);
        let expect = p.covariances[0].to_matrix(2) * 0.5 + Matrix::identity(2, 2) * 0.5;
        assert!((c0 - expect).amax() < 1e-15);
    }

    #[test]
    fn score_matches_finite_differences_of_log_marginal() {
        let p = two_component();
        let h = 1e-5;
        for (ab, z) in [(0.9, vec![0.1, 0.2]), (0.3, vec![-2.0, 1.0]), (1.0, vec![1.0, -1.0])] {
            let z = Vector::from_vec(z);
            let s = p.score(&z, ab);
            for i in 0..2 {
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fd = (p.log_marginal(&zp, ab).unwrap() - p.log_marginal(&zm, ab).unwrap())
                    / (2.0 * h);
                assert!((fd - s[i]).abs() <= 1e-6 * s[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn hessian_symmetric_and_matches_hvp() {
        let p = two_component();
        let z = Vector::from_vec(vec![0.3, 0.1]);
        let h = p.hessian(&z, 0.6).unwrap();
        assert!((&h - h.transpose()).amax() <= 1e-10);
        let v = Vector::from_vec(vec![1.0, -2.0]);
        let hv = p.hvp(&z, 0.6, &v).unwrap();
        assert!((&h * &v - &hv).norm() <= 1e-10 * hv.norm());
    }

    #[test]
    fn rejects_bad_weights() {
        let p = two_component();
        assert!(GaussianMixturePrior::new(vec![0.5, 0.6], p.means.clone(), p.covariances.clone())
            .is_err());
        assert!(GaussianMixturePrior::new(vec![1.0], p.means.clone(), p.covariances.clone())
            .is_err());
    }
}
