use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use super::{Capabilities, CleanPosterior, PosteriorComponent, ScoreModel};
use crate::{Error, Matrix, Result, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Covariance families. Image-scale priors use `Scalar` or `Diagonal` so that
/// every operation stays `O(d)`; `Dense` is meant for small oracle problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Covariance {
    Scalar(f64),
    Diagonal(Vector),
    Dense(Matrix),
}

impl Covariance {
    pub(crate) fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Covariance::Scalar(s) => {
                if !(*s > 0.0 && s.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "scalar covariance must be positive, got {s}"
                    )));
                }
            }
            Covariance::Diagonal(d) => {
                if d.len() != dim {
                    return Err(Error::dim("diagonal covariance", dim, d.len()));
                }
                if d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(Error::InvalidParameter(
                        "diagonal covariance entries must be positive".into(),
                    ));
                }
            }
            Covariance::Dense(m) => {
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(Error::dim("dense covariance", dim, m.nrows()));
                }
                let asym = (m - m.transpose()).amax();
                if asym > 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "covariance not symmetric (max |S - S^T| = {asym:e})"
                    )));
                }
                let eig = m.clone().symmetric_eigen();
                if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
                    return Err(Error::InvalidParameter(
                        "covariance not positive definite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `ᾱ Σ + (1 - ᾱ) I`.
    pub fn diffused(&self, alpha_bar: f64) -> Covariance {
        let noise = 1.0 - alpha_bar;
        match self {
            Covariance::Scalar(s) => Covariance::Scalar(alpha_bar * s + noise),
            Covariance::Diagonal(d) => Covariance::Diagonal(d.map(|v| alpha_bar * v + noise)),
            Covariance::Dense(m) => {
                let mut out = m * alpha_bar;
                for i in 0..out.nrows() {
                    out[(i, i)] += noise;
                }
                Covariance::Dense(out)
            }
        }
    }

    pub fn to_matrix(&self, dim: usize) -> Matrix {
        match self {
            Covariance::Scalar(s) => Matrix::identity(dim, dim) * *s,
            Covariance::Diagonal(d) => Matrix::from_diagonal(d),
            Covariance::Dense(m) => m.clone(),
        }
    }

    /// `Σ v`.
    pub fn apply(&self, v: &Vector) -> Vector {
        match self {
            Covariance::Scalar(s) => v * *s,
            Covariance::Diagonal(d) => d.component_mul(v),
            Covariance::Dense(m) => m * v,
        }
    }
}

/// A Gaussian with a factorised covariance, ready for repeated solves.
#[derive(Debug, Clone)]
pub(crate) struct Factored {
    pub mean: Vector,
    pub cov: Covariance,
    chol: Option<Cholesky<f64, nalgebra::Dyn>>,
}

impl Factored {
    pub fn new(mean: Vector, cov: Covariance) -> Self {
        let chol = match &cov {
            Covariance::Dense(m) => Some(
                Cholesky::new(m.clone()).expect("diffused covariance is positive definite"),
            ),
            _ => None,
        };
        Self { mean, cov, chol }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `C⁻¹ v`.
    pub fn solve(&self, v: &Vector) -> Vector {
        match &self.cov {
            Covariance::Scalar(s) => v / *s,
            Covariance::Diagonal(d) => v.component_div(d),
            Covariance::Dense(_) => self.chol.as_ref().unwrap().solve(v),
        }
    }

    pub fn log_det(&self) -> f64 {
        match &self.cov {
            Covariance::Scalar(s) => self.dim() as f64 * s.ln(),
            Covariance::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
            Covariance::Dense(_) => {
                let l = self.chol.as_ref().unwrap().l_dirty().diagonal();
                2.0 * l.iter().map(|v| v.ln()).sum::<f64>()
            }
        }
    }

    pub fn precision_matrix(&self) -> Matrix {
        match &self.cov {
            Covariance::Scalar(s) => Matrix::identity(self.dim(), self.dim()) / *s,
            Covariance::Diagonal(d) => Matrix::from_diagonal(&d.map(|v| 1.0 / v)),
            Covariance::Dense(_) => self.chol.as_ref().unwrap().inverse(),
        }
    }

    /// Returns `(log N(z; m, C), -C⁻¹ (z - m))`.
    pub fn log_density_and_score(&self, z: &Vector) -> (f64, Vector) {
        let diff = z - &self.mean;
        let sol = self.solve(&diff);
        let quad = diff.dot(&sol);
        let logp = -0.5 * (quad + self.log_det() + self.dim() as f64 * LN_2PI);
        (logp, -sol)
    }
}

/// Gaussian prior `N(μ0, Σ0)` on clean data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Vector,
    pub cov: Covariance,
}

impl GaussianPrior {
    pub fn new(mean: Vector, cov: Covariance) -> Result<Self> {
        cov.validate(mean.len())?;
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Vector::zeros(dim),
            cov: Covariance::Scalar(1.0),
        }
    }

    /// Exact diffused marginal `N(√ᾱ μ0, ᾱ Σ0 + (1-ᾱ) I)`, expressed as a prior.
    pub fn marginal(&self, alpha_bar: f64) -> GaussianPrior {
        GaussianPrior {
            mean: &self.mean * alpha_bar.sqrt(),
            cov: self.cov.diffused(alpha_bar),
        }
    }

    pub(crate) fn factored(&self, alpha_bar: f64) -> Factored {
        let m = self.marginal(alpha_bar);
        Factored::new(m.mean, m.cov)
    }
}

impl ScoreModel for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, z: &Vector, alpha_bar: f64) -> Vector {
        let f = self.factored(alpha_bar);
        -f.solve(&(z - &f.mean))
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ANALYTIC
    }

    fn hessian(&self, _z: &Vector, alpha_bar: f64) -> Result<Matrix> {
        Ok(-self.factored(alpha_bar).precision_matrix())
    }

    fn hvp(&self, _z: &Vector, alpha_bar: f64, v: &Vector) -> Result<Vector> {
        Ok(-self.factored(alpha_bar).solve(v))
    }

    fn log_marginal(&self, z: &Vector, alpha_bar: f64) -> Result<f64> {
        Ok(self.factored(alpha_bar).log_density_and_score(z).0)
    }
}

impl CleanPosterior for GaussianPrior {
    fn clean_posterior(&self, z: &Vector, alpha_bar: f64) -> Vec<PosteriorComponent> {
        vec![PosteriorComponent {
            weight: 1.0,
            ..gaussian_conditioning(&self.mean, &self.cov, z, alpha_bar)
        }]
    }
}

/// `X0 | X_k = z` for `X0 ~ N(μ, Σ)`:
/// mean `μ + √ᾱ Σ C⁻¹ (z - √ᾱ μ)`, covariance `Σ - ᾱ Σ C⁻¹ Σ`, `C = ᾱΣ + (1-ᾱ)I`.
pub(crate) fn gaussian_conditioning(
    mean: &Vector,
    cov: &Covariance,
    z: &Vector,
    alpha_bar: f64,
) -> PosteriorComponent {
    let dim = mean.len();
    let sa = alpha_bar.sqrt();
    let sigma = cov.to_matrix(dim);
    let c = cov.diffused(alpha_bar).to_matrix(dim);
    let chol = Cholesky::new(c).expect("diffused covariance is positive definite");
    let gain = chol.solve(&sigma); // C⁻¹ Σ
    let innov = z - mean * sa;
    let post_mean = mean + gain.transpose() * innov * sa;
    let mut post_cov = &sigma - (&sigma * &gain) * alpha_bar;
    post_cov = (&post_cov + post_cov.transpose()) * 0.5;
    PosteriorComponent {
        weight: 1.0,
        mean: post_mean,
        cov: post_cov,
    }
}
