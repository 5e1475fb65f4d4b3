//! Tweedie posterior moments, the Hutchinson trace estimator, the surrogate
//! loss with its gradient, the curvature lower bound on the measurement
//! log-likelihood, and exact oracles used to check them.
//!
//! Everything here is evaluated at a single noise level `ᾱ`. With
//! `s(z) = ∇ log p(z)` and `H(z) = ∇² log p(z)`:
//!
//! ```text
//! Z̄        = (z + (1-ᾱ) s(z)) / √ᾱ
//! Cov      = (1-ᾱ)/ᾱ · (I + (1-ᾱ) H(z))
//! probe(ε) = εᵀ (s(z+ε) - s(z)) / ς²,   ε ~ N(0, ς² I),   E ≈ Tr H(z)
//! L(z)     = λ ‖y - A D(Z̄)‖² + (η/d) mean_ε probe(ε) + w_ν F(A D(Z̄), y)
//! ```

use serde::{Deserialize, Serialize};

use crate::operators::{LatentCodec, MeasurementTask};
use crate::scoremodels::{CleanPosterior, ScoreModel};
use crate::{standard_normal, Error, Matrix, Result, Rng, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Tweedie posterior mean `E[X0 | X_k = z]`. Identity at `ᾱ = 1`.
pub fn posterior_mean<M: ScoreModel + ?Sized>(model: &M, z: &Vector, alpha_bar: f64) -> Vector {
    if alpha_bar == 1.0 {
        return z.clone();
    }
    posterior_mean_from_score(z, &model.score(z, alpha_bar), alpha_bar)
}

pub fn posterior_mean_from_score(z: &Vector, score: &Vector, alpha_bar: f64) -> Vector {
    (z + score * (1.0 - alpha_bar)) / alpha_bar.sqrt()
}

/// Tweedie posterior covariance `Cov[X0 | X_k = z]`.
pub fn posterior_cov<M: ScoreModel + ?Sized>(model: &M, z: &Vector, alpha_bar: f64) -> Result<Matrix> {
    let d = z.len();
    if alpha_bar == 1.0 {
        return Ok(Matrix::zeros(d, d));
    }
    let h = model.hessian(z, alpha_bar)?;
    let noise = 1.0 - alpha_bar;
    let inner = Matrix::identity(d, d) + h * noise;
    let cov = inner * (noise / alpha_bar);
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Draws `n` probes `ε ~ N(0, ς² I)`.
pub fn draw_probes(dim: usize, n: usize, eps_scale: f64, rng: &mut Rng) -> Vec<Vector> {
    (0..n).map(|_| standard_normal(dim, rng) * eps_scale).collect()
}

/// `εᵀ (s(z+ε) - s(z)) / ς²` given `s(z)`.
pub fn probe_value<M: ScoreModel + ?Sized>(
    model: &M,
    z: &Vector,
    score_z: &Vector,
    probe: &Vector,
    alpha_bar: f64,
    eps_scale: f64,
) -> f64 {
    let shifted = model.score(&(z + probe), alpha_bar);
    probe.dot(&(shifted - score_z)) / (eps_scale * eps_scale)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub samples: usize,
}

/// Hutchinson estimate of `Tr ∇² log p(z)` from score differences. Unbiased
/// for quadratic log-densities; `O(ς)` bias otherwise.
pub fn hutchinson_trace<M: ScoreModel + ?Sized>(
    model: &M,
    z: &Vector,
    alpha_bar: f64,
    n_samples: usize,
    eps_scale: f64,
    rng: &mut Rng,
) -> Result<TraceEstimate> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
    }
    if !(eps_scale > 0.0) {
        return Err(Error::InvalidParameter("eps_scale must be positive".into()));
    }
    let score_z = model.score(z, alpha_bar);
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 1..=n_samples {
        let probe = standard_normal(z.len(), rng) * eps_scale;
        let v = probe_value(model, z, &score_z, &probe, alpha_bar, eps_scale);
        let delta = v - mean;
        mean += delta / i as f64;
        m2 += delta * (v - mean);
    }
    let se = if n_samples > 1 {
        (m2 / (n_samples - 1) as f64 / n_samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        estimate: mean,
        standard_error: se,
        samples: n_samples,
    })
}

/// How the feature-loss weight is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureNormalization {
    /// `ν / d`.
    #[default]
    PerDimension,
    /// `ν` as is.
    Raw,
}

/// Weights of the surrogate loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTerms {
    pub lambda: f64,
    pub eta: f64,
    pub nu: f64,
    pub eps_scale: f64,
    #[serde(default)]
    pub feature_normalization: FeatureNormalization,
}

impl Default for SurrogateTerms {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            eta: 0.02,
            nu: 0.0,
            eps_scale: 1.0,
            feature_normalization: FeatureNormalization::PerDimension,
        }
    }
}

impl SurrogateTerms {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("eta", self.eta), ("nu", self.nu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !(self.eps_scale > 0.0 && self.eps_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eps_scale must be positive, got {}",
                self.eps_scale
            )));
        }
        Ok(())
    }

    fn feature_weight(&self, dim: usize) -> f64 {
        match self.feature_normalization {
            FeatureNormalization::PerDimension => self.nu / dim as f64,
            FeatureNormalization::Raw => self.nu,
        }
    }
}

/// Feature-space loss between the predicted measurement `A D(Z̄)` and `y`.
pub trait FeatureLoss: Send + Sync {
    fn value(&self, predicted: &Vector, observed: &Vector) -> f64;
    /// Gradient with respect to `predicted`.
    fn gradient(&self, predicted: &Vector, observed: &Vector) -> Vector;
}

/// `‖predicted - observed‖²` in operator space.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredDistance;

impl FeatureLoss for SquaredDistance {
    fn value(&self, predicted: &Vector, observed: &Vector) -> f64 {
        (predicted - observed).norm_squared()
    }
    fn gradient(&self, predicted: &Vector, observed: &Vector) -> Vector {
        (predicted - observed) * 2.0
    }
}

/// How the gradient of the surrogate loss is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Exact chain rule through `∂Z̄/∂z = (I + (1-ᾱ) H) / √ᾱ`.
    #[default]
    FullJacobian,
    /// `∂Z̄/∂z ≈ I / √ᾱ`.
    Decoupled,
    /// Central differences of the loss, one coordinate at a time.
    FiniteDifference,
}

/// Loss value, gradient and the number of model calls spent on them.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub loss: f64,
    pub grad: Vector,
    /// The posterior mean at `z`, kept for reporting.
    pub posterior_mean: Vector,
    pub guidance_calls: u64,
    pub probe_calls: u64,
    pub hvp_calls: u64,
}

/// The surrogate loss bound to one task, codec and score model.
pub struct Surrogate<'a, M: ?Sized> {
    pub task: &'a MeasurementTask,
    pub codec: &'a LatentCodec,
    pub model: &'a M,
    pub terms: SurrogateTerms,
    pub feature_loss: Option<&'a dyn FeatureLoss>,
}

impl<'a, M: ScoreModel + ?Sized> Surrogate<'a, M> {
    pub fn new(
        task: &'a MeasurementTask,
        codec: &'a LatentCodec,
        model: &'a M,
        terms: SurrogateTerms,
    ) -> Result<Self> {
        terms.validate()?;
        if codec.data_dim() != task.operator.input_dim() {
            return Err(Error::dim(
                "codec output vs operator input",
                task.operator.input_dim(),
                codec.data_dim(),
            ));
        }
        if codec.latent_dim() != model.dim() {
            return Err(Error::dim("codec latent vs model", model.dim(), codec.latent_dim()));
        }
        Ok(Self {
            task,
            codec,
            model,
            terms,
            feature_loss: None,
        })
    }

    pub fn with_feature_loss(mut self, loss: &'a dyn FeatureLoss) -> Self {
        self.feature_loss = Some(loss);
        self
    }

    fn predicted_measurement(&self, zbar: &Vector) -> Result<Vector> {
        self.task.operator.apply(&self.codec.decode(zbar)?)
    }

    fn check(&self, z: &Vector, probes: &[Vector]) -> Result<()> {
        if z.len() != self.model.dim() {
            return Err(Error::dim("latent", self.model.dim(), z.len()));
        }
        if probes.is_empty() && self.terms.eta > 0.0 {
            return Err(Error::InvalidParameter("surrogate loss needs at least one probe".into()));
        }
        if let Some(p) = probes.iter().find(|p| p.len() != z.len()) {
            return Err(Error::dim("probe", z.len(), p.len()));
        }
        Ok(())
    }

    /// Loss value only. Uses `1 + N` score calls.
    pub fn loss(&self, z: &Vector, alpha_bar: f64, probes: &[Vector]) -> Result<f64> {
        self.check(z, probes)?;
        let score_z = self.model.score(z, alpha_bar);
        self.loss_with_score(z, &score_z, alpha_bar, probes)
    }

    fn loss_with_score(
        &self,
        z: &Vector,
        score_z: &Vector,
        alpha_bar: f64,
        probes: &[Vector],
    ) -> Result<f64> {
        let d = z.len() as f64;
        let zbar = posterior_mean_from_score(z, score_z, alpha_bar);
        let pred = self.predicted_measurement(&zbar)?;
        let mut loss = self.terms.lambda * (&self.task.y - &pred).norm_squared();
        if self.terms.eta > 0.0 {
            let mean: f64 = probes
                .iter()
                .map(|p| probe_value(self.model, z, score_z, p, alpha_bar, self.terms.eps_scale))
                .sum::<f64>()
                / probes.len() as f64;
            loss += self.terms.eta / d * mean;
        }
        if let Some(f) = self.feature_loss {
            if self.terms.nu > 0.0 {
                loss += self.terms.feature_weight(z.len()) * f.value(&pred, &self.task.y);
            }
        }
        Ok(loss)
    }

    /// Loss and gradient. Full-Jacobian and decoupled modes spend one
    /// guidance call `s(z)` (reused by every probe) and one call per probe.
    pub fn evaluate(
        &self,
        z: &Vector,
        alpha_bar: f64,
        probes: &[Vector],
        mode: GradientMode,
    ) -> Result<SurrogateEval> {
        self.check(z, probes)?;
        let d = z.len();
        let noise = 1.0 - alpha_bar;
        let sa = alpha_bar.sqrt();

        if mode == GradientMode::FiniteDifference {
            let score_z = self.model.score(z, alpha_bar);
            let loss = self.loss_with_score(z, &score_z, alpha_bar, probes)?;
            let h = crate::scoremodels::FiniteDifference::<()>::DEFAULT_STEP;
            let mut grad = Vector::zeros(d);
            let mut zp = z.clone();
            for i in 0..d {
                let orig = zp[i];
                zp[i] = orig + h;
                let up = self.loss(&zp, alpha_bar, probes)?;
                zp[i] = orig - h;
                let down = self.loss(&zp, alpha_bar, probes)?;
                zp[i] = orig;
                grad[i] = (up - down) / (2.0 * h);
            }
            let active_probes = if self.terms.eta > 0.0 { probes.len() as u64 } else { 0 };
            let per_loss = 1 + active_probes;
            return Ok(SurrogateEval {
                loss,
                grad,
                posterior_mean: posterior_mean_from_score(z, &score_z, alpha_bar),
                guidance_calls: 1 + 2 * d as u64,
                probe_calls: active_probes + 2 * d as u64 * (per_loss - 1),
                hvp_calls: 0,
            });
        }

        let score_z = self.model.score(z, alpha_bar);
        let zbar = posterior_mean_from_score(z, &score_z, alpha_bar);
        let pred = self.predicted_measurement(&zbar)?;
        let resid = &self.task.y - &pred;
        let mut loss = self.terms.lambda * resid.norm_squared();
        let mut hvp_calls = 0;
        let mut probe_calls = 0;

        // Gradient with respect to the predicted measurement.
        let mut upstream = &resid * (-2.0 * self.terms.lambda);
        if let Some(f) = self.feature_loss {
            if self.terms.nu > 0.0 {
                let w = self.terms.feature_weight(d);
                loss += w * f.value(&pred, &self.task.y);
                upstream += f.gradient(&pred, &self.task.y) * w;
            }
        }
        let latent_grad = self
            .codec
            .decode_adjoint(&self.task.operator.adjoint(&upstream)?)?;
        let mut grad = match mode {
            GradientMode::FullJacobian => {
                let hu = self.model.hvp(z, alpha_bar, &latent_grad)?;
                hvp_calls += 1;
                (&latent_grad + hu * noise) / sa
            }
            _ => &latent_grad / sa,
        };

        if self.terms.eta > 0.0 {
            let scale = self.terms.eta / (d as f64 * probes.len() as f64);
            let eps2 = self.terms.eps_scale * self.terms.eps_scale;
            let mut probe_sum = 0.0;
            for p in probes {
                let zp = z + p;
                let shifted = self.model.score(&zp, alpha_bar);
                probe_calls += 1;
                probe_sum += p.dot(&(&shifted - &score_z)) / eps2;
                let (hp_shift, hp_here) = match self.model.hvp(&zp, alpha_bar, p) {
                    Ok(a) => (a, self.model.hvp(z, alpha_bar, p)?),
                    Err(Error::Capability(_)) if mode == GradientMode::Decoupled => {
                        let fd = crate::scoremodels::FiniteDifference::new(self.model);
                        probe_calls += 4;
                        (fd.hvp(&zp, alpha_bar, p)?, fd.hvp(z, alpha_bar, p)?)
                    }
                    Err(e) => return Err(e),
                };
                hvp_calls += 2;
                grad.axpy(scale / eps2, &(hp_shift - hp_here), 1.0);
            }
            loss += self.terms.eta / d as f64 * probe_sum / probes.len() as f64;
        }

        Ok(SurrogateEval {
            loss,
            grad,
            posterior_mean: zbar,
            guidance_calls: 1,
            probe_calls,
            hvp_calls,
        })
    }
}

/// `log N(y; mean, σ² I)`.
pub fn log_gaussian_isotropic(y: &Vector, mean: &Vector, sigma: f64) -> f64 {
    let m = y.len() as f64;
    -0.5 * ((y - mean).norm_squared() / (sigma * sigma) + m * (LN_2PI + 2.0 * sigma.ln()))
}

/// `ξ = 1 - ((1-ᾱ)/ᾱ) · m · d`.
pub fn xi(alpha_bar: f64, m: f64, dim: usize) -> f64 {
    1.0 - (1.0 - alpha_bar) / alpha_bar * m * dim as f64
}

/// Curvature lower bound on `log p(y | z)` (pixel space, identity codec):
/// `log N(y; A Z̄, σ_y² I) + log(ξ - (1-ᾱ) m Tr ∇² log p(z))`.
pub fn lower_bound<M: ScoreModel + ?Sized>(
    task: &MeasurementTask,
    model: &M,
    z: &Vector,
    alpha_bar: f64,
    m: f64,
) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::InvalidParameter(format!("curvature bound m must be positive, got {m}")));
    }
    if !(task.sigma_y > 0.0) {
        return Err(Error::InvalidParameter("lower bound needs sigma_y > 0".into()));
    }
    let zbar = posterior_mean(model, z, alpha_bar);
    let first = log_gaussian_isotropic(&task.y, &task.operator.apply(&zbar)?, task.sigma_y);
    let trace = model.hessian(z, alpha_bar)?.trace();
    let arg = xi(alpha_bar, m, z.len()) - (1.0 - alpha_bar) * m * trace;
    if !(arg > 0.0) {
        return Err(Error::InvalidBound(arg));
    }
    Ok(first + arg.ln())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_gaussian_dense(y: &Vector, mean: &Vector, cov: &Matrix) -> Result<f64> {
    let chol = nalgebra::Cholesky::new(cov.clone())
        .ok_or_else(|| Error::InvalidParameter("measurement covariance not positive definite".into()))?;
    let diff = y - mean;
    let sol = chol.solve(&diff);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (diff.dot(&sol) + logdet + y.len() as f64 * LN_2PI))
}

/// Exact `log p(y | X_k = z)` for oracle priors in pixel space: `y | z` is the
/// Gaussian mixture `Σ π_i N(A m_i, A C_i Aᵀ + σ_y² I)` over the clean-data
/// posterior components.
pub fn exact_log_likelihood<M: CleanPosterior + ?Sized>(
    task: &MeasurementTask,
    model: &M,
    z: &Vector,
    alpha_bar: f64,
) -> Result<f64> {
    if z.len() != task.operator.input_dim() {
        return Err(Error::dim("latent vs operator input", task.operator.input_dim(), z.len()));
    }
    let a = task.operator.to_dense();
    let noise = Matrix::identity(a.nrows(), a.nrows()) * (task.sigma_y * task.sigma_y);
    let mut terms = Vec::new();
    for comp in model.clean_posterior(z, alpha_bar) {
        if comp.weight <= 0.0 {
            continue;
        }
        let mean = &a * &comp.mean;
        let cov = &a * &comp.cov * a.transpose() + &noise;
        let cov = (&cov + cov.transpose()) * 0.5;
        terms.push(comp.weight.ln() + log_gaussian_dense(&task.y, &mean, &cov)?);
    }
    Ok(log_sum_exp(&terms))
}

/// First-order approximation error and the bounds reported alongside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JensenGap {
    /// `|E[p(y | Z) | z] - p(y | Z̄)|`.
    pub gap: f64,
    /// `(d / √(2π σ_y²)) · exp(-1/(2σ_y²)) · ‖A‖ · m₁`.
    pub bound: f64,
    /// `(2π σ_y²)^{-m/2} · e^{-1/2} / σ_y · ‖A‖ · m₁`, the Lipschitz bound of
    /// the Gaussian likelihood in `x`.
    pub lipschitz_bound: f64,
    /// First absolute central moment `E ‖Z - Z̄‖` of the clean posterior.
    pub m1: f64,
    /// Standard error of `m1` (0 when computed in closed form).
    pub m1_standard_error: f64,
}

/// `Γ((d+1)/2) / Γ(d/2)` by the recurrence `r_{d+1} = (d/2) / r_d`.
fn half_gamma_ratio(d: usize) -> f64 {
    let mut r = 1.0 / std::f64::consts::PI.sqrt();
    for k in 1..d {
        r = (k as f64 / 2.0) / r;
    }
    r
}

/// Jensen gap of the first-order approximation for an oracle prior. `m₁` is
/// closed-form for a single isotropic posterior component and Monte-Carlo
/// (`mc_samples` draws) otherwise.
pub fn jensen_gap<M: CleanPosterior + ?Sized>(
    task: &MeasurementTask,
    model: &M,
    z: &Vector,
    alpha_bar: f64,
    mc_samples: usize,
    rng: &mut Rng,
) -> Result<JensenGap> {
    if !(task.sigma_y > 0.0) {
        return Err(Error::InvalidParameter("Jensen gap needs sigma_y > 0".into()));
    }
    let d = z.len();
    let sigma = task.sigma_y;
    let zbar = posterior_mean(model, z, alpha_bar);
    let expected = exact_log_likelihood(task, model, z, alpha_bar)?.exp();
    let at_mean = log_gaussian_isotropic(&task.y, &task.operator.apply(&zbar)?, sigma).exp();
    let gap = (expected - at_mean).abs();

    let comps = model.clean_posterior(z, alpha_bar);
    let active: Vec<_> = comps.iter().filter(|c| c.weight > 0.0).collect();
    let (m1, m1_se) = match active.as_slice() {
        [c] if is_isotropic(&c.cov) => {
            let var = c.cov[(0, 0)].max(0.0);
            (var.sqrt() * 2f64.sqrt() * half_gamma_ratio(d), 0.0)
        }
        _ => {
            let n = mc_samples.max(2);
            let total: f64 = active.iter().map(|c| c.weight).sum();
            let factors: Vec<_> = active
                .iter()
                .map(|c| {
                    let sym = (&c.cov + c.cov.transpose()) * 0.5;
                    let eig = sym.symmetric_eigen();
                    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                    &eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals)
                })
                .collect();
            let (mut mean, mut m2) = (0.0, 0.0);
            for i in 1..=n {
                let u: f64 = rand::Rng::random::<f64>(rng) * total;
                let mut acc = 0.0;
                let mut pick = active.len() - 1;
                for (j, c) in active.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                let sample = &active[pick].mean + &factors[pick] * standard_normal(d, rng);
                let v = (sample - &zbar).norm();
                let delta = v - mean;
                mean += delta / i as f64;
                m2 += delta * (v - mean);
            }
            (mean, (m2 / (n - 1) as f64 / n as f64).sqrt())
        }
    };
    let a_norm = task.operator.operator_norm();
    let bound = d as f64 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt()
        * (-1.0 / (2.0 * sigma * sigma)).exp()
        * a_norm
        * m1;
    let m_out = task.operator.output_dim() as f64;
    let lipschitz_bound = (-0.5 * m_out * (LN_2PI + 2.0 * sigma.ln())).exp() * (-0.5f64).exp() / sigma
        * a_norm
        * m1;
    Ok(JensenGap {
        gap,
        bound,
        lipschitz_bound,
        m1,
        m1_standard_error: m1_se,
    })
}

fn is_isotropic(cov: &Matrix) -> bool {
    let d = cov.nrows();
    let c = cov[(0, 0)];
    (0..d).all(|i| (0..d).all(|j| {
        let v = cov[(i, j)];
        if i == j {
            (v - c).abs() <= 1e-12 * c.abs().max(1e-300)
        } else {
            v.abs() <= 1e-12 * c.abs().max(1e-300)
        }
    }))
}

/// Curvature constant for the lower bound at one state: the largest
/// `-λ_min(∇² p(y | x)) / p(y | Z̄)` over `x ∈ {Z̄} ∪ {samples of X0 | z}`,
/// doubled for slack.
pub fn curvature_constant<M: CleanPosterior + ?Sized>(
    task: &MeasurementTask,
    model: &M,
    z: &Vector,
    alpha_bar: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let a = task.operator.to_dense();
    let s2 = task.sigma_y * task.sigma_y;
    let zbar = posterior_mean(model, z, alpha_bar);
    let log_ref = log_gaussian_isotropic(&task.y, &(&a * &zbar), task.sigma_y);
    let ata = a.transpose() * &a / s2;
    let ratio_at = |x: &Vector| -> f64 {
        let r = &task.y - &a * x;
        let atr = a.transpose() * r;
        let curv = &atr * atr.transpose() / (s2 * s2) - &ata;
        let lam_min = curv.symmetric_eigenvalues().min();
        let log_here = log_gaussian_isotropic(&task.y, &(&a * x), task.sigma_y);
        (-lam_min).max(0.0) * (log_here - log_ref).exp()
    };
    let mut best = ratio_at(&zbar);
    let comps = model.clean_posterior(z, alpha_bar);
    for c in comps.iter().filter(|c| c.weight > 0.0) {
        let sym = (&c.cov + c.cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let factor = &eig.eigenvectors * Matrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
        for _ in 0..samples {
            let x = &c.mean + &factor * standard_normal(z.len(), rng);
            best = best.max(ratio_at(&x));
        }
    }
    Ok(2.0 * best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::LinearOperator;
    use crate::rng_from_seed;
    use crate::scoremodels::{Covariance, GaussianMixturePrior, GaussianPrior};

    fn gmm2() -> GaussianMixturePrior {
        GaussianMixturePrior::new(
            vec![0.35, 0.65],
            vec![
                Vector::from_vec(vec![-1.0, 0.5]),
                Vector::from_vec(vec![1.2, -0.4]),
            ],
            vec![
                Covariance::Dense(Matrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3])),
                Covariance::Diagonal(Vector::from_vec(vec![0.25, 0.6])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn posterior_mean_trivial_cases() {
        let p = GaussianPrior::standard(1);
        let z = Vector::from_vec(vec![2.0]);
        assert_eq!(posterior_mean(&p, &z, 1.0), z);
        let m = posterior_mean(&p, &z, 0.25);
        assert!((m[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn posterior_cov_trivial_cases() {
        let p = GaussianPrior::standard(3);
        let z = Vector::zeros(3);
        let c = posterior_cov(&p, &z, 0.4).unwrap();
        assert!((c - Matrix::identity(3, 3) * 0.6).amax() < 1e-15);
        assert_eq!(posterior_cov(&p, &z, 1.0).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn hutchinson_on_standard_normal_is_exact_per_probe() {
        let p = GaussianPrior::standard(4);
        let z = Vector::from_vec(vec![0.1, 0.2, -0.3, 1.0]);
        let mut rng = rng_from_seed(21);
        let score = p.score(&z, 0.5);
        for scale in [1.0, 0.3] {
            let probe = standard_normal(4, &mut rng) * scale;
            let v = probe_value(&p, &z, &score, &probe, 0.5, scale);
            assert!((v + probe.norm_squared() / (scale * scale)).abs() < 1e-12);
        }
        let est = hutchinson_trace(&p, &z, 0.5, 10_000, 1.0, &mut rng).unwrap();
        assert!((est.estimate + 4.0).abs() < 3.0 * est.standard_error);
        assert!(hutchinson_trace(&p, &z, 0.5, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn surrogate_zero_residual_and_linear_probe_examples() {
        let p = GaussianPrior::standard(3);
        let codec = LatentCodec::identity(3);
        let z = Vector::from_vec(vec![0.3, -0.2, 0.9]);
        let ab = 0.7;
        let zbar = posterior_mean(&p, &z, ab);
        let task = MeasurementTask::new(LinearOperator::identity(3), 0.1, zbar).unwrap();
        let terms = SurrogateTerms {
            lambda: 1.0,
            eta: 0.0,
            nu: 0.0,
            ..Default::default()
        };
        let s = Surrogate::new(&task, &codec, &p, terms).unwrap();
        assert_eq!(s.loss(&z, ab, &[]).unwrap(), 0.0);
        let eval = s.evaluate(&z, ab, &[], GradientMode::FullJacobian).unwrap();
        assert!(eval.grad.amax() < 1e-15);

        let terms = SurrogateTerms {
            lambda: 0.0,
            eta: 0.02,
            nu: 0.0,
            ..Default::default()
        };
        let s = Surrogate::new(&task, &codec, &p, terms).unwrap();
        let eps = Vector::from_vec(vec![0.5, -1.0, 2.0]);
        let l = s.loss(&z, ab, std::slice::from_ref(&eps)).unwrap();
        assert!((l - 0.02 / 3.0 * -eps.norm_squared()).abs() < 1e-15);
        // Constant Hessian: probe-term gradient vanishes.
        let g = s
            .evaluate(&z, ab, std::slice::from_ref(&eps), GradientMode::FullJacobian)
            .unwrap();
        assert!(g.grad.amax() < 1e-15);
    }

    #[test]
    fn full_jacobian_matches_finite_differences_on_gmm() {
        let p = gmm2();
        let codec = LatentCodec::identity(2);
        let op = LinearOperator::Dense(Matrix::from_row_slice(1, 2, &[0.8, -0.6]));
        let task = MeasurementTask::new(op, 0.2, Vector::from_vec(vec![0.4])).unwrap();
        let terms = SurrogateTerms {
            lambda: 1.0,
            eta: 0.5,
            nu: 0.0,
            eps_scale: 0.7,
            ..Default::default()
        };
        let s = Surrogate::new(&task, &codec, &p, terms).unwrap();
        let mut rng = rng_from_seed(8);
        for _ in 0..10 {
            let z = standard_normal(2, &mut rng);
            let ab = 0.2 + 0.7 * rand::Rng::random::<f64>(&mut rng);
            let probes = draw_probes(2, 2, terms.eps_scale, &mut rng);
            let full = s.evaluate(&z, ab, &probes, GradientMode::FullJacobian).unwrap();
            let fd = s.evaluate(&z, ab, &probes, GradientMode::FiniteDifference).unwrap();
            let dev = (&full.grad - &fd.grad).amax() / fd.grad.amax().max(1e-8);
            assert!(dev <= 1e-4, "relative deviation {dev}");
            assert!((full.loss - fd.loss).abs() < 1e-14);
        }
    }

    #[test]
    fn lower_bound_degenerate_curvature_limit() {
        let p = GaussianPrior::standard(2);
        let op = LinearOperator::identity(2);
        let task = MeasurementTask::new(op, 0.5, Vector::from_vec(vec![0.3, 0.1])).unwrap();
        let z = Vector::from_vec(vec![0.2, -0.1]);
        let ab = 0.8;
        let zbar = posterior_mean(&p, &z, ab);
        let first = log_gaussian_isotropic(&task.y, &zbar, 0.5);
        let lb = lower_bound(&task, &p, &z, ab, 1e-12).unwrap();
        assert!((lb - first).abs() < 1e-10);
        assert!(matches!(lower_bound(&task, &p, &z, 0.01, 10.0), Err(Error::InvalidBound(_))));
    }

    #[test]
    fn exact_likelihood_trivial_cases() {
        let p = gmm2();
        let z = Vector::from_vec(vec![0.3, 0.2]);
        let y = Vector::from_vec(vec![0.5]);
        let zero = LinearOperator::Dense(Matrix::zeros(1, 2));
        let task = MeasurementTask::new(zero, 0.3, y.clone()).unwrap();
        let expect = log_gaussian_isotropic(&y, &Vector::zeros(1), 0.3);
        assert!((exact_log_likelihood(&task, &p, &z, 0.4).unwrap() - expect).abs() < 1e-12);
        let mut rng = rng_from_seed(1);
        let jg = jensen_gap(&task, &p, &z, 0.4, 1000, &mut rng).unwrap();
        assert!(jg.gap < 1e-14);

        let op = LinearOperator::Dense(Matrix::from_row_slice(1, 2, &[1.0, 2.0]));
        let task = MeasurementTask::new(op.clone(), 0.3, y.clone()).unwrap();
        let expect = log_gaussian_isotropic(&y, &op.apply(&z).unwrap(), 0.3);
        assert!((exact_log_likelihood(&task, &p, &z, 1.0).unwrap() - expect).abs() < 1e-9);
        let jg = jensen_gap(&task, &p, &z, 1.0, 1000, &mut rng).unwrap();
        assert!(jg.gap < 1e-9);
    }

    #[test]
    fn half_gamma_ratio_values() {
        // Γ(1)/Γ(1/2), Γ(3/2)/Γ(1), Γ(2)/Γ(3/2)
        assert!((half_gamma_ratio(1) - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
        assert!((half_gamma_ratio(2) - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-15);
        assert!((half_gamma_ratio(3) - 2.0 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
    }
}
