//! Editing on top of an inversion trajectory.
//!
//! 1. Null-embedding optimisation fits per-step embeddings `φ̂_t` so that the
//!    conditional one-step predictor `f(Z_t, k, φ)` reproduces `Z_{t+1}` of the
//!    refined trajectory.
//! 2. The edit chain follows the trajectory with a residual correction,
//!    `Z^e_{t+1} = Z_{t+1} + f(Z^e_t, k, φ̂_t) - f(Z_t, k, φ̂_t)`, so an edit that
//!    changes nothing reproduces the inversion bit for bit.
//! 3. A latent hook stands in for attention control: the blend hook adds
//!    `w · [f(Z^e_t, k, φ̂_t + φ*) - f(Z^e_t, k, φ̂_t)]` for a target offset `φ*`.
//! 4. A single surrogate step, conditioned on the target, corrects the hook
//!    output: measurement term before the switch-on step, feature term after.

use serde::{Deserialize, Serialize};

use crate::operators::{LatentCodec, MeasurementTask};
use crate::samplers::{stsl_invert, Problem, RunReport, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::scoremodels::ConditionalShiftPrior;
use crate::tweedie::{
    draw_probes, FeatureNormalization, GradientMode, SquaredDistance, Surrogate, SurrogateTerms,
};
use crate::{rng_from_seed, Error, Result, Rng, Vector};

/// Per-step embeddings `φ_0 .. φ_{T-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSequence {
    pub embeddings: Vec<Vec<f64>>,
}

impl EmbeddingSequence {
    pub fn new(embeddings: Vec<Vector>) -> Result<Self> {
        if embeddings.iter().flat_map(|e| e.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("embeddings must be finite".into()));
        }
        Ok(Self {
            embeddings: embeddings.into_iter().map(|e| e.iter().cloned().collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn get(&self, t: usize) -> Vector {
        Vector::from_vec(self.embeddings[t].clone())
    }
}

fn predictor_coefficients(schedule: &NoiseSchedule, k: usize) -> Result<(f64, f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidParameter("predictor needs noise index k >= 1".into()));
    }
    schedule.check_index(k)?;
    let ab = schedule.alpha_bar(k);
    let ab_prev = schedule.alpha_bar(k - 1);
    let noise_coef = (1.0 - ab_prev).sqrt() * (1.0 - ab).sqrt();
    Ok((ab, ab_prev, noise_coef))
}

/// Deterministic one-step predictor
/// `f = √ᾱ_{k-1} Z̄(z, k, φ) - √(1-ᾱ_{k-1}) √(1-ᾱ_k) s(z, k, φ)`.
pub fn f_predict(
    model: &ConditionalShiftPrior,
    z: &Vector,
    k: usize,
    phi: &Vector,
    schedule: &NoiseSchedule,
) -> Result<Vector> {
    let (ab, ab_prev, noise_coef) = predictor_coefficients(schedule, k)?;
    let s = model.conditional_score(z, ab, phi)?;
    let zbar = if ab == 1.0 {
        z.clone()
    } else {
        (z + &s * (1.0 - ab)) / ab.sqrt()
    };
    Ok(zbar * ab_prev.sqrt() - s * noise_coef)
}

fn embedding_coefficient(schedule: &NoiseSchedule, k: usize) -> Result<f64> {
    let (ab, ab_prev, noise_coef) = predictor_coefficients(schedule, k)?;
    Ok(if ab == 1.0 {
        -noise_coef
    } else {
        ab_prev.sqrt() * (1.0 - ab) / ab.sqrt() - noise_coef
    })
}

/// `(∂f/∂φ) v`.
pub fn f_embedding_jvp(
    model: &ConditionalShiftPrior,
    z: &Vector,
    k: usize,
    phi: &Vector,
    v: &Vector,
    schedule: &NoiseSchedule,
) -> Result<Vector> {
    let ds = embedding_coefficient(schedule, k)?;
    Ok(model.score_embedding_jvp(z, schedule.alpha_bar(k), phi, v)? * ds)
}

/// `(∂f/∂φ)ᵀ u`.
pub fn f_embedding_vjp(
    model: &ConditionalShiftPrior,
    z: &Vector,
    k: usize,
    phi: &Vector,
    u: &Vector,
    schedule: &NoiseSchedule,
) -> Result<Vector> {
    let ds = embedding_coefficient(schedule, k)?;
    Ok(model.score_embedding_vjp(z, schedule.alpha_bar(k), phi, u)? * ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NullOptConfig {
    pub steps: usize,
    /// Step length as a fraction of the exact line-search step on the
    /// linearised residual.
    pub lr: f64,
}

impl Default for NullOptConfig {
    fn default() -> Self {
        Self { steps: 10, lr: 1.0 }
    }
}

/// Fitted embeddings with the residual history of every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullOptimization {
    pub embeddings: EmbeddingSequence,
    /// `residuals[t][i]` is `‖Z_{t+1} - f(Z_t, T-t, φ)‖²` after `i` accepted
    /// updates; entry 0 is the null-embedding residual.
    pub residuals: Vec<Vec<f64>>,
    /// Steps at which backtracking could not find a decrease.
    pub stalled: Vec<usize>,
}

impl NullOptimization {
    pub fn initial_residual(&self, t: usize) -> f64 {
        self.residuals[t][0]
    }

    pub fn final_residual(&self, t: usize) -> f64 {
        *self.residuals[t].last().expect("residual history is never empty")
    }
}

/// Minimises `‖Z_{t+1} - f(Z_t, T-t, φ)‖²` from `φ = 0` by nonlinear
/// conjugate gradients (Polak-Ribière). Each step starts from `lr` times the
/// minimiser of the linearised residual along the search direction and is
/// halved until the residual does not increase.
pub fn null_optimize(
    trajectory: &[Vector],
    model: &ConditionalShiftPrior,
    schedule: &NoiseSchedule,
    config: &NullOptConfig,
) -> Result<NullOptimization> {
    let t_max = schedule.steps();
    if trajectory.len() != t_max + 1 {
        return Err(Error::dim("trajectory length", t_max + 1, trajectory.len()));
    }
    if config.steps == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidParameter(
            "null optimisation needs steps >= 1 and lr > 0".into(),
        ));
    }
    let h = model.embed_dim();
    let mut embeddings = Vec::with_capacity(t_max);
    let mut residuals = Vec::with_capacity(t_max);
    let mut stalled = Vec::new();
    for t in 0..t_max {
        let k = t_max - t;
        let (z, target) = (&trajectory[t], &trajectory[t + 1]);
        let resid = |phi: &Vector| -> Result<(Vector, f64)> {
            let r = target - f_predict(model, z, k, phi, schedule)?;
            let n = r.norm_squared();
            Ok((r, n))
        };
        let mut phi = Vector::zeros(h);
        let (mut r, mut value) = resid(&phi)?;
        let mut history = vec![value];
        let mut prev: Option<(Vector, Vector)> = None;
        for _ in 0..config.steps {
            let grad = f_embedding_vjp(model, z, k, &phi, &r, schedule)? * -2.0;
            if grad.norm_squared() == 0.0 {
                history.push(value);
                continue;
            }
            // Polak-Ribière direction, restarted when it is not a descent direction.
            let mut dir = -&grad;
            if let Some((g_prev, d_prev)) = &prev {
                let beta = (grad.dot(&(&grad - g_prev)) / g_prev.norm_squared()).max(0.0);
                let candidate = &dir + d_prev * beta;
                if candidate.dot(&grad) < 0.0 {
                    dir = candidate;
                }
            }
            let jd = f_embedding_jvp(model, z, k, &phi, &dir, schedule)?;
            let jd2 = jd.norm_squared();
            let mut lr = if jd2 > 0.0 { config.lr * r.dot(&jd) / jd2 } else { config.lr };
            let mut accepted = false;
            for _ in 0..40 {
                let candidate = &phi + &dir * lr;
                let (rc, vc) = resid(&candidate)?;
                if vc <= value {
                    phi = candidate;
                    r = rc;
                    value = vc;
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted && !stalled.contains(&t) {
                stalled.push(t);
            }
            prev = Some((grad, dir));
            history.push(value);
        }
        if !stalled.is_empty() && stalled.last() == Some(&t) {
            log::debug!("null optimisation stalled at step {t} with residual {value:e}");
        }
        embeddings.push(phi);
        residuals.push(history);
    }
    Ok(NullOptimization {
        embeddings: EmbeddingSequence::new(embeddings)?,
        residuals,
        stalled,
    })
}

/// Latent transform applied to the edit chain's prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Hook {
    Identity,
    Blend { weight: f64 },
}

impl Default for Hook {
    fn default() -> Self {
        Hook::Blend { weight: 1.0 }
    }
}

impl Hook {
    /// Resolves a hook identifier (`identity` or `blend`).
    pub fn from_name(name: &str, weight: f64) -> Result<Hook> {
        match name {
            "identity" => Ok(Hook::Identity),
            "blend" => Ok(Hook::Blend { weight }),
            other => Err(Error::UnknownHook(other.to_string())),
        }
    }
}

/// State seen by a hook at reverse step `t` (noise index `k = T - t`).
pub struct HookContext<'a> {
    pub model: &'a ConditionalShiftPrior,
    pub schedule: &'a NoiseSchedule,
    pub k: usize,
    /// Current edit state `Z^e_t`.
    pub state: &'a Vector,
}

/// Applies `hook` to the predicted next latent `z_next`.
pub fn apply_hook(
    hook: &Hook,
    z_next: &Vector,
    phi_target: &Vector,
    phi_null: &Vector,
    ctx: &HookContext<'_>,
) -> Result<Vector> {
    match *hook {
        Hook::Identity => Ok(z_next.clone()),
        Hook::Blend { weight } => {
            if weight == 0.0 || phi_target.iter().all(|v| *v == 0.0) {
                return Ok(z_next.clone());
            }
            let with = f_predict(ctx.model, ctx.state, ctx.k, &(phi_null + phi_target), ctx.schedule)?;
            let without = f_predict(ctx.model, ctx.state, ctx.k, phi_null, ctx.schedule)?;
            Ok(z_next + (with - without) * weight)
        }
    }
}

/// Single surrogate correction: `z_next - ∇ L(state)` at noise index `k`,
/// with the model conditioned on `phi`. All-zero weights return `z_next`
/// unchanged.
#[allow(clippy::too_many_arguments)]
pub fn edit_step(
    z_next: &Vector,
    state: &Vector,
    task: &MeasurementTask,
    model: &ConditionalShiftPrior,
    phi: &Vector,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    k: usize,
    terms: SurrogateTerms,
    n_probes: usize,
    rng: &mut Rng,
) -> Result<Vector> {
    if terms.lambda == 0.0 && terms.eta == 0.0 && terms.nu == 0.0 {
        return Ok(z_next.clone());
    }
    schedule.check_index(k)?;
    let cond = model.with_embedding(phi)?;
    let feature = SquaredDistance;
    let surrogate = Surrogate::new(task, codec, &cond, terms)?.with_feature_loss(&feature);
    let probes = if terms.eta > 0.0 {
        draw_probes(state.len(), n_probes.max(1), terms.eps_scale, rng)
    } else {
        Vec::new()
    };
    let eval = surrogate.evaluate(state, schedule.alpha_bar(k), &probes, GradientMode::FullJacobian)?;
    Ok(z_next - eval.grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Target embedding offset `φ*`; empty means the null target.
    pub target: Vec<f64>,
    pub hook: Hook,
    pub null: NullOptConfig,
    pub lambda: f64,
    pub eta: f64,
    pub nu: f64,
    pub eps_scale: f64,
    pub probes: usize,
    pub feature_normalization: FeatureNormalization,
    /// First reverse step at which the feature term replaces the measurement term.
    pub switch_on: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            target: Vec::new(),
            hook: Hook::default(),
            null: NullOptConfig::default(),
            lambda: 0.01,
            eta: 0.02,
            nu: 0.02,
            eps_scale: 1.0,
            probes: 2,
            feature_normalization: FeatureNormalization::Raw,
            switch_on: 30,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, schedule: &NoiseSchedule, embed_dim: usize) -> Result<()> {
        if !self.target.is_empty() && self.target.len() != embed_dim {
            return Err(Error::dim("edit target embedding", embed_dim, self.target.len()));
        }
        if self.switch_on > schedule.steps() {
            return Err(Error::InvalidParameter(format!(
                "switch_on {} exceeds the number of steps {}",
                self.switch_on,
                schedule.steps()
            )));
        }
        if let Hook::Blend { weight } = self.hook {
            if !weight.is_finite() {
                return Err(Error::InvalidParameter("blend weight must be finite".into()));
            }
        }
        self.terms_at(0).validate()
    }

    pub fn target_embedding(&self, embed_dim: usize) -> Vector {
        if self.target.is_empty() {
            Vector::zeros(embed_dim)
        } else {
            Vector::from_vec(self.target.clone())
        }
    }

    /// Surrogate weights in force at reverse step `t`.
    pub fn terms_at(&self, t: usize) -> SurrogateTerms {
        let early = t < self.switch_on;
        SurrogateTerms {
            lambda: if early { self.lambda } else { 0.0 },
            eta: self.eta,
            nu: if early { 0.0 } else { self.nu },
            eps_scale: self.eps_scale,
            feature_normalization: self.feature_normalization,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditReport {
    pub inversion: Option<RunReport>,
    pub latent: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub null_optimization: NullOptimization,
    #[serde(skip)]
    pub trajectory: Vec<Vector>,
}

/// Stage two only: edit along a given reverse trajectory `Z_0 .. Z_T`.
#[allow(clippy::too_many_arguments)]
pub fn edit_from_trajectory(
    trajectory: &[Vector],
    task: &MeasurementTask,
    model: &ConditionalShiftPrior,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    config: &EditConfig,
    seed: u64,
) -> Result<EditReport> {
    config.validate(schedule, model.embed_dim())?;
    let t_max = schedule.steps();
    let null = null_optimize(trajectory, model, schedule, &config.null)?;
    let target = config.target_embedding(model.embed_dim());
    let mut rng = rng_from_seed(seed ^ 0x5eed_ed17);
    let mut state = trajectory[0].clone();
    let mut edited = vec![state.clone()];
    for t in 0..t_max {
        let k = t_max - t;
        let phi_hat = null.embeddings.get(t);
        let chain = if state == trajectory[t] {
            trajectory[t + 1].clone()
        } else {
            let here = f_predict(model, &state, k, &phi_hat, schedule)?;
            let there = f_predict(model, &trajectory[t], k, &phi_hat, schedule)?;
            &trajectory[t + 1] + (here - there)
        };
        let ctx = HookContext {
            model,
            schedule,
            k,
            state: &state,
        };
        let hooked = apply_hook(&config.hook, &chain, &target, &phi_hat, &ctx)?;
        let next = edit_step(
            &hooked,
            &state,
            task,
            model,
            &(&phi_hat + &target),
            codec,
            schedule,
            k,
            config.terms_at(t),
            config.probes,
            &mut rng,
        )?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                inner: 0,
                snapshot: "edit chain diverged".into(),
            });
        }
        state = next;
        edited.push(state.clone());
    }
    Ok(EditReport {
        inversion: None,
        reconstruction: codec.decode(&state)?.iter().cloned().collect(),
        latent: state.iter().cloned().collect(),
        null_optimization: null,
        trajectory: edited,
    })
}

/// Inversion with the refined sampler (null embedding) followed by editing
/// along its trajectory.
pub fn edit_pipeline(
    task: &MeasurementTask,
    model: &ConditionalShiftPrior,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    config: &EditConfig,
) -> Result<EditReport> {
    config.validate(schedule, model.embed_dim())?;
    let base = model.with_embedding(&Vector::zeros(model.embed_dim()))?;
    let problem = Problem::new(task, &base, codec, schedule);
    let inversion = stsl_invert(&problem, sampler)?;
    let mut report = edit_from_trajectory(
        &inversion.trajectory,
        task,
        model,
        codec,
        schedule,
        config,
        sampler.seed,
    )?;
    report.inversion = Some(inversion);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleFamily;
    use crate::scoremodels::{Covariance, GaussianMixturePrior};
    use crate::{Matrix, standard_normal};

    fn shift_model() -> ConditionalShiftPrior {
        let base = GaussianMixturePrior::new(
            vec![1.0],
            vec![Vector::zeros(2)],
            vec![Covariance::Scalar(1.0)],
        )
        .unwrap();
        ConditionalShiftPrior::new(base, Matrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn null_embedding_is_unconditional_prediction() {
        let m = shift_model();
        let s = NoiseSchedule::default_linear();
        let z = Vector::from_vec(vec![0.4, -1.1]);
        let f = f_predict(&m, &z, 20, &Vector::zeros(2), &s).unwrap();
        let ab = s.alpha_bar(20);
        let sc = -&z;
        let zbar = (&z + &sc * (1.0 - ab)) / ab.sqrt();
        let expect = zbar * s.alpha_bar(19).sqrt() - sc * ((1.0 - s.alpha_bar(19)).sqrt() * (1.0 - ab).sqrt());
        assert!((f - expect).amax() < 1e-15);
    }

    #[test]
    fn unit_alpha_fixed_point() {
        let m = shift_model();
        let s = NoiseSchedule::new(4, ScheduleFamily::ConstantAlpha { alpha: 1.0 }).unwrap();
        let z = Vector::zeros(2);
        assert_eq!(f_predict(&m, &z, 2, &Vector::zeros(2), &s).unwrap(), z);
        assert!(f_predict(&m, &z, 0, &Vector::zeros(2), &s).is_err());
    }

    #[test]
    fn embedding_vjp_matches_finite_differences() {
        let m = shift_model();
        let s = NoiseSchedule::default_linear();
        let mut rng = rng_from_seed(12);
        for k in [1, 10, 49] {
            let z = standard_normal(2, &mut rng);
            let phi = standard_normal(2, &mut rng);
            let u = standard_normal(2, &mut rng);
            let vjp = f_embedding_vjp(&m, &z, k, &phi, &u, &s).unwrap();
            for j in 0..2 {
                let mut e = Vector::zeros(2);
                e[j] = 1e-6;
                let fd = (f_predict(&m, &z, k, &(&phi + &e), &s).unwrap()
                    - f_predict(&m, &z, k, &(&phi - &e), &s).unwrap())
                    / 2e-6;
                assert!((fd.dot(&u) - vjp[j]).abs() <= 1e-5 * vjp.amax().max(1.0));
            }
        }
    }

    #[test]
    fn planted_null_has_zero_residual() {
        let m = shift_model();
        let s = NoiseSchedule::new(3, ScheduleFamily::default()).unwrap();
        let mut traj = vec![Vector::from_vec(vec![0.3, 0.2])];
        for t in 0..3 {
            let next = f_predict(&m, &traj[t], 3 - t, &Vector::zeros(2), &s).unwrap();
            traj.push(next);
        }
        let out = null_optimize(&traj, &m, &s, &NullOptConfig::default()).unwrap();
        for t in 0..3 {
            assert_eq!(out.initial_residual(t), 0.0);
            assert_eq!(out.embeddings.get(t), Vector::zeros(2));
        }
    }

    #[test]
    fn hooks() {
        let m = shift_model();
        let s = NoiseSchedule::default_linear();
        let z = Vector::from_vec(vec![0.1, 0.2]);
        let ctx = HookContext {
            model: &m,
            schedule: &s,
            k: 5,
            state: &z,
        };
        let target = Vector::from_vec(vec![1.0, 0.0]);
        let null = Vector::zeros(2);
        assert_eq!(apply_hook(&Hook::Identity, &z, &target, &null, &ctx).unwrap(), z);
        assert_eq!(apply_hook(&Hook::Blend { weight: 0.0 }, &z, &target, &null, &ctx).unwrap(), z);
        let moved = apply_hook(&Hook::Blend { weight: 1.0 }, &z, &target, &null, &ctx).unwrap();
        assert!(moved[0] > z[0]);
        assert!(matches!(Hook::from_name("cross-attention", 1.0), Err(Error::UnknownHook(_))));
    }
}
