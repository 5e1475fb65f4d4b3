//! Reverse-process samplers.
//!
//! The refined sampler encodes the measurement forward along the
//! deterministic score flow, then walks back from `k = T` to `k = 1`. At each
//! reverse step it takes `K` optimizer steps on the surrogate loss (fresh
//! probes per step) and finishes with the noiseless combine
//!
//! ```text
//! Z_{t+1} = √α_k (1-ᾱ_{k-1}) / (1-ᾱ_k) · Z_t + √ᾱ_{k-1} (1-α_k) / (1-ᾱ_k) · Z̄,   k = T - t
//! ```
//!
//! The biased and first-order baselines reuse the same loop with forced
//! overrides, so guidance-off runs of all three coincide exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::operators::{LatentCodec, MeasurementTask};
use crate::schedule::NoiseSchedule;
use crate::scoremodels::ScoreModel;
use crate::tweedie::{
    draw_probes, posterior_mean_from_score, FeatureLoss, FeatureNormalization, GradientMode, Surrogate,
    SurrogateTerms,
};
use crate::{rng_from_seed, standard_normal, Error, Result, Rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Stsl,
    StslBiased,
    FirstOrder,
    Unconditional,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Stsl,
        Variant::StslBiased,
        Variant::FirstOrder,
        Variant::Unconditional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Stsl => "stsl",
            Variant::StslBiased => "stsl-biased",
            Variant::FirstOrder => "first-order",
            Variant::Unconditional => "unconditional",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    ForwardLatent,
    PureNoise,
}

/// Deterministic forward map used to build `Z⃗_0 .. Z⃗_T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// `Z⃗_{t+1} = √α_{t+1} Z⃗_t - √(1-α_{t+1}) √(1-ᾱ_t) s(Z⃗_t)`. Expands the
    /// latent geometrically (about ×4900 over the default linear schedule for a
    /// standard-normal prior).
    ScoreFlow,
    /// DDIM inversion: `Z⃗_{t+1} = √ᾱ_{t+1} X̂_0 + √(1-ᾱ_{t+1}) ε̂` with
    /// `X̂_0` from Tweedie and `ε̂ = -√(1-ᾱ_t) s(Z⃗_t)`.
    #[default]
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Plain,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of diffusion steps `T`; must match the schedule.
    pub steps: usize,
    /// Stochastic-averaging iterations `K` per diffusion step.
    pub inner_steps: usize,
    /// Probes `N` per averaging iteration.
    pub probes: usize,
    pub lambda: f64,
    pub eta: f64,
    pub nu: f64,
    pub eps_scale: f64,
    pub feature_normalization: FeatureNormalization,
    /// Weight of the proximal pull `κ ‖Z_t - Z⃗_{T-t}‖²` towards the forward latents.
    pub kappa: f64,
    pub lr0: f64,
    pub lr_decay: f64,
    pub grad_mode: GradientMode,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub init_mode: InitMode,
    pub encoding: Encoding,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            inner_steps: 5,
            probes: 2,
            lambda: 1.0,
            eta: 0.02,
            nu: 0.0,
            eps_scale: 1.0,
            feature_normalization: FeatureNormalization::PerDimension,
            kappa: 0.0,
            lr0: 1e-2,
            lr_decay: 0.998,
            grad_mode: GradientMode::FullJacobian,
            optimizer: OptimizerKind::Adam,
            adam: AdamParams::default(),
            init_mode: InitMode::ForwardLatent,
            encoding: Encoding::Ddim,
            variant: Variant::Stsl,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn terms(&self) -> SurrogateTerms {
        SurrogateTerms {
            lambda: self.lambda,
            eta: self.eta,
            nu: self.nu,
            eps_scale: self.eps_scale,
            feature_normalization: self.feature_normalization,
        }
    }

    /// The configuration actually run: baseline variants force their
    /// defining overrides.
    pub fn effective(&self) -> SamplerConfig {
        let mut c = self.clone();
        match c.variant {
            Variant::Stsl | Variant::Unconditional => {}
            Variant::StslBiased => {
                c.inner_steps = 1;
                c.eta = 0.0;
                c.init_mode = InitMode::ForwardLatent;
            }
            Variant::FirstOrder => {
                c.inner_steps = 1;
                c.eta = 0.0;
                c.nu = 0.0;
                c.kappa = 0.0;
                c.init_mode = InitMode::PureNoise;
            }
        }
        c
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.steps != schedule.steps() {
            return bad(format!(
                "sampler steps {} differ from schedule steps {}",
                self.steps,
                schedule.steps()
            ));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        if self.eta > 0.0 && self.probes == 0 {
            return bad("probes must be at least 1 when eta > 0".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and nonnegative, got {}", self.lr0));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be finite and nonnegative, got {}", self.kappa));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam parameters need beta1, beta2 in [0, 1) and eps > 0".into());
        }
        self.terms().validate()
    }
}

/// Forward score evaluations by purpose, plus Hessian-vector products.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCounts {
    pub guidance: u64,
    pub probe: u64,
    pub combine: u64,
    pub forward_encoding: u64,
    /// Hessian-vector products (not forward score calls).
    pub hvp: u64,
}

impl NfeCounts {
    /// Total forward score calls.
    pub fn raw(&self) -> u64 {
        self.guidance + self.probe + self.combine + self.forward_encoding
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeReport {
    pub raw: u64,
    /// `T · K` guidance evaluations.
    pub paper_convention: u64,
    pub guidance: u64,
    pub probe: u64,
    pub combine: u64,
    pub forward_encoding: u64,
    pub hvp: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    /// Effective configuration after variant overrides.
    pub config: SamplerConfig,
    pub latent: Vec<f64>,
    pub reconstruction: Vec<f64>,
    /// Surrogate loss at the last averaging iteration of every reverse step.
    pub losses: Vec<f64>,
    pub nfe: NfeCounts,
    /// Wall time in milliseconds; only filled in when timing is requested.
    pub wall_ms: Option<f64>,
    /// Reverse-process states `Z_0 .. Z_T`.
    #[serde(skip)]
    pub trajectory: Vec<Vector>,
}

pub fn nfe_report(report: &RunReport) -> NfeReport {
    let n = report.nfe;
    NfeReport {
        raw: n.raw(),
        paper_convention: (report.config.steps * report.config.inner_steps) as u64,
        guidance: n.guidance,
        probe: n.probe,
        combine: n.combine,
        forward_encoding: n.forward_encoding,
        hvp: n.hvp,
    }
}

/// Closed-form raw count for a run with score reuse:
/// `T (K (N_eff + 1) + 1) + T_fwd` where `N_eff = N` if the trace term is on.
pub fn expected_raw_nfe(config: &SamplerConfig) -> u64 {
    let c = config.effective();
    let t = c.steps as u64;
    let k = c.inner_steps as u64;
    let n = if c.eta > 0.0 { c.probes as u64 } else { 0 };
    let fwd = if c.init_mode == InitMode::ForwardLatent || c.kappa > 0.0 {
        t
    } else {
        0
    };
    t * (k * (n + 1) + 1) + fwd
}

fn check_finite(z: &Vector, step: usize, inner: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let mut snapshot = String::new();
    let bad = z.iter().filter(|v| !v.is_finite()).count();
    let _ = write!(snapshot, "{bad} of {} entries non-finite; head [", z.len());
    for (i, v) in z.iter().take(6).enumerate() {
        let _ = write!(snapshot, "{}{v:e}", if i > 0 { ", " } else { "" });
    }
    snapshot.push(']');
    Err(Error::NonFinite { step, inner, snapshot })
}

/// Deterministic score-flow encoding `Z⃗_0 .. Z⃗_T` starting from
/// `encode(Aᵀ y)`:
/// `Z⃗_{t+1} = √α_{t+1} Z⃗_t - √(1-α_{t+1}) √(1-ᾱ_t) s(Z⃗_t, ᾱ_t)`.
/// Returns the latents and the number of score calls (`T`).
pub fn forward_encode<M: ScoreModel + ?Sized>(
    model: &M,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    task: &MeasurementTask,
) -> Result<(Vec<Vector>, u64)> {
    forward_encode_with(model, codec, schedule, task, Encoding::ScoreFlow)
}

pub fn forward_encode_with<M: ScoreModel + ?Sized>(
    model: &M,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    task: &MeasurementTask,
    encoding: Encoding,
) -> Result<(Vec<Vector>, u64)> {
    let start = codec.encode(&task.operator.adjoint(&task.y)?)?;
    if start.len() != model.dim() {
        return Err(Error::dim("codec latent vs model", model.dim(), start.len()));
    }
    forward_encode_from(model, schedule, start, encoding)
}

/// Forward encoding from an explicit starting latent.
pub fn forward_encode_from<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    start: Vector,
    encoding: Encoding,
) -> Result<(Vec<Vector>, u64)> {
    let t_max = schedule.steps();
    let mut latents = Vec::with_capacity(t_max + 1);
    latents.push(start);
    for t in 0..t_max {
        let z = &latents[t];
        let ab = schedule.alpha_bar(t);
        let s = model.score(z, ab);
        let next = match encoding {
            Encoding::ScoreFlow => {
                let a = schedule.alpha(t + 1);
                z * a.sqrt() - s * ((1.0 - a).sqrt() * (1.0 - ab).sqrt())
            }
            Encoding::Ddim => {
                let ab_next = schedule.alpha_bar(t + 1);
                let x0 = posterior_mean_from_score(z, &s, ab);
                let eps = &s * -(1.0 - ab).sqrt();
                x0 * ab_next.sqrt() + eps * (1.0 - ab_next).sqrt()
            }
        };
        check_finite(&next, t, 0)?;
        latents.push(next);
    }
    Ok((latents, t_max as u64))
}

/// Coefficients `(c_z, c_mean)` of the combine step at noise index `k`, or
/// `None` when `1 - ᾱ_k` vanishes and `Z̄` should be carried instead.
pub fn combine_coefficients(schedule: &NoiseSchedule, k: usize) -> Option<(f64, f64)> {
    let ab = schedule.alpha_bar(k);
    let ab_prev = schedule.alpha_bar(k - 1);
    let a = schedule.alpha(k);
    let denom = 1.0 - ab;
    if !(denom > 0.0) {
        return None;
    }
    Some((a.sqrt() * (1.0 - ab_prev) / denom, ab_prev.sqrt() * (1.0 - a) / denom))
}

fn combine(schedule: &NoiseSchedule, k: usize, z: &Vector, zbar: &Vector) -> Vector {
    match combine_coefficients(schedule, k) {
        Some((cz, cm)) => z * cz + zbar * cm,
        None => {
            log::warn!("1 - alpha_bar underflows at noise index {k}; carrying the posterior mean");
            zbar.clone()
        }
    }
}

struct Adam {
    params: AdamParams,
    m: Vector,
    v: Vector,
    t: i32,
}

impl Adam {
    fn new(dim: usize, params: AdamParams) -> Self {
        Self {
            params,
            m: Vector::zeros(dim),
            v: Vector::zeros(dim),
            t: 0,
        }
    }

    fn step(&mut self, z: &mut Vector, grad: &Vector, lr: f64) {
        let AdamParams { beta1, beta2, eps } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..z.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            z[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Inputs shared by the guided samplers.
pub struct Problem<'a, M: ?Sized> {
    pub task: &'a MeasurementTask,
    pub model: &'a M,
    pub codec: &'a LatentCodec,
    pub schedule: &'a NoiseSchedule,
    pub feature_loss: Option<&'a dyn FeatureLoss>,
}

impl<'a, M: ScoreModel + ?Sized> Problem<'a, M> {
    pub fn new(
        task: &'a MeasurementTask,
        model: &'a M,
        codec: &'a LatentCodec,
        schedule: &'a NoiseSchedule,
    ) -> Self {
        Self {
            task,
            model,
            codec,
            schedule,
            feature_loss: None,
        }
    }

    pub fn with_feature_loss(mut self, loss: &'a dyn FeatureLoss) -> Self {
        self.feature_loss = Some(loss);
        self
    }
}

/// Runs the configured variant.
pub fn run<M: ScoreModel + ?Sized>(problem: &Problem<'_, M>, config: &SamplerConfig) -> Result<RunReport> {
    match config.variant {
        Variant::Stsl => stsl_invert(problem, config),
        Variant::StslBiased => stsl_biased_invert(problem, config),
        Variant::FirstOrder => first_order_invert(problem, config),
        Variant::Unconditional => sample_prior_report(problem.model, problem.codec, problem.schedule, config),
    }
}

pub fn stsl_invert<M: ScoreModel + ?Sized>(problem: &Problem<'_, M>, config: &SamplerConfig) -> Result<RunReport> {
    let mut c = config.clone();
    c.variant = Variant::Stsl;
    refine(problem, &c.effective())
}

pub fn stsl_biased_invert<M: ScoreModel + ?Sized>(
    problem: &Problem<'_, M>,
    config: &SamplerConfig,
) -> Result<RunReport> {
    let mut c = config.clone();
    c.variant = Variant::StslBiased;
    refine(problem, &c.effective())
}

pub fn first_order_invert<M: ScoreModel + ?Sized>(
    problem: &Problem<'_, M>,
    config: &SamplerConfig,
) -> Result<RunReport> {
    let mut c = config.clone();
    c.variant = Variant::FirstOrder;
    refine(problem, &c.effective())
}

fn refine<M: ScoreModel + ?Sized>(problem: &Problem<'_, M>, cfg: &SamplerConfig) -> Result<RunReport> {
    let Problem {
        task,
        model,
        codec,
        schedule,
        ..
    } = *problem;
    cfg.validate(schedule)?;
    let mut surrogate = Surrogate::new(task, codec, model, cfg.terms())?;
    if let Some(f) = problem.feature_loss {
        surrogate = surrogate.with_feature_loss(f);
    }
    let t_max = schedule.steps();
    let d = model.dim();
    let mut rng = rng_from_seed(cfg.seed);
    let mut nfe = NfeCounts::default();

    let forward = if cfg.init_mode == InitMode::ForwardLatent || cfg.kappa > 0.0 {
        let (latents, calls) = forward_encode_with(model, codec, schedule, task, cfg.encoding)?;
        nfe.forward_encoding = calls;
        Some(latents)
    } else {
        None
    };
    let mut z = match (cfg.init_mode, &forward) {
        (InitMode::ForwardLatent, Some(f)) => f[t_max].clone(),
        _ => standard_normal(d, &mut rng),
    };

    let mut trajectory = Vec::with_capacity(t_max + 1);
    trajectory.push(z.clone());
    let mut losses = Vec::with_capacity(t_max);
    let mut adam = Adam::new(d, cfg.adam);
    let n_probes = if cfg.eta > 0.0 { cfg.probes } else { 0 };

    for t in 0..t_max {
        let k = t_max - t;
        let ab = schedule.alpha_bar(k);
        let lr = cfg.lr0 * cfg.lr_decay.powi(t as i32);
        let mut loss = f64::NAN;
        for inner in 0..cfg.inner_steps {
            let probes = draw_probes(d, n_probes, cfg.eps_scale, &mut rng);
            let eval = surrogate.evaluate(&z, ab, &probes, cfg.grad_mode)?;
            nfe.guidance += eval.guidance_calls;
            nfe.probe += eval.probe_calls;
            nfe.hvp += eval.hvp_calls;
            let mut grad = eval.grad;
            loss = eval.loss;
            if cfg.kappa > 0.0 {
                let anchor = &forward.as_ref().expect("forward latents computed when kappa > 0")[k];
                let diff = &z - anchor;
                loss += cfg.kappa * diff.norm_squared();
                grad.axpy(2.0 * cfg.kappa, &diff, 1.0);
            }
            match cfg.optimizer {
                OptimizerKind::Plain => z.axpy(-lr, &grad, 1.0),
                OptimizerKind::Adam => adam.step(&mut z, &grad, lr),
            }
            check_finite(&z, t, inner)?;
        }
        losses.push(loss);
        let s = model.score(&z, ab);
        nfe.combine += 1;
        let zbar = posterior_mean_from_score(&z, &s, ab);
        z = combine(schedule, k, &z, &zbar);
        check_finite(&z, t, cfg.inner_steps)?;
        trajectory.push(z.clone());
    }

    Ok(RunReport {
        variant: cfg.variant,
        seed: cfg.seed,
        config: cfg.clone(),
        reconstruction: codec.decode(&z)?.iter().cloned().collect(),
        latent: z.iter().cloned().collect(),
        losses,
        nfe,
        wall_ms: None,
        trajectory,
    })
}

/// Ancestral sampling from the prior: `Z_T ~ N(0, I)`, then for `k = T .. 1`
/// the combine mean plus `√β_k` Gaussian noise. The `β_k` variance makes the
/// chain exact for a standard-normal prior.
pub fn sample_prior<M: ScoreModel + ?Sized>(
    model: &M,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vector> {
    let (z, _) = ancestral(model, schedule, rng)?;
    codec.decode(&z)
}

fn ancestral<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Vector, Vec<Vector>)> {
    let d = model.dim();
    let t_max = schedule.steps();
    let mut z = standard_normal(d, rng);
    let mut trajectory = vec![z.clone()];
    for t in 0..t_max {
        let k = t_max - t;
        let ab = schedule.alpha_bar(k);
        let s = model.score(&z, ab);
        let zbar = posterior_mean_from_score(&z, &s, ab);
        z = combine(schedule, k, &z, &zbar);
        let beta = 1.0 - schedule.alpha(k);
        if beta > 0.0 {
            z.axpy(beta.sqrt(), &standard_normal(d, rng), 1.0);
        }
        check_finite(&z, t, 0)?;
        trajectory.push(z.clone());
    }
    Ok((z, trajectory))
}

/// Unconditional sampling packaged as a report.
pub fn sample_prior_report<M: ScoreModel + ?Sized>(
    model: &M,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<RunReport> {
    let mut cfg = config.clone();
    cfg.variant = Variant::Unconditional;
    cfg.validate(schedule)?;
    let mut rng = rng_from_seed(cfg.seed);
    let (z, trajectory) = ancestral(model, schedule, &mut rng)?;
    let t = schedule.steps() as u64;
    Ok(RunReport {
        variant: Variant::Unconditional,
        seed: cfg.seed,
        reconstruction: codec.decode(&z)?.iter().cloned().collect(),
        latent: z.iter().cloned().collect(),
        losses: Vec::new(),
        nfe: NfeCounts {
            combine: t,
            ..Default::default()
        },
        config: cfg,
        wall_ms: None,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::LinearOperator;
    use crate::schedule::ScheduleFamily;
    use crate::scoremodels::{Counting, GaussianPrior};

    fn small_task() -> (MeasurementTask, GaussianPrior, LatentCodec) {
        let prior = GaussianPrior::standard(3);
        let task = MeasurementTask::new(
            LinearOperator::identity(3),
            0.1,
            Vector::from_vec(vec![0.5, -0.2, 0.8]),
        )
        .unwrap();
        (task, prior, LatentCodec::identity(3))
    }

    #[test]
    fn constant_alpha_forward_encoding_is_constant() {
        let (task, prior, codec) = small_task();
        let s = NoiseSchedule::new(7, ScheduleFamily::ConstantAlpha { alpha: 1.0 }).unwrap();
        let (latents, calls) = forward_encode(&prior, &codec, &s, &task).unwrap();
        assert_eq!(calls, 7);
        assert!(latents.iter().all(|z| *z == task.y));
    }

    #[test]
    fn standard_normal_forward_encoding_is_geometric() {
        let (task, prior, codec) = small_task();
        let s = NoiseSchedule::default_linear();
        let (latents, _) = forward_encode(&prior, &codec, &s, &task).unwrap();
        for t in 0..50 {
            let a = s.alpha(t + 1);
            let factor = a.sqrt() + (1.0 - a).sqrt() * (1.0 - s.alpha_bar(t)).sqrt();
            let expect = &latents[t] * factor;
            assert!((&latents[t + 1] - &expect).amax() <= 1e-14 * expect.amax());
        }
    }

    #[test]
    fn biased_override_and_counts() {
        let (task, prior, codec) = small_task();
        let s = NoiseSchedule::default_linear();
        let p = Problem::new(&task, &prior, &codec, &s);
        let cfg = SamplerConfig::default();
        let r = stsl_biased_invert(&p, &cfg).unwrap();
        assert_eq!((r.config.inner_steps, r.config.eta), (1, 0.0));
        assert_eq!(r.nfe.guidance, 50);
        assert_eq!(nfe_report(&r).paper_convention, 50);
        let r = stsl_invert(&p, &cfg).unwrap();
        assert_eq!(r.nfe.guidance, 250);
        assert_eq!(nfe_report(&r).paper_convention, 250);
        let r = first_order_invert(&p, &cfg).unwrap();
        assert_eq!(r.nfe.guidance, 50);
        assert_eq!(r.config.init_mode, InitMode::PureNoise);
    }

    #[test]
    fn raw_count_matches_instrumented_counter() {
        let (task, prior, codec) = small_task();
        let s = NoiseSchedule::default_linear();
        for variant in [Variant::Stsl, Variant::StslBiased, Variant::FirstOrder] {
            let counted = Counting::new(prior.clone());
            let p = Problem::new(&task, &counted, &codec, &s);
            let cfg = SamplerConfig {
                variant,
                ..Default::default()
            };
            let r = run(&p, &cfg).unwrap();
            assert_eq!(r.nfe.raw(), counted.score_calls());
            assert_eq!(r.nfe.raw(), expected_raw_nfe(&cfg));
            assert_eq!(r.nfe.hvp, counted.hvp_calls());
        }
    }

    #[test]
    fn combine_is_identity_when_alpha_is_one() {
        let s = NoiseSchedule::new(3, ScheduleFamily::ConstantAlpha { alpha: 1.0 }).unwrap();
        assert_eq!(combine_coefficients(&s, 2), None);
        let z = Vector::from_vec(vec![1.0, 2.0]);
        assert_eq!(combine(&s, 2, &z, &z), z);
    }

    #[test]
    fn unit_alpha_sampling_returns_initial_draw() {
        let prior = GaussianPrior::standard(2);
        let codec = LatentCodec::identity(2);
        let s = NoiseSchedule::new(1, ScheduleFamily::ConstantAlpha { alpha: 1.0 }).unwrap();
        let mut rng = rng_from_seed(4);
        let out = sample_prior(&prior, &codec, &s, &mut rng).unwrap();
        let mut rng = rng_from_seed(4);
        assert_eq!(out, standard_normal(2, &mut rng));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let s = NoiseSchedule::default_linear();
        let ok = SamplerConfig::default();
        assert!(ok.validate(&s).is_ok());
        for bad in [
            SamplerConfig { steps: 10, ..ok.clone() },
            SamplerConfig { inner_steps: 0, ..ok.clone() },
            SamplerConfig { lr_decay: 1.5, ..ok.clone() },
            SamplerConfig { probes: 0, ..ok.clone() },
            SamplerConfig { eps_scale: 0.0, ..ok.clone() },
        ] {
            assert!(bad.validate(&s).is_err());
        }
    }

    #[test]
    fn nan_aborts_with_snapshot() {
        let (task, prior, codec) = small_task();
        let s = NoiseSchedule::default_linear();
        let p = Problem::new(&task, &prior, &codec, &s);
        let cfg = SamplerConfig {
            optimizer: OptimizerKind::Plain,
            lr0: f64::MAX,
            lambda: 1e300,
            ..Default::default()
        };
        match stsl_invert(&p, &cfg) {
            Err(Error::NonFinite { step, snapshot, .. }) => {
                assert_eq!(step, 0);
                assert!(snapshot.contains("non-finite"));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
