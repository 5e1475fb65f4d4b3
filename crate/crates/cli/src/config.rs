//! Experiment configuration: a TOML document with `[schedule]`, `[prior]`,
//! `[task]`, `[codec]`, `[sampler]`, `[edit]`, `[metrics]`, `[output]`,
//! `[bias_study]` and `[sample]` sections plus a top-level `seeds` list.
//! Every section is optional and falls back to the bundled defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stsl_core::editing::{EditConfig, Hook, NullOptConfig};
use stsl_core::metrics::SsimParams;
use stsl_core::samplers::SamplerConfig;
use stsl_core::schedule::{NoiseSchedule, ScheduleFamily};
use stsl_core::synthetic::TaskFamily;
use stsl_core::tweedie::FeatureNormalization;

/// The configuration used when `--config` is not given.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

/// A configuration problem, located at a line of the source when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source_name: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.source_name, line, self.message),
            None => write!(f, "{}: {}", self.source_name, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output: OutputSection,
    pub schedule: ScheduleSection,
    pub prior: PriorSection,
    pub task: TaskSection,
    pub codec: CodecSection,
    pub sampler: SamplerConfig,
    pub edit: EditSection,
    pub metrics: MetricsSection,
    pub bias_study: BiasStudySection,
    pub sample: SampleSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output: OutputSection::default(),
            schedule: ScheduleSection::default(),
            prior: PriorSection::default(),
            task: TaskSection::default(),
            codec: CodecSection::default(),
            sampler: SamplerConfig::default(),
            edit: EditSection::default(),
            metrics: MetricsSection::default(),
            bias_study: BiasStudySection::default(),
            sample: SampleSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
    ConstantAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub family: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub offset: f64,
    pub alpha: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 50,
            family: ScheduleKind::LinearBeta,
            beta_start: 1e-4,
            beta_end: 0.2,
            offset: 0.008,
            alpha: 1.0,
        }
    }
}

impl ScheduleSection {
    pub fn family(&self) -> ScheduleFamily {
        match self.family {
            ScheduleKind::LinearBeta => ScheduleFamily::LinearBeta {
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            ScheduleKind::Cosine => ScheduleFamily::Cosine { offset: self.offset },
            ScheduleKind::ConstantAlpha => ScheduleFamily::ConstantAlpha { alpha: self.alpha },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// Four-template Gaussian mixture over `side × side` images.
    Image,
    Gaussian,
    Gmm,
}

/// A scalar (isotropic) or per-coordinate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub kind: PriorKind,
    /// Image side for the `image` prior.
    pub side: usize,
    /// Dimension for a `gaussian` prior given by scalar mean and variance.
    pub dim: Option<usize>,
    pub mean: Option<ScalarOrVec>,
    pub variance: Option<ScalarOrVec>,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<ScalarOrVec>,
    /// Raw float64 file holding one component mean per row (`gmm` only).
    pub means_file: Option<PathBuf>,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            kind: PriorKind::Image,
            side: 32,
            dim: None,
            mean: None,
            variance: None,
            weights: Vec::new(),
            means: Vec::new(),
            variances: Vec::new(),
            means_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Identity,
    Inpaint,
    Blur,
    MotionBlur,
    Downsample,
    SaltPepper,
    Convolution,
    Dense,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Identity => "identity",
            OperatorKind::Inpaint => "inpaint",
            OperatorKind::Blur => "blur",
            OperatorKind::MotionBlur => "motion-blur",
            OperatorKind::Downsample => "downsample",
            OperatorKind::SaltPepper => "salt-pepper",
            OperatorKind::Convolution => "convolution",
            OperatorKind::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub operator: OperatorKind,
    pub sigma_y: f64,
    pub drop_rate: f64,
    /// PGM bitmap: nonzero pixels are kept (`inpaint` only).
    pub mask_file: Option<PathBuf>,
    pub factor: usize,
    pub kernel_side: usize,
    pub blur_sigma: f64,
    pub motion_length: usize,
    pub motion_angle: f64,
    /// Plain-text square kernel (`convolution` only).
    pub kernel_file: Option<PathBuf>,
    /// Dense operator rows (`dense` only).
    pub matrix: Vec<Vec<f64>>,
    pub salt_pepper_rate: f64,
    /// Clean image as PGM; when absent a clean image is drawn from the prior.
    pub image: Option<PathBuf>,
    /// Image shape `[rows, cols]` for non-image priors.
    pub shape: Option<[usize; 2]>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            operator: OperatorKind::Inpaint,
            sigma_y: 0.05,
            drop_rate: 0.4,
            mask_file: None,
            factor: 4,
            kernel_side: 9,
            blur_sigma: 1.5,
            motion_length: 9,
            motion_angle: 0.0,
            kernel_file: None,
            matrix: Vec::new(),
            salt_pepper_rate: 0.02,
            image: None,
            shape: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecKind {
    Identity,
    /// 2×2 block pooling; data images are twice the prior's side.
    Pooling,
    RandomOrthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub kind: CodecKind,
    /// Data dimension for `random-orthogonal`.
    pub data_dim: Option<usize>,
    pub seed: u64,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            kind: CodecKind::Identity,
            data_dim: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    /// Explicit target embedding `φ*`.
    pub target: Vec<f64>,
    /// Alternatively, shift the source's nearest component onto this one.
    pub target_component: Option<usize>,
    pub hook: String,
    pub hook_weight: f64,
    pub null_steps: usize,
    pub null_lr: f64,
    pub lambda: f64,
    pub eta: f64,
    pub nu: f64,
    pub eps_scale: f64,
    pub probes: usize,
    pub feature_normalization: FeatureNormalization,
    pub switch_on: usize,
}

impl Default for EditSection {
    fn default() -> Self {
        let e = EditConfig::default();
        Self {
            target: Vec::new(),
            target_component: None,
            hook: "blend".into(),
            hook_weight: 1.0,
            null_steps: e.null.steps,
            null_lr: e.null.lr,
            lambda: e.lambda,
            eta: e.eta,
            nu: e.nu,
            eps_scale: e.eps_scale,
            probes: e.probes,
            feature_normalization: e.feature_normalization,
            switch_on: e.switch_on,
        }
    }
}

impl EditSection {
    /// Core edit configuration with the given target embedding.
    pub fn to_edit_config(&self, target: Vec<f64>) -> stsl_core::Result<EditConfig> {
        Ok(EditConfig {
            target,
            hook: Hook::from_name(&self.hook, self.hook_weight)?,
            null: NullOptConfig {
                steps: self.null_steps,
                lr: self.null_lr,
            },
            lambda: self.lambda,
            eta: self.eta,
            nu: self.nu,
            eps_scale: self.eps_scale,
            probes: self.probes,
            feature_normalization: self.feature_normalization,
            switch_on: self.switch_on,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub ssim_window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range; the synthetic pixel range `[-1, 1]` gives 2.
    pub max_value: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let p = SsimParams::default();
        Self {
            ssim_window: p.window,
            k1: p.k1,
            k2: p.k2,
            max_value: 2.0,
        }
    }
}

impl MetricsSection {
    pub fn ssim_params(&self) -> SsimParams {
        SsimParams {
            window: self.ssim_window,
            k1: self.k1,
            k2: self.k2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasStudySection {
    pub tasks: Vec<TaskFamily>,
    pub resamples: usize,
    pub confidence: f64,
    pub bootstrap_seed: u64,
}

impl Default for BiasStudySection {
    fn default() -> Self {
        Self {
            tasks: TaskFamily::ALL.to_vec(),
            resamples: 2000,
            confidence: 0.95,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Samples drawn per seed.
    pub count: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { count: 1 }
    }
}

/// A parsed configuration together with its source text (hashed into run ids).
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
    pub source_name: String,
    /// Directory against which relative file paths are resolved.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// A diagnostic pointing at `key` inside `[section]` when it appears in the text.
    pub fn error_at(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            source_name: self.source_name.clone(),
            line: locate_key(&self.text, section, key),
            message: format!("[{section}] {key}: {}", message.into()),
        }
    }
}

/// Parses and validates configuration text.
pub fn parse_config(text: &str, source_name: &str, base_dir: &Path) -> Result<LoadedConfig, ConfigError> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
        source_name: source_name.to_string(),
        line: e.span().map(|s| line_of_offset(text, s.start)),
        message: e.message().to_string(),
    })?;
    let loaded = LoadedConfig {
        config,
        text: text.to_string(),
        source_name: source_name.to_string(),
        base_dir: base_dir.to_path_buf(),
    };
    validate(&loaded)?;
    Ok(loaded)
}

/// Reads a configuration file, or the bundled default when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<LoadedConfig, ConfigError> {
    match path {
        None => parse_config(DEFAULT_CONFIG, "<default config>", Path::new(".")),
        Some(p) => {
            let name = p.display().to_string();
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError {
                source_name: name.clone(),
                line: None,
                message: format!("cannot read config: {e}"),
            })?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            parse_config(&text, &name, &base)
        }
    }
}

fn validate(loaded: &LoadedConfig) -> Result<(), ConfigError> {
    let c = &loaded.config;
    if c.seeds.is_empty() {
        return Err(loaded.error_at("", "seeds", "seed list must not be empty"));
    }
    let schedule = NoiseSchedule::new(c.schedule.steps, c.schedule.family())
        .map_err(|e| loaded.error_at("schedule", "steps", e.to_string()))?;
    if c.sampler.steps != c.schedule.steps {
        return Err(loaded.error_at(
            "sampler",
            "steps",
            format!(
                "sampler steps {} differ from schedule steps {}",
                c.sampler.steps, c.schedule.steps
            ),
        ));
    }
    c.sampler
        .validate(&schedule)
        .map_err(|e| loaded.error_at("sampler", "", e.to_string()))?;
    if !(c.task.sigma_y >= 0.0 && c.task.sigma_y.is_finite()) {
        return Err(loaded.error_at("task", "sigma_y", "must be finite and nonnegative"));
    }
    if !(c.metrics.max_value > 0.0 && c.metrics.max_value.is_finite()) {
        return Err(loaded.error_at("metrics", "max_value", "must be positive"));
    }
    if c.sample.count == 0 {
        return Err(loaded.error_at("sample", "count", "must be at least 1"));
    }
    if c.bias_study.tasks.is_empty() {
        return Err(loaded.error_at("bias_study", "tasks", "task list must not be empty"));
    }
    if !(c.bias_study.confidence > 0.0 && c.bias_study.confidence < 1.0) {
        return Err(loaded.error_at("bias_study", "confidence", "must lie in (0, 1)"));
    }
    if c.bias_study.resamples == 0 {
        return Err(loaded.error_at("bias_study", "resamples", "must be at least 1"));
    }
    let edit = c
        .edit
        .to_edit_config(c.edit.target.clone())
        .map_err(|e| loaded.error_at("edit", "hook", e.to_string()))?;
    edit.terms_at(0)
        .validate()
        .map_err(|e| loaded.error_at("edit", "", e.to_string()))?;
    if edit.switch_on > schedule.steps() {
        return Err(loaded.error_at("edit", "switch_on", "exceeds the number of steps"));
    }
    Ok(())
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]` (top level for an empty section),
/// or of the section header when the key is absent or empty.
fn locate_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.starts_with('[') && line.ends_with(']') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_default_parses() {
        let c = load_config(None).unwrap();
        assert_eq!(c.config.schedule.steps, 50);
        assert_eq!(c.config.sampler.inner_steps, 5);
        assert_eq!(c.config.sampler.probes, 2);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_config("seeds = [1]\n[task]\noperator = \"nosuch\"\n", "t.toml", Path::new(".")).unwrap_err();
        assert_eq!(err.line, Some(3), "{err}");
        let err = parse_config("[sampler]\nlambda = \n", "t.toml", Path::new(".")).unwrap_err();
        assert_eq!(err.line, Some(2), "{err}");
        let err = parse_config("[prior]\nbogus = 1\n", "t.toml", Path::new(".")).unwrap_err();
        assert_eq!(err.line, Some(2), "{err}");
    }

    #[test]
    fn semantic_errors_are_located() {
        let text = "seeds = [0]\n\n[schedule]\nsteps = 10\n\n[sampler]\nsteps = 10\nlr_decay = 2.0\n";
        let err = parse_config(text, "t.toml", Path::new(".")).unwrap_err();
        assert_eq!(err.line, Some(6), "{err}");
        let err = parse_config("seeds = []\n", "t.toml", Path::new(".")).unwrap_err();
        assert_eq!(err.line, Some(1), "{err}");
        let err = parse_config("[sampler]\nsteps = 7\n", "t.toml", Path::new(".")).unwrap_err();
        assert_eq!(err.line, Some(2), "{err}");
    }
}
