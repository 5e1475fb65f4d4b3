//! Builds priors, codecs and measurement tasks from a configuration, and
//! writes per-run artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};
use stsl_core::io::{self, Image};
use stsl_core::metrics::{self, ImagePair};
use stsl_core::operators::{salt_pepper, Kernel, LatentCodec, LinearOperator, MeasurementTask};
use stsl_core::schedule::NoiseSchedule;
use stsl_core::scoremodels::{Covariance, GaussianMixturePrior, ScoreModel};
use stsl_core::synthetic::{image_prior, sample_mixture, PIXEL_RANGE};
use stsl_core::{rng_from_seed, standard_normal, Matrix, Vector};

use crate::config::{
    CodecKind, ConfigError, LoadedConfig, MetricsSection, OperatorKind, PriorKind, ScalarOrVec,
};

/// Objects shared by every run of one configuration.
pub struct Setup {
    pub schedule: NoiseSchedule,
    /// Prior over the latent space in which the diffusion runs.
    pub prior: GaussianMixturePrior,
    pub codec: LatentCodec,
    /// Data-space image shape `(rows, cols)`.
    pub shape: (usize, usize),
}

/// One seeded problem instance.
pub struct Instance {
    /// Clean data-space image.
    pub clean: Vector,
    pub task: MeasurementTask,
    pub impulses: usize,
}

pub fn build_setup(loaded: &LoadedConfig) -> Result<Setup, ConfigError> {
    let c = &loaded.config;
    let schedule = NoiseSchedule::new(c.schedule.steps, c.schedule.family())
        .map_err(|e| loaded.error_at("schedule", "steps", e.to_string()))?;
    let prior = build_prior(loaded)?;
    let latent_dim = prior.dim();
    let codec = match c.codec.kind {
        CodecKind::Identity => LatentCodec::identity(latent_dim),
        CodecKind::Pooling => {
            let side = square_side(latent_dim)
                .ok_or_else(|| loaded.error_at("codec", "kind", "pooling needs a square latent image"))?;
            LatentCodec::pooling(2 * side, 2 * side).map_err(|e| loaded.error_at("codec", "kind", e.to_string()))?
        }
        CodecKind::RandomOrthogonal => {
            let data_dim = c
                .codec
                .data_dim
                .ok_or_else(|| loaded.error_at("codec", "data_dim", "required for random-orthogonal"))?;
            let mut rng = rng_from_seed(c.codec.seed);
            LatentCodec::random_orthogonal(latent_dim, data_dim, &mut rng)
                .map_err(|e| loaded.error_at("codec", "data_dim", e.to_string()))?
        }
    };
    let d = codec.data_dim();
    let shape = match c.task.shape {
        Some([r, cols]) => {
            if r * cols != d {
                return Err(loaded.error_at(
                    "task",
                    "shape",
                    format!("{r}x{cols} does not match data dimension {d}"),
                ));
            }
            (r, cols)
        }
        None => match square_side(d) {
            Some(s) => (s, s),
            None => (1, d),
        },
    };
    Ok(Setup {
        schedule,
        prior,
        codec,
        shape,
    })
}

fn square_side(d: usize) -> Option<usize> {
    let s = (d as f64).sqrt().round() as usize;
    (s * s == d && s > 0).then_some(s)
}

fn covariance(v: &ScalarOrVec) -> Covariance {
    match v {
        ScalarOrVec::Scalar(s) => Covariance::Scalar(*s),
        ScalarOrVec::Vector(d) => Covariance::Diagonal(Vector::from_vec(d.clone())),
    }
}

fn build_prior(loaded: &LoadedConfig) -> Result<GaussianMixturePrior, ConfigError> {
    let p = &loaded.config.prior;
    match p.kind {
        PriorKind::Image => image_prior(p.side).map_err(|e| loaded.error_at("prior", "side", e.to_string())),
        PriorKind::Gaussian => {
            let len_of = |v: &Option<ScalarOrVec>| match v {
                Some(ScalarOrVec::Vector(x)) => Some(x.len()),
                _ => None,
            };
            let dim = p
                .dim
                .or(len_of(&p.mean))
                .or(len_of(&p.variance))
                .ok_or_else(|| loaded.error_at("prior", "dim", "gaussian prior needs dim or a vector mean"))?;
            let mean = match &p.mean {
                None => Vector::zeros(dim),
                Some(ScalarOrVec::Scalar(m)) => Vector::from_element(dim, *m),
                Some(ScalarOrVec::Vector(m)) => Vector::from_vec(m.clone()),
            };
            let cov = covariance(p.variance.as_ref().unwrap_or(&ScalarOrVec::Scalar(1.0)));
            GaussianMixturePrior::new(vec![1.0], vec![mean], vec![cov])
                .map_err(|e| loaded.error_at("prior", "variance", e.to_string()))
        }
        PriorKind::Gmm => {
            let means: Vec<Vector> = match &p.means_file {
                Some(path) => {
                    let full = loaded.resolve(path);
                    let mut f = fs::File::open(&full).map_err(|e| {
                        loaded.error_at("prior", "means_file", format!("{}: {e}", full.display()))
                    })?;
                    let m = io::read_f64(&mut f)
                        .map_err(|e| loaded.error_at("prior", "means_file", e.to_string()))?;
                    m.row_iter().map(|r| r.transpose()).collect()
                }
                None => p.means.iter().map(|m| Vector::from_vec(m.clone())).collect(),
            };
            if means.is_empty() {
                return Err(loaded.error_at("prior", "means", "gmm prior needs at least one mean"));
            }
            let weights = if p.weights.is_empty() {
                vec![1.0 / means.len() as f64; means.len()]
            } else {
                p.weights.clone()
            };
            let covs: Vec<Covariance> = match p.variances.len() {
                0 => vec![Covariance::Scalar(1.0); means.len()],
                1 => vec![covariance(&p.variances[0]); means.len()],
                _ => p.variances.iter().map(covariance).collect(),
            };
            GaussianMixturePrior::new(weights, means, covs)
                .map_err(|e| loaded.error_at("prior", "means", e.to_string()))
        }
    }
}

/// Clean image and measurement for `seed`. The random stream first draws the
/// clean image, then the operator (random masks), then the observation noise,
/// so the synthetic desk tasks are reproduced exactly.
pub fn build_instance(loaded: &LoadedConfig, setup: &Setup, seed: u64) -> anyhow::Result<Instance> {
    let t = &loaded.config.task;
    let d = setup.codec.data_dim();
    let (rows, cols) = setup.shape;
    let mut rng = rng_from_seed(seed);
    let clean = match &t.image {
        Some(path) => {
            let full = loaded.resolve(path);
            let mut f = fs::File::open(&full).with_context(|| format!("opening {}", full.display()))?;
            let img = io::read_pgm(&mut f).with_context(|| format!("reading {}", full.display()))?;
            if (img.rows, img.cols) != (rows, cols) {
                bail!(
                    "{}: image is {}x{}, configuration expects {rows}x{cols}",
                    full.display(),
                    img.rows,
                    img.cols
                );
            }
            let (lo, hi) = PIXEL_RANGE;
            Vector::from_iterator(d, img.data.iter().map(|v| lo + (hi - lo) * v))
        }
        None => setup.codec.decode(&sample_mixture(&setup.prior, &mut rng))?,
    };
    let operator = match t.operator {
        OperatorKind::Identity | OperatorKind::SaltPepper => LinearOperator::identity(d),
        OperatorKind::Inpaint => match &t.mask_file {
            Some(path) => {
                let full = loaded.resolve(path);
                let mut f = fs::File::open(&full).with_context(|| format!("opening {}", full.display()))?;
                let img = io::read_pgm(&mut f).with_context(|| format!("reading {}", full.display()))?;
                if img.data.len() != d {
                    bail!("{}: mask has {} pixels, expected {d}", full.display(), img.data.len());
                }
                LinearOperator::mask_from_bitmap(&img.data.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            }
            None => LinearOperator::random_mask(d, t.drop_rate, &mut rng)?,
        },
        OperatorKind::Blur => LinearOperator::gaussian_blur(rows, cols, t.kernel_side, t.blur_sigma)?,
        OperatorKind::MotionBlur => LinearOperator::motion_blur(rows, cols, t.motion_length, t.motion_angle)?,
        OperatorKind::Downsample => LinearOperator::downsample(rows, cols, t.factor)?,
        OperatorKind::Convolution => {
            let path = t
                .kernel_file
                .as_ref()
                .ok_or_else(|| anyhow!("[task] kernel_file is required for the convolution operator"))?;
            let full = loaded.resolve(path);
            let text = fs::read_to_string(&full).with_context(|| format!("reading {}", full.display()))?;
            let m = io::parse_text_matrix(&text).with_context(|| format!("parsing {}", full.display()))?;
            if m.nrows() != m.ncols() {
                bail!("{}: kernel must be square, got {}x{}", full.display(), m.nrows(), m.ncols());
            }
            let weights = m.row_iter().flat_map(|r| r.iter().cloned().collect::<Vec<_>>()).collect();
            LinearOperator::convolution(rows, cols, Kernel::new(m.nrows(), weights)?)
        }
        OperatorKind::Dense => {
            let width = t.matrix.first().map_or(0, Vec::len);
            if t.matrix.is_empty() || width != d || t.matrix.iter().any(|r| r.len() != width) {
                bail!("[task] matrix must have rows of length {d}");
            }
            LinearOperator::Dense(Matrix::from_row_iterator(
                t.matrix.len(),
                d,
                t.matrix.iter().flatten().cloned(),
            ))
        }
    };
    let (task, impulses) = if t.operator == OperatorKind::SaltPepper {
        let noisy = &clean + standard_normal(d, &mut rng) * t.sigma_y;
        let (y, count) = salt_pepper(&noisy, t.salt_pepper_rate, PIXEL_RANGE, &mut rng)?;
        (MeasurementTask::new(operator, t.sigma_y, y)?, count)
    } else {
        (MeasurementTask::simulate(operator, t.sigma_y, &clean, &mut rng)?, 0)
    };
    Ok(Instance { clean, task, impulses })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    /// `None` when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
}

pub fn image_metrics(
    reference: &Vector,
    candidate: &Vector,
    shape: (usize, usize),
    m: &MetricsSection,
) -> anyhow::Result<ImageMetrics> {
    let pair = ImagePair::new(reference, candidate, shape.0, shape.1, m.max_value)?;
    let window = m.ssim_window;
    let ssim = if window >= 2 && window <= shape.0 && window <= shape.1 {
        Some(metrics::ssim(&pair, m.ssim_params())?)
    } else {
        None
    };
    Ok(ImageMetrics {
        mse: metrics::mse(&pair),
        psnr: metrics::psnr(&pair),
        ssim,
    })
}

/// Content hash of the configuration text, the command, a run tag and the seed.
pub fn run_id(config_text: &str, command: &str, tag: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    h.update([0u8]);
    h.update(command.as_bytes());
    h.update([0u8]);
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One row of a metrics CSV.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub task: String,
    pub variant: String,
    pub seed: u64,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub nfe_guidance: u64,
    pub nfe_raw: u64,
    pub wall_ms: Option<f64>,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Files of one run directory `<outdir>/<run_id>/`.
pub struct RunArtifacts<'a> {
    pub report: &'a serde_json::Value,
    pub recon: &'a Vector,
    /// Shape used for `recon.pgm` and the `recon.f64` header.
    pub shape: (usize, usize),
    pub row: &'a MetricsRow,
    /// Additional `(file name, bytes)` pairs.
    pub extra: Vec<(&'static str, Vec<u8>)>,
}

pub fn write_run(outdir: &Path, artifacts: &RunArtifacts<'_>) -> anyhow::Result<PathBuf> {
    let dir = outdir.join(&artifacts.row.run_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut json = serde_json::to_vec_pretty(artifacts.report)?;
    json.push(b'\n');
    fs::write(dir.join("report.json"), json)?;
    let (rows, cols) = artifacts.shape;
    let data: Vec<f64> = artifacts.recon.iter().cloned().collect();
    let mut pgm = Vec::new();
    io::write_pgm(&mut pgm, &Image::new(rows, cols, data.clone())?, PIXEL_RANGE)?;
    fs::write(dir.join("recon.pgm"), pgm)?;
    let mut raw = Vec::new();
    io::write_f64(&mut raw, &Matrix::from_row_slice(rows, cols, &data))?;
    fs::write(dir.join("recon.f64"), raw)?;
    write_metrics_csv(&dir.join("metrics.csv"), std::slice::from_ref(artifacts.row))?;
    for (name, bytes) in &artifacts.extra {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(dir)
}

/// JSON number, or `null` for non-finite values.
pub fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use stsl_core::synthetic::{desk_task, TaskFamily};

    #[test]
    fn default_instance_matches_desk_task() {
        let loaded = parse_config("", "t", Path::new(".")).unwrap();
        let setup = build_setup(&loaded).unwrap();
        assert_eq!(setup.shape, (32, 32));
        for seed in [0, 5] {
            let inst = build_instance(&loaded, &setup, seed).unwrap();
            let desk = desk_task(TaskFamily::Inpaint, &setup.prior, 32, 0.05, seed).unwrap();
            assert_eq!(inst.clean, desk.clean);
            assert_eq!(inst.task, desk.task);
        }
    }

    #[test]
    fn pooling_codec_doubles_the_image_side() {
        let loaded = parse_config(
            "[prior]\nside = 8\n[codec]\nkind = \"pooling\"\n[task]\noperator = \"blur\"\n",
            "t",
            Path::new("."),
        )
        .unwrap();
        let setup = build_setup(&loaded).unwrap();
        assert_eq!(setup.shape, (16, 16));
        assert_eq!(setup.prior.dim(), 64);
        let inst = build_instance(&loaded, &setup, 1).unwrap();
        assert_eq!(inst.task.y.len(), 256);
    }

    #[test]
    fn run_ids_depend_on_every_input() {
        let a = run_id("x", "invert", "stsl", 1);
        assert_eq!(a.len(), 16);
        assert_eq!(a, run_id("x", "invert", "stsl", 1));
        assert_ne!(a, run_id("x", "invert", "stsl", 2));
        assert_ne!(a, run_id("y", "invert", "stsl", 1));
        assert_ne!(a, run_id("x", "invert", "first-order", 1));
        assert_ne!(a, run_id("x", "edit", "stsl", 1));
    }
}
