//! Synthetic benchmark: a Gaussian-mixture prior over small square images
//! built from structured templates, and the desk restoration tasks used by
//! the bias study (random inpainting, Gaussian blur, downsampling and
//! salt-and-pepper noise).

use serde::{Deserialize, Serialize};

use crate::operators::{salt_pepper, LinearOperator, MeasurementTask};
use crate::scoremodels::{Covariance, GaussianMixturePrior};
use crate::{rng_from_seed, standard_normal, Error, Result, Rng, Vector};

/// Pixel range of the synthetic images.
pub const PIXEL_RANGE: (f64, f64) = (-1.0, 1.0);

/// Draws an exact sample from a Gaussian mixture.
pub fn sample_mixture(prior: &GaussianMixturePrior, rng: &mut Rng) -> Vector {
    let u: f64 = rand::Rng::random(rng);
    let mut acc = 0.0;
    let mut pick = prior.components() - 1;
    for (i, w) in prior.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            pick = i;
            break;
        }
    }
    let mean = &prior.means[pick];
    let xi = standard_normal(mean.len(), rng);
    match &prior.covariances[pick] {
        Covariance::Scalar(s) => mean + xi * s.sqrt(),
        Covariance::Diagonal(d) => mean + d.map(f64::sqrt).component_mul(&xi),
        Covariance::Dense(m) => {
            let chol = nalgebra::Cholesky::new(m.clone()).expect("validated covariance is positive definite");
            mean + chol.l() * xi
        }
    }
}

/// Index of the component with the largest posterior responsibility at `x`
/// (clean-data level).
pub fn nearest_component(prior: &GaussianMixturePrior, x: &Vector) -> usize {
    prior
        .responsibilities(x, 1.0)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Four-component image prior on `side × side` pixels with templates
/// (horizontal ramp, vertical stripes, disk, block checkerboard) and
/// spatially varying diagonal covariances.
pub fn image_prior(side: usize) -> Result<GaussianMixturePrior> {
    if side < 8 {
        return Err(Error::InvalidParameter(format!("image side must be at least 8, got {side}")));
    }
    let d = side * side;
    let s = side as f64;
    let template = |kind: usize, r: usize, c: usize| -> f64 {
        let (rf, cf) = (r as f64, c as f64);
        match kind {
            0 => -0.8 + 1.6 * cf / (s - 1.0),
            1 => 0.7 * (2.0 * std::f64::consts::PI * cf / 8.0).sin(),
            2 => {
                let (dr, dc) = (rf - (s - 1.0) / 2.0, cf - (s - 1.0) / 2.0);
                if (dr * dr + dc * dc).sqrt() < s * 0.3 {
                    0.8
                } else {
                    -0.6
                }
            }
            _ => {
                if (r / 8 + c / 8) % 2 == 0 {
                    0.6
                } else {
                    -0.6
                }
            }
        }
    };
    let variance = |kind: usize, r: usize, c: usize| -> f64 {
        let phase = kind as f64;
        let wave = ((r as f64) / 5.0 + phase).sin() * ((c as f64) / 5.0 - phase).cos();
        0.02 + 0.015 * (1.0 + wave)
    };
    let mut means = Vec::with_capacity(4);
    let mut covs = Vec::with_capacity(4);
    for kind in 0..4 {
        means.push(Vector::from_fn(d, |i, _| template(kind, i / side, i % side)));
        covs.push(Covariance::Diagonal(Vector::from_fn(d, |i, _| {
            variance(kind, i / side, i % side)
        })));
    }
    GaussianMixturePrior::new(vec![0.25; 4], means, covs)
}

/// Desk restoration task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// 40% of pixels dropped at random.
    Inpaint,
    /// 9×9 Gaussian blur with σ = 1.5.
    Blur,
    /// ×4 block-average downsampling.
    Downsample,
    /// 2% salt-and-pepper impulses under the identity operator.
    SaltPepper,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::Inpaint,
        TaskFamily::Blur,
        TaskFamily::Downsample,
        TaskFamily::SaltPepper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Inpaint => "inpaint",
            TaskFamily::Blur => "blur",
            TaskFamily::Downsample => "downsample",
            TaskFamily::SaltPepper => "salt-pepper",
        }
    }

    pub fn parse(s: &str) -> Option<TaskFamily> {
        TaskFamily::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// A sampled clean image with its corrupted measurement.
#[derive(Debug, Clone)]
pub struct DeskTask {
    pub family: TaskFamily,
    pub side: usize,
    pub clean: Vector,
    pub task: MeasurementTask,
    /// Salt-and-pepper impulses actually applied (0 for other families).
    pub impulses: usize,
}

/// Samples a clean image from `prior` and corrupts it according to `family`.
pub fn desk_task(
    family: TaskFamily,
    prior: &GaussianMixturePrior,
    side: usize,
    sigma_y: f64,
    seed: u64,
) -> Result<DeskTask> {
    use crate::scoremodels::ScoreModel;
    if prior.dim() != side * side {
        return Err(Error::dim("image prior", side * side, prior.dim()));
    }
    let mut rng = rng_from_seed(seed);
    let clean = sample_mixture(prior, &mut rng);
    let (task, impulses) = corrupt(family, &clean, side, sigma_y, &mut rng)?;
    Ok(DeskTask {
        family,
        side,
        clean,
        task,
        impulses,
    })
}

/// Builds the measurement of `clean` (a `side × side` image) for `family`.
/// Returns the task and the number of salt-and-pepper impulses applied.
pub fn corrupt(
    family: TaskFamily,
    clean: &Vector,
    side: usize,
    sigma_y: f64,
    rng: &mut Rng,
) -> Result<(MeasurementTask, usize)> {
    let d = side * side;
    if clean.len() != d {
        return Err(Error::dim("clean image", d, clean.len()));
    }
    let operator = match family {
        TaskFamily::Inpaint => LinearOperator::random_mask(d, 0.4, rng)?,
        TaskFamily::Blur => LinearOperator::gaussian_blur(side, side, 9, 1.5)?,
        TaskFamily::Downsample => LinearOperator::downsample(side, side, 4)?,
        TaskFamily::SaltPepper => LinearOperator::identity(d),
    };
    if family == TaskFamily::SaltPepper {
        let noisy = clean + standard_normal(d, rng) * sigma_y;
        let (y, count) = salt_pepper(&noisy, 0.02, PIXEL_RANGE, rng)?;
        Ok((MeasurementTask::new(operator, sigma_y, y)?, count))
    } else {
        Ok((MeasurementTask::simulate(operator, sigma_y, clean, rng)?, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoremodels::ScoreModel;

    #[test]
    fn image_prior_shape_and_templates() {
        let p = image_prior(32).unwrap();
        assert_eq!(p.dim(), 1024);
        assert_eq!(p.components(), 4);
        assert!(image_prior(4).is_err());
        for m in &p.means {
            assert!(m.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn desk_tasks_have_expected_shapes() {
        let p = image_prior(32).unwrap();
        for fam in TaskFamily::ALL {
            let t = desk_task(fam, &p, 32, 0.05, 3).unwrap();
            let m = match fam {
                TaskFamily::Inpaint => 1024 - 410,
                TaskFamily::Downsample => 64,
                _ => 1024,
            };
            assert_eq!(t.task.y.len(), m, "{}", fam.name());
            assert_eq!(TaskFamily::parse(fam.name()), Some(fam));
        }
    }

    #[test]
    fn samples_are_assigned_to_their_component() {
        let p = image_prior(16).unwrap();
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let x = sample_mixture(&p, &mut rng);
            let k = nearest_component(&p, &x);
            let own = (&x - &p.means[k]).norm();
            assert!(p.means.iter().all(|m| (&x - m).norm() >= own - 1e-12));
        }
    }
}
