//! Reconstruction metrics (MSE, PSNR, SSIM) and distribution-level checks.
//!
//! Images are flattened row-major vectors with a declared dynamic range.
//! SSIM follows the original constants with a uniform square window; values
//! lie in `[-1, 1]` (multiply by 100 to compare with percentage tables).

use serde::{Deserialize, Serialize};

use crate::{standard_normal, Error, Matrix, Result, Rng, Vector};

/// Marker emitted in place of metrics that need a pretrained network
/// (LPIPS, CLIP accuracy).
pub const REQUIRES_PRETRAINED: &str = "requires pretrained network";

/// Reference and candidate images of equal shape with dynamic range `max_value`.
#[derive(Debug, Clone, Copy)]
pub struct ImagePair<'a> {
    pub reference: &'a Vector,
    pub candidate: &'a Vector,
    pub height: usize,
    pub width: usize,
    pub max_value: f64,
}

impl<'a> ImagePair<'a> {
    pub fn new(
        reference: &'a Vector,
        candidate: &'a Vector,
        height: usize,
        width: usize,
        max_value: f64,
    ) -> Result<Self> {
        if reference.len() != height * width {
            return Err(Error::dim("reference image", height * width, reference.len()));
        }
        if candidate.len() != reference.len() {
            return Err(Error::dim("candidate image", reference.len(), candidate.len()));
        }
        if !(max_value > 0.0 && max_value.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dynamic range must be positive, got {max_value}"
            )));
        }
        Ok(Self {
            reference,
            candidate,
            height,
            width,
            max_value,
        })
    }
}

pub fn mse(pair: &ImagePair<'_>) -> f64 {
    (pair.reference - pair.candidate).norm_squared() / pair.reference.len() as f64
}

/// `10 log10(MAX² / MSE)`; `+∞` for identical images.
pub fn psnr(pair: &ImagePair<'_>) -> f64 {
    psnr_from_mse(mse(pair), pair.max_value)
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 8,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Mean SSIM over every `window × window` patch (stride 1), with sample
/// (N-1) variances.
pub fn ssim(pair: &ImagePair<'_>, params: SsimParams) -> Result<f64> {
    let w = params.window;
    if w < 2 || w > pair.height || w > pair.width {
        return Err(Error::InvalidParameter(format!(
            "SSIM window {w} must lie in [2, min({}, {})]",
            pair.height, pair.width
        )));
    }
    let c1 = (params.k1 * pair.max_value).powi(2);
    let c2 = (params.k2 * pair.max_value).powi(2);
    let n = (w * w) as f64;
    let (x, y) = (pair.reference, pair.candidate);
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=pair.height - w {
        for c0 in 0..=pair.width - w {
            let idx = |r: usize, c: usize| (r0 + r) * pair.width + c0 + c;
            let (mut sx, mut sy) = (0.0, 0.0);
            for r in 0..w {
                for c in 0..w {
                    sx += x[idx(r, c)];
                    sy += y[idx(r, c)];
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for r in 0..w {
                for c in 0..w {
                    let (dx, dy) = (x[idx(r, c)] - mx, y[idx(r, c)] - my);
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            }
            let (vx, vy, cxy) = (vx / (n - 1.0), vy / (n - 1.0), cxy / (n - 1.0));
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentError {
    /// `‖mean(samples) - μ‖₂`.
    pub mean_error: f64,
    /// `‖cov(samples) - Σ‖_F` with the unbiased sample covariance.
    pub cov_error: f64,
}

pub fn sample_mean(samples: &[Vector]) -> Result<Vector> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty sample set".into()))?;
    let mut mean = Vector::zeros(first.len());
    for s in samples {
        if s.len() != first.len() {
            return Err(Error::dim("sample", first.len(), s.len()));
        }
        mean += s;
    }
    Ok(mean / samples.len() as f64)
}

pub fn sample_covariance(samples: &[Vector]) -> Result<Matrix> {
    let mean = sample_mean(samples)?;
    if samples.len() < 2 {
        return Err(Error::InvalidParameter("covariance needs at least two samples".into()));
    }
    let d = mean.len();
    let mut cov = Matrix::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    Ok(cov / (samples.len() - 1) as f64)
}

pub fn moment_error(samples: &[Vector], mean: &Vector, cov: &Matrix) -> Result<MomentError> {
    let m = sample_mean(samples)?;
    if m.len() != mean.len() || cov.nrows() != mean.len() || cov.ncols() != mean.len() {
        return Err(Error::dim("reference moments", m.len(), mean.len()));
    }
    let c = sample_covariance(samples)?;
    Ok(MomentError {
        mean_error: (m - mean).norm(),
        cov_error: (c - cov).norm(),
    })
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions:
/// `∫ |F_a(t) - F_b(t)| dt`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("empty sample set".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let fa = i as f64 / na;
        let fb = j as f64 / nb;
        total += (fa - fb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Sliced Wasserstein-1 distance: mean 1-D distance over random unit directions.
pub fn sliced_wasserstein(
    a: &[Vector],
    b: &[Vector],
    n_projections: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let d = a
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty sample set".into()))?
        .len();
    if b.is_empty() {
        return Err(Error::InvalidParameter("empty sample set".into()));
    }
    if let Some(s) = a.iter().chain(b).find(|s| s.len() != d) {
        return Err(Error::dim("sample", d, s.len()));
    }
    if n_projections == 0 {
        return Err(Error::InvalidParameter("n_projections must be at least 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir = standard_normal(d, rng);
        let norm = dir.norm();
        if norm > 0.0 {
            dir /= norm;
        } else {
            dir[0] = 1.0;
        }
        let pa: Vec<f64> = a.iter().map(|s| s.dot(&dir)).collect();
        let pb: Vec<f64> = b.iter().map(|s| s.dot(&dir)).collect();
        total += wasserstein_1d(&pa, &pb)?;
    }
    Ok(total / n_projections as f64)
}

/// Mean of paired differences with a percentile-bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedInterval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
    pub confidence: f64,
    pub resamples: usize,
}

impl PairedInterval {
    /// True when the interval lies strictly on one side of zero.
    pub fn excludes_zero(&self) -> bool {
        self.low > 0.0 || self.high < 0.0
    }
}

/// Percentile bootstrap for the mean of `diffs`, resampling seeds with
/// replacement.
pub fn paired_bootstrap(
    diffs: &[f64],
    resamples: usize,
    confidence: f64,
    rng: &mut Rng,
) -> Result<PairedInterval> {
    if diffs.is_empty() {
        return Err(Error::InvalidParameter("empty sample set".into()));
    }
    if resamples == 0 {
        return Err(Error::InvalidParameter("resamples must be at least 1".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    let n = diffs.len();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            (0..n)
                .map(|_| diffs[rand::Rng::random_range(rng, 0..n)])
                .sum::<f64>()
                / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let pick = |q: f64| {
        let idx = (q * (resamples - 1) as f64).round() as usize;
        means[idx.min(resamples - 1)]
    };
    Ok(PairedInterval {
        mean,
        low: pick(tail),
        high: pick(1.0 - tail),
        confidence,
        resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn pair<'a>(a: &'a Vector, b: &'a Vector, side: usize) -> ImagePair<'a> {
        ImagePair::new(a, b, side, side, 1.0).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = Vector::from_fn(64, |i, _| (i as f64 * 0.37).sin().abs());
        let p = pair(&a, &a, 8);
        assert_eq!(mse(&p), 0.0);
        assert_eq!(psnr(&p), f64::INFINITY);
        assert_eq!(ssim(&p, SsimParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn psnr_and_offset_examples() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let a = Vector::from_element(16, 0.3);
        let b = a.add_scalar(0.1);
        assert!((mse(&pair(&a, &b, 4)) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn inverted_binary_image_has_negative_ssim() {
        let a = Vector::from_fn(256, |i, _| ((i / 16 + i % 16) % 2) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&pair(&a, &b, 16), SsimParams::default()).unwrap() < -0.5);
    }

    #[test]
    fn shape_and_window_errors() {
        let a = Vector::zeros(16);
        let b = Vector::zeros(15);
        assert!(ImagePair::new(&a, &b, 4, 4, 1.0).is_err());
        assert!(ImagePair::new(&a, &a, 4, 4, 0.0).is_err());
        assert!(ssim(&pair(&a, &a, 4), SsimParams::default()).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((wasserstein_1d(&[0.0], &[2.5]).unwrap() - 2.5).abs() < 1e-15);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        let mut rng = rng_from_seed(0);
        assert!(sliced_wasserstein(&[], &[Vector::zeros(1)], 4, &mut rng).is_err());
    }

    #[test]
    fn bootstrap_interval_brackets_the_mean() {
        let mut rng = rng_from_seed(4);
        let diffs: Vec<f64> = (0..50).map(|i| 1.0 + ((i * 7) % 11) as f64 * 0.1).collect();
        let ci = paired_bootstrap(&diffs, 1000, 0.95, &mut rng).unwrap();
        assert!(ci.low <= ci.mean && ci.mean <= ci.high);
        assert!(ci.excludes_zero());
        let constant = paired_bootstrap(&[0.0; 10], 100, 0.95, &mut rng).unwrap();
        assert!(!constant.excludes_zero());
        assert!(paired_bootstrap(&[], 10, 0.95, &mut rng).is_err());
        assert!(paired_bootstrap(&[1.0], 10, 1.0, &mut rng).is_err());
    }
}
