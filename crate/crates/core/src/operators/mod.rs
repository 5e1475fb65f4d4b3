//! Linear measurement operators `A`, their adjoints, corruption generators,
//! and the latent codec.
//!
//! Images are flattened row-major. Convolutions use half-sample symmetric
//! reflection at the boundary; the adjoint scatters through the same index
//! map, so `⟨A x, y⟩ = ⟨x, Aᵀ y⟩` holds to rounding.

mod codec;
mod kernels;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use codec::LatentCodec;
pub use kernels::Kernel;

use kernels::reflect;

use crate::{Error, Matrix, Result, Rng, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearOperator {
    Identity {
        dim: usize,
    },
    /// Keeps the listed coordinates (sorted, unique) of a `dim`-vector.
    Mask {
        dim: usize,
        keep: Vec<usize>,
    },
    /// Block averaging of a `height × width` image by `factor`.
    Downsample {
        height: usize,
        width: usize,
        factor: usize,
    },
    /// Same-size convolution with reflective boundary.
    Convolution {
        height: usize,
        width: usize,
        kernel: Kernel,
    },
    Dense(Matrix),
}

impl LinearOperator {
    pub fn identity(dim: usize) -> Self {
        LinearOperator::Identity { dim }
    }

    pub fn mask_from_bitmap(bitmap: &[bool]) -> Self {
        LinearOperator::Mask {
            dim: bitmap.len(),
            keep: bitmap
                .iter()
                .enumerate()
                .filter_map(|(i, &k)| k.then_some(i))
                .collect(),
        }
    }

    /// Drops `round(drop_rate · dim)` coordinates chosen uniformly at random.
    pub fn random_mask(dim: usize, drop_rate: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_rate) {
            return Err(Error::InvalidParameter(format!(
                "drop rate must lie in [0, 1], got {drop_rate}"
            )));
        }
        let mut idx: Vec<usize> = (0..dim).collect();
        idx.shuffle(rng);
        let n_drop = (drop_rate * dim as f64).round() as usize;
        let mut bitmap = vec![true; dim];
        for &i in &idx[..n_drop] {
            bitmap[i] = false;
        }
        Ok(Self::mask_from_bitmap(&bitmap))
    }

    pub fn downsample(height: usize, width: usize, factor: usize) -> Result<Self> {
        if factor == 0 || height % factor != 0 || width % factor != 0 {
            return Err(Error::InvalidParameter(format!(
                "downsample factor {factor} must divide {height}x{width}"
            )));
        }
        Ok(LinearOperator::Downsample {
            height,
            width,
            factor,
        })
    }

    pub fn convolution(height: usize, width: usize, kernel: Kernel) -> Self {
        LinearOperator::Convolution {
            height,
            width,
            kernel,
        }
    }

    pub fn gaussian_blur(height: usize, width: usize, side: usize, sigma: f64) -> Result<Self> {
        Ok(Self::convolution(height, width, Kernel::gaussian(side, sigma)?))
    }

    pub fn motion_blur(height: usize, width: usize, length: usize, angle_deg: f64) -> Result<Self> {
        Ok(Self::convolution(height, width, Kernel::motion(length, angle_deg)?))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } | LinearOperator::Mask { dim, .. } => *dim,
            LinearOperator::Downsample { height, width, .. }
            | LinearOperator::Convolution { height, width, .. } => height * width,
            LinearOperator::Dense(m) => m.ncols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } => *dim,
            LinearOperator::Mask { keep, .. } => keep.len(),
            LinearOperator::Downsample {
                height,
                width,
                factor,
            } => (height / factor) * (width / factor),
            LinearOperator::Convolution { height, width, .. } => height * width,
            LinearOperator::Dense(m) => m.nrows(),
        }
    }

    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("operator input", self.input_dim(), x.len()));
        }
        Ok(match self {
            LinearOperator::Identity { .. } => x.clone(),
            LinearOperator::Mask { keep, .. } => {
                Vector::from_iterator(keep.len(), keep.iter().map(|&i| x[i]))
            }
            LinearOperator::Downsample {
                height,
                width,
                factor,
            } => {
                let (oh, ow) = (height / factor, width / factor);
                let scale = 1.0 / (factor * factor) as f64;
                let mut out = Vector::zeros(oh * ow);
                for r in 0..*height {
                    for c in 0..*width {
                        out[(r / factor) * ow + c / factor] += x[r * width + c] * scale;
                    }
                }
                out
            }
            LinearOperator::Convolution {
                height,
                width,
                kernel,
            } => {
                let rad = kernel.radius() as isize;
                let mut out = Vector::zeros(height * width);
                for r in 0..*height {
                    for c in 0..*width {
                        let mut acc = 0.0;
                        for a in 0..kernel.side() {
                            let rr = reflect(r as isize - (a as isize - rad), *height);
                            for b in 0..kernel.side() {
                                let cc = reflect(c as isize - (b as isize - rad), *width);
                                acc += kernel.weight(a, b) * x[rr * width + cc];
                            }
                        }
                        out[r * width + c] = acc;
                    }
                }
                out
            }
            LinearOperator::Dense(m) => m * x,
        })
    }

    pub fn adjoint(&self, y: &Vector) -> Result<Vector> {
        if y.len() != self.output_dim() {
            return Err(Error::dim("adjoint input", self.output_dim(), y.len()));
        }
        Ok(match self {
            LinearOperator::Identity { .. } => y.clone(),
            LinearOperator::Mask { dim, keep } => {
                let mut out = Vector::zeros(*dim);
                for (j, &i) in keep.iter().enumerate() {
                    out[i] = y[j];
                }
                out
            }
            LinearOperator::Downsample {
                height,
                width,
                factor,
            } => {
                let ow = width / factor;
                let scale = 1.0 / (factor * factor) as f64;
                let mut out = Vector::zeros(height * width);
                for r in 0..*height {
                    for c in 0..*width {
                        out[r * width + c] = y[(r / factor) * ow + c / factor] * scale;
                    }
                }
                out
            }
            LinearOperator::Convolution {
                height,
                width,
                kernel,
            } => {
                let rad = kernel.radius() as isize;
                let mut out = Vector::zeros(height * width);
                for r in 0..*height {
                    for c in 0..*width {
                        let v = y[r * width + c];
                        for a in 0..kernel.side() {
                            let rr = reflect(r as isize - (a as isize - rad), *height);
                            for b in 0..kernel.side() {
                                let cc = reflect(c as isize - (b as isize - rad), *width);
                                out[rr * width + cc] += kernel.weight(a, b) * v;
                            }
                        }
                    }
                }
                out
            }
            LinearOperator::Dense(m) => m.transpose() * y,
        })
    }

    /// Materialises `A` column by column. Intended for small oracle problems.
    pub fn to_dense(&self) -> Matrix {
        if let LinearOperator::Dense(m) = self {
            return m.clone();
        }
        let n = self.input_dim();
        let mut out = Matrix::zeros(self.output_dim(), n);
        let mut e = Vector::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e).expect("dimension matches"));
            e[j] = 0.0;
        }
        out
    }

    /// Spectral norm `‖A‖₂`.
    pub fn operator_norm(&self) -> f64 {
        match self {
            LinearOperator::Identity { dim } => {
                if *dim == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            LinearOperator::Mask { keep, .. } => {
                if keep.is_empty() {
                    0.0
                } else {
                    1.0
                }
            }
            LinearOperator::Downsample { factor, .. } => 1.0 / *factor as f64,
            LinearOperator::Dense(m) => {
                if m.is_empty() {
                    0.0
                } else {
                    m.singular_values().max()
                }
            }
            LinearOperator::Convolution { .. } => self.power_iteration_norm(500),
        }
    }

    fn power_iteration_norm(&self, iters: usize) -> f64 {
        let n = self.input_dim();
        // Deterministic start with energy in every frequency we care about.
        let mut v = Vector::from_iterator(n, (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0));
        v /= v.norm();
        let mut sigma = 0.0;
        for _ in 0..iters {
            let av = self.apply(&v).unwrap();
            let w = self.adjoint(&av).unwrap();
            let nw = w.norm();
            if nw == 0.0 {
                return 0.0;
            }
            sigma = nw.sqrt();
            v = w / nw;
        }
        sigma
    }
}

/// `y = A x + n`, `n ~ N(0, σ_y² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTask {
    pub operator: LinearOperator,
    pub sigma_y: f64,
    pub y: Vector,
}

impl MeasurementTask {
    pub fn new(operator: LinearOperator, sigma_y: f64, y: Vector) -> Result<Self> {
        if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_y must be finite and nonnegative, got {sigma_y}"
            )));
        }
        if y.len() != operator.output_dim() {
            return Err(Error::dim("observation", operator.output_dim(), y.len()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("observation must be finite".into()));
        }
        Ok(Self {
            operator,
            sigma_y,
            y,
        })
    }

    /// Simulates `y = A x + σ_y ξ`.
    pub fn simulate(operator: LinearOperator, sigma_y: f64, x: &Vector, rng: &mut Rng) -> Result<Self> {
        let clean = operator.apply(x)?;
        let noise = crate::standard_normal(clean.len(), rng);
        Self::new(operator, sigma_y, clean + noise * sigma_y)
    }
}

/// Replaces each coordinate by `range.0` or `range.1` with probability
/// `rate / 2` each. Returns the corrupted vector and the number of corrupted
/// coordinates.
pub fn salt_pepper(x: &Vector, rate: f64, range: (f64, f64), rng: &mut Rng) -> Result<(Vector, usize)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "salt-pepper rate must lie in [0, 1], got {rate}"
        )));
    }
    let mut out = x.clone();
    let mut count = 0;
    for v in out.iter_mut() {
        let u: f64 = rng.random();
        if u < rate / 2.0 {
            *v = range.0;
            count += 1;
        } else if u < rate {
            *v = range.1;
            count += 1;
        }
    }
    Ok((out, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{rng_from_seed, standard_normal};

    fn all_kinds(rng: &mut Rng) -> Vec<LinearOperator> {
        vec![
            LinearOperator::identity(64),
            LinearOperator::random_mask(64, 0.4, rng).unwrap(),
            LinearOperator::downsample(8, 8, 4).unwrap(),
            LinearOperator::gaussian_blur(8, 8, 5, 1.0).unwrap(),
            LinearOperator::motion_blur(8, 8, 5, 30.0).unwrap(),
            LinearOperator::Dense(Matrix::from_fn(10, 64, |i, j| ((i * 3 + j) % 7) as f64 - 3.0)),
        ]
    }

    #[test]
    fn adjoint_and_linearity_hold_for_every_kind() {
        let mut rng = rng_from_seed(11);
        for op in all_kinds(&mut rng) {
            for _ in 0..100 {
                let x = standard_normal(op.input_dim(), &mut rng);
                let x2 = standard_normal(op.input_dim(), &mut rng);
                let y = standard_normal(op.output_dim(), &mut rng);
                let lhs = op.apply(&x).unwrap().dot(&y);
                let rhs = x.dot(&op.adjoint(&y).unwrap());
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{op:?}");
                let combo = op.apply(&(&x * 2.5 - &x2 * 0.5)).unwrap();
                let sep = op.apply(&x).unwrap() * 2.5 - op.apply(&x2).unwrap() * 0.5;
                assert!((combo - &sep).amax() <= 1e-10 * sep.amax().max(1.0));
            }
        }
    }

    #[test]
    fn mask_drops_forty_percent_and_zero_fills() {
        let mut rng = rng_from_seed(2);
        let op = LinearOperator::random_mask(100, 0.4, &mut rng).unwrap();
        assert_eq!(op.output_dim(), 60);
        let x = Vector::from_iterator(100, (0..100).map(|i| i as f64 + 1.0));
        let y = op.apply(&x).unwrap();
        let back = op.adjoint(&y).unwrap();
        assert_eq!(back.iter().filter(|v| **v == 0.0).count(), 40);
        for (i, v) in back.iter().enumerate() {
            assert!(*v == 0.0 || *v == x[i]);
        }
    }

    #[test]
    fn constants_preserved_by_downsample_and_blur() {
        let c = Vector::from_element(32 * 32, 0.7);
        let down = LinearOperator::downsample(32, 32, 4).unwrap().apply(&c).unwrap();
        assert_eq!(down.len(), 64);
        assert!(down.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let blur = LinearOperator::gaussian_blur(32, 32, 9, 1.5).unwrap().apply(&c).unwrap();
        assert!(blur.iter().all(|v| (v - 0.7).abs() < 1e-14));
        let motion = LinearOperator::motion_blur(32, 32, 9, 45.0).unwrap().apply(&c).unwrap();
        assert!(motion.iter().all(|v| (v - 0.7).abs() < 1e-14));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = rng_from_seed(4);
        let x = standard_normal(36, &mut rng);
        let op = LinearOperator::convolution(6, 6, Kernel::identity());
        assert_eq!(op.apply(&x).unwrap(), x);
        let op = LinearOperator::gaussian_blur(6, 6, 1, 1.0).unwrap();
        assert_eq!(op.apply(&x).unwrap(), x);
    }

    #[test]
    fn operator_norms() {
        assert_eq!(LinearOperator::identity(3).operator_norm(), 1.0);
        assert_eq!(LinearOperator::downsample(8, 8, 4).unwrap().operator_norm(), 0.25);
        let blur = LinearOperator::gaussian_blur(8, 8, 5, 1.0).unwrap();
        // Normalised nonnegative kernel with symmetric reflection: constants are
        // a fixed point, so the norm is exactly 1.
        assert!((blur.operator_norm() - 1.0).abs() < 1e-6);
        let dense = LinearOperator::Dense(Matrix::from_row_slice(1, 2, &[3.0, 4.0]));
        assert!((dense.operator_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let op = LinearOperator::identity(4);
        assert!(op.apply(&Vector::zeros(3)).is_err());
        assert!(op.adjoint(&Vector::zeros(5)).is_err());
        assert!(MeasurementTask::new(op, 0.1, Vector::zeros(3)).is_err());
    }

    #[test]
    fn salt_pepper_edge_rates() {
        let mut rng = rng_from_seed(9);
        let x = Vector::from_element(1000, 0.5);
        let (same, n) = salt_pepper(&x, 0.0, (0.0, 1.0), &mut rng).unwrap();
        assert_eq!(same, x);
        assert_eq!(n, 0);
        let (all, n) = salt_pepper(&x, 1.0, (0.0, 1.0), &mut rng).unwrap();
        assert_eq!(n, 1000);
        assert!(all.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn salt_pepper_rate_is_binomial() {
        let mut rng = rng_from_seed(10);
        let n = 100_000;
        let x = Vector::from_element(n, 0.5);
        let (_, count) = salt_pepper(&x, 0.02, (0.0, 1.0), &mut rng).unwrap();
        let p = 0.02;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((count as f64 / n as f64 - p).abs() < 4.0 * se);
    }
}
