use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Square convolution kernel, row-major, odd side length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    side: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self> {
        if side % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel side must be odd, got {side}"
            )));
        }
        if weights.len() != side * side {
            return Err(Error::dim("kernel weights", side * side, weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("kernel weights must be finite".into()));
        }
        Ok(Self { side, weights })
    }

    /// Normalised isotropic Gaussian evaluated on the integer grid.
    pub fn gaussian(side: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "blur sigma must be positive, got {sigma}"
            )));
        }
        if side % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel side must be odd, got {side}"
            )));
        }
        let r = (side / 2) as f64;
        let mut w = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                let (y, x) = (i as f64 - r, j as f64 - r);
                w.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
            }
        }
        Self::new(side, w).map(Self::normalized)
    }

    /// Normalised line kernel of the given length through the centre at
    /// `angle` degrees (counter-clockwise from the horizontal axis).
    pub fn motion(length: usize, angle_deg: f64) -> Result<Self> {
        if length == 0 || length % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "motion blur length must be odd, got {length}"
            )));
        }
        let side = length;
        let r = (side / 2) as f64;
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let mut w = vec![0.0; side * side];
        let samples = 8 * length;
        for s in 0..samples {
            let t = -r + 2.0 * r * s as f64 / (samples - 1).max(1) as f64;
            let col = (r + t * cos).round() as usize;
            let row = (r - t * sin).round() as usize;
            w[row.min(side - 1) * side + col.min(side - 1)] += 1.0;
        }
        Self::new(side, w).map(Self::normalized)
    }

    pub fn identity() -> Self {
        Self {
            side: 1,
            weights: vec![1.0],
        }
    }

    fn normalized(mut self) -> Self {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= total);
        self
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.side + col]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Half-sample symmetric reflection of `i` into `[0, n)`.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernel_entries() {
        let k = Kernel::gaussian(5, 1.0).unwrap();
        let mut total = 0.0;
        for i in -2i32..=2 {
            for j in -2i32..=2 {
                total += (-((i * i + j * j) as f64) / 2.0).exp();
            }
        }
        assert!((k.weight(2, 2) - 1.0 / total).abs() < 1e-15);
        assert!((k.weight(0, 1) - (-2.5f64).exp() / total).abs() < 1e-15);
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_even_sides() {
        assert!(Kernel::gaussian(4, 1.0).is_err());
        assert!(Kernel::motion(8, 0.0).is_err());
        assert!(Kernel::gaussian(5, 0.0).is_err());
    }

    #[test]
    fn horizontal_motion_kernel_is_a_row() {
        let k = Kernel::motion(5, 0.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i == 2 {
                    assert!(k.weight(i, j) > 0.0);
                } else {
                    assert_eq!(k.weight(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn reflect_folds_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(9, 4), 1);
        assert_eq!(reflect(2, 4), 2);
    }
}
