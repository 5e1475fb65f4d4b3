//! Discrete variance-preserving noise schedules.
//!
//! Noise levels are indexed by `k ∈ [0, T]`: `k = 0` is clean data and
//! `k = T` is the most diffused level. `alpha_bar(0) = 1` is stored
//! explicitly, so the forward kernel at `k = 0` is the identity. The reverse
//! loop variable `t ∈ [0, T)` of the samplers maps to noise index `T - t`.

use serde::{Deserialize, Serialize};

use crate::{standard_normal, Error, Result, Rng, Vector};

/// Schedule family and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ScheduleFamily {
    /// `β_k` linear from `beta_start` (k = 1) to `beta_end` (k = T).
    LinearBeta { beta_start: f64, beta_end: f64 },
    /// Improved-DDPM cosine profile with offset `s`; `β_k` capped at 0.999.
    Cosine { offset: f64 },
    /// Every `α_k` equal to `alpha`.
    ConstantAlpha { alpha: f64 },
}

impl Default for ScheduleFamily {
    fn default() -> Self {
        ScheduleFamily::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

/// Immutable discrete schedule: `α_1..α_T` and `ᾱ_0..ᾱ_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    // alphas[0] is a placeholder (1.0) so that alphas[k] is α_k.
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, family: ScheduleFamily) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        let mut alphas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        match family {
            ScheduleFamily::LinearBeta {
                beta_start,
                beta_end,
            } => {
                for k in 1..=steps {
                    let frac = if steps == 1 {
                        0.0
                    } else {
                        (k - 1) as f64 / (steps - 1) as f64
                    };
                    alphas.push(1.0 - (beta_start + (beta_end - beta_start) * frac));
                }
            }
            ScheduleFamily::Cosine { offset } => {
                if !(offset >= 0.0 && offset.is_finite()) {
                    return Err(Error::InvalidSchedule(format!(
                        "cosine offset must be finite and nonnegative, got {offset}"
                    )));
                }
                let f = |k: usize| {
                    let x = (k as f64 / steps as f64 + offset) / (1.0 + offset);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                for k in 1..=steps {
                    let beta = (1.0 - f(k) / f(k - 1)).min(0.999);
                    alphas.push(1.0 - beta);
                }
            }
            ScheduleFamily::ConstantAlpha { alpha } => {
                alphas.extend(std::iter::repeat_n(alpha, steps));
            }
        }
        for (k, &a) in alphas.iter().enumerate().skip(1) {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_{k} = {a} outside (0, 1]"
                )));
            }
        }
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for k in 1..=steps {
            let prev = alpha_bars[k - 1];
            alpha_bars.push(prev * alphas[k]);
        }
        Ok(Self {
            family,
            alphas,
            alpha_bars,
        })
    }

    /// The default 50-step linear-beta schedule (β from 1e-4 to 0.2).
    pub fn default_linear() -> Self {
        Self::new(50, ScheduleFamily::default()).expect("default schedule is valid")
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    /// `α_k` for `k ∈ [1, T]`. `alpha(0)` returns 1.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k]
    }

    /// `ᾱ_k` for `k ∈ [0, T]`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_index(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            Err(Error::StepOutOfRange {
                k,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// Samples `√ᾱ_k x0 + √(1-ᾱ_k) ε`, `ε ~ N(0, I)`.
    pub fn forward_noising(&self, x0: &Vector, k: usize, rng: &mut Rng) -> Result<Vector> {
        self.check_index(k)?;
        let ab = self.alpha_bar(k);
        let eps = standard_normal(x0.len(), rng);
        if k == 0 {
            return Ok(x0.clone());
        }
        Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn rejects_zero_steps() {
        assert!(NoiseSchedule::new(0, ScheduleFamily::default()).is_err());
    }

    #[test]
    fn rejects_alpha_outside_unit_interval() {
        assert!(NoiseSchedule::new(3, ScheduleFamily::ConstantAlpha { alpha: 0.0 }).is_err());
        assert!(NoiseSchedule::new(3, ScheduleFamily::ConstantAlpha { alpha: 1.5 }).is_err());
        let bad = ScheduleFamily::LinearBeta {
            beta_start: 0.1,
            beta_end: 1.2,
        };
        assert!(NoiseSchedule::new(10, bad).is_err());
    }

    #[test]
    fn constant_alpha_trivial_cases() {
        let s = NoiseSchedule::new(1, ScheduleFamily::ConstantAlpha { alpha: 1.0 }).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 1.0]);
        let s = NoiseSchedule::new(2, ScheduleFamily::ConstantAlpha { alpha: 0.25 }).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.25, 0.0625]);
    }

    #[test]
    fn linear_beta_final_alpha_bar_regression() {
        // Independent product of (1 - β_k) accumulated in a different order.
        let t = 50;
        let mut log_prod = 0.0f64;
        for k in (1..=t).rev() {
            let beta = 1e-4 + (0.2 - 1e-4) * (k - 1) as f64 / (t - 1) as f64;
            log_prod += (1.0 - beta).ln();
        }
        let s = NoiseSchedule::default_linear();
        assert!((s.alpha_bar(50) - log_prod.exp()).abs() < 1e-14);
        assert!((s.alpha_bar(50) - 4.616_111_011_266_996e-3).abs() < 1e-16);
    }

    #[test]
    fn invariants_hold_for_all_families() {
        let families = [
            ScheduleFamily::default(),
            ScheduleFamily::Cosine { offset: 0.008 },
            ScheduleFamily::ConstantAlpha { alpha: 0.9 },
        ];
        for fam in families {
            let s = NoiseSchedule::new(40, fam).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for k in 1..=s.steps() {
                assert!(s.alpha(k) > 0.0 && s.alpha(k) <= 1.0);
                assert_eq!(s.alpha_bar(k), s.alpha_bar(k - 1) * s.alpha(k));
                assert!(s.alpha_bar(k) <= s.alpha_bar(k - 1));
            }
            assert!(s.alpha_bar(s.steps()) > 0.0);
        }
    }

    #[test]
    fn build_is_pure() {
        let a = NoiseSchedule::new(50, ScheduleFamily::Cosine { offset: 0.008 }).unwrap();
        let b = NoiseSchedule::new(50, ScheduleFamily::Cosine { offset: 0.008 }).unwrap();
        for (x, y) in a.alpha_bars().iter().zip(b.alpha_bars()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forward_noising_at_zero_is_identity() {
        let s = NoiseSchedule::default_linear();
        let x0 = Vector::from_vec(vec![0.3, -1.2, 4.0]);
        let mut rng = rng_from_seed(1);
        assert_eq!(s.forward_noising(&x0, 0, &mut rng).unwrap(), x0);
        assert!(s.forward_noising(&x0, 51, &mut rng).is_err());
    }

    #[test]
    fn forward_noising_moments() {
        let s = NoiseSchedule::default_linear();
        let k = 20;
        let ab = s.alpha_bar(k);
        let x0 = Vector::from_vec(vec![1.5, -0.5]);
        let mut rng = rng_from_seed(7);
        let n = 100_000;
        let mut sum = Vector::zeros(2);
        let mut sumsq = Vector::zeros(2);
        for _ in 0..n {
            let x = s.forward_noising(&x0, k, &mut rng).unwrap();
            sumsq += x.component_mul(&x);
            sum += x;
        }
        let var_true = 1.0 - ab;
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sumsq[i] / n as f64 - mean * mean;
            let se_mean = (var_true / n as f64).sqrt();
            let se_var = var_true * (2.0 / n as f64).sqrt();
            assert!((mean - ab.sqrt() * x0[i]).abs() < 4.0 * se_mean);
            assert!((var - var_true).abs() < 4.0 * se_var);
        }
    }
}
