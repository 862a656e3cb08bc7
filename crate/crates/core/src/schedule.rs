//! Symmetric diffusion-coefficient schedule and the closed-form bridge moments.
//!
//! The coefficient `beta(t)` is triangular on `[0, 1]`: it rises linearly from
//! `beta_min` at both boundaries to `beta_max` at `t = 1/2`. Accumulated
//! variances are integrated with the trapezoidal rule on the grid so any
//! other `beta` array works unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            beta_min: 0.1,
            beta_max: 0.3,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::new(self.n_steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    n_steps: usize,
    beta: Vec<f64>,
    sigma2: Vec<f64>,
    sigma_bar2: Vec<f64>,
}

impl Schedule {
    /// Builds the triangular schedule on the grid `t_i = i / n_steps`.
    pub fn new(n_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("n_steps must be positive"));
        }
        if !(beta_min >= 0.0) || !beta_max.is_finite() || beta_max <= 0.0 {
            return Err(invalid(format!(
                "need 0 <= beta_min and beta_max > 0, got ({beta_min}, {beta_max})"
            )));
        }
        if beta_max < beta_min {
            return Err(invalid(format!(
                "beta_max {beta_max} is below beta_min {beta_min}"
            )));
        }
        let n = n_steps as i64;
        // 1 - |2t - 1| evaluated in integers keeps beta[i] == beta[N - i] bitwise.
        let beta: Vec<f64> = (0..=n)
            .map(|i| {
                let tent = 1.0 - (2 * i - n).abs() as f64 / n as f64;
                beta_min + (beta_max - beta_min) * tent
            })
            .collect();
        Self::from_beta(beta)
    }

    /// Builds a schedule from an arbitrary nonnegative `beta` array on a uniform grid.
    pub fn from_beta(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(invalid("beta needs at least two grid points"));
        }
        if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(invalid("beta must be finite and nonnegative"));
        }
        let n_steps = beta.len() - 1;
        let dt = 1.0 / n_steps as f64;
        let mut sigma2 = vec![0.0; n_steps + 1];
        for i in 1..=n_steps {
            sigma2[i] = sigma2[i - 1] + 0.5 * (beta[i - 1] + beta[i]) * dt;
        }
        let mut sigma_bar2 = vec![0.0; n_steps + 1];
        for i in (0..n_steps).rev() {
            sigma_bar2[i] = sigma_bar2[i + 1] + 0.5 * (beta[i] + beta[i + 1]) * dt;
        }
        Ok(Self {
            n_steps,
            beta,
            sigma2,
            sigma_bar2,
        })
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn sigma_bar2(&self) -> &[f64] {
        &self.sigma_bar2
    }

    /// Total integrated variance over `[0, 1]`.
    pub fn total(&self) -> f64 {
        self.sigma2[self.n_steps]
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.n_steps as f64
    }

    /// `sqrt(sigma2[i])`, the normalizer of the endpoint-regression target.
    #[inline]
    pub fn sigma(&self, i: usize) -> f64 {
        self.sigma2[i].sqrt()
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i > self.n_steps {
            return Err(Error::IndexOutOfRange {
                index: i,
                max: self.n_steps,
            });
        }
        Ok(())
    }

    /// Mixing weights `(w0, w1)` of the bridge mean and its variance at grid index `i`.
    ///
    /// The boundaries return exact `(1, 0, 0)` / `(0, 1, 0)` without forming the ratio.
    pub fn bridge_coefficients(&self, i: usize) -> Result<(f64, f64, f64)> {
        self.check_index(i)?;
        if i == 0 {
            return Ok((1.0, 0.0, 0.0));
        }
        if i == self.n_steps {
            return Ok((0.0, 1.0, 0.0));
        }
        let s2 = self.sigma2[i];
        let sb2 = self.sigma_bar2[i];
        let denom = s2 + sb2;
        if denom <= 0.0 {
            // Degenerate beta (all zero): no stochasticity, stay on the source.
            return Ok((1.0, 0.0, 0.0));
        }
        let w1 = s2 / denom;
        let w0 = 1.0 - w1;
        Ok((w0, w1, s2 * sb2 / denom))
    }

    /// Mean and (isotropic) variance of `z_t` given both endpoints.
    pub fn bridge_moments(&self, i: usize, z0: &Image, z1: &Image) -> Result<(Image, f64)> {
        z0.ensure_same_shape(z1)?;
        let (w0, w1, var) = self.bridge_coefficients(i)?;
        if i == 0 {
            return Ok((z0.clone(), 0.0));
        }
        if i == self.n_steps {
            return Ok((z1.clone(), 0.0));
        }
        Ok((z0.lincomb(w0, z1, w1)?, var))
    }

    /// Accumulated variance over `[t_i, t_j]` and over `[t_j, 1]`.
    pub fn interval_variances(&self, i: usize, j: usize) -> Result<(f64, f64)> {
        self.check_index(j)?;
        if i > j {
            return Err(invalid(format!("interval start {i} exceeds end {j}")));
        }
        Ok((self.sigma2[j] - self.sigma2[i], self.sigma_bar2[j]))
    }

    /// Nearest fine-grid index for continuous time `t` in `[0, 1]`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let i = (t.clamp(0.0, 1.0) * self.n_steps as f64).round() as usize;
        i.min(self.n_steps)
    }
}
