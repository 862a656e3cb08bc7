//! Bridge sampling: training-time corruption and the generative recursion.
//!
//! Generation starts on the source boundary `z0` (t = 0) and walks toward the
//! target boundary (t = 1), re-anchoring every step on the current endpoint
//! prediction.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::schedule::Schedule;

/// A point on a sampling chain.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeState {
    pub z: Image,
    pub i: usize,
    pub rng_seed: u64,
}

/// Draws `z_t ~ N(mu_t, var_t I)` from the closed-form bridge marginal.
pub fn sample_intermediate<R: Rng + ?Sized>(
    schedule: &Schedule,
    z0: &Image,
    z1: &Image,
    i: usize,
    rng: &mut R,
) -> Result<Image> {
    let (mut mu, var) = schedule.bridge_moments(i, z0, z1)?;
    if var > 0.0 {
        let sd = var.sqrt();
        let noise = Image::standard_normal(mu.width(), mu.height(), rng);
        for (m, n) in mu.data_mut().iter_mut().zip(noise.data()) {
            *m += sd * n;
        }
    }
    Ok(mu)
}

/// Inverts the regression target `(z_t - z1) / sigma_t`: returns `z_t - sigma_t * score`.
pub fn predict_endpoint(z_t: &Image, score: &Image, sigma_t: f64) -> Result<Image> {
    if !(sigma_t > 0.0) {
        return Err(invalid(format!(
            "endpoint prediction needs sigma_t > 0, got {sigma_t}"
        )));
    }
    z_t.lincomb(1.0, score, -sigma_t)
}

/// One step of the generative recursion from grid index `i` to `j`.
///
/// Uses the bridge posterior between the current state and the predicted
/// endpoint restricted to `[t_i, 1]`. When `j == N` the endpoint is returned
/// unchanged.
pub fn generative_step<R: Rng + ?Sized>(
    schedule: &Schedule,
    z_i: &Image,
    zhat1: &Image,
    i: usize,
    j: usize,
    rng: &mut R,
    deterministic: bool,
) -> Result<Image> {
    if i >= j {
        return Err(invalid(format!("generative step needs i < j, got {i} >= {j}")));
    }
    z_i.ensure_same_shape(zhat1)?;
    let (a, b) = schedule.interval_variances(i, j)?;
    if b == 0.0 {
        return Ok(zhat1.clone());
    }
    let denom = a + b;
    let mut out = z_i.lincomb(b / denom, zhat1, a / denom)?;
    if !deterministic && a > 0.0 {
        let sd = (a * b / denom).sqrt();
        let noise = Image::standard_normal(out.width(), out.height(), rng);
        for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
            *o += sd * n;
        }
    }
    Ok(out)
}

/// `NFE + 1` fine-grid indices evenly spaced over `[0, N]`.
pub fn nfe_grid(schedule: &Schedule, nfe: usize) -> Result<Vec<usize>> {
    let n = schedule.n_steps();
    if nfe == 0 || nfe > n {
        return Err(Error::InvalidArgument(format!(
            "nfe must lie in 1..={n}, got {nfe}"
        )));
    }
    Ok((0..=nfe)
        .map(|k| ((k as f64) * n as f64 / nfe as f64).round() as usize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> (Image, Image) {
        (
            Image::from_fn(4, 3, |x, y| 0.1 * x as f64 - 0.05 * y as f64),
            Image::from_fn(4, 3, |x, y| 0.7 + 0.02 * (x * y) as f64),
        )
    }

    #[test]
    fn boundary_samples_are_exact() {
        let s = Schedule::new(50, 0.1, 0.5).unwrap();
        let (z0, z1) = pair();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_intermediate(&s, &z0, &z1, 0, &mut rng).unwrap(), z0);
            assert_eq!(sample_intermediate(&s, &z0, &z1, 50, &mut rng).unwrap(), z1);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = Schedule::new(50, 0.1, 0.5).unwrap();
        let (z0, z1) = pair();
        let a = sample_intermediate(&s, &z0, &z1, 17, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_intermediate(&s, &z0, &z1, 17, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_intermediate(&s, &z0, &Image::zeros(2, 2), 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn endpoint_prediction_inverts_target() {
        let (zt, z1) = pair();
        let sigma = 0.37;
        let score = zt.lincomb(1.0 / sigma, &z1, -1.0 / sigma).unwrap();
        let back = predict_endpoint(&zt, &score, sigma).unwrap();
        assert!(back.max_abs_diff(&z1).unwrap() < 1e-14);

        let zero = Image::zeros(4, 3);
        assert_eq!(predict_endpoint(&zt, &zero, sigma).unwrap(), zt);
        assert!(predict_endpoint(&zt, &zero, 0.0).is_err());
    }

    #[test]
    fn endpoint_from_scaled_noise() {
        let (_, z1) = pair();
        let g = Image::standard_normal(4, 3, &mut ChaCha8Rng::seed_from_u64(3));
        let sigma = 0.21;
        let zt = z1.lincomb(1.0, &g, sigma).unwrap();
        let back = predict_endpoint(&zt, &g, sigma).unwrap();
        assert!(back.max_abs_diff(&z1).unwrap() < 1e-14);
    }

    #[test]
    fn generative_step_cases() {
        let s = Schedule::new(2, 0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Image::zeros(1, 1);
        let one = Image::filled(1, 1, 1.0);
        let half = generative_step(&s, &z, &one, 0, 1, &mut rng, true).unwrap();
        assert_eq!(half.data(), &[0.5]);
        assert_eq!(generative_step(&s, &z, &one, 1, 2, &mut rng, false).unwrap(), one);
        assert_eq!(generative_step(&s, &z, &one, 0, 2, &mut rng, false).unwrap(), one);
        assert!(generative_step(&s, &z, &one, 1, 1, &mut rng, true).is_err());

        let s = Schedule::new(40, 0.1, 0.6).unwrap();
        let (za, _) = pair();
        let fixed = generative_step(&s, &za, &za, 5, 20, &mut rng, true).unwrap();
        assert!(fixed.max_abs_diff(&za).unwrap() < 1e-15);
    }

    #[test]
    fn grid_spacing() {
        let s = Schedule::new(1000, 0.1, 0.3).unwrap();
        assert_eq!(nfe_grid(&s, 1).unwrap(), vec![0, 1000]);
        assert_eq!(nfe_grid(&s, 10).unwrap()[3], 300);
        let g = nfe_grid(&s, 7).unwrap();
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(nfe_grid(&s, 0).is_err());
        assert!(nfe_grid(&s, 1001).is_err());
    }
}
