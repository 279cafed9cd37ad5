//! Pure algebra of the forward process, v-prediction targets, clean-sample
//! recovery, and the deterministic sampler step.
//!
//! Sign convention: the self-consistent pair
//!
//! ```text
//! v_t  = √ᾱ_t · ε  − √(1−ᾱ_t) · z0
//! ẑ0   = √ᾱ_t · z_t − √(1−ᾱ_t) · v̂_t
//! ```
//!
//! is used throughout, which makes `predict_clean(forward_diffuse(z0, ε, t),
//! v_target(z0, ε, t), t) = z0` an exact identity. At a rescaled terminal
//! step (ᾱ_T = 0) this yields v_T = −z0; the training module absorbs that
//! fixed sign so its single-step target still composes back to z0.

use crate::error::{ensure_same_shape, Error, Result};
use crate::schedule::NoiseSchedule;
use ndarray::Array3;

/// A (channels, height, width) tensor of 64-bit reals; clean samples live
/// nominally in [−1, 1].
pub type Latent = Array3<f64>;

fn coeffs(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    Ok((
        schedule.sqrt_alpha_bar(t)?,
        schedule.sqrt_one_minus_alpha_bar(t)?,
    ))
}

/// z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε
pub fn forward_diffuse(
    z0: &Latent,
    eps: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    ensure_same_shape(&z0.shape(), &eps.shape())?;
    let (sa, sm) = coeffs(schedule, t)?;
    Ok(z0 * sa + eps * sm)
}

/// v_t = √ᾱ_t·ε − √(1−ᾱ_t)·z0
pub fn v_target(z0: &Latent, eps: &Latent, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    ensure_same_shape(&z0.shape(), &eps.shape())?;
    let (sa, sm) = coeffs(schedule, t)?;
    Ok(eps * sa - z0 * sm)
}

/// ẑ0 = √ᾱ_t·z_t − √(1−ᾱ_t)·v̂
pub fn predict_clean(
    z_t: &Latent,
    v_hat: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    ensure_same_shape(&z_t.shape(), &v_hat.shape())?;
    let (sa, sm) = coeffs(schedule, t)?;
    Ok(z_t * sa - v_hat * sm)
}

/// ε̂ = √(1−ᾱ_t)·z_t + √ᾱ_t·v̂; satisfies z_t = √ᾱ_t·ẑ0 + √(1−ᾱ_t)·ε̂.
pub fn predict_eps(
    z_t: &Latent,
    v_hat: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    ensure_same_shape(&z_t.shape(), &v_hat.shape())?;
    let (sa, sm) = coeffs(schedule, t)?;
    Ok(z_t * sm + v_hat * sa)
}

/// Deterministic (η = 0) update from timestep `t` to `t_next`:
/// re-diffuses the current clean/noise estimates to the next grid point.
/// `t_next = 0` returns the clean estimate itself.
pub fn sampler_step(
    z_t: &Latent,
    v_hat: &Latent,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    if t_next >= t {
        return Err(Error::invalid_argument(format!(
            "t_next ({t_next}) must be smaller than t ({t})"
        )));
    }
    let z0_hat = predict_clean(z_t, v_hat, t, schedule)?;
    if t_next == 0 {
        return Ok(z0_hat);
    }
    let eps_hat = predict_eps(z_t, v_hat, t, schedule)?;
    let (sa, sm) = coeffs(schedule, t_next)?;
    Ok(z0_hat * sa + eps_hat * sm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{TimestepGrid, TimestepStrategy};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Latent {
        Array3::from_shape_simple_fn((c, h, w), || rng.sample(StandardNormal))
    }

    fn max_abs_diff(a: &Latent, b: &Latent) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn forward_diffuse_noiseless_endpoint() {
        // 1-step schedule with tiny beta: alpha_bar close to 1; exact case via direct coeffs
        let s = NoiseSchedule::scaled_linear(1, 1e-12, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = randn(&mut rng, 2, 4, 4);
        let eps = randn(&mut rng, 2, 4, 4);
        let z1 = forward_diffuse(&z0, &eps, 1, &s).unwrap();
        assert!(max_abs_diff(&z1, &z0) < 1e-5);
    }

    #[test]
    fn forward_diffuse_terminal_is_pure_noise_when_rescaled() {
        let s = NoiseSchedule::default_scaled_linear()
            .rescale_zero_terminal_snr()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = randn(&mut rng, 3, 4, 4);
        let eps = randn(&mut rng, 3, 4, 4);
        let z_t = forward_diffuse(&z0, &eps, 1000, &s).unwrap();
        assert_eq!(max_abs_diff(&z_t, &eps), 0.0);
    }

    #[test]
    fn forward_diffuse_default_terminal_coefficients() {
        let s = NoiseSchedule::default_scaled_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = randn(&mut rng, 1, 3, 3);
        let eps = randn(&mut rng, 1, 3, 3);
        let z_t = forward_diffuse(&z0, &eps, 1000, &s).unwrap();
        let expected = &z0 * 0.068265 + &eps * 0.997667;
        assert!(max_abs_diff(&z_t, &expected) < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = NoiseSchedule::default_scaled_linear();
        let z0 = Array3::zeros((1, 4, 4));
        let eps = Array3::zeros((1, 4, 5));
        assert!(matches!(
            forward_diffuse(&z0, &eps, 10, &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn v_target_terminal_cases() {
        let r = NoiseSchedule::default_scaled_linear()
            .rescale_zero_terminal_snr()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = randn(&mut rng, 2, 3, 3);
        let eps = randn(&mut rng, 2, 3, 3);
        // alpha_bar_T = 0 => v = -z0
        let v = v_target(&z0, &eps, 1000, &r).unwrap();
        assert_eq!(max_abs_diff(&v, &(-&z0).to_owned()), 0.0);
    }

    #[test]
    fn round_trip_identity_across_timesteps() {
        let s = NoiseSchedule::default_scaled_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &t in &[1, 7, 250, 500, 999, 1000] {
            let z0 = randn(&mut rng, 2, 4, 4);
            let eps = randn(&mut rng, 2, 4, 4);
            let z_t = forward_diffuse(&z0, &eps, t, &s).unwrap();
            let v = v_target(&z0, &eps, t, &s).unwrap();
            let rec = predict_clean(&z_t, &v, t, &s).unwrap();
            assert!(max_abs_diff(&rec, &z0) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn reconstruction_identity_holds_for_any_v_hat() {
        let s = NoiseSchedule::default_scaled_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &t in &[3, 123, 1000] {
            let z_t = randn(&mut rng, 2, 4, 4);
            let v_hat = randn(&mut rng, 2, 4, 4);
            let z0_hat = predict_clean(&z_t, &v_hat, t, &s).unwrap();
            let eps_hat = predict_eps(&z_t, &v_hat, t, &s).unwrap();
            let sa = s.sqrt_alpha_bar(t).unwrap();
            let sm = s.sqrt_one_minus_alpha_bar(t).unwrap();
            let rec = &z0_hat * sa + &eps_hat * sm;
            assert!(max_abs_diff(&rec, &z_t) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn sampler_step_terminal_equals_predict_clean() {
        let s = NoiseSchedule::default_scaled_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z_t = randn(&mut rng, 2, 4, 4);
        let v_hat = randn(&mut rng, 2, 4, 4);
        let direct = predict_clean(&z_t, &v_hat, 700, &s).unwrap();
        let stepped = sampler_step(&z_t, &v_hat, 700, 0, &s).unwrap();
        assert_eq!(max_abs_diff(&direct, &stepped), 0.0);
    }

    #[test]
    fn sampler_step_rejects_non_decreasing_t() {
        let s = NoiseSchedule::default_scaled_linear();
        let z = Array3::zeros((1, 2, 2));
        assert!(sampler_step(&z, &z, 100, 100, &s).is_err());
        assert!(sampler_step(&z, &z, 100, 200, &s).is_err());
    }

    /// Runs the sampler over a grid feeding the exact v at every step.
    fn oracle_sampler(z0: &Latent, eps: &Latent, grid: &[usize], s: &NoiseSchedule) -> Latent {
        let mut z = forward_diffuse(z0, eps, grid[0], s).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let t_next = grid.get(i + 1).copied().unwrap_or(0);
            // the exact eps consistent with the current z at timestep t:
            // z = sa*z0 + sm*e  =>  e = (z - sa*z0)/sm; v built from that e
            let sm = s.sqrt_one_minus_alpha_bar(t).unwrap();
            let sa = s.sqrt_alpha_bar(t).unwrap();
            let e = (&z - &(z0 * sa)) / sm;
            let v = v_target(z0, &e, t, s).unwrap();
            z = sampler_step(&z, &v, t, t_next, s).unwrap();
        }
        z
    }

    #[test]
    fn oracle_v_recovers_z0_on_any_grid() {
        let s = NoiseSchedule::default_scaled_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0 = randn(&mut rng, 2, 4, 4);
        let eps = randn(&mut rng, 2, 4, 4);
        for steps in [1usize, 2, 5, 10] {
            let grid = TimestepGrid::new(1000, steps, TimestepStrategy::Trailing).unwrap();
            let out = oracle_sampler(&z0, &eps, grid.steps(), &s);
            assert!(
                max_abs_diff(&out, &z0) < 1e-5,
                "S={steps}: {}",
                max_abs_diff(&out, &z0)
            );
        }
    }

    #[test]
    fn operations_are_linear_in_tensor_arguments() {
        let s = NoiseSchedule::default_scaled_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = (1.7, -0.4);
        let x1 = randn(&mut rng, 1, 3, 3);
        let x2 = randn(&mut rng, 1, 3, 3);
        let y1 = randn(&mut rng, 1, 3, 3);
        let y2 = randn(&mut rng, 1, 3, 3);
        let combo_x = &x1 * a + &x2 * b;
        let combo_y = &y1 * a + &y2 * b;
        let t = 321;
        type Op = fn(&Latent, &Latent, usize, &NoiseSchedule) -> Result<Latent>;
        let ops: [Op; 4] = [forward_diffuse, v_target, predict_clean, predict_eps];
        for op in ops {
            let lhs = op(&combo_x, &combo_y, t, &s).unwrap();
            let rhs = &op(&x1, &y1, t, &s).unwrap() * a + &op(&x2, &y2, t, &s).unwrap() * b;
            assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
        }
    }
}
