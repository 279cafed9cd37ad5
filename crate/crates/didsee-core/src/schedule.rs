//! Diffusion noise schedules and inference timestep grids.
//!
//! A [`NoiseSchedule`] holds the per-timestep forward variances β_t, the
//! cumulative products ᾱ_t = Π(1−β_s) and their square roots, and knows how
//! to rescale itself so that the terminal signal-to-noise ratio is exactly
//! zero. Timesteps are 1-based: `t` ranges over `1..=num_timesteps`.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::Write;

/// Default training horizon of the base model configuration.
pub const DEFAULT_TIMESTEPS: usize = 1000;
/// Default β range of the scaled-linear schedule.
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

/// Per-timestep noise schedule. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sqrt_alpha_bars: Vec<f64>,
    rescaled: bool,
}

impl NoiseSchedule {
    /// Builds the scaled-linear schedule: β_t interpolates linearly in √β
    /// space between `√beta_start` and `√beta_end`, then is squared.
    pub fn scaled_linear(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_timesteps == 0 {
            return Err(Error::invalid_argument("num_timesteps must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0) {
            return Err(Error::invalid_argument(format!(
                "betas must lie in (0, 1): got start={beta_start}, end={beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::invalid_argument(format!(
                "beta_start ({beta_start}) must not exceed beta_end ({beta_end})"
            )));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let n = num_timesteps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                let s = s0 + (s1 - s0) * frac;
                s * s
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    /// The 1000-step scaled-linear schedule with β ∈ [0.00085, 0.012],
    /// the base configuration whose terminal ᾱ is ≈ 0.00466.
    pub fn default_scaled_linear() -> Self {
        Self::scaled_linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default parameters are valid")
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        let sqrt_alpha_bars = alpha_bars.iter().map(|a| a.sqrt()).collect();
        Self {
            betas,
            alpha_bars,
            sqrt_alpha_bars,
            rescaled: false,
        }
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn is_rescaled(&self) -> bool {
        self.rescaled
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.betas.len() {
            return Err(Error::IndexOutOfRange(format!(
                "t={t} outside 1..={}",
                self.betas.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.sqrt_alpha_bars[self.check_t(t)?])
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bars[self.check_t(t)?]).sqrt())
    }

    /// SNR(t) = ᾱ_t / (1 − ᾱ_t). Zero when ᾱ_t = 0, +∞ when ᾱ_t = 1.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bars[self.check_t(t)?];
        if a == 0.0 {
            Ok(0.0)
        } else if a == 1.0 {
            Ok(f64::INFINITY)
        } else {
            Ok(a / (1.0 - a))
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sqrt_alpha_bars(&self) -> &[f64] {
        &self.sqrt_alpha_bars
    }

    /// Shift-and-scale the √ᾱ sequence so the terminal value is exactly zero
    /// while √ᾱ_1 is kept unchanged:
    ///
    /// ```text
    /// s'_t = (s_t − s_T) · s_1 / (s_1 − s_T)
    /// ```
    ///
    /// Betas are recomputed from consecutive ᾱ ratios; β'_T comes out as 1
    /// since ᾱ'_T = 0, and downstream code must never divide by (1 − β'_T).
    pub fn rescale_zero_terminal_snr(&self) -> Result<NoiseSchedule> {
        if self.rescaled {
            return Err(Error::invalid_state("schedule is already rescaled"));
        }
        let s = &self.sqrt_alpha_bars;
        let n = s.len();
        let (s_first, s_last) = (s[0], s[n - 1]);
        if s_first == s_last {
            return Err(Error::invalid_argument(
                "cannot rescale: sqrt_alpha_bar is constant (T=1 or degenerate betas)",
            ));
        }
        let scale = s_first / (s_first - s_last);
        let sqrt_alpha_bars: Vec<f64> = s.iter().map(|&v| (v - s_last) * scale).collect();
        let alpha_bars: Vec<f64> = sqrt_alpha_bars.iter().map(|v| v * v).collect();
        let mut betas = Vec::with_capacity(n);
        let mut prev = 1.0;
        for &a in &alpha_bars {
            betas.push(1.0 - a / prev);
            prev = a;
        }
        Ok(NoiseSchedule {
            betas,
            alpha_bars,
            sqrt_alpha_bars,
            rescaled: true,
        })
    }

    /// SHA-256 over the little-endian β bytes and the rescaled flag;
    /// identifies a schedule inside checkpoint metadata.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        h.update([self.rescaled as u8]);
        format!("{:x}", h.finalize())
    }

    /// Writes `t,beta,alpha_bar,sqrt_alpha_bar,snr` rows for plotting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,beta,alpha_bar,sqrt_alpha_bar,snr")?;
        for t in 1..=self.num_timesteps() {
            writeln!(
                w,
                "{},{},{},{},{}",
                t,
                self.betas[t - 1],
                self.alpha_bars[t - 1],
                self.sqrt_alpha_bars[t - 1],
                self.snr(t).expect("t in range"),
            )?;
        }
        Ok(())
    }
}

/// Constructor parameters identifying a scaled-linear schedule; enough to
/// rebuild it exactly (used in checkpoint metadata).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleSpec {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub rescaled: bool,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = NoiseSchedule::scaled_linear(self.num_timesteps, self.beta_start, self.beta_end)?;
        if self.rescaled {
            s.rescale_zero_terminal_snr()
        } else {
            Ok(s)
        }
    }
}

/// How inference timesteps are spread over the training horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepStrategy {
    /// Starts at 1 + (S−1)·T/S and ends at 1; omits the terminal timestep.
    Leading,
    /// Starts at T and ends at T/S; always contains the terminal timestep.
    Trailing,
}

impl std::fmt::Display for TimestepStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimestepStrategy::Leading => write!(f, "leading"),
            TimestepStrategy::Trailing => write!(f, "trailing"),
        }
    }
}

/// Strictly decreasing inference timesteps in `[1, T]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    steps: Vec<usize>,
    strategy: TimestepStrategy,
}

impl TimestepGrid {
    /// Selects `num_steps` timesteps out of `1..=num_timesteps`.
    ///
    /// For divisible T/S this reproduces the exact leading/trailing tables;
    /// otherwise positions are rounded to the nearest integer, clamped to
    /// `[1, T]`, and deduplicated while preserving the decreasing order.
    pub fn new(
        num_timesteps: usize,
        num_steps: usize,
        strategy: TimestepStrategy,
    ) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid_argument("num_steps must be >= 1"));
        }
        if num_steps > num_timesteps {
            return Err(Error::invalid_argument(format!(
                "num_steps ({num_steps}) must not exceed num_timesteps ({num_timesteps})"
            )));
        }
        let stride = num_timesteps as f64 / num_steps as f64;
        let raw: Vec<f64> = match strategy {
            TimestepStrategy::Trailing => (0..num_steps)
                .map(|i| num_timesteps as f64 - i as f64 * stride)
                .collect(),
            TimestepStrategy::Leading => (0..num_steps)
                .map(|i| 1.0 + (num_steps - 1 - i) as f64 * stride)
                .collect(),
        };
        let mut steps = Vec::with_capacity(num_steps);
        for v in raw {
            let t = (v.round() as usize).clamp(1, num_timesteps);
            if steps.last() != Some(&t) {
                steps.push(t);
            }
        }
        Ok(Self { steps, strategy })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn strategy(&self) -> TimestepStrategy {
        self.strategy
    }
}
