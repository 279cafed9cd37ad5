//! Sinusoidal embeddings for timesteps and task-switch codes.

use crate::error::{Error, Result};
use ndarray::Array1;

/// Which output the denoiser is asked to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Semantic,
}

/// Conditioning selector whose positional encoding is added to the timestep
/// embedding. Codes: depth → 0, semantic → 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSwitch {
    pub task: Task,
}

impl TaskSwitch {
    pub fn depth() -> Self {
        Self { task: Task::Depth }
    }

    pub fn semantic() -> Self {
        Self {
            task: Task::Semantic,
        }
    }

    pub fn code(&self) -> f64 {
        match self.task {
            Task::Depth => 0.0,
            Task::Semantic => 1.0,
        }
    }
}

fn sinusoidal(value: f64, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid_argument(format!(
            "embedding dim must be positive and even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for j in 0..half {
        let freq = (10_000f64).powf(-(2.0 * j as f64) / dim as f64);
        out[2 * j] = (value * freq).sin();
        out[2 * j + 1] = (value * freq).cos();
    }
    Ok(out)
}

/// Interleaved (sin, cos) features of an integer timestep.
pub fn embed_timestep(t: usize, dim: usize) -> Result<Array1<f64>> {
    sinusoidal(t as f64, dim)
}

/// Positional encoding of the task code; the caller adds it element-wise to
/// the timestep embedding.
pub fn embed_switch(switch: &TaskSwitch, dim: usize) -> Result<Array1<f64>> {
    sinusoidal(switch.code(), dim)
}
