//! Diffusion-based depth completion for non-Lambertian objects.
//!
//! The crate builds a desk-scale depth-completion stack around three ideas:
//! a zero terminal-SNR noise schedule (no signal leakage at the last
//! timestep), a noise-agnostic single-step training formulation with a
//! pixel-space task loss (no exposure bias from multi-step sampling), and a
//! semantic enhancer that jointly regresses depth and palette-encoded
//! segmentation through one denoiser with cross-task attention.
//!
//! Modules:
//! - [`schedule`] — noise schedules, zero-terminal-SNR rescaling, timestep grids
//! - [`diffusion`] — forward process, v-prediction targets, deterministic sampler
//! - [`semantics`] — palette codec between label maps and RGB images
//! - [`denoiser`] — toy conditional encoder–decoder with task switching and
//!   cross-task attention, with hand-written 64-bit backprop
//! - [`synthdata`] — procedural RGB-D scene generation, preprocessing, dataset I/O
//! - [`training`] — single/multi-step training loop, combined L1 loss, AdamW
//! - [`evaluation`] — depth metrics, semantic accuracy, bias diagnostics
//! - [`plot`] — minimal raster line plots backing the CLI's curve outputs

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod plot;
pub mod schedule;
pub mod semantics;
pub mod synthdata;
pub mod training;

pub use diffusion::Latent;
pub use error::{Error, Result};
