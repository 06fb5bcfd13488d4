//! Masked diffusion generation with co-optimized group relative policy
//! optimization over both the denoiser and its inference schedule.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod numerics;
pub mod params;
pub mod pretrain;
pub mod sampler;
pub mod schedule;
pub mod tasks;

pub use error::{Error, Result};
