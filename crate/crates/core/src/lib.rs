//! Guided score-based diffusion over multi-agent 2D trajectories.

pub mod denoiser;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod geom;
pub mod guidance;
pub mod logprob;
pub mod metrics;
pub mod pca;
pub mod rng;
pub mod scenes;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
