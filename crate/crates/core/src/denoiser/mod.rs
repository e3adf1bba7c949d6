//! Denoiser implementations: a closed-form mixture oracle and the learned
//! permutation-equivariant set denoiser.

mod gmm;
pub mod nn;
mod set;
mod train;

pub use gmm::{gmm_denoise, GmmOracle, OracleNetwork};
pub use set::{noise_embedding, SceneNetwork, SetDenoiser, SetDenoiserConfig};
pub use train::{batch_loss, train_step, AdamW, OptimConfig, TrainExample};
