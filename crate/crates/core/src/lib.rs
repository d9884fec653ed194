//! Conditional denoising diffusion for unsupervised anomaly detection.
//!
//! A U-Net trained on healthy slices reconstructs a test slice from a single
//! noised copy, conditioned through bottleneck cross-attention on the test
//! slice itself plus a multichannel latent from a bridge network. Residuals
//! between input and reconstruction are filtered, masked and thresholded
//! into anomaly segmentations.

pub mod autograd;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod volume;

pub use checkpoint::Checkpoint;
pub use diffusion::{make_linear_schedule, NoiseSchedule, PatchMask};
pub use error::{Error, Result};
pub use inference::{AnomalyMap, InferenceConfig};
pub use model::{Ablation, Mcddpm, ModelConfig};
pub use training::{PNorm, TrainConfig};
pub use volume::{BinaryMap, Slice2D, Volume3D};
