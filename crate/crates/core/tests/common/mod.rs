#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use mcddpm::bridge::BridgeConfig;
use mcddpm::rng::{gaussian_vec, stream};
use mcddpm::unet::UNetConfig;
use mcddpm::{Ablation, ModelConfig, Slice2D};

/// Small model for 8×8 inputs.
pub fn tiny_config(ablation: Ablation) -> ModelConfig {
    ModelConfig::new(
        BridgeConfig { latent_channels: 2, hidden: 4, blocks: 2 },
        UNetConfig { base_width: 8, time_embed_dim: 16, ..UNetConfig::default() },
        ablation,
    )
}

pub fn random_slice(h: usize, w: usize, seed: u64) -> Slice2D {
    let data = gaussian_vec(h * w, &mut stream(seed, &[1]));
    Slice2D::new(h, w, data.iter().map(|v| 0.5 + 0.2 * v).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
