//! Bridge networks.
//!
//! The extractor maps the fully-noised slice to a multichannel latent `Z`
//! with the slice's spatial size; the reconstructor maps `Z` back to a
//! single-channel estimate of the clean slice. Neither network downsamples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure, Result};
use crate::nn::{Init, ParamStore, Session};
use crate::tensor::Real;

pub const EXTRACTOR: &str = "bridge.extractor";
pub const RECONSTRUCTOR: &str = "bridge.reconstructor";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// Channels of the latent `Z`.
    pub latent_channels: usize,
    /// Width of the residual blocks.
    pub hidden: usize,
    /// Residual blocks in each of the two networks.
    pub blocks: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig { latent_channels: 4, hidden: 32, blocks: 2 }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent_channels > 0, "latent_channels must be positive");
        ensure!(self.hidden > 0, "bridge hidden width must be positive");
        Ok(())
    }
}

/// Multichannel latent `Z`, shape `channels × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl LatentStack {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.h, self.w)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn init_stack<T: Real, R: Rng + ?Sized>(
    init: &mut Init<'_, T, R>,
    prefix: &str,
    cin: usize,
    cout: usize,
    cfg: &BridgeConfig,
) {
    init.conv(&format!("{prefix}.conv_in"), cin, cfg.hidden, 3);
    for b in 0..cfg.blocks {
        init.res_block(&format!("{prefix}.block{b}"), cfg.hidden, cfg.hidden, None);
    }
    init.norm(&format!("{prefix}.norm_out"), cfg.hidden);
    init.conv(&format!("{prefix}.proj"), cfg.hidden, cout, 1);
}

pub fn init_bridge<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &BridgeConfig, rng: &mut R) {
    let mut init = Init { store, rng };
    init_stack(&mut init, EXTRACTOR, 1, cfg.latent_channels, cfg);
    init_stack(&mut init, RECONSTRUCTOR, cfg.latent_channels, 1, cfg);
}

fn stack_forward<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Var {
    let mut h = s.conv(&format!("{prefix}.conv_in"), x);
    let mut b = 0;
    while s.has(&format!("{prefix}.block{b}.conv1.weight")) {
        h = s.res_block(&format!("{prefix}.block{b}"), h, None);
        b += 1;
    }
    let h = s.norm_act(&format!("{prefix}.norm_out"), h);
    s.conv(&format!("{prefix}.proj"), h)
}

/// `[n, 1, h, w]` → `[n, C_z, h, w]`.
pub fn encode_graph<T: Real>(s: &mut Session<'_, T>, x_full: Var) -> Var {
    stack_forward(s, EXTRACTOR, x_full)
}

/// `[n, C_z, h, w]` → `[n, 1, h, w]`.
pub fn reconstruct_graph<T: Real>(s: &mut Session<'_, T>, z: Var) -> Var {
    stack_forward(s, RECONSTRUCTOR, z)
}
