//! The split denoising U-Net.
//!
//! The encoder maps a channel-concatenated input plus a time step to a
//! bottleneck feature map and per-stage skips. A single multi-head
//! attention layer at the bottleneck takes queries from the noisy branch
//! and keys/values from a context map (the encoder applied to the clean
//! image at `t = 0`). The decoder upsamples back to a one-channel image.
//!
//! Stage `s` has width `base_width · 2^s`; the bottleneck keeps the width
//! of the last stage and sits at `1/2^depth` of the input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure, Result};
use crate::nn::{Init, ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const ENCODER: &str = "unet.encoder";
pub const CONTEXT_ENCODER: &str = "unet.context_encoder";
pub const DECODER: &str = "unet.decoder";
pub const ATTENTION: &str = "unet.attention";
pub const TIME: &str = "unet.time";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Image channels plus latent channels (1 + C_z, or 1 without a bridge).
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of 2× downsampling stages.
    pub depth: usize,
    pub attention_heads: usize,
    pub time_embed_dim: usize,
    /// Whether the clean (context) branch reuses the noisy-branch encoder weights.
    pub share_context_encoder: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 5,
            base_width: 32,
            depth: 3,
            attention_heads: 4,
            time_embed_dim: 128,
            share_context_encoder: true,
        }
    }
}

impl UNetConfig {
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << s
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_width(self.depth.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels > 0, "in_channels must be positive");
        ensure!(self.base_width > 0, "base_width must be positive");
        ensure!(self.depth > 0, "depth must be at least 1");
        ensure!(self.attention_heads > 0, "attention_heads must be positive");
        ensure!(
            self.bottleneck_channels() % self.attention_heads == 0,
            "bottleneck width {} not divisible by {} heads",
            self.bottleneck_channels(),
            self.attention_heads
        );
        ensure!(self.time_embed_dim >= 2, "time_embed_dim must be at least 2");
        Ok(())
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        ensure!(
            h % f == 0 && w % f == 0 && h >= f && w >= f,
            "input {h}x{w} not divisible by 2^{} = {f}",
            self.depth
        );
        Ok(())
    }

    pub fn bottleneck_dims(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (self.bottleneck_channels(), h >> self.depth, w >> self.depth)
    }
}

/// Sinusoidal embedding of a time step; `t = 0` is the clean image.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub t: usize,
    pub vector: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(t: usize, dim: usize) -> Self {
        let half = dim / 2;
        let mut vector = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            vector[i] = arg.sin();
            vector[half + i] = arg.cos();
        }
        TimeEmbedding { t, vector }
    }
}

/// Bottleneck feature map of the clean branch, `[n, C_b, h/2^depth, w/2^depth]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector<T> {
    pub data: Tensor<T>,
}

/// Encoder output: bottleneck features, skips for the decoder (fine to coarse)
/// and the activated time embedding the decoder reuses.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    pub bottleneck: Tensor<T>,
    pub skips: Vec<Tensor<T>>,
    pub time: Tensor<T>,
}

pub(crate) struct EncodedVars {
    pub bottleneck: Var,
    pub skips: Vec<Var>,
    pub time: Var,
}

fn init_encoder<T: Real, R: Rng + ?Sized>(init: &mut Init<'_, T, R>, prefix: &str, cfg: &UNetConfig) {
    let td = Some(cfg.time_embed_dim);
    init.conv(&format!("{prefix}.conv_in"), cfg.in_channels, cfg.base_width, 3);
    let mut prev = cfg.base_width;
    for s in 0..cfg.depth {
        let w = cfg.stage_width(s);
        init.res_block(&format!("{prefix}.down{s}"), prev, w, td);
        prev = w;
    }
    init.res_block(&format!("{prefix}.mid"), prev, prev, td);
}

pub fn init_unet<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &UNetConfig, rng: &mut R) {
    let mut init = Init { store, rng };
    let td = cfg.time_embed_dim;
    init.linear(&format!("{TIME}.lin1"), td, td);
    init.linear(&format!("{TIME}.lin2"), td, td);
    init_encoder(&mut init, ENCODER, cfg);
    if !cfg.share_context_encoder {
        init_encoder(&mut init, CONTEXT_ENCODER, cfg);
    }
    let cb = cfg.bottleneck_channels();
    init.norm(&format!("{ATTENTION}.norm_q"), cb);
    init.norm(&format!("{ATTENTION}.norm_kv"), cb);
    for proj in ["q", "k", "v", "out"] {
        init.linear(&format!("{ATTENTION}.{proj}"), cb, cb);
    }
    init.res_block(&format!("{DECODER}.mid"), cb, cb, Some(td));
    let mut prev = cb;
    for s in (0..cfg.depth).rev() {
        let w = cfg.stage_width(s);
        init.res_block(&format!("{DECODER}.up{s}"), prev + w, w, Some(td));
        prev = w;
    }
    init.norm(&format!("{DECODER}.norm_out"), cfg.base_width);
    init.conv(&format!("{DECODER}.conv_out"), cfg.base_width, 1, 3);
}

/// Activated time embedding `[n, time_embed_dim]` for per-sample steps.
pub(crate) fn time_graph<T: Real>(s: &mut Session<'_, T>, steps: &[usize], dim: usize) -> Var {
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        data.extend(TimeEmbedding::new(t, dim).vector.into_iter().map(T::of_f64));
    }
    let e = s.input(Tensor::new(vec![steps.len(), dim], data));
    let h = s.linear(&format!("{TIME}.lin1"), e);
    let h = s.g.silu(h);
    let h = s.linear(&format!("{TIME}.lin2"), h);
    s.g.silu(h)
}

pub(crate) fn encode_graph<T: Real>(
    s: &mut Session<'_, T>,
    prefix: &str,
    x: Var,
    steps: &[usize],
    dim: usize,
) -> EncodedVars {
    let time = time_graph(s, steps, dim);
    let mut h = s.conv(&format!("{prefix}.conv_in"), x);
    let mut skips = Vec::new();
    let mut stage = 0;
    while s.has(&format!("{prefix}.down{stage}.conv1.weight")) {
        h = s.res_block(&format!("{prefix}.down{stage}"), h, Some(time));
        skips.push(h);
        h = s.g.avg_pool2(h);
        stage += 1;
    }
    let bottleneck = s.res_block(&format!("{prefix}.mid"), h, Some(time));
    EncodedVars { bottleneck, skips, time }
}

/// `[n, c, h, w]` → `[n·h·w, c]` token rows.
fn tokens<T: Real>(s: &mut Session<'_, T>, x: Var) -> (Var, usize) {
    let sh = s.g.shape(x).to_vec();
    let (n, c, len) = (sh[0], sh[1], sh[2] * sh[3]);
    let r = s.g.reshape(x, vec![n, c, len]);
    let p = s.g.permute(r, &[0, 2, 1]);
    (s.g.reshape(p, vec![n * len, c]), len)
}

/// Multi-head attention with queries from `query` and keys/values from
/// `context`, plus a residual connection to `query`. Returns the output and
/// the attention weights `[n·heads, L_q, L_ctx]`.
pub(crate) fn attention_graph<T: Real>(
    s: &mut Session<'_, T>,
    query: Var,
    context: Var,
    heads: usize,
) -> (Var, Var) {
    let qs = s.g.shape(query).to_vec();
    let (n, c, h, w) = (qs[0], qs[1], qs[2], qs[3]);
    let qn = s.norm(&format!("{ATTENTION}.norm_q"), query);
    let kn = s.norm(&format!("{ATTENTION}.norm_kv"), context);
    let (q_tok, lq) = tokens(s, qn);
    let (kv_tok, lk) = tokens(s, kn);
    let q = s.linear(&format!("{ATTENTION}.q"), q_tok);
    let k = s.linear(&format!("{ATTENTION}.k"), kv_tok);
    let v = s.linear(&format!("{ATTENTION}.v"), kv_tok);
    let q = s.g.reshape(q, vec![n, lq, c]);
    let k = s.g.reshape(k, vec![n, lk, c]);
    let v = s.g.reshape(v, vec![n, lk, c]);
    let qh = to_heads_tokens(s, q, n, lq, heads);
    let kh = to_heads_tokens(s, k, n, lk, heads);
    let vh = to_heads_tokens(s, v, n, lk, heads);
    let scores = s.g.bmm(qh, kh, true);
    let scale = T::of_f64(1.0 / ((c / heads) as f64).sqrt());
    let scores = s.g.scale(scores, scale);
    let weights = s.g.softmax(scores);
    let o = s.g.bmm(weights, vh, false);
    let d = c / heads;
    let o = s.g.reshape(o, vec![n, heads, lq, d]);
    let o = s.g.permute(o, &[0, 2, 1, 3]);
    let o = s.g.reshape(o, vec![n * lq, c]);
    let o = s.linear(&format!("{ATTENTION}.out"), o);
    let o = s.g.reshape(o, vec![n, lq, c]);
    let o = s.g.permute(o, &[0, 2, 1]);
    let o = s.g.reshape(o, vec![n, c, h, w]);
    (s.g.add(query, o), weights)
}

/// `[n, len, c]` token tensor → `[n·heads, len, c/heads]`.
fn to_heads_tokens<T: Real>(s: &mut Session<'_, T>, x: Var, n: usize, len: usize, heads: usize) -> Var {
    let c = s.g.shape(x)[2];
    let x4 = s.g.reshape(x, vec![n, len, heads, c / heads]);
    let p = s.g.permute(x4, &[0, 2, 1, 3]);
    s.g.reshape(p, vec![n * heads, len, c / heads])
}

pub(crate) fn decode_graph<T: Real>(s: &mut Session<'_, T>, attended: Var, skips: &[Var], time: Var) -> Var {
    let mut h = s.res_block(&format!("{DECODER}.mid"), attended, Some(time));
    for (stage, &skip) in skips.iter().enumerate().rev() {
        h = s.g.upsample2(h);
        h = s.g.concat(h, skip);
        h = s.res_block(&format!("{DECODER}.up{stage}"), h, Some(time));
    }
    let h = s.norm_act(&format!("{DECODER}.norm_out"), h);
    s.conv(&format!("{DECODER}.conv_out"), h)
}
