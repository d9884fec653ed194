//! The assembled model: bridge networks plus the conditioned U-Net, and the
//! typed per-stage API over them.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::bridge::{self, BridgeConfig, LatentStack};
use crate::error::{ensure, invalid, Error, Result};
use crate::nn::{ParamStore, Session};
use crate::rng::seeded;
use crate::tensor::{Real, Tensor};
use crate::unet::{self, ContextVector, Encoded, UNetConfig};
use crate::volume::Slice2D;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// No bridge networks: the U-Net sees the image alone and the loss has one term.
    NoBridge,
    /// Self-attention at the bottleneck; the clean image is never encoded.
    NoConditioning,
}

impl Ablation {
    pub fn uses_bridge(self) -> bool {
        self != Ablation::NoBridge
    }

    pub fn uses_context(self) -> bool {
        self != Ablation::NoConditioning
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoBridge => "no_bridge",
            Ablation::NoConditioning => "no_conditioning",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_bridge" => Ok(Ablation::NoBridge),
            "no_conditioning" => Ok(Ablation::NoConditioning),
            other => Err(invalid!("unknown ablation {other:?} (full|no_bridge|no_conditioning)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub bridge: BridgeConfig,
    pub unet: UNetConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(BridgeConfig::default(), UNetConfig::default(), Ablation::Full)
    }
}

impl ModelConfig {
    /// Builds a config with `unet.in_channels` derived from the bridge and ablation.
    pub fn new(bridge: BridgeConfig, mut unet: UNetConfig, ablation: Ablation) -> Self {
        unet.in_channels = if ablation.uses_bridge() { 1 + bridge.latent_channels } else { 1 };
        ModelConfig { bridge, unet, ablation }
    }

    pub fn validate(&self) -> Result<()> {
        self.bridge.validate()?;
        self.unet.validate()?;
        let want = if self.ablation.uses_bridge() { 1 + self.bridge.latent_channels } else { 1 };
        ensure!(
            self.unet.in_channels == want,
            "unet in_channels {} inconsistent with {} (expected {want})",
            self.unet.in_channels,
            self.ablation
        );
        Ok(())
    }
}

/// Graph outputs of one full forward pass.
pub(crate) struct ForwardVars {
    pub x0_hat: Var,
    pub xz_hat: Option<Var>,
}

/// Batched inputs of one forward pass, each `[n, 1, h, w]`.
pub(crate) struct ForwardInputs<'a, T> {
    /// Image fed to the denoiser (patch-noised in training, fully noised at inference).
    pub x_in: &'a Tensor<T>,
    /// Fully-noised image fed to the bridge extractor.
    pub x_bridge: &'a Tensor<T>,
    /// Clean (or test) image used for the context.
    pub x_clean: &'a Tensor<T>,
    pub steps: &'a [usize],
    pub reconstruct_bridge: bool,
    pub detach_context: bool,
}

pub struct Mcddpm<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    unet_evals: AtomicUsize,
}

impl<T: Real> Clone for Mcddpm<T> {
    fn clone(&self) -> Self {
        Mcddpm {
            config: self.config.clone(),
            params: self.params.clone(),
            unet_evals: AtomicUsize::new(self.unet_evals()),
        }
    }
}

impl<T: Real> fmt::Debug for Mcddpm<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mcddpm")
            .field("config", &self.config)
            .field("parameters", &self.params.count())
            .finish()
    }
}

fn slice_tensor<T: Real>(x: &Slice2D) -> Tensor<T> {
    Tensor::from_f32(vec![1, 1, x.height(), x.width()], x.data())
}

fn tensor_slice<T: Real>(t: &Tensor<T>) -> Slice2D {
    let s = t.shape();
    Slice2D::new(s[2], s[3], t.to_f32()).expect("single-channel tensor")
}

impl<T: Real> Mcddpm<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        if config.ablation.uses_bridge() {
            bridge::init_bridge(&mut params, &config.bridge, &mut rng);
        }
        unet::init_unet(&mut params, &config.unet, &mut rng);
        Ok(Mcddpm { config, params, unet_evals: AtomicUsize::new(0) })
    }

    /// Wraps existing parameters, checking that every expected name and shape is present.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Mcddpm::<T>::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::InvalidCheckpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::InvalidCheckpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "checkpoint has {} parameter arrays, config expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Mcddpm { config, params, unet_evals: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Mcddpm<U> {
        Mcddpm { config: self.config.clone(), params: self.params.cast(), unet_evals: AtomicUsize::new(0) }
    }

    /// Number of U-Net decoder evaluations (one per sample) since construction.
    pub fn unet_evals(&self) -> usize {
        self.unet_evals.load(Ordering::Relaxed)
    }

    fn context_prefix(&self) -> &'static str {
        if self.config.unet.share_context_encoder {
            unet::ENCODER
        } else {
            unet::CONTEXT_ENCODER
        }
    }

    fn heads(&self) -> usize {
        self.config.unet.attention_heads
    }

    fn time_dim(&self) -> usize {
        self.config.unet.time_embed_dim
    }

    fn check_image(&self, x: &Slice2D) -> Result<()> {
        ensure!(x.is_finite(), "input image contains non-finite values");
        self.config.unet.check_spatial(x.height(), x.width())
    }

    fn require_bridge(&self) -> Result<()> {
        ensure!(self.config.ablation.uses_bridge(), "model was built without bridge networks");
        Ok(())
    }

    /// The full forward pass on a session. Shared by training and inference.
    pub(crate) fn forward_graph(&self, s: &mut Session<'_, T>, inputs: ForwardInputs<'_, T>) -> ForwardVars {
        let n = inputs.x_in.dim(0);
        let x_in = s.input(inputs.x_in.clone());
        let (z, xz_hat) = if self.config.ablation.uses_bridge() {
            let xb = s.input(inputs.x_bridge.clone());
            let z = bridge::encode_graph(s, xb);
            let xz_hat = inputs.reconstruct_bridge.then(|| bridge::reconstruct_graph(s, z));
            (Some(z), xz_hat)
        } else {
            (None, None)
        };
        let noisy_in = match z {
            Some(z) => s.g.concat(x_in, z),
            None => x_in,
        };
        let enc = unet::encode_graph(s, unet::ENCODER, noisy_in, inputs.steps, self.time_dim());
        let context = if self.config.ablation.uses_context() {
            let xc = s.input(inputs.x_clean.clone());
            let clean_in = match z {
                Some(z) => s.g.concat(xc, z),
                None => xc,
            };
            let zeros = vec![0; n];
            let c = unet::encode_graph(s, self.context_prefix(), clean_in, &zeros, self.time_dim()).bottleneck;
            if inputs.detach_context {
                s.g.detach(c)
            } else {
                c
            }
        } else {
            enc.bottleneck
        };
        let (attended, _) = unet::attention_graph(s, enc.bottleneck, context, self.heads());
        let x0_hat = unet::decode_graph(s, attended, &enc.skips, enc.time);
        self.unet_evals.fetch_add(n, Ordering::Relaxed);
        ForwardVars { x0_hat, xz_hat }
    }

    /// Bridge extractor: fully-noised slice → latent `Z` (`C_z × h × w`).
    pub fn bridge_encode(&self, x_full: &Slice2D) -> Result<LatentStack> {
        self.require_bridge()?;
        ensure!(x_full.is_finite(), "bridge input contains non-finite values");
        let mut s = Session::new(&self.params, false);
        let x = s.input(slice_tensor(x_full));
        let z = bridge::encode_graph(&mut s, x);
        let (h, w) = x_full.dims();
        Ok(LatentStack { channels: self.config.bridge.latent_channels, h, w, data: s.g.value(z).to_f32() })
    }

    /// Bridge reconstructor: latent `Z` → single-channel estimate of the clean slice.
    pub fn bridge_reconstruct(&self, z: &LatentStack) -> Result<Slice2D> {
        self.require_bridge()?;
        ensure!(
            z.channels == self.config.bridge.latent_channels,
            "latent has {} channels, bridge expects {}",
            z.channels,
            self.config.bridge.latent_channels
        );
        ensure!(z.data.len() == z.channels * z.h * z.w, "latent data length mismatch");
        let mut s = Session::new(&self.params, false);
        let zv = s.input(Tensor::from_f32(vec![1, z.channels, z.h, z.w], &z.data));
        let out = bridge::reconstruct_graph(&mut s, zv);
        Ok(tensor_slice(s.g.value(out)))
    }

    /// Channel-concatenates an image with its latent (when the model has a bridge).
    pub fn concat_input(&self, x: &Slice2D, z: Option<&LatentStack>) -> Result<Tensor<T>> {
        let (h, w) = x.dims();
        let mut data: Vec<T> = x.data().iter().map(|&v| T::of_f64(v as f64)).collect();
        let mut channels = 1;
        match (self.config.ablation.uses_bridge(), z) {
            (true, Some(z)) => {
                ensure!((z.h, z.w) == (h, w), "latent {}x{} not aligned with image {h}x{w}", z.h, z.w);
                ensure!(z.channels == self.config.bridge.latent_channels, "latent channel mismatch");
                data.extend(z.data.iter().map(|&v| T::of_f64(v as f64)));
                channels += z.channels;
            }
            (true, None) => return Err(invalid!("model with bridge requires a latent")),
            (false, Some(_)) => return Err(invalid!("model without bridge does not take a latent")),
            (false, None) => {}
        }
        Ok(Tensor::new(vec![1, channels, h, w], data))
    }

    /// Encoder on a channel-concatenated input at step `t` (0 = clean).
    pub fn encode(&self, x_cat: &Tensor<T>, t: usize) -> Result<Encoded<T>> {
        self.encode_with(unet::ENCODER, x_cat, t)
    }

    fn encode_with(&self, prefix: &str, x_cat: &Tensor<T>, t: usize) -> Result<Encoded<T>> {
        let sh = x_cat.shape();
        ensure!(sh.len() == 4, "encoder input must be [n, c, h, w], got {sh:?}");
        ensure!(
            sh[1] == self.config.unet.in_channels,
            "encoder expects {} channels, got {}",
            self.config.unet.in_channels,
            sh[1]
        );
        self.config.unet.check_spatial(sh[2], sh[3])?;
        let mut s = Session::new(&self.params, false);
        let x = s.input(x_cat.clone());
        let steps = vec![t; sh[0]];
        let enc = unet::encode_graph(&mut s, prefix, x, &steps, self.time_dim());
        Ok(Encoded {
            bottleneck: s.g.value(enc.bottleneck).clone(),
            skips: enc.skips.iter().map(|&v| s.g.value(v).clone()).collect(),
            time: s.g.value(enc.time).clone(),
        })
    }

    /// Context from the clean image: encoder bottleneck at `t = 0`.
    pub fn make_context(&self, x0: &Slice2D, z: Option<&LatentStack>) -> Result<ContextVector<T>> {
        self.check_image(x0)?;
        let x_cat = self.concat_input(x0, z)?;
        let enc = self.encode_with(self.context_prefix(), &x_cat, 0)?;
        Ok(ContextVector { data: enc.bottleneck })
    }

    /// Bottleneck attention: queries from `query`, keys/values from `context`.
    pub fn cross_attention(&self, query: &Tensor<T>, context: &ContextVector<T>) -> Result<Tensor<T>> {
        Ok(self.cross_attention_with_weights(query, context)?.0)
    }

    /// Like [`Mcddpm::cross_attention`], also returning the weights `[n·heads, L_q, L_ctx]`.
    pub fn cross_attention_with_weights(
        &self,
        query: &Tensor<T>,
        context: &ContextVector<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let qs = query.shape();
        let cs = context.data.shape();
        let cb = self.config.unet.bottleneck_channels();
        ensure!(qs.len() == 4 && cs.len() == 4, "attention inputs must be [n, c, h, w]");
        ensure!(qs[1] == cb && cs[1] == cb, "attention expects {cb} channels, got {} and {}", qs[1], cs[1]);
        ensure!(qs[0] == cs[0], "query batch {} differs from context batch {}", qs[0], cs[0]);
        let mut s = Session::new(&self.params, false);
        let q = s.input(query.clone());
        let c = s.input(context.data.clone());
        let (out, w) = unet::attention_graph(&mut s, q, c, self.heads());
        Ok((s.g.value(out).clone(), s.g.value(w).clone()))
    }

    /// Decoder from attended bottleneck features and the matching encoder pass.
    pub fn decode(&self, attended: &Tensor<T>, encoded: &Encoded<T>) -> Result<Slice2D> {
        ensure!(
            attended.shape() == encoded.bottleneck.shape(),
            "attended features {:?} do not match bottleneck {:?}",
            attended.shape(),
            encoded.bottleneck.shape()
        );
        ensure!(encoded.skips.len() == self.config.unet.depth, "expected {} skips", self.config.unet.depth);
        let mut expect = (encoded.bottleneck.dim(2) << self.config.unet.depth, encoded.bottleneck.dim(3) << self.config.unet.depth);
        for (i, sk) in encoded.skips.iter().enumerate() {
            ensure!(
                sk.shape()[1] == self.config.unet.stage_width(i) && (sk.dim(2), sk.dim(3)) == expect,
                "skip {i} has shape {:?}",
                sk.shape()
            );
            expect = (expect.0 / 2, expect.1 / 2);
        }
        let mut s = Session::new(&self.params, false);
        let a = s.input(attended.clone());
        let skips: Vec<Var> = encoded.skips.iter().map(|t| s.input(t.clone())).collect();
        let time = s.input(encoded.time.clone());
        let out = unet::decode_graph(&mut s, a, &skips, time);
        self.unet_evals.fetch_add(attended.dim(0), Ordering::Relaxed);
        Ok(tensor_slice(s.g.value(out)))
    }

    /// `x̂₀ = decode(attend(encode(x_in ⊕ z, t), C))`.
    ///
    /// Without a context the bottleneck attends to itself (the no-conditioning path).
    pub fn predict_x0(
        &self,
        x_in: &Slice2D,
        z: Option<&LatentStack>,
        t: usize,
        context: Option<&ContextVector<T>>,
    ) -> Result<Slice2D> {
        self.check_image(x_in)?;
        let x_cat = self.concat_input(x_in, z)?;
        let enc = self.encode(&x_cat, t)?;
        let ctx = match context {
            Some(c) => c.clone(),
            None => ContextVector { data: enc.bottleneck.clone() },
        };
        let attended = self.cross_attention(&enc.bottleneck, &ctx)?;
        self.decode(&attended, &enc)
    }
}
