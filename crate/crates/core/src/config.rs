//! Flat `key = value` run configuration.
//!
//! Unknown keys are rejected. `#` starts a comment. [`RunConfig::to_text`]
//! writes every key, so a saved snapshot reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bridge::BridgeConfig;
use crate::diffusion::PatchSampler;
use crate::error::{ensure, invalid, Error, Result};
use crate::inference::InferenceConfig;
use crate::model::{Ablation, ModelConfig};
use crate::postprocess::PostprocessConfig;
use crate::training::{PNorm, TrainConfig};
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub repeats: usize,
    pub independent_bridge_noise: bool,
    pub infer_batch: usize,
    pub post: PostprocessConfig,
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            repeats: 1,
            independent_bridge_noise: false,
            infer_batch: 8,
            post: PostprocessConfig::default(),
            manifest: None,
            output: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid!("cannot parse {key} = {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid!("{key} expects true or false, got {value:?}")),
    }
}

/// `48x48,32x32` → `[(48, 48), (32, 32)]`.
pub fn parse_patch_sizes(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|p| {
            let (h, w) = p.trim().split_once('x').ok_or_else(|| invalid!("patch size {p:?} is not HxW"))?;
            Ok((parse("patch", h)?, parse("patch", w)?))
        })
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key.trim() {
            "seed" => t.seed = parse(key, v)?,
            "ablation" => m.ablation = v.parse()?,
            "latent_channels" => m.bridge.latent_channels = parse(key, v)?,
            "bridge_hidden" => m.bridge.hidden = parse(key, v)?,
            "bridge_blocks" => m.bridge.blocks = parse(key, v)?,
            "base_width" => m.unet.base_width = parse(key, v)?,
            "depth" => m.unet.depth = parse(key, v)?,
            "attention_heads" => m.unet.attention_heads = parse(key, v)?,
            "time_embed_dim" => m.unet.time_embed_dim = parse(key, v)?,
            "share_context_encoder" => m.unet.share_context_encoder = parse_bool(key, v)?,
            "diffusion_steps" => t.diffusion_steps = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "p" => t.p_norm = PNorm::from_int(parse(key, v)?)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "patch_sizes" => t.patches = PatchSampler { sizes: parse_patch_sizes(v)? },
            "xz_at_final_step" => t.xz_at_final_step = parse_bool(key, v)?,
            "detach_context" => t.detach_context = parse_bool(key, v)?,
            "t_test" => t.t_test = parse(key, v)?,
            "val_every" => t.val_every = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "independent_bridge_noise" => self.independent_bridge_noise = parse_bool(key, v)?,
            "infer_batch" => self.infer_batch = parse(key, v)?,
            "median_kernel" => self.post.median_kernel = parse(key, v)?,
            "erosion_iterations" => self.post.erosion_iterations = parse(key, v)?,
            "theta" => self.post.theta = parse(key, v)?,
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output" => self.output = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(invalid!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| invalid!("line {}: expected key = value, got {raw:?}", n + 1))?;
            cfg.set(k, v).map_err(|e| invalid!("line {}: {e}", n + 1))?;
        }
        cfg.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    /// Re-derives dependent fields and validates.
    pub fn finish(mut self) -> Result<RunConfig> {
        self.model = ModelConfig::new(self.model.bridge.clone(), self.model.unet.clone(), self.model.ablation);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        ensure!(self.repeats >= 1, "repeats must be at least 1");
        ensure!(self.infer_batch >= 1, "infer_batch must be at least 1");
        ensure!(self.post.median_kernel % 2 == 1, "median_kernel must be odd");
        ensure!(self.post.theta > 0.0, "theta must be positive");
        Ok(())
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            t_test: self.train.t_test,
            seed: self.train.seed,
            repeats: self.repeats,
            independent_bridge_noise: self.independent_bridge_noise,
            batch_size: self.infer_batch,
        }
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let patches: Vec<String> = t.patches.sizes.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv("ablation", m.ablation.to_string());
        kv("latent_channels", m.bridge.latent_channels.to_string());
        kv("bridge_hidden", m.bridge.hidden.to_string());
        kv("bridge_blocks", m.bridge.blocks.to_string());
        kv("base_width", m.unet.base_width.to_string());
        kv("depth", m.unet.depth.to_string());
        kv("attention_heads", m.unet.attention_heads.to_string());
        kv("time_embed_dim", m.unet.time_embed_dim.to_string());
        kv("share_context_encoder", m.unet.share_context_encoder.to_string());
        kv("diffusion_steps", t.diffusion_steps.to_string());
        kv("lr", format!("{:e}", t.lr));
        kv("batch_size", t.batch_size.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("lambda", t.lambda.to_string());
        kv("p", t.p_norm.as_int().to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("patch_sizes", patches.join(","));
        kv("xz_at_final_step", t.xz_at_final_step.to_string());
        kv("detach_context", t.detach_context.to_string());
        kv("t_test", t.t_test.to_string());
        kv("val_every", t.val_every.to_string());
        kv("repeats", self.repeats.to_string());
        kv("independent_bridge_noise", self.independent_bridge_noise.to_string());
        kv("infer_batch", self.infer_batch.to_string());
        kv("median_kernel", self.post.median_kernel.to_string());
        kv("erosion_iterations", self.post.erosion_iterations.to_string());
        kv("theta", self.post.theta.to_string());
        kv("manifest", path(&self.manifest));
        kv("output", path(&self.output));
        s
    }
}

/// Small model used for desk-scale phantom runs.
pub fn desk_model(ablation: Ablation) -> ModelConfig {
    ModelConfig::new(
        BridgeConfig { latent_channels: 4, hidden: 8, blocks: 2 },
        UNetConfig { base_width: 8, time_embed_dim: 32, ..UNetConfig::default() },
        ablation,
    )
}
