//! Joint optimization of the U-Net and both bridge networks on the
//! dual-term reconstruction loss.
//!
//! Per sample: draw `t ~ U[1, T]`, noise the clean slice fully (`X^z`) and
//! inside a random patch (`X^p_t`), compute `Z` from `X^z`, the context from
//! `x0 ⊕ Z`, and predict `x̂₀` from `X^p_t ⊕ Z`. The loss is
//! `‖x̂₀ − x0‖ + λ‖X̂^z − x0‖`, each norm reduced as a per-pixel mean
//! (absolute error for p = 1, squared error for p = 2).

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{sample_training_slices, VolumeRecord};
use crate::diffusion::{corrupt, make_linear_schedule, NoiseSchedule, PatchSampler};
use crate::error::{ensure, Error, Result};
use crate::inference::{reconstruct_volume, InferenceConfig};
use crate::evaluation::reconstruction_error;
use crate::model::{ForwardInputs, Mcddpm};
use crate::nn::{Adam, AdamConfig, ParamStore, Session};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Real, Tensor};
use crate::volume::Slice2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PNorm {
    L1,
    L2,
}

impl PNorm {
    pub fn from_int(p: u32) -> Result<Self> {
        match p {
            1 => Ok(PNorm::L1),
            2 => Ok(PNorm::L2),
            other => Err(crate::error::invalid!("p-norm must be 1 or 2, got {other}")),
        }
    }

    pub fn as_int(self) -> u32 {
        match self {
            PNorm::L1 => 1,
            PNorm::L2 => 2,
        }
    }

    /// Per-pixel penalty of a difference.
    pub fn apply(self, d: f64) -> f64 {
        match self {
            PNorm::L1 => d.abs(),
            PNorm::L2 => d * d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub diffusion_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lambda: f64,
    pub p_norm: PNorm,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub patches: PatchSampler,
    /// Noise `X^z` at `t = T` instead of the sampled step.
    pub xz_at_final_step: bool,
    /// Stop gradients from flowing through the context branch.
    pub detach_context: bool,
    /// Step used when measuring validation reconstruction error.
    pub t_test: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            diffusion_steps: 1000,
            lr: 1e-5,
            batch_size: 8,
            max_epochs: 1600,
            lambda: 0.5,
            p_norm: PNorm::L2,
            seed: 0,
            checkpoint_every: 100,
            patches: PatchSampler::default(),
            xz_at_final_step: false,
            detach_context: false,
            t_test: 500,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be >= 0, got {}", self.lambda);
        ensure!(self.lr > 0.0, "learning rate must be positive");
        ensure!(self.batch_size > 0, "batch size must be positive");
        ensure!(self.diffusion_steps >= 2, "need at least 2 diffusion steps");
        ensure!(
            self.t_test >= 1 && self.t_test <= self.diffusion_steps,
            "t_test {} outside [1, {}]",
            self.t_test,
            self.diffusion_steps
        );
        ensure!(self.val_every > 0, "val_every must be positive");
        ensure!(!self.patches.sizes.is_empty(), "at least one patch size required");
        Ok(())
    }
}

/// `‖x̂₀ − x0‖ + λ‖X̂^z − x0‖` with per-pixel mean reduction.
pub fn dual_loss(x0: &Slice2D, x0_hat: &Slice2D, xz_hat: Option<&Slice2D>, lambda: f64, p: PNorm) -> Result<f64> {
    let term = |a: &Slice2D| -> Result<f64> {
        ensure!(a.dims() == x0.dims(), "reconstruction {:?} does not match image {:?}", a.dims(), x0.dims());
        let s: f64 = a.data().iter().zip(x0.data()).map(|(&r, &c)| p.apply(r as f64 - c as f64)).sum();
        Ok(s / x0.data().len() as f64)
    };
    let mut loss = term(x0_hat)?;
    if let Some(xz) = xz_hat {
        loss += lambda * term(xz)?;
    }
    Ok(loss)
}

/// One prepared mini-batch: clean slices and both corrupted views, `[n, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch<T> {
    pub x0: Tensor<T>,
    pub x_full: Tensor<T>,
    pub x_patched: Tensor<T>,
    pub steps: Vec<usize>,
}

impl<T: Real> TrainingBatch<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn cast<U: Real>(&self) -> TrainingBatch<U> {
        TrainingBatch {
            x0: self.x0.cast(),
            x_full: self.x_full.cast(),
            x_patched: self.x_patched.cast(),
            steps: self.steps.clone(),
        }
    }
}

/// Draws `t`, noise and patch placement per slice from `rng`.
pub fn build_batch<R: Rng + ?Sized>(
    slices: &[Slice2D],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingBatch<f32>> {
    ensure!(!slices.is_empty(), "empty training batch");
    let (h, w) = slices[0].dims();
    let mut x0 = Vec::with_capacity(slices.len() * h * w);
    let mut xf = Vec::with_capacity(x0.capacity());
    let mut xp = Vec::with_capacity(x0.capacity());
    let mut steps = Vec::with_capacity(slices.len());
    for s in slices {
        ensure!(s.dims() == (h, w), "batch mixes slice sizes {:?} and {:?}", s.dims(), (h, w));
        let t = rng.random_range(1..=schedule.steps());
        let pair = corrupt(s, t, schedule, &config.patches, rng)?;
        let full = if config.xz_at_final_step {
            crate::diffusion::q_sample_full(s, schedule.steps(), schedule, &pair.noise)?
        } else {
            pair.x_full
        };
        x0.extend_from_slice(s.data());
        xf.extend_from_slice(full.data());
        xp.extend_from_slice(pair.x_patched.data());
        steps.push(t);
    }
    let shape = vec![slices.len(), 1, h, w];
    Ok(TrainingBatch {
        x0: Tensor::from_f32(shape.clone(), &x0),
        x_full: Tensor::from_f32(shape.clone(), &xf),
        x_patched: Tensor::from_f32(shape, &xp),
        steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub p_norm: PNorm,
    pub detach_context: bool,
}

impl From<&TrainConfig> for LossSettings {
    fn from(c: &TrainConfig) -> Self {
        LossSettings { lambda: c.lambda, p_norm: c.p_norm, detach_context: c.detach_context }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub unet_term: f64,
    /// Absent without a bridge.
    pub bridge_term: Option<f64>,
    pub grads: BTreeMap<String, Tensor<T>>,
}

fn penalty<T: Real>(s: &mut Session<'_, T>, pred: Var, target: Var, p: PNorm) -> Var {
    let d = s.g.sub(pred, target);
    let e = match p {
        PNorm::L1 => s.g.abs(d),
        PNorm::L2 => s.g.square(d),
    };
    s.g.mean(e)
}

fn loss_graph<T: Real>(
    model: &Mcddpm<T>,
    s: &mut Session<'_, T>,
    batch: &TrainingBatch<T>,
    settings: LossSettings,
) -> (Var, Var, Option<Var>) {
    let fwd = model.forward_graph(
        s,
        ForwardInputs {
            x_in: &batch.x_patched,
            x_bridge: &batch.x_full,
            x_clean: &batch.x0,
            steps: &batch.steps,
            reconstruct_bridge: true,
            detach_context: settings.detach_context,
        },
    );
    let target = s.input(batch.x0.clone());
    let unet_term = penalty(s, fwd.x0_hat, target, settings.p_norm);
    match fwd.xz_hat {
        Some(xz) => {
            let bridge_term = penalty(s, xz, target, settings.p_norm);
            let weighted = s.g.scale(bridge_term, T::of_f64(settings.lambda));
            (s.g.add(unet_term, weighted), unet_term, Some(bridge_term))
        }
        None => (unet_term, unet_term, None),
    }
}

/// Batch loss and its gradient with respect to every parameter.
pub fn loss_and_grads<T: Real>(model: &Mcddpm<T>, batch: &TrainingBatch<T>, settings: LossSettings) -> LossOutput<T> {
    let mut s = Session::new(model.params(), true);
    let (total, unet_term, bridge_term) = loss_graph(model, &mut s, batch, settings);
    let mut grads = s.g.backward(total);
    LossOutput {
        loss: s.g.value(total).item().as_f64(),
        unet_term: s.g.value(unet_term).item().as_f64(),
        bridge_term: bridge_term.map(|b| s.g.value(b).item().as_f64()),
        grads: s.param_grads(&mut grads),
    }
}

/// Batch loss only (no tape gradients).
pub fn loss_value<T: Real>(model: &Mcddpm<T>, batch: &TrainingBatch<T>, settings: LossSettings) -> f64 {
    let mut s = Session::new(model.params(), false);
    let (total, _, _) = loss_graph(model, &mut s, batch, settings);
    s.g.value(total).item().as_f64()
}

/// Parameter group of a name: its first two dotted components.
pub fn param_group(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

pub fn group_grad_norms<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    for (name, g) in grads {
        *acc.entry(param_group(name).to_string()).or_default() += g.sum_sq();
    }
    acc.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// Context reported when a step yields a non-finite loss.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub steps: Vec<usize>,
    pub loss: f64,
    pub unet_term: f64,
    pub bridge_term: Option<f64>,
    pub grad_norms: BTreeMap<String, f64>,
}

impl fmt::Display for StepDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "loss={} unet_term={}", self.loss, self.unet_term)?;
        if let Some(b) = self.bridge_term {
            write!(f, " bridge_term={b}")?;
        }
        write!(f, " t={:?} grad_norms={{", self.steps)?;
        for (i, (k, v)) in self.grad_norms.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}: {v:.3e}")?;
        }
        f.write_str("}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub unet_term: f64,
    pub bridge_term: Option<f64>,
    pub grad_norms: BTreeMap<String, f64>,
}

/// Model, optimizer and schedule owned by one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Mcddpm<f32>,
    pub optimizer: Adam<f32>,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    /// Last completed epoch (0 before training).
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Mcddpm<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = make_linear_schedule(config.diffusion_steps)?;
        let optimizer = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        Ok(Trainer { model, optimizer, schedule, config, epoch: 0 })
    }

    /// Resumes from a checkpoint's parameters, optimizer state and epoch.
    pub fn resume(checkpoint: &crate::checkpoint::Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = checkpoint.model()?;
        let mut t = Trainer::new(model, config)?;
        t.optimizer = checkpoint.optimizer.clone();
        t.optimizer.config.lr = t.config.lr;
        t.epoch = checkpoint.epoch;
        Ok(t)
    }

    /// One Adam step on the batch-averaged dual loss.
    pub fn training_step<R: Rng + ?Sized>(&mut self, slices: &[Slice2D], rng: &mut R) -> Result<StepOutput> {
        let batch = build_batch(slices, &self.schedule, &self.config, rng)?;
        let out = loss_and_grads(&self.model, &batch, LossSettings::from(&self.config));
        let grad_norms = group_grad_norms(&out.grads);
        let grads_finite = grad_norms.values().all(|v| v.is_finite());
        if !out.loss.is_finite() || !grads_finite {
            return Err(Error::Numerical(Box::new(StepDiagnostics {
                steps: batch.steps,
                loss: out.loss,
                unet_term: out.unet_term,
                bridge_term: out.bridge_term,
                grad_norms,
            })));
        }
        self.optimizer.update(self.model.params_mut(), &out.grads);
        Ok(StepOutput { loss: out.loss, unet_term: out.unet_term, bridge_term: out.bridge_term, grad_norms })
    }

    /// Mean reconstruction error over healthy validation volumes.
    pub fn validation_error(&self, val: &[VolumeRecord]) -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        let cfg = InferenceConfig {
            t_test: self.config.t_test,
            seed: derive_seed(self.config.seed, &[0x7661_6c]),
            ..InferenceConfig::default()
        };
        let mut total = 0.0;
        for rec in val {
            let recon = reconstruct_volume(&self.model, &rec.volume, &self.schedule, &cfg)?;
            total += reconstruction_error(&rec.volume, &recon)?;
        }
        Ok(Some(total / val.len() as f64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: Option<f64>,
    pub slices: usize,
    pub steps: usize,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_recon_error";

    pub fn csv_row(&self) -> String {
        let val = self.val_error.map(|v| format!("{v:.8}")).unwrap_or_default();
        format!("{},{:.8},{}", self.epoch, self.train_loss, val)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters with the lowest validation error (final parameters without validation data).
    pub best: crate::checkpoint::Checkpoint,
    pub final_trainer: Trainer,
    pub history: Vec<EpochMetrics>,
}

/// Trains until `max_epochs`, returning the best checkpoint.
pub fn fit(trainer: Trainer, train: &[VolumeRecord], val: &[VolumeRecord]) -> Result<FitOutcome> {
    fit_with(trainer, train, val, |_, _| Ok(()))
}

/// [`fit`] with a per-epoch callback (logging, periodic checkpoints).
pub fn fit_with<F>(mut trainer: Trainer, train: &[VolumeRecord], val: &[VolumeRecord], mut on_epoch: F) -> Result<FitOutcome>
where
    F: FnMut(&EpochMetrics, &Trainer) -> Result<()>,
{
    ensure!(!train.is_empty(), "training set is empty");
    let mut best: Option<(f64, ParamStore<f32>, usize)> = None;
    let mut history = Vec::new();
    let first = trainer.epoch + 1;
    let last = trainer.config.max_epochs;
    for epoch in first..=last {
        let epoch_seed = derive_seed(trainer.config.seed, &[0x6570_6f63, epoch as u64]);
        let batches = sample_training_slices(train, trainer.config.batch_size, epoch_seed)?;
        let mut rng = stream(epoch_seed, &[0x7374_6570]);
        let mut loss_sum = 0.0;
        let mut slices = 0;
        let mut steps = 0;
        for batch in &batches {
            let out = trainer.training_step(&batch.slices, &mut rng)?;
            loss_sum += out.loss * batch.slices.len() as f64;
            slices += batch.slices.len();
            steps += 1;
        }
        trainer.epoch = epoch;
        let validate = (epoch - first + 1) % trainer.config.val_every == 0 || epoch == last;
        let val_error = if validate { trainer.validation_error(val)? } else { None };
        if let Some(v) = val_error {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, trainer.model.params().clone(), epoch));
            }
        }
        let metrics = EpochMetrics { epoch, train_loss: loss_sum / slices as f64, val_error, slices, steps };
        log::info!(
            "epoch {epoch}: loss {:.6} val {}",
            metrics.train_loss,
            val_error.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
        );
        on_epoch(&metrics, &trainer)?;
        history.push(metrics);
    }
    let best = match best {
        Some((v, params, epoch)) => {
            let model = Mcddpm::from_params(trainer.model.config().clone(), params)?;
            crate::checkpoint::Checkpoint::capture(&model, &trainer.optimizer, &trainer.config, epoch, Some(v))
        }
        None => crate::checkpoint::Checkpoint::capture(
            &trainer.model,
            &trainer.optimizer,
            &trainer.config,
            trainer.epoch,
            None,
        ),
    };
    Ok(FitOutcome { best, final_trainer: trainer, history })
}
