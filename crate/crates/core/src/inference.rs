//! Single-pass healthy reconstruction and residual anomaly maps.
//!
//! A test slice is noised to `t_test`, its latent is taken from the same
//! noised image, the context from the raw test slice, and `x̂₀` comes out of
//! one network evaluation. Volumes are processed slice by slice with a noise
//! stream keyed on the slice index.

use rand::Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::model::{ForwardInputs, Mcddpm};
use crate::nn::Session;
use crate::rng::{gaussian_vec, stream, SeededRng};
use crate::tensor::{Real, Tensor};
use crate::training::PNorm;
use crate::volume::{Slice2D, Volume3D};

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub t_test: usize,
    pub seed: u64,
    /// Noise draws averaged per slice.
    pub repeats: usize,
    /// Feed the bridge its own noising draw instead of the denoiser's input.
    pub independent_bridge_noise: bool,
    /// Slices evaluated per network call.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { t_test: 500, seed: 0, repeats: 1, independent_bridge_noise: false, batch_size: 8 }
    }
}

fn check_model<T: Real>(model: &Mcddpm<T>) -> Result<()> {
    for (name, t) in model.params().iter() {
        if !t.all_finite() {
            return Err(Error::InvalidCheckpoint(format!("parameter {name} contains non-finite values")));
        }
    }
    Ok(())
}

fn noised<R: Rng + ?Sized>(x: &Slice2D, ab: f64, rng: &mut R) -> Vec<f32> {
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = gaussian_vec(x.data().len(), rng);
    x.data().iter().zip(&eps).map(|(&v, &e)| (sa * v as f64 + sb * e as f64) as f32).collect()
}

/// Reconstructs a batch; `rngs[i]` supplies every draw for `slices[i]`.
fn reconstruct_batch<T: Real>(
    model: &Mcddpm<T>,
    slices: &[&Slice2D],
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
    rngs: &mut [SeededRng],
) -> Result<Vec<Slice2D>> {
    let (h, w) = slices[0].dims();
    model.config().unet.check_spatial(h, w)?;
    let n = slices.len();
    let ab = schedule.alpha_bar(cfg.t_test);
    let shape = vec![n, 1, h, w];
    let mut clean = Vec::with_capacity(n * h * w);
    for s in slices {
        ensure!(s.dims() == (h, w), "slices in a batch must share dimensions");
        ensure!(s.is_finite(), "input slice contains non-finite values");
        clean.extend_from_slice(s.data());
    }
    let clean = Tensor::<T>::from_f32(shape.clone(), &clean);
    let steps = vec![cfg.t_test; n];
    let mut acc = vec![0f64; n * h * w];
    for _ in 0..cfg.repeats {
        let mut x_in = Vec::with_capacity(n * h * w);
        let mut x_br = Vec::with_capacity(n * h * w);
        for (s, rng) in slices.iter().zip(rngs.iter_mut()) {
            let xt = noised(s, ab, rng);
            if cfg.independent_bridge_noise {
                x_br.extend(noised(s, ab, rng));
            } else {
                x_br.extend_from_slice(&xt);
            }
            x_in.extend(xt);
        }
        let x_in = Tensor::<T>::from_f32(shape.clone(), &x_in);
        let x_br = Tensor::<T>::from_f32(shape.clone(), &x_br);
        let mut sess = Session::new(model.params(), false);
        let out = model.forward_graph(
            &mut sess,
            ForwardInputs {
                x_in: &x_in,
                x_bridge: &x_br,
                x_clean: &clean,
                steps: &steps,
                reconstruct_bridge: false,
                detach_context: false,
            },
        );
        for (a, v) in acc.iter_mut().zip(sess.g.value(out.x0_hat).data()) {
            *a += v.as_f64();
        }
    }
    let inv = 1.0 / cfg.repeats as f64;
    Ok(acc
        .chunks_exact(h * w)
        .map(|c| Slice2D::new(h, w, c.iter().map(|&v| (v * inv) as f32).collect()).expect("sized chunk"))
        .collect())
}

fn check_config(schedule: &NoiseSchedule, cfg: &InferenceConfig) -> Result<()> {
    schedule.check_step(cfg.t_test)?;
    ensure!(cfg.repeats >= 1, "repeats must be at least 1");
    ensure!(cfg.batch_size >= 1, "batch size must be at least 1");
    Ok(())
}

/// `x̂₀` for one slice with all draws from `rng`.
pub fn reconstruct_slice<T: Real, R: Rng + ?Sized>(
    model: &Mcddpm<T>,
    x: &Slice2D,
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Slice2D> {
    check_config(schedule, cfg)?;
    check_model(model)?;
    let mut own = crate::rng::seeded(rng.random());
    Ok(reconstruct_batch(model, &[x], schedule, cfg, std::slice::from_mut(&mut own))?.remove(0))
}

/// Seed stream for slice `k` of a volume.
pub fn slice_stream(seed: u64, k: usize) -> SeededRng {
    stream(seed, &[0x736c_6963, k as u64])
}

/// Reconstructions of the listed slices, each using the stream of its index.
pub fn reconstruct_slices<T: Real>(
    model: &Mcddpm<T>,
    v: &Volume3D,
    indices: &[usize],
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
) -> Result<Vec<Slice2D>> {
    check_config(schedule, cfg)?;
    check_model(model)?;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(cfg.batch_size) {
        let slices: Vec<Slice2D> = chunk
            .iter()
            .map(|&k| {
                ensure!(k < v.depth(), "slice {k} outside volume of depth {}", v.depth());
                Ok(v.slice(k))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Slice2D> = slices.iter().collect();
        let mut rngs: Vec<SeededRng> = chunk.iter().map(|&k| slice_stream(cfg.seed, k)).collect();
        out.extend(reconstruct_batch(model, &refs, schedule, cfg, &mut rngs)?);
    }
    Ok(out)
}

pub fn reconstruct_volume<T: Real>(
    model: &Mcddpm<T>,
    v: &Volume3D,
    schedule: &NoiseSchedule,
    cfg: &InferenceConfig,
) -> Result<Volume3D> {
    let indices: Vec<usize> = (0..v.depth()).collect();
    let slices = reconstruct_slices(model, v, &indices, schedule, cfg)?;
    Ok(Volume3D::from_slices(&slices)?.with_spacing(v.spacing()))
}

/// Per-voxel residual magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub data: Volume3D,
    pub p_norm: PNorm,
}

impl AnomalyMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dims()
    }

    pub fn max(&self) -> f32 {
        self.data.data().iter().copied().fold(0.0, f32::max)
    }
}

/// `|v − v̂|` for p = 1, `(v − v̂)²` for p = 2.
pub fn residual_map(v: &Volume3D, v_hat: &Volume3D, p: PNorm) -> Result<AnomalyMap> {
    ensure!(v.dims() == v_hat.dims(), "volume {:?} and reconstruction {:?} differ in shape", v.dims(), v_hat.dims());
    let data: Vec<f32> = v
        .data()
        .iter()
        .zip(v_hat.data())
        .map(|(&a, &b)| {
            let d = a - b;
            match p {
                PNorm::L1 => d.abs(),
                PNorm::L2 => d * d,
            }
        })
        .collect();
    let (h, w, d) = v.dims();
    Ok(AnomalyMap { data: Volume3D::new(h, w, d, data)?.with_spacing(v.spacing()), p_norm: p })
}
