//! Variance schedule and the closed-form forward (noising) process.
//!
//! Time steps are 1-based: `t ∈ [1, T]`, with the virtual step `t = 0`
//! denoting the clean image (`ᾱ₀ = 1`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::gaussian_vec;
use crate::volume::Slice2D;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule hitting both endpoints exactly:
/// `β_t = β_start + (t − 1)/(T − 1) · (β_end − β_start)`.
pub fn make_linear_schedule(steps: usize) -> Result<NoiseSchedule> {
    ensure!(steps >= 2, "schedule needs at least 2 steps, got {steps}");
    let span = BETA_END - BETA_START;
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if i + 1 == steps {
                BETA_END
            } else {
                BETA_START + (i as f64) / ((steps - 1) as f64) * span
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        ensure!(t >= 1 && t <= self.steps(), "time step {t} outside [1, {}]", self.steps());
        Ok(())
    }
}

/// Axis-aligned rectangular region of a slice that receives noise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    h: usize,
    w: usize,
    patch_h: usize,
    patch_w: usize,
    origin: (usize, usize),
    mask: Vec<u8>,
}

impl PatchMask {
    pub fn new(h: usize, w: usize, patch_h: usize, patch_w: usize, origin: (usize, usize)) -> Result<Self> {
        ensure!(patch_h > 0 && patch_w > 0, "patch dimensions must be positive");
        ensure!(
            origin.0 + patch_h <= h && origin.1 + patch_w <= w,
            "patch {patch_h}x{patch_w} at {origin:?} does not fit in {h}x{w}"
        );
        let mut mask = vec![0u8; h * w];
        for r in origin.0..origin.0 + patch_h {
            mask[r * w + origin.1..r * w + origin.1 + patch_w].fill(1);
        }
        Ok(PatchMask { h, w, patch_h, patch_w, origin, mask })
    }

    /// Mask with no noised pixels.
    pub fn empty(h: usize, w: usize) -> Self {
        PatchMask { h, w, patch_h: 0, patch_w: 0, origin: (0, 0), mask: vec![0; h * w] }
    }

    pub fn full(h: usize, w: usize) -> Self {
        PatchMask::new(h, w, h, w, (0, 0)).expect("full patch always fits")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn patch_dims(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

/// Draws a patch of the given size at a uniformly random valid placement.
pub fn sample_patch_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    patch_h: usize,
    patch_w: usize,
    rng: &mut R,
) -> Result<PatchMask> {
    ensure!(patch_h > 0 && patch_w > 0, "patch dimensions must be positive");
    ensure!(patch_h <= h && patch_w <= w, "patch {patch_h}x{patch_w} larger than slice {h}x{w}");
    let row = rng.random_range(0..=h - patch_h);
    let col = rng.random_range(0..=w - patch_w);
    PatchMask::new(h, w, patch_h, patch_w, (row, col))
}

/// Patch sampler over a set of candidate sizes, one chosen uniformly per draw.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSampler {
    pub sizes: Vec<(usize, usize)>,
}

impl Default for PatchSampler {
    fn default() -> Self {
        PatchSampler { sizes: vec![(48, 48)] }
    }
}

impl PatchSampler {
    pub fn sample<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Result<PatchMask> {
        ensure!(!self.sizes.is_empty(), "patch sampler has no sizes");
        let (ph, pw) = self.sizes[rng.random_range(0..self.sizes.len())];
        sample_patch_mask(h, w, ph, pw, rng)
    }
}

/// The two corrupted views of a clean slice used during training.
#[derive(Clone, Debug)]
pub struct CorruptedPair {
    pub x_full: Slice2D,
    pub x_patched: Slice2D,
    pub t: usize,
    pub noise: Slice2D,
    pub mask: PatchMask,
}

fn check_same(x0: &Slice2D, other: (usize, usize), what: &str) -> Result<()> {
    ensure!(x0.dims() == other, "{what} shape {:?} does not match image {:?}", other, x0.dims());
    Ok(())
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · noise`.
pub fn q_sample_full(x0: &Slice2D, t: usize, schedule: &NoiseSchedule, noise: &Slice2D) -> Result<Slice2D> {
    schedule.check_step(t)?;
    check_same(x0, noise.dims(), "noise")?;
    let ab = schedule.alpha_bar(t);
    let (signal, sigma) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| (signal * x as f64 + sigma * e as f64) as f32)
        .collect();
    Slice2D::new(x0.height(), x0.width(), data)
}

/// Forward process restricted to the patch; pixels outside it are the clean input.
pub fn q_sample_patched(
    x0: &Slice2D,
    t: usize,
    schedule: &NoiseSchedule,
    mask: &PatchMask,
    noise: &Slice2D,
) -> Result<Slice2D> {
    check_same(x0, mask.dims(), "mask")?;
    let full = q_sample_full(x0, t, schedule, noise)?;
    let data = full
        .data()
        .iter()
        .zip(x0.data())
        .zip(mask.mask())
        .map(|((&n, &c), &m)| if m == 1 { n } else { c })
        .collect();
    Slice2D::new(x0.height(), x0.width(), data)
}

pub fn gaussian_slice<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Slice2D {
    Slice2D::new(h, w, gaussian_vec(h * w, rng)).expect("dims match")
}

/// Draws noise and a patch from `rng` and builds both corrupted views at step `t`.
///
/// Both views share the same Gaussian draw, so the patch region of `x_patched`
/// coincides with `x_full`.
pub fn corrupt<R: Rng + ?Sized>(
    x0: &Slice2D,
    t: usize,
    schedule: &NoiseSchedule,
    patches: &PatchSampler,
    rng: &mut R,
) -> Result<CorruptedPair> {
    let (h, w) = x0.dims();
    let noise = gaussian_slice(h, w, rng);
    let mask = patches.sample(h, w, rng)?;
    let x_full = q_sample_full(x0, t, schedule, &noise)?;
    let x_patched = q_sample_patched(x0, t, schedule, &mask, &noise)?;
    Ok(CorruptedPair { x_full, x_patched, t, noise, mask })
}
