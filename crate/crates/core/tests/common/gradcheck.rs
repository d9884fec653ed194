//! Central finite differences against analytic gradients in f64.

use super::{random_slice, tiny_config};
use mcddpm::diffusion::{make_linear_schedule, PatchSampler};
use mcddpm::rng::stream;
use mcddpm::training::{build_batch, loss_and_grads, loss_value, LossSettings, TrainingBatch};
use mcddpm::{Ablation, Mcddpm, PNorm, TrainConfig};
use rand::Rng;

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

/// Relative error with a floor so that near-zero gradients compare absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Random ~1% of all scalar parameters.
pub fn sample_coords(model: &Mcddpm<f64>, seed: u64) -> Vec<(String, usize)> {
    let mut rng = stream(seed, &[9]);
    let mut out = Vec::new();
    for (name, t) in model.params().iter() {
        for i in 0..t.len() {
            if rng.random::<f64>() < 0.01 {
                out.push((name.clone(), i));
            }
        }
    }
    out
}

pub fn batch() -> TrainingBatch<f64> {
    let schedule = make_linear_schedule(1000).unwrap();
    let cfg = TrainConfig { patches: PatchSampler { sizes: vec![(4, 4)] }, ..TrainConfig::default() };
    let slices = [random_slice(8, 8, 1), random_slice(8, 8, 2)];
    build_batch(&slices, &schedule, &cfg, &mut stream(4, &[0])).unwrap().cast()
}

/// Number of sampled coordinates and the worst relative error over them.
pub fn check_full_loss(ablation: Ablation) -> (usize, f64) {
    let mut model: Mcddpm<f64> = Mcddpm::new(tiny_config(ablation), 21).unwrap();
    let b = batch();
    let settings = LossSettings { lambda: 0.5, p_norm: PNorm::L2, detach_context: false };
    let analytic = loss_and_grads(&model, &b, settings).grads;
    let coords = sample_coords(&model, 5);
    assert!(coords.len() > 50, "only {} coordinates sampled", coords.len());
    let mut worst = 0.0f64;
    for (name, i) in &coords {
        let orig = model.params().get(name).unwrap().data()[*i];
        model.params_mut().get_mut(name).unwrap().data_mut()[*i] = orig + STEP;
        let up = loss_value(&model, &b, settings);
        model.params_mut().get_mut(name).unwrap().data_mut()[*i] = orig - STEP;
        let down = loss_value(&model, &b, settings);
        model.params_mut().get_mut(name).unwrap().data_mut()[*i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.get(name).map(|g| g.data()[*i]).unwrap_or(0.0);
        let e = rel_err(a, numeric);
        if e > worst {
            log::debug!("{name}[{i}]: analytic {a:e} numeric {numeric:e} rel {e:e}");
            worst = e;
        }
    }
    (coords.len(), worst)
}
