mod common;

use common::{max_abs_diff, random_slice, tiny_config};
use mcddpm::diffusion::make_linear_schedule;
use mcddpm::inference::{reconstruct_slice, reconstruct_slices, reconstruct_volume, residual_map, InferenceConfig};
use mcddpm::rng::stream;
use mcddpm::{Ablation, Error, Mcddpm, PNorm, Volume3D};
use proptest::prelude::*;

fn volume(depth: usize, seed: u64) -> Volume3D {
    let slices: Vec<_> = (0..depth).map(|k| random_slice(8, 8, seed * 100 + k as u64)).collect();
    Volume3D::from_slices(&slices).unwrap()
}

#[test]
fn one_network_evaluation_per_slice() {
    let schedule = make_linear_schedule(1000).unwrap();
    for ablation in [Ablation::Full, Ablation::NoBridge, Ablation::NoConditioning] {
        let model: Mcddpm<f32> = Mcddpm::new(tiny_config(ablation), 0).unwrap();
        let v = volume(5, 1);
        for batch_size in [1, 2, 8] {
            let before = model.unet_evals();
            reconstruct_volume(&model, &v, &schedule, &InferenceConfig { batch_size, ..Default::default() }).unwrap();
            assert_eq!(model.unet_evals() - before, 5, "{ablation} batch {batch_size}");
        }
        let before = model.unet_evals();
        reconstruct_slice(&model, &v.slice(0), &schedule, &InferenceConfig::default(), &mut stream(0, &[0])).unwrap();
        assert_eq!(model.unet_evals() - before, 1);
    }
}

#[test]
fn repeats_multiply_evaluations() {
    let schedule = make_linear_schedule(1000).unwrap();
    let model: Mcddpm<f32> = Mcddpm::new(tiny_config(Ablation::Full), 0).unwrap();
    let before = model.unet_evals();
    reconstruct_volume(&model, &volume(3, 2), &schedule, &InferenceConfig { repeats: 4, ..Default::default() }).unwrap();
    assert_eq!(model.unet_evals() - before, 12);
}

#[test]
fn sub_volume_matches_full_volume_slices() {
    let schedule = make_linear_schedule(1000).unwrap();
    let model: Mcddpm<f32> = Mcddpm::new(tiny_config(Ablation::Full), 3).unwrap();
    let v = volume(6, 3);
    let cfg = InferenceConfig { seed: 11, ..Default::default() };
    let full = reconstruct_volume(&model, &v, &schedule, &cfg).unwrap();
    let picked = [4, 1, 5];
    let sub = reconstruct_slices(&model, &v, &picked, &schedule, &cfg).unwrap();
    for (s, &k) in sub.iter().zip(&picked) {
        assert_eq!(s.data(), full.slice_data(k), "slice {k}");
    }
}

#[test]
fn batch_size_does_not_change_results() {
    let schedule = make_linear_schedule(1000).unwrap();
    let model: Mcddpm<f32> = Mcddpm::new(tiny_config(Ablation::Full), 4).unwrap();
    let v = volume(7, 4);
    let one = reconstruct_volume(&model, &v, &schedule, &InferenceConfig { batch_size: 1, ..Default::default() }).unwrap();
    for batch_size in [3, 8] {
        let other = reconstruct_volume(&model, &v, &schedule, &InferenceConfig { batch_size, ..Default::default() }).unwrap();
        assert!(max_abs_diff(one.data(), other.data()) <= 1e-6, "batch {batch_size}");
    }
}

#[test]
fn seeds_control_the_output() {
    let schedule = make_linear_schedule(1000).unwrap();
    let model: Mcddpm<f32> = Mcddpm::new(tiny_config(Ablation::Full), 5).unwrap();
    let v = volume(3, 5);
    let run = |seed| reconstruct_volume(&model, &v, &schedule, &InferenceConfig { seed, ..Default::default() }).unwrap();
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn non_finite_parameters_are_rejected() {
    let schedule = make_linear_schedule(1000).unwrap();
    let mut model: Mcddpm<f32> = Mcddpm::new(tiny_config(Ablation::Full), 0).unwrap();
    let name = model.params().iter().next().unwrap().0.clone();
    model.params_mut().get_mut(&name).unwrap().data_mut()[0] = f32::INFINITY;
    let err = reconstruct_volume(&model, &volume(2, 6), &schedule, &InferenceConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidCheckpoint(_)), "{err:?}");
}

#[test]
fn bad_requests_are_rejected() {
    let schedule = make_linear_schedule(1000).unwrap();
    let model: Mcddpm<f32> = Mcddpm::new(tiny_config(Ablation::Full), 0).unwrap();
    let v = volume(2, 7);
    assert!(reconstruct_volume(&model, &v, &schedule, &InferenceConfig { t_test: 0, ..Default::default() }).is_err());
    assert!(reconstruct_volume(&model, &v, &schedule, &InferenceConfig { t_test: 1001, ..Default::default() }).is_err());
    assert!(reconstruct_slices(&model, &v, &[2], &schedule, &InferenceConfig::default()).is_err());
    let odd = Volume3D::zeros(6, 6, 1);
    assert!(reconstruct_volume(&model, &odd, &schedule, &InferenceConfig::default()).is_err());
}

#[test]
fn residual_map_matches_elementwise_formula() {
    let a = volume(2, 8);
    let b = volume(2, 9);
    let l1 = residual_map(&a, &b, PNorm::L1).unwrap();
    let l2 = residual_map(&a, &b, PNorm::L2).unwrap();
    for i in 0..a.data().len() {
        let d = a.data()[i] - b.data()[i];
        assert_eq!(l1.data.data()[i], d.abs());
        assert!((l2.data.data()[i] - d * d).abs() <= 1e-7);
    }
    assert!(residual_map(&a, &volume(3, 9), PNorm::L1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reconstruction_shape_and_finiteness(depth in 1usize..4, seed in 0u64..1000, t in 1usize..=1000) {
        let schedule = make_linear_schedule(1000).unwrap();
        let model: Mcddpm<f32> = Mcddpm::new(tiny_config(Ablation::Full), seed).unwrap();
        let v = volume(depth, seed);
        let r = reconstruct_volume(&model, &v, &schedule, &InferenceConfig { t_test: t, seed, ..Default::default() }).unwrap();
        prop_assert_eq!(r.dims(), v.dims());
        prop_assert!(r.data().iter().all(|x| x.is_finite()));
        let m = residual_map(&v, &r, PNorm::L2).unwrap();
        prop_assert!(m.data.data().iter().all(|&x| x >= 0.0));
    }
}
