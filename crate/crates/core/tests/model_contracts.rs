mod common;

use common::{max_abs_diff, random_slice, tiny_config};
use mcddpm::bridge::LatentStack;
use mcddpm::rng::{gaussian_vec, stream};
use mcddpm::tensor::Tensor;
use mcddpm::unet::ContextVector;
use mcddpm::{Ablation, Mcddpm, ModelConfig, Slice2D};

fn model(ablation: Ablation) -> Mcddpm<f32> {
    Mcddpm::new(tiny_config(ablation), 11).unwrap()
}

fn random_tensor(shape: Vec<usize>, seed: u64, std: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    let data: Vec<f32> = gaussian_vec(n, &mut stream(seed, &[2])).iter().map(|v| v * std).collect();
    Tensor::new(shape, data)
}

#[test]
fn bridge_shapes_and_determinism() {
    let m = Mcddpm::<f32>::new(ModelConfig::default(), 0).unwrap();
    let x = random_slice(96, 96, 1);
    let z = m.bridge_encode(&x).unwrap();
    assert_eq!(z.shape(), (4, 96, 96));
    assert!(z.is_finite());
    assert_eq!(z, m.bridge_encode(&x).unwrap());
    let back = m.bridge_reconstruct(&z).unwrap();
    assert_eq!(back.dims(), (96, 96));
}

#[test]
fn bridge_rejects_bad_inputs() {
    let m = model(Ablation::Full);
    let mut x = random_slice(8, 8, 1);
    x.data_mut()[3] = f32::NAN;
    assert!(m.bridge_encode(&x).is_err());
    let z = LatentStack { channels: 3, h: 8, w: 8, data: vec![0.0; 192] };
    assert!(m.bridge_reconstruct(&z).is_err());
}

#[test]
fn bridge_is_lipschitz_at_a_point() {
    let m = model(Ablation::Full).cast::<f64>();
    let x = random_slice(8, 8, 2);
    let z0 = m.bridge_encode(&x).unwrap();
    let mut slopes = Vec::new();
    for delta in [1e-3f32, 1e-4] {
        let mut xp = x.clone();
        xp.data_mut()[27] += delta;
        let z1 = m.bridge_encode(&xp).unwrap();
        let change = max_abs_diff(&z0.data, &z1.data);
        assert!(change > 0.0);
        slopes.push(change / delta);
    }
    // Both probes see the same local slope up to float error.
    assert!((slopes[0] - slopes[1]).abs() <= 0.05 * slopes[0].max(slopes[1]), "slopes {slopes:?}");
}

#[test]
fn encoder_bottleneck_shape_and_time_liveness() {
    let cfg = ModelConfig::default();
    let m = Mcddpm::<f32>::new(cfg.clone(), 0).unwrap();
    let x = random_slice(96, 96, 3);
    let z = m.bridge_encode(&x).unwrap();
    let cat = m.concat_input(&x, Some(&z)).unwrap();
    let e0 = m.encode(&cat, 0).unwrap();
    let e500 = m.encode(&cat, 500).unwrap();
    assert_eq!(e0.bottleneck.shape(), &[1, cfg.unet.bottleneck_channels(), 12, 12]);
    assert_ne!(e0.bottleneck, e500.bottleneck);
    assert_eq!(e0.bottleneck, m.encode(&cat, 0).unwrap().bottleneck);
    let ctx = m.make_context(&x, Some(&z)).unwrap();
    assert_eq!(ctx.data.shape(), e500.bottleneck.shape());
}

#[test]
fn encoder_rejects_wrong_channel_count() {
    let m = model(Ablation::Full);
    let bad = Tensor::<f32>::zeros(vec![1, 2, 8, 8]);
    assert!(m.encode(&bad, 1).is_err());
}

#[test]
fn context_depends_on_the_image_only() {
    let m = model(Ablation::Full);
    let (a, b) = (random_slice(8, 8, 4), random_slice(8, 8, 5));
    let z = m.bridge_encode(&a).unwrap();
    let ca = m.make_context(&a, Some(&z)).unwrap();
    let cb = m.make_context(&b, Some(&z)).unwrap();
    assert_ne!(ca, cb);
    assert_eq!(ca, m.make_context(&a, Some(&z)).unwrap());
}

#[test]
fn attention_rows_are_distributions() {
    let m = model(Ablation::Full);
    let c = m.config().unet.bottleneck_channels();
    let q = random_tensor(vec![1, c, 3, 4], 6, 1.0);
    let ctx = ContextVector { data: random_tensor(vec![1, c, 3, 4], 7, 1.0) };
    let (out, w) = m.cross_attention_with_weights(&q, &ctx).unwrap();
    assert_eq!(out.shape(), q.shape());
    let heads = m.config().unet.attention_heads;
    assert_eq!(w.shape(), &[heads, 12, 12]);
    for row in w.data().chunks(12) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn single_context_position_gets_all_weight() {
    let m = model(Ablation::Full);
    let c = m.config().unet.bottleneck_channels();
    let q = random_tensor(vec![1, c, 2, 3], 8, 1.0);
    let ctx = ContextVector { data: random_tensor(vec![1, c, 1, 1], 9, 1.0) };
    let (out, w) = m.cross_attention_with_weights(&q, &ctx).unwrap();
    assert!(w.data().iter().all(|&v| v == 1.0));
    // Output minus the residual is the same at every query position.
    let delta: Vec<f32> = out.data().iter().zip(q.data()).map(|(o, x)| o - x).collect();
    for ch in delta.chunks(6) {
        for v in ch {
            assert!((v - ch[0]).abs() < 1e-5);
        }
    }
}

#[test]
fn attention_is_invariant_to_context_permutation() {
    let m = model(Ablation::Full);
    let c = m.config().unet.bottleneck_channels();
    let (h, w) = (12, 12);
    let q = random_tensor(vec![1, c, h, w], 10, 1.0);
    let ctx = random_tensor(vec![1, c, h, w], 11, 1.0);
    let mut perm: Vec<usize> = (0..h * w).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut stream(3, &[4]));
    let mut shuffled = vec![0f32; c * h * w];
    for ch in 0..c {
        for (dst, &src) in perm.iter().enumerate() {
            shuffled[ch * h * w + dst] = ctx.data()[ch * h * w + src];
        }
    }
    let a = m.cross_attention(&q, &ContextVector { data: ctx }).unwrap();
    let b = m.cross_attention(&q, &ContextVector { data: Tensor::new(vec![1, c, h, w], shuffled) }).unwrap();
    assert!(max_abs_diff(a.data(), b.data()) < 1e-6);
}

#[test]
fn predict_x0_is_the_composition() {
    let m = model(Ablation::Full);
    let x0 = random_slice(8, 8, 12);
    let x_in = random_slice(8, 8, 13);
    let z = m.bridge_encode(&x_in).unwrap();
    let ctx = m.make_context(&x0, Some(&z)).unwrap();
    let direct = m.predict_x0(&x_in, Some(&z), 300, Some(&ctx)).unwrap();
    let enc = m.encode(&m.concat_input(&x_in, Some(&z)).unwrap(), 300).unwrap();
    let att = m.cross_attention(&enc.bottleneck, &ctx).unwrap();
    let composed = m.decode(&att, &enc).unwrap();
    assert_eq!(direct, composed);
    assert_eq!(direct.dims(), (8, 8));
}

#[test]
fn decoder_rejects_mismatched_skips() {
    let m = model(Ablation::Full);
    let x = random_slice(8, 8, 14);
    let z = m.bridge_encode(&x).unwrap();
    let mut enc = m.encode(&m.concat_input(&x, Some(&z)).unwrap(), 1).unwrap();
    let att = enc.bottleneck.clone();
    enc.skips.pop();
    assert!(m.decode(&att, &enc).is_err());
}

#[test]
fn conditioning_is_live_and_ablation_ignores_it() {
    let m = model(Ablation::Full);
    let x_in = random_slice(8, 8, 15);
    let z = m.bridge_encode(&x_in).unwrap();
    let ctx = m.make_context(&random_slice(8, 8, 16), Some(&z)).unwrap();
    let zero = ContextVector { data: Tensor::zeros(ctx.data.shape().to_vec()) };
    let a = m.predict_x0(&x_in, Some(&z), 200, Some(&ctx)).unwrap();
    let b = m.predict_x0(&x_in, Some(&z), 200, Some(&zero)).unwrap();
    assert!(max_abs_diff(a.data(), b.data()) > 1e-9);
    let selfattn = m.predict_x0(&x_in, Some(&z), 200, None).unwrap();
    assert!(max_abs_diff(a.data(), selfattn.data()) > 1e-9);
}

#[test]
fn no_bridge_model_takes_images_only() {
    let m = model(Ablation::NoBridge);
    assert_eq!(m.config().unet.in_channels, 1);
    let x = random_slice(8, 8, 17);
    assert!(m.bridge_encode(&x).is_err());
    let ctx = m.make_context(&x, None).unwrap();
    assert_eq!(m.predict_x0(&x, None, 10, Some(&ctx)).unwrap().dims(), (8, 8));
    let z = LatentStack { channels: 2, h: 8, w: 8, data: vec![0.0; 128] };
    assert!(m.predict_x0(&x, Some(&z), 10, Some(&ctx)).is_err());
}

#[test]
fn output_stays_finite_for_wide_inputs() {
    let m = Mcddpm::<f32>::new(ModelConfig::default(), 1).unwrap();
    let data: Vec<f32> = gaussian_vec(96 * 96, &mut stream(5, &[0])).iter().map(|v| 3.0 * v).collect();
    let x = Slice2D::new(96, 96, data).unwrap();
    let z = m.bridge_encode(&x).unwrap();
    let ctx = m.make_context(&x, Some(&z)).unwrap();
    let out = m.predict_x0(&x, Some(&z), 1000, Some(&ctx)).unwrap();
    assert_eq!(out.dims(), (96, 96));
    assert!(out.is_finite());
}

#[test]
fn context_encoder_can_be_unshared() {
    let mut cfg = tiny_config(Ablation::Full);
    cfg.unet.share_context_encoder = false;
    let m = Mcddpm::<f32>::new(cfg, 0).unwrap();
    assert!(m.params().count_prefix("unet.context_encoder.") > 0);
    let shared = model(Ablation::Full);
    assert_eq!(shared.params().count_prefix("unet.context_encoder."), 0);
    let x = random_slice(8, 8, 18);
    let z = m.bridge_encode(&x).unwrap();
    assert_eq!(m.make_context(&x, Some(&z)).unwrap().data.dim(2), 1);
}
