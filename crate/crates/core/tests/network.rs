mod support;

use hyatt_core::bra::AttentionMode;
use hyatt_core::checkpoint;
use hyatt_core::heatmap::{encode_heatmap, LandmarkSet};
use hyatt_core::net::{predict_from_stack, HeatmapStack, HyattConfig, HyattNet};
use hyatt_core::nn::{Ctx, ParamStore};
use hyatt_core::Tensor;
use rand::Rng;
use support::{max_rel, rng};

fn image<T: hyatt_core::Scalar>(b: usize, side: usize, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..b * side * side).map(|_| r.gen_range(0.0..1.0)).collect();
    Tensor::<f64>::new(&[b, 1, side, side], data).unwrap().cast()
}

fn small(side: usize) -> HyattConfig {
    HyattConfig {
        input_size: [side, side],
        ..HyattConfig::compact()
    }
}

#[test]
fn toy_shapes_follow_the_pyramid() {
    let cfg = HyattConfig::toy();
    let (net, store) = HyattNet::new::<f32>(&cfg).unwrap();
    let mut ctx = Ctx::eval(&store);
    let x = ctx.tape.constant(image::<f32>(2, 128, 1));
    let pyr = net.encode(&mut ctx, x).unwrap();
    for (i, &d) in pyr.features.iter().enumerate() {
        let side = 32 >> i;
        assert_eq!(ctx.tape.shape(d), &[2, cfg.stage_dims[i], side, side], "D{}", i + 1);
    }
    let us = net.decode(&mut ctx, &pyr).unwrap();
    for (i, &u) in us.iter().enumerate() {
        let side = 2 << i;
        assert_eq!(ctx.tape.shape(u), &[2, cfg.decoder_dim, side, side], "U{}", i + 1);
    }
    let stack = net.heatmaps(&store, &image::<f32>(2, 128, 1)).unwrap();
    assert_eq!(stack.h1.shape(), &[2, 4, 16, 16]);
    assert_eq!(stack.h2.shape(), &[2, 4, 32, 32]);
    assert_eq!(stack.h3.shape(), &[2, 4, 128, 128]);
}

#[test]
fn zero_image_and_zero_shifts_give_zero_pyramid() {
    let cfg = small(64);
    let (net, mut store) = HyattNet::new::<f64>(&cfg).unwrap();
    store.zero_where(|n| n.ends_with("bias") || n.ends_with("beta"));
    let mut ctx = Ctx::eval(&store);
    let x = ctx.tape.constant(Tensor::zeros(&[1, 1, 64, 64]));
    let pyr = net.encode(&mut ctx, x).unwrap();
    let us = net.decode(&mut ctx, &pyr).unwrap();
    for &n in pyr.features.iter().chain(&us) {
        assert!(ctx.tape.value(n).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn full_routing_network_equals_dense_network() {
    let mut cfg = small(64);
    cfg.stage_topk = cfg.stage_region_grid.map(|s| s * s);
    let (mut net, store) = HyattNet::new::<f64>(&cfg).unwrap();
    let x = image::<f64>(2, 64, 3);
    let routed = net.heatmaps(&store, &x).unwrap();
    net.mode = AttentionMode::Dense;
    let dense = net.heatmaps(&store, &x).unwrap();
    for (a, b) in [
        (&routed.h1, &dense.h1),
        (&routed.h2, &dense.h2),
        (&routed.h3, &dense.h3),
    ] {
        let e = max_rel(a.data(), b.data());
        assert!(e < 1e-5, "{e:e}");
    }
}

#[test]
fn forward_is_deterministic_and_parameter_count_stable() {
    let cfg = small(64);
    let (net, store) = HyattNet::new::<f32>(&cfg).unwrap();
    let (_, again) = HyattNet::new::<f32>(&cfg).unwrap();
    assert_eq!(store, again);
    let x = image::<f32>(2, 64, 4);
    let a = net.heatmaps(&store, &x).unwrap();
    let b = net.heatmaps(&store, &x).unwrap();
    assert_eq!(a.h3.data(), b.h3.data());
    let counted: usize = store
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.value.shape().iter().product::<usize>())
        .sum();
    assert_eq!(store.num_trainable(), counted);
    assert!(store.num_trainable() < 500_000);
}

#[test]
fn equal_maps_average_to_themselves() {
    let lm = LandmarkSet::pixels(vec![[20.0, 30.0], [100.0, 7.0], [64.0, 64.0], [3.0, 120.0]]).unwrap();
    let map: Tensor<f32> = encode_heatmap(&lm, (128, 128), 4.0, true).unwrap();
    let plane = Tensor::new(&[1, 4, 128, 128], map.data().to_vec()).unwrap();
    let stack = HeatmapStack {
        h1: plane.clone(),
        h2: plane.clone(),
        h3: plane,
    };
    assert_eq!(predict_from_stack(&stack).unwrap(), vec![lm]);
}

#[test]
fn bump_stack_decodes_to_bump_centres() {
    let cfg = HyattConfig::toy();
    let (net, _) = HyattNet::new::<f32>(&cfg).unwrap();
    let lm = LandmarkSet::pixels(vec![[40.0, 24.0], [88.0, 96.0], [16.0, 112.0], [72.0, 56.0]]).unwrap();
    let [h1, h2, h3] = net.targets::<f32>(std::slice::from_ref(&lm)).unwrap();
    let got = predict_from_stack(&HeatmapStack { h1, h2, h3 }).unwrap();
    for (p, q) in got[0].points.iter().zip(&lm.points) {
        assert!(
            (p[0] - q[0]).abs() <= 1.0 && (p[1] - q[1]).abs() <= 1.0,
            "{p:?} vs {q:?}"
        );
    }
}

#[test]
fn skip_projections_feed_the_finest_decoder_map() {
    let cfg = small(64);
    let (net, store) = HyattNet::new::<f64>(&cfg).unwrap();
    let x = image::<f64>(1, 64, 5);
    let u5 = |store: &ParamStore<f64>| {
        let mut ctx = Ctx::eval(store);
        let xn = ctx.tape.constant(x.clone());
        let pyr = net.encode(&mut ctx, xn).unwrap();
        let us = net.decode(&mut ctx, &pyr).unwrap();
        ctx.tape.value(us[4]).data().to_vec()
    };
    let full = u5(&store);
    let mut cut = store.clone();
    cut.zero_where(|n| {
        ["proj1.", "proj2.", "proj3.", "proj4."]
            .iter()
            .any(|p| n.starts_with(p))
    });
    assert_ne!(full, u5(&cut));
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let cfg = small(64);
    let (net, store) = HyattNet::new::<f32>(&cfg).unwrap();
    let dir = std::env::temp_dir().join(format!("hyatt-net-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("a.bin");
    checkpoint::save(&path, &cfg, &store).unwrap();
    let (loaded_net, loaded) = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, store);
    assert_eq!(loaded_net.cfg, net.cfg);
    let again = checkpoint::encode(&loaded_net.cfg, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), again);
    std::fs::remove_dir_all(&dir).unwrap();
}
