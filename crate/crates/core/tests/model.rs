use tsbnet::geometry::{bdm_backward, bdm_forward, pixels_to_triplet, project_point, DisparityGuard, Point3D, StereoRig};
use tsbnet::model::{
    denormalize_triplet, forward_3d, param_count, BdmStage, CropMeta, LayerKind, Model, ModelConfig, Sharing, OUTPUT_DIM,
};
use tsbnet::Tensor;

/// Parameters of a conv + PReLU unit: weights, bias, one slope per channel.
fn conv_unit(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + 2 * c_out
}

/// Closed-form parameter count, written out stage by stage.
fn closed_form(mult: f64, in_ch: usize, input: usize) -> usize {
    let c = [32.0, 32.0, 48.0, 64.0, 128.0, 192.0].map(|v: f64| (v * mult) as usize);
    let shared = conv_unit(in_ch, c[0], 5)
        + conv_unit(c[0], c[1], 3)
        + 3 * conv_unit(c[1], c[1], 3)
        + conv_unit(c[1], c[2], 3)
        + conv_unit(c[2], c[2], 3);
    let stream = conv_unit(c[2], c[3], 3) + 2 * conv_unit(c[3], c[3], 3) + conv_unit(c[3], c[4], 3) + conv_unit(c[4], c[5], 3);
    let feat = 2 * c[5] * (input / 8) * (input / 8);
    let head = (feat * 512 + 512 + 512) + (512 * 256 + 256 + 256) + (256 * 18 + 18);
    shared + 2 * stream + head
}

#[test]
fn full_model_matches_the_layer_table() {
    let model = Model::<f32>::build(&ModelConfig::full(), 0).unwrap();
    let got: Vec<_> = model.layer_table().into_iter().map(|r| (r.name, r.kind, r.sharing)).collect();
    let conv = |out_channels, kernel, repeat| LayerKind::Conv { out_channels, kernel, repeat };
    let pool = LayerKind::Pool { size: 2 };
    let want = vec![
        ("conv0", conv(32, 5, 1), Sharing::Shared),
        ("pool0", pool, Sharing::Shared),
        ("conv0x", conv(32, 3, 4), Sharing::Shared),
        ("pool1", pool, Sharing::Shared),
        ("conv1x", conv(48, 3, 2), Sharing::Shared),
        ("conv2x", conv(64, 3, 3), Sharing::Separate),
        ("pool2", pool, Sharing::Separate),
        ("conv31", conv(128, 3, 1), Sharing::Separate),
        ("conv32", conv(192, 3, 1), Sharing::Separate),
        ("fc1", LayerKind::Fc { out: 512 }, Sharing::Fused),
        ("fc2", LayerKind::Fc { out: 256 }, Sharing::Fused),
        ("fc3", LayerKind::Fc { out: 18 }, Sharing::Fused),
    ];
    assert_eq!(got, want);
    // Separate stages really are two instances.
    assert_ne!(model.left, model.right);
    assert_eq!(model.head.fc1.in_dim(), 2 * 27648);
}

#[test]
fn parameter_count_matches_closed_form() {
    assert_eq!(conv_unit(2, 32, 5), 1632 + 32);
    assert_eq!(closed_form(1.0, 2, 96), 29_316_946);
    let full = ModelConfig::full();
    assert_eq!(param_count(&full).unwrap(), closed_form(1.0, 2, 96));
    for (mult, mask, input) in [(0.5, true, 96), (0.25, false, 32), (0.125, true, 16)] {
        let cfg = ModelConfig {
            channel_multiplier: mult,
            use_mask_channel: mask,
            input_size: input,
            ..ModelConfig::full()
        };
        assert_eq!(param_count(&cfg).unwrap(), closed_form(mult, cfg.in_channels(), input), "{mult} {mask} {input}");
    }
    let half = ModelConfig { channel_multiplier: 0.5, ..full };
    assert!(param_count(&half).unwrap() < param_count(&ModelConfig::full()).unwrap());
}

#[test]
fn forward_3d_is_triangulation_of_denormalized_output() {
    let cfg = ModelConfig {
        channel_multiplier: 0.125,
        input_size: 16,
        zero_init_head: false,
        ..ModelConfig::full()
    };
    let model = Model::<f64>::build(&cfg, 5).unwrap();
    let shape = model.input_shape(3);
    let mut k = 0u32;
    let mut next = || {
        k = k.wrapping_mul(1_103_515_245).wrapping_add(12_345);
        (k >> 8) as f64 / (1u32 << 24) as f64
    };
    let left = Tensor::from_fn(&shape, |_| next());
    let right = Tensor::from_fn(&shape, |_| next());
    let metas: Vec<_> = (0..3)
        .map(|i| CropMeta {
            offset_l: 200.0 + 10.0 * i as f64,
            offset_r: 150.0,
            offset_y: 120.0,
            scale: 15.0,
            input_size: 16,
        })
        .collect();
    let rig = StereoRig::default();
    let stage = BdmStage::new(rig);
    let out = forward_3d(&model, &stage, &metas, &left, &right).unwrap();
    let pix = model.forward_pixels(&left, &right).unwrap();
    for (row, (p, meta)) in out.data().chunks(OUTPUT_DIM).zip(pix.data().chunks(OUTPUT_DIM).zip(&metas)) {
        for j in 0..6 {
            let trip = denormalize_triplet([p[3 * j], p[3 * j + 1], p[3 * j + 2]], meta);
            let want = bdm_forward(&rig, &trip, &DisparityGuard::default()).unwrap().point;
            assert_eq!([row[3 * j], row[3 * j + 1], row[3 * j + 2]], want.to_array());
        }
    }
}

#[test]
fn triangulation_gradient_grows_linearly_with_depth() {
    // Upstream gradient with no z component; the (s, t) partials carry the
    // factor lambda z / f. (The q partial grows as z squared and is left out.)
    let rig = StereoRig::default();
    let guard = DisparityGuard::default();
    let norm_at = |z: f64| {
        let p = Point3D::new(30.0 * z / 300.0, -20.0 * z / 300.0, z);
        let trip = pixels_to_triplet(&project_point(&rig, &p).unwrap());
        let g = bdm_backward(&rig, &trip, &guard, [1.0, -0.5, 0.0]).unwrap();
        (g[0] * g[0] + g[2] * g[2]).sqrt()
    };
    let ratio = norm_at(450.0) / norm_at(300.0);
    assert!((ratio - 1.5).abs() < 0.15, "ratio {ratio}");
}
