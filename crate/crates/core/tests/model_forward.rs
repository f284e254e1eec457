use dfl_core::netdef::{
    build_model, fuse_predictions, BackboneSpec, DflModuleSpec, LayerSpec, ModelSpec, PoolMode, TapPoint,
};
use dfl_core::Tensor;

fn hand_spec(pool6: PoolMode) -> ModelSpec {
    ModelSpec {
        input_channels: 1,
        input_size: 2,
        classes: 2,
        backbone: BackboneSpec {
            layers: vec![LayerSpec::conv(1, 1, 0, 2), LayerSpec::relu()],
            taps: vec![TapPoint {
                name: "t".into(),
                after: 1,
            }],
        },
        dfl: vec![DflModuleSpec {
            tap: "t".into(),
            classes: 2,
            k: 1,
            with_side_branch: true,
        }],
        g_hidden: Vec::new(),
        pool6,
        fusion: vec![1.0, 1.0, 0.1],
    }
}

fn set(model: &mut dfl_core::netdef::Model<f64>, values: &[&[f64]]) {
    for (p, v) in model.params_mut().into_iter().zip(values) {
        p.data_mut().copy_from_slice(v);
    }
}

#[test]
fn forward_matches_hand_trace() {
    let mut model = build_model::<f64>(&hand_spec(PoolMode::Gmp), &[], 0).unwrap();
    assert_eq!(
        model.param_names(),
        ["backbone.0.weight", "dfl0.conv6", "dfl0.fc.weight", "dfl0.fc.bias", "g.fc0.weight", "g.fc0.bias"]
    );
    set(
        &mut model,
        &[&[1.0, -1.0], &[1.0, 0.0, 0.5, 1.0], &[1.0, 0.0, 0.0, -1.0], &[0.1, 0.2], &[2.0, 0.0, 1.0, 1.0], &[0.0, -1.0]],
    );
    let image = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    // relu(conv) = [[1,0,3,.5], [0,2,0,0]]; conv6 = [[1,0,3,.5], [.5,2,1.5,.25]]
    let out = model.forward(&image).unwrap();
    assert_eq!(out.pool6[0].data(), &[3.0, 2.0]);
    assert_eq!(out.conv6_argmax[0], vec![(1, 0), (0, 1)]);
    assert_eq!(out.p_logits[0].data(), &[3.1, -1.8]);
    assert_eq!(out.side_logits[0].data(), &[3.0, 2.0]);
    // GAP of the backbone output = [1.125, 0.5]
    assert_eq!(out.g_logits.data(), &[2.25, 0.625]);
    let (fused, class) = fuse_predictions(&out, &[1.0, 1.0, 0.1]).unwrap();
    assert!((fused.data()[0] - 5.65).abs() < 1e-12 && (fused.data()[1] + 0.975).abs() < 1e-12);
    assert_eq!(class, 0);

    let mut gap = build_model::<f64>(&hand_spec(PoolMode::Gap), &[], 0).unwrap();
    gap.params_mut().into_iter().zip(model.params()).for_each(|(a, b)| *a = b.clone());
    let out = gap.forward(&image).unwrap();
    assert_eq!(out.pool6[0].data(), &[1.125, 1.0625]);
}

#[test]
fn trace_and_forward_agree_and_shapes_follow_the_spec() {
    let spec = ModelSpec::tinynet(8, 10);
    let model = build_model::<f64>(&spec, &[], 1).unwrap();
    let image = Tensor::from_fn(&[3, 64, 64], |i| (i % 7) as f64 / 7.0);
    let trace = model.trace(&image).unwrap();
    assert_eq!(trace.taps[0].shape(), &[64, 16, 16]);
    assert_eq!(trace.conv6[0].shape(), &[80, 16, 16]);
    assert_eq!(trace.outputs.pool6[0].shape(), &[80]);
    assert_eq!(trace.outputs.g_logits.shape(), &[8]);
    assert_eq!(trace.outputs, model.forward(&image).unwrap());
    assert_eq!(model.tap_features(&image, "block3").unwrap(), trace.taps[0]);
}

#[test]
fn f32_forward_tracks_f64() {
    let spec = ModelSpec::tinynet(8, 4);
    let model = build_model::<f64>(&spec, &[], 2).unwrap();
    let image = Tensor::from_fn(&[3, 64, 64], |i| ((i * 31) % 17) as f64 / 17.0);
    let a = model.forward(&image).unwrap();
    let b = model.cast::<f32>().forward(&image.cast()).unwrap();
    for (x, y) in a.g_logits.data().iter().zip(b.g_logits.data()) {
        assert!((x - *y as f64).abs() < 1e-4 * (1.0 + x.abs()));
    }
}
