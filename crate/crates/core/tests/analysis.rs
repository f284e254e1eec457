mod common;

use common::random_tensor;
use dfl_core::data::{generate, Sample, SynthSpec};
use dfl_core::eval::{
    bilinear_upsample, class_profile, energy_shift, evaluate, filter_heatmap, max_cover_upsample, predict,
    remap_patch, top_patches,
};
use dfl_core::geom::Rect;
use dfl_core::netdef::{build_model, receptive_field, Model, ModelSpec, ReceptiveFieldInfo};
use dfl_core::train::{train, TrainConfig};
use dfl_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> (Model<f64>, Vec<Sample>) {
    let mut spec = ModelSpec::tinynet(4, 3);
    spec.input_size = 32;
    let ds = generate(&SynthSpec {
        per_class_train: 3,
        per_class_test: 3,
        image_size: 32,
        patch_size: 8,
        ..SynthSpec::with_classes(4, 1)
    })
    .unwrap();
    (build_model(&spec, &[], 1).unwrap(), ds.test)
}

#[test]
fn evaluate_single_forced_sample_and_one_hot_fusion() {
    let (model, samples) = small();
    let weights = [1.0, 1.0, 0.1];
    let pred = predict(&model, &samples[..1], &weights).unwrap()[0];
    let mut s = samples[0].clone();
    s.label = pred;
    assert_eq!(evaluate(&model, &[s], &weights).unwrap(), 1.0);

    for (stream, w) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].iter().enumerate() {
        let got = predict(&model, &samples, w).unwrap();
        for (s, p) in samples.iter().zip(got) {
            let out = model.forward(&s.image).unwrap();
            assert_eq!(p, out.streams()[stream].argmax());
        }
    }
    assert!(evaluate(&model, &[], &weights).is_err());
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut spec = ModelSpec::tinynet(4, 2);
    spec.input_size = 16;
    let ds = generate(&SynthSpec {
        per_class_train: 6,
        per_class_test: 100,
        image_size: 16,
        patch_size: 5,
        ..SynthSpec::with_classes(4, 2)
    })
    .unwrap();
    let mut model: Model<f64> = build_model(&spec, &[], 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train(&mut model, &ds.train, &[], &cfg).unwrap();
    let mut labels: Vec<usize> = ds.test.iter().map(|s| s.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let permuted: Vec<Sample> = ds
        .test
        .iter()
        .zip(labels)
        .map(|(s, l)| Sample { label: l, ..s.clone() })
        .collect();
    let acc = evaluate(&model, &permuted, &[1.0, 1.0, 0.1]).unwrap();
    // binomial standard deviation at p = 1/4, n = 400 is about 0.022
    assert!((acc - 0.25).abs() < 4.0 * 0.0217, "{acc}");
}

#[test]
fn remap_geometry() {
    let rf = ReceptiveFieldInfo {
        size: 92,
        stride: 8,
        offset: 4.0,
    };
    let b = remap_patch((1, 2), &rf, 448);
    assert_eq!(b, Rect::new(0.0, 0.0, 20.0 + 46.0, 12.0 + 46.0));
    let origin = ReceptiveFieldInfo {
        size: 6,
        stride: 2,
        offset: 0.0,
    };
    assert_eq!(remap_patch((0, 0), &origin, 32), Rect::new(0.0, 0.0, 3.0, 3.0));
    // interior shift by one site moves the box by one stride
    let a = remap_patch((20, 20), &rf, 448);
    let b = remap_patch((21, 20), &rf, 448);
    assert_eq!((b.y0 - a.y0, b.y1 - a.y1, b.x0 - a.x0), (8.0, 8.0, 0.0));
}

proptest! {
    #[test]
    fn remapped_boxes_are_clipped_and_distinct(
        size in 1usize..60, stride in 1usize..9, offset in -10.0f64..10.0, image in 8usize..128,
        h in 0usize..20, w in 0usize..20,
    ) {
        let rf = ReceptiveFieldInfo { size, stride, offset };
        let s = image as f64;
        let b = remap_patch((h, w), &rf, image);
        prop_assert!(Rect::new(0.0, 0.0, s, s).contains_rect(&b));
        // unclipped centers are injective in the location
        let c = |h: usize, w: usize| (rf.center(w), rf.center(h));
        prop_assert_ne!(c(h, w), c(h + 1, w));
        prop_assert_ne!(c(h, w), c(h, w + 1));
    }

    #[test]
    fn bilinear_matches_per_pixel_oracle(h in 1usize..6, w in 1usize..6, stride in 1usize..5, seed in 0u64..100) {
        let values = random_tensor(&[h, w], seed);
        let rf = ReceptiveFieldInfo { size: 2 * stride + 1, stride, offset: stride as f64 / 2.0 + 0.5 };
        let size = h.max(w) * stride;
        let got = bilinear_upsample(&values, &rf, size).unwrap();
        let want = common::bilinear(&values, rf.offset, stride as f64, size);
        prop_assert!(common::max_abs_diff(got.data(), &want) < 1e-12);
    }
}

#[test]
fn heatmap_peak_sits_at_the_remapped_argmax() {
    let (model, samples) = small();
    let rf = receptive_field(&model.spec.backbone, "block3").unwrap();
    for s in &samples[..4] {
        for filter in [0, 5, 11] {
            let heat = filter_heatmap(&model, &s.image, 0, filter).unwrap();
            assert_eq!(heat.shape(), &[32, 32]);
            let out = model.forward(&s.image).unwrap();
            let (i, j) = out.conv6_argmax[0][filter];
            // the heatmap never exceeds the pooled response and is at least
            // the interpolated value at the pixel nearest the argmax center
            let max = heat.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let best = out.pool6[0].data()[filter];
            assert!(max <= best + 1e-12);
            let near = |c: f64| (c - 0.5).round().clamp(0.0, 31.0) as usize;
            assert!(max >= heat.data()[near(rf.center(i)) * 32 + near(rf.center(j))]);
        }
    }
    // a lone positive site peaks inside its own remapped box
    for (i, j) in [(0, 0), (3, 5), (7, 7)] {
        let spike = Tensor::from_fn(&[8, 8], |k| if k == i * 8 + j { 1.0 } else { 0.0 });
        let heat = bilinear_upsample(&spike, &rf, 32).unwrap();
        let peak = heat.argmax();
        let bbox = remap_patch((i, j), &rf, 32);
        assert!(bbox.contains_pixel(peak % 32, peak / 32), "site ({i}, {j})");
        // border sites clamp into a plateau beyond the outermost center
        let (py, px) = ((peak / 32) as f64 + 0.5, (peak % 32) as f64 + 0.5);
        let half = rf.stride as f64 / 2.0;
        assert!((py - rf.center(i)).abs() <= half && (px - rf.center(j)).abs() <= half, "site ({i}, {j})");
        if (1..7).contains(&i) && (1..7).contains(&j) {
            let near = |c: f64| (c - 0.5).round().clamp(0.0, 31.0) as usize;
            assert_eq!(heat.data()[near(rf.center(i)) * 32 + near(rf.center(j))], heat.data()[peak]);
        }
    }
    let flat = bilinear_upsample(&Tensor::full(&[3, 3], 0.7), &rf, 12).unwrap();
    assert!(flat.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn class_profile_properties() {
    let (model, samples) = small();
    let one = class_profile(&model, &samples[..1], samples[0].label, 0).unwrap();
    assert_eq!(one, model.forward(&samples[0].image).unwrap().pool6[0]);
    assert_eq!(one.numel(), 12);

    let class = samples[0].label;
    let members: Vec<Sample> = samples.iter().filter(|s| s.label == class).cloned().collect();
    assert_eq!(members.len(), 3);
    let (a, b) = members.split_at(1);
    let whole = class_profile(&model, &members, class, 0).unwrap();
    let pa = class_profile(&model, a, class, 0).unwrap();
    let pb = class_profile(&model, b, class, 0).unwrap();
    let mixed: Vec<f64> = pa.data().iter().zip(pb.data()).map(|(x, y)| (x + 2.0 * y) / 3.0).collect();
    assert!(common::max_abs_diff(whole.data(), &mixed) < 1e-12);
}

#[test]
fn top_patches_are_ranked_one_per_image() {
    let (model, samples) = small();
    assert!(top_patches(&model, &samples, 0, 3, 0).unwrap().is_empty());
    let hits = top_patches(&model, &samples, 0, 3, 5).unwrap();
    assert_eq!(hits.len(), 5);
    assert!(hits.windows(2).all(|w| w[0].response >= w[1].response));
    let mut ids: Vec<usize> = hits.iter().map(|h| h.image_id).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 5);
    assert!(hits.iter().all(|h| Rect::new(0.0, 0.0, 32.0, 32.0).contains_rect(&h.bbox)));
    assert!(top_patches(&model, &samples, 0, 99, 1).is_err());
}

#[test]
fn energy_shift_of_identical_checkpoints_is_zero() {
    let (model, samples) = small();
    let shift = energy_shift(&model, &model, &samples, "block3").unwrap();
    assert_eq!(shift.images.len(), samples.len());
    for img in &shift.images {
        assert_eq!(img.before.shape(), &[32, 32]);
        assert_eq!(img.before, img.after);
        assert_eq!(img.fraction_before, img.fraction_after);
    }
}

#[test]
fn max_cover_takes_the_largest_covering_site() {
    let rf = ReceptiveFieldInfo {
        size: 4,
        stride: 2,
        offset: 1.0,
    };
    let values = Tensor::new(vec![2, 2], vec![1.0, 5.0, 2.0, 3.0]).unwrap();
    let up = max_cover_upsample(&values, &rf, 4).unwrap();
    // boxes: (0,0)->[0,3)x[0,3), (0,1)->[1,5)... clipped to the 4x4 image
    for y in 0..4 {
        for x in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for i in 0..2 {
                for j in 0..2 {
                    if remap_patch((i, j), &rf, 4).contains_pixel(x, y) {
                        best = best.max(values.data()[i * 2 + j]);
                    }
                }
            }
            assert_eq!(up.data()[y * 4 + x], best);
        }
    }
}
