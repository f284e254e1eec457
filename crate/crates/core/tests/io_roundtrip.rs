mod common;

use common::random_tensor;
use dfl_core::data::{decode_ppm, encode_ppm, generate, load_dataset, save_dataset, SynthSpec};
use dfl_core::dflt;
use dfl_core::netdef::{build_model, checkpoint, ModelSpec};
use dfl_core::{DType, Tensor};
use proptest::prelude::*;

#[test]
fn dflt_round_trip_is_bit_exact() {
    let t = random_tensor(&[3, 4, 5], 1).map(|v| v * 1e-300 + v);
    let back: Tensor<f64> = dflt::decode(&dflt::encode(&t)).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let t32 = t.cast::<f32>();
    let bytes = dflt::encode(&t32);
    let (dtype, shape, _) = dflt::decode_header(&bytes).unwrap();
    assert_eq!((dtype, shape), (DType::F32, vec![3, 4, 5]));
    let back: Tensor<f32> = dflt::decode(&bytes).unwrap();
    assert_eq!(back, t32);
}

#[test]
fn dflt_header_layout() {
    let t = Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap();
    let b = dflt::encode(&t);
    // magic, version, dtype, ndim, extent, payload
    let mut expected = b"DFLT".to_vec();
    expected.extend([1, 1, 1]);
    expected.extend(2u32.to_le_bytes());
    expected.extend(1.0f64.to_le_bytes());
    expected.extend((-2.0f64).to_le_bytes());
    assert_eq!(b, expected);
}

#[test]
fn ppm_round_trip_of_quantized_images() {
    let ds = generate(&SynthSpec {
        per_class_train: 1,
        per_class_test: 1,
        ..SynthSpec::desk(3)
    })
    .unwrap();
    for s in ds.train.iter().chain(&ds.test) {
        let back = decode_ppm(&encode_ppm(&s.image).unwrap()).unwrap();
        assert_eq!(&back, &s.image);
    }
}

#[test]
fn dataset_and_checkpoint_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        per_class_train: 2,
        per_class_test: 1,
        ..SynthSpec::desk(5)
    };
    let ds = generate(&spec).unwrap();
    save_dataset(&ds, dir.path().join("data")).unwrap();
    let back = load_dataset(dir.path().join("data"), spec.image_size, spec.classes).unwrap();
    assert_eq!(back, ds);

    let model = build_model::<f64>(&ModelSpec::tinynet(8, 3), &[], 2).unwrap();
    checkpoint::save(&model, dir.path().join("ckpt")).unwrap();
    let loaded = checkpoint::load::<f64>(dir.path().join("ckpt")).unwrap();
    assert_eq!(loaded, model);
}

proptest! {
    #[test]
    fn ppm_bytes_survive_decode_encode(w in 1usize..6, h in 1usize..6, seed in 0u64..500) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        for _ in 0..3 * w * h {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            bytes.push((state >> 56) as u8);
        }
        let img = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&img).unwrap(), bytes);
    }

    #[test]
    fn dflt_round_trip_any_shape(dims in prop::collection::vec(1usize..5, 1..4), seed in 0u64..500) {
        let t = random_tensor(&dims, seed);
        let back: Tensor<f64> = dflt::decode(&dflt::encode(&t)).unwrap();
        prop_assert_eq!(back, t);
    }
}
