mod common;

use common::model;
use proptest::prelude::*;
use rofg_core::data_io::{
    decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, format_curves, gen_synthetic, load_checkpoint,
    load_dataset, parse_curves, quantize6, read_curves, save_checkpoint, save_dataset, write_curves, Checkpoint,
    CheckpointKind, CurveRecord, Dataset, Render, Split, SyntheticKind, SyntheticSpec, DATASET_MAGIC,
};
use rofg_core::models::ModelSpec;
use rofg_core::{DenseArray, Rng};

fn image_spec() -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(SyntheticKind::Blobs, Render::Image { side: 8 }, 60, 30, 5);
    spec.noise = 0.05;
    spec.pixel_noise = 0.1;
    spec.clutter = 2;
    spec
}

fn record(epoch: usize, seed: u64) -> CurveRecord {
    let mut r = Rng::new(seed);
    CurveRecord {
        epoch,
        lr: 0.1,
        train_nat_acc: r.uniform() as f64,
        train_rob_acc: r.uniform() as f64,
        test_nat_acc: r.uniform() as f64,
        test_rob_acc: r.uniform() as f64,
        train_adv_loss: 3.0 * r.uniform() as f64,
        test_adv_loss: 3.0 * r.uniform() as f64,
        aug_rounds_mean: r.uniform() as f64,
        small_loss_frac: 1.0 / 3.0,
    }
}

#[test]
fn same_seed_same_dataset() {
    let a = gen_synthetic(&image_spec(), &Rng::new(4)).unwrap();
    let b = gen_synthetic(&image_spec(), &Rng::new(4)).unwrap();
    let c = gen_synthetic(&image_spec(), &Rng::new(5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn splits_are_disjoint_and_stratified() {
    let (train, test) = gen_synthetic(&image_spec(), &Rng::new(1)).unwrap();
    for i in 0..train.len() {
        for j in 0..test.len() {
            assert_ne!(train.images().row(i), test.images().row(j));
        }
    }
    assert_eq!(train.class_counts(), vec![12; 5]);
    assert_eq!(test.class_counts(), vec![6; 5]);
    assert!(train.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn label_noise_keeps_class_counts_and_test_labels() {
    let clean = gen_synthetic(&image_spec(), &Rng::new(2)).unwrap();
    let mut spec = image_spec();
    spec.label_noise = 0.5;
    let noisy = gen_synthetic(&spec, &Rng::new(2)).unwrap();
    assert_eq!(noisy.0.class_counts(), clean.0.class_counts());
    assert_eq!(noisy.0.images(), clean.0.images());
    assert_ne!(noisy.0.labels(), clean.0.labels());
    assert_eq!(noisy.1, clean.1);
}

#[test]
fn feature_render_shape() {
    let spec = SyntheticSpec::new(SyntheticKind::Rings, Render::Features, 10, 4, 3);
    let (train, _) = gen_synthetic(&spec, &Rng::new(0)).unwrap();
    assert_eq!(train.images().shape(), &[10, 1, 1, 2]);
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let (train, test) = gen_synthetic(&image_spec(), &Rng::new(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (ds, split) in [(&train, Split::Train), (&test, Split::Test)] {
        let path = dir.path().join("ds.bin");
        save_dataset(ds, &path).unwrap();
        let back = load_dataset(&path, split).unwrap();
        assert_eq!(&back, ds);
        assert_eq!(encode_dataset(&back), std::fs::read(&path).unwrap());
    }
}

#[test]
fn dataset_decoder_rejects_inconsistent_payloads() {
    let (train, _) = gen_synthetic(&image_spec(), &Rng::new(3)).unwrap();
    let bytes = encode_dataset(&train);
    // N larger than the payload.
    let mut more = bytes.clone();
    more[8..12].copy_from_slice(&61u32.to_le_bytes());
    assert!(decode_dataset(&more, Split::Train).is_err());
    // Trailing bytes.
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_dataset(&longer, Split::Train).is_err());
    // Label out of range.
    let mut label = bytes.clone();
    let at = label.len() - 2;
    label[at..].copy_from_slice(&5u16.to_le_bytes());
    assert!(decode_dataset(&label, Split::Train).is_err());
    // Pixel outside [0, 1].
    let mut pixel = bytes.clone();
    pixel[28..32].copy_from_slice(&1.5f32.to_le_bytes());
    assert!(decode_dataset(&pixel, Split::Train).is_err());
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(decode_dataset(&magic, Split::Train).is_err());
    assert!(decode_dataset(&DATASET_MAGIC[..], Split::Train).is_err());
}

#[test]
fn dataset_constructor_checks_contract() {
    let x = DenseArray::zeros(&[2, 1, 2, 2]);
    assert!(Dataset::new(x.clone(), vec![0], Split::Train, 2).is_err());
    assert!(Dataset::new(x.clone(), vec![0, 2], Split::Train, 2).is_err());
    assert!(Dataset::new(x.map(|_| 2.0), vec![0, 1], Split::Train, 2).is_err());
    assert!(Dataset::new(x, vec![0, 1], Split::Train, 2).is_ok());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let spec = ModelSpec::small_cnn(1, 8, &[6], 3);
    let params = model(&spec, 1);
    let velocity = model(&spec, 2);
    let ck = Checkpoint {
        epoch: 17,
        kind: CheckpointKind::BestRobust,
        metric: 0.123456789,
        params,
        velocity,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(encode_checkpoint(&back), std::fs::read(&path).unwrap());
    let bytes = encode_checkpoint(&ck);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn one_record_gives_two_lines() {
    let text = format_curves(&[record(0, 1)]).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(format_curves(&[]).is_err());
    assert!(format_curves(&[record(2, 1), record(2, 2)]).is_err());
    let mut bad = record(0, 1);
    bad.test_rob_acc = f64::NAN;
    assert!(format_curves(&[bad]).is_err());
}

#[test]
fn curves_parse_back_value_exact() {
    let records: Vec<CurveRecord> = (0..5).map(|e| record(e, e as u64)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curves.csv");
    write_curves(&records, &path).unwrap();
    let back = read_curves(&path).unwrap();
    let want: Vec<CurveRecord> = records.iter().map(CurveRecord::quantized).collect();
    assert_eq!(back, want);
    assert_eq!(format_curves(&back).unwrap(), std::fs::read_to_string(&path).unwrap());
    assert!(parse_curves("epoch\n0\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dataset_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200), header in prop::array::uniform5(0u32..6)) {
        let mut buf = DATASET_MAGIC.to_vec();
        for h in header {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        buf.extend_from_slice(&bytes);
        if let Ok(ds) = decode_dataset(&buf, Split::Test) {
            prop_assert_eq!(encode_dataset(&ds), buf);
        }
        let _ = decode_dataset(&bytes, Split::Test);
    }

    #[test]
    fn huge_headers_are_rejected(dims in prop::array::uniform5(any::<u32>())) {
        let mut buf = DATASET_MAGIC.to_vec();
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&[0u8; 64]);
        let _ = decode_dataset(&buf, Split::Train);
    }

    #[test]
    fn checkpoint_decoder_never_panics(cut in 0usize..400, flip in 0usize..400, byte in any::<u8>()) {
        let spec = ModelSpec::mlp(&[3, 4, 2]);
        let p = model(&spec, 0);
        let ck = Checkpoint { epoch: 1, kind: CheckpointKind::Last, metric: 0.5, params: p.clone(), velocity: p };
        let mut bytes = encode_checkpoint(&ck);
        let at = flip % bytes.len();
        bytes[at] = byte;
        bytes.truncate(cut.max(1).min(bytes.len()));
        let _ = decode_checkpoint(&bytes);
    }

    #[test]
    fn curve_quantization_is_idempotent(v in -10.0f64..10.0) {
        let q = quantize6(v);
        prop_assert_eq!(quantize6(q), q);
        prop_assert_eq!(format!("{q:.6}").parse::<f64>().unwrap(), q);
    }
}
