use std::fs;
use std::path::Path;

use psap::data::{
    epoch_order, load_cifar10, parse_records, steps_per_epoch, synthetic_dataset, Augment, Dataset, Split,
    SyntheticSpec, CIFAR_RECORD_BYTES, CIFAR_SHAPE, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
use psap::model::{build_model, Architecture, ModelSpec};
use psap::optim::{sgd_step, SgdConfig, SgdState};
use psap::Error;

/// Two 1x2x2 records: label 3 with pixels 0..4, label 0 with 250..254.
fn fixture() -> Vec<u8> {
    vec![3, 0, 1, 2, 3, 0, 250, 251, 252, 253]
}

#[test]
fn parse_two_records_exactly() {
    let (pixels, labels) = parse_records(&fixture(), [1, 2, 2], 10, Path::new("f.bin")).unwrap();
    assert_eq!(labels, vec![3, 0]);
    assert_eq!(pixels, vec![0, 1, 2, 3, 250, 251, 252, 253]);
}

#[test]
fn records_round_trip_through_file() {
    let (pixels, labels) = parse_records(&fixture(), [1, 2, 2], 10, Path::new("f.bin")).unwrap();
    let ds = Dataset::<f64>::from_bytes(Split::Train, [1, 2, 2], 10, pixels, labels).unwrap();
    assert_eq!(ds.to_record_bytes().unwrap(), fixture());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.bin");
    ds.write_records(&path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fixture());
}

#[test]
fn identity_normalization_scales_to_unit_interval() {
    let ds = Dataset::<f64>::from_bytes(Split::Test, [1, 2, 2], 10, vec![0, 51, 102, 255], vec![1]).unwrap();
    let (x, l) = ds.batch(&[0], None).unwrap();
    assert_eq!(l, vec![1]);
    assert_eq!(x.shape(), &[1, 1, 2, 2]);
    let want = [0.0, 0.2, 0.4, 1.0];
    for (a, b) in x.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn from_bytes_rejects_bad_input() {
    let bad_label = Dataset::<f64>::from_bytes(Split::Train, [1, 1, 1], 2, vec![0], vec![2]);
    assert!(matches!(bad_label, Err(Error::Config(_))));
    let bad_size = Dataset::<f64>::from_bytes(Split::Train, [1, 2, 2], 2, vec![0; 3], vec![0]);
    assert!(matches!(bad_size, Err(Error::Shape(_))));
}

fn write_cifar_dir(dir: &Path, test_bytes: Vec<u8>) {
    let mut rec = vec![0u8; CIFAR_RECORD_BYTES];
    for (i, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        rec[0] = i as u8;
        rec[1..].iter_mut().enumerate().for_each(|(j, p)| *p = (j * (i + 1) % 256) as u8);
        fs::write(dir.join(name), &rec).unwrap();
    }
    fs::write(dir.join(CIFAR_TEST_FILE), test_bytes).unwrap();
}

#[test]
fn cifar_loader_reads_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut test = vec![7u8; CIFAR_RECORD_BYTES];
    test[0] = 9;
    write_cifar_dir(dir.path(), test);
    let (train, test) = load_cifar10::<f32>(dir.path()).unwrap();
    assert_eq!(train.len(), 5);
    assert_eq!(train.labels(), &[0, 1, 2, 3, 4]);
    assert_eq!(test.labels(), &[9]);
    assert_eq!(train.shape(), CIFAR_SHAPE);
    assert_eq!(test.normalization(), train.normalization());
}

#[test]
fn cifar_missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cifar10::<f32>(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn cifar_truncated_file_is_format_error_at_record_zero() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar_dir(dir.path(), vec![0u8; CIFAR_RECORD_BYTES - 1]);
    match load_cifar10::<f32>(dir.path()).unwrap_err() {
        Error::Format { file, offset, .. } => {
            assert!(file.ends_with(CIFAR_TEST_FILE));
            assert_eq!(offset, 0);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn cifar_label_out_of_range_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
    bytes[CIFAR_RECORD_BYTES] = 10;
    write_cifar_dir(dir.path(), bytes);
    match load_cifar10::<f32>(dir.path()).unwrap_err() {
        Error::Format { offset, .. } => assert_eq!(offset, CIFAR_RECORD_BYTES as u64),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn synthetic_is_reproducible() {
    let spec = SyntheticSpec::default();
    let (a, at) = synthetic_dataset::<f32>(&spec, 5).unwrap();
    let (b, bt) = synthetic_dataset::<f32>(&spec, 5).unwrap();
    assert_eq!(a.pixels(), b.pixels());
    assert_eq!(a.labels(), b.labels());
    assert_eq!(at.pixels(), bt.pixels());
    let (c, _) = synthetic_dataset::<f32>(&spec, 6).unwrap();
    assert_ne!(a.pixels(), c.pixels());
}

#[test]
fn synthetic_with_one_sample_per_class_covers_every_label() {
    let spec = SyntheticSpec { classes: 7, train_size: 7, test_size: 7, ..Default::default() };
    let (train, test) = synthetic_dataset::<f64>(&spec, 0).unwrap();
    for ds in [&train, &test] {
        let mut l = ds.labels().to_vec();
        l.sort_unstable();
        assert_eq!(l, (0..7).collect::<Vec<_>>());
    }
}

#[test]
fn synthetic_train_split_is_standardized() {
    let (train, _) = synthetic_dataset::<f64>(&SyntheticSpec::default(), 1).unwrap();
    let x = train.images().unwrap();
    let [c, h, w] = train.shape();
    for ch in 0..c {
        let vals: Vec<f64> = (0..train.len())
            .flat_map(|n| x.data()[(n * c + ch) * h * w..(n * c + ch + 1) * h * w].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6, "channel {ch}: mean {m} var {v}");
    }
}

#[test]
fn linear_probe_learns_separable_data() {
    let spec = SyntheticSpec { separability: 2.0, noise: 10.0, ..Default::default() };
    let (train, _) = synthetic_dataset::<f64>(&spec, 3).unwrap();
    let mut net = build_model::<f64>(&ModelSpec {
        architecture: Architecture::MlpProbe,
        input_shape: spec.shape,
        classes: spec.classes,
        seed: 3,
    })
    .unwrap();
    let mut sgd = SgdState::new(SgdConfig { learning_rate: 0.05, momentum: 0.9, weight_decay: 0.0, clip_max_norm: None });
    let mut acc = 0.0;
    for epoch in 0..5 {
        let order = epoch_order(train.len(), 3, epoch);
        let mut correct = 0;
        for chunk in order.chunks(32) {
            let (x, l) = train.batch(chunk, None).unwrap();
            let ce = net.loss_and_grad(&x, &l).unwrap();
            correct += ce.correct;
            sgd_step(&mut net.params_mut(), &mut sgd).unwrap();
        }
        acc = correct as f64 / train.len() as f64;
        if acc >= 0.95 {
            break;
        }
    }
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn augmentation_keeps_labels_and_repeats_per_epoch() {
    let (train, _) = synthetic_dataset::<f64>(&SyntheticSpec::default(), 2).unwrap();
    let aug = Augment::default();
    let idx: Vec<usize> = (0..16).collect();
    let (plain, l0) = train.batch(&idx, None).unwrap();
    let (a, l1) = train.batch(&idx, Some((&aug, 9, 1))).unwrap();
    let (b, l2) = train.batch(&idx, Some((&aug, 9, 1))).unwrap();
    let (c, _) = train.batch(&idx, Some((&aug, 9, 2))).unwrap();
    assert_eq!(l0, l1);
    assert_eq!(l1, l2);
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
    assert_ne!(a.data(), plain.data());
}

#[test]
fn flip_only_mirrors_columns() {
    let ds = Dataset::<f64>::from_bytes(Split::Train, [1, 1, 3], 2, vec![10, 20, 30], vec![1]).unwrap();
    let aug = Augment { pad: 0, flip: true };
    let plain = ds.batch(&[0], None).unwrap().0.data().to_vec();
    let mut mirrored = plain.clone();
    mirrored.reverse();
    for epoch in 0..16 {
        let x = ds.batch(&[0], Some((&aug, 0, epoch))).unwrap().0.data().to_vec();
        assert!(x == plain || x == mirrored);
    }
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(50, 1, 0);
    let mut s = a.clone();
    s.sort_unstable();
    assert_eq!(s, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(50, 1, 0));
    assert_ne!(a, epoch_order(50, 1, 1));
}

#[test]
fn steps_round_up() {
    assert_eq!(steps_per_epoch(50_000, 128), 391);
    assert_eq!(steps_per_epoch(64, 64), 1);
    assert_eq!(steps_per_epoch(65, 64), 2);
}
