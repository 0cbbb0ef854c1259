use std::fs;

use cpriv_core::checkpoint::{load_classifier, save_classifier};
use cpriv_core::data::{
    export_dataset, generate_dataset, import_dataset, read_tds1, write_tds1, DatasetSpec, Split, TDS1_MAGIC,
};
use cpriv_core::export::{
    export_sanitizer, import_sanitizer, import_sanitizer_for, metadata_path, read_bundle, BundleMetadata,
    SanitizerBundle, PSF1_MAGIC,
};
use cpriv_core::models::{Classifier, SanitizerKind, SanitizerModel, UnetS};
use cpriv_core::nn::Tensor;
use cpriv_core::Error;

fn spec() -> DatasetSpec {
    DatasetSpec {
        train_size: 64,
        test_size: 48,
        ..DatasetSpec::default()
    }
}

#[test]
fn exported_sanitizer_reproduces_outputs_on_a_dataset() {
    let spec = spec();
    let (_, test) = generate_dataset(&spec).unwrap();
    let model = SanitizerModel::deterministic(UnetS::new(spec.image_shape, 21));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("san.psf1");
    let meta = BundleMetadata {
        alpha: Some(0.5),
        mode: Some("adversarial".into()),
        seed: Some(21),
        ..BundleMetadata::default()
    };
    export_sanitizer(&model, meta, &path).unwrap();

    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes[..4], PSF1_MAGIC);
    assert!(metadata_path(&path).exists());

    let back = import_sanitizer_for(&path, spec.image_shape).unwrap();
    let bundle = read_bundle(&path).unwrap();
    assert_eq!(bundle.metadata.alpha, Some(0.5));
    assert!(!bundle.metadata.stochastic);

    let idx: Vec<usize> = (0..test.len()).collect();
    let x = test.batch(&idx);
    let original = model.apply_stage(&x).unwrap();
    let reloaded = back.apply_stage(&x).unwrap();
    let interpreted = bundle.forward(&x).unwrap();
    let max_diff = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max)
    };
    assert_eq!(max_diff(&original, &reloaded), 0.0);
    assert!(max_diff(&original, &interpreted) < 1e-5);
}

#[test]
fn stochastic_bundles_record_their_kind() {
    let spec = spec();
    let renderer = cpriv_core::data::Renderer::new(&spec).unwrap();
    let model = SanitizerModel::new(SanitizerKind::Stochastic, &renderer, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stoch.psf1");
    export_sanitizer(&model, BundleMetadata::default(), &path).unwrap();
    let back = import_sanitizer(&path).unwrap();
    assert_eq!(back.kind, SanitizerKind::Stochastic);
    assert_eq!(back.param_hash(), model.param_hash());
}

#[test]
fn shape_and_corruption_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.psf1");
    export_sanitizer(
        &SanitizerModel::deterministic(UnetS::new((3, 16, 16), 1)),
        BundleMetadata::default(),
        &path,
    )
    .unwrap();
    assert!(matches!(import_sanitizer_for(&path, (3, 32, 32)), Err(Error::Shape { .. })));

    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    assert!(matches!(
        SanitizerBundle::decode(&bytes),
        Err(Error::Format { field: "checksum", .. })
    ));
    assert!(matches!(
        SanitizerBundle::decode(b"PSF2....."),
        Err(Error::Format { field: "magic", .. })
    ));
}

#[test]
fn dataset_directories_round_trip() {
    let spec = spec();
    let (train, test) = generate_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (split, data) in [(Split::Train, &train), (Split::Test, &test)] {
        let d = dir.path().join(split.name());
        export_dataset(&d, &spec, split, data).unwrap();
        let (spec_back, back) = import_dataset(&d).unwrap();
        assert_eq!(spec_back, spec);
        assert_eq!(&back, data);
    }

    let mut buf = Vec::new();
    write_tds1(&mut buf, &test).unwrap();
    assert_eq!(&buf[..4], TDS1_MAGIC);
    let (c, h, w) = spec.image_shape;
    assert_eq!(buf.len(), 4 + 4 + 6 + test.len() * (c * h * w * 4 + 2 + 1));
    let back = read_tds1(&mut buf.as_slice()).unwrap();
    for (a, b) in back.samples.iter().zip(&test.samples) {
        assert_eq!(a.image, b.image);
        assert_eq!((a.utility_label, a.privacy_label), (b.utility_label, b.privacy_label));
    }
    assert!(read_tds1(&mut &buf[..buf.len() - 1]).is_err());
}

#[test]
fn classifier_checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.ckpt");
    let model = Classifier::new((3, 32, 32), 16, 8);
    save_classifier(&model, &path).unwrap();
    let back = load_classifier(&path).unwrap();
    assert_eq!(back.param_hash(), model.param_hash());
    let x = Tensor::from_vec([1, 3, 32, 32], vec![0.3; 3 * 32 * 32]);
    assert_eq!(back.forward(&x).unwrap(), model.forward(&x).unwrap());
}
