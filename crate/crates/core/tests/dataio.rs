use std::fs;

use rcad::dataio::{generate_synthetic, load_dataset, load_map, resize_bilinear, save_map, write_dataset, SynthSpec};
use rcad::tensor::Tensor;
use rcad::Error;

fn small_spec() -> SynthSpec {
    SynthSpec {
        resolution: 32,
        train_count: 3,
        test_count: 4,
        ..SynthSpec::default()
    }
}

#[test]
fn score_maps_round_trip_to_sixteen_bits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maps/m.png");
    let data: Vec<f32> = (0..48).map(|i| i as f32 / 47.0).collect();
    let map = Tensor::new(&[1, 1, 6, 8], data).unwrap();
    save_map(&map, &path).unwrap();
    let back = load_map(&path).unwrap();
    assert_eq!(back.shape(), map.shape());
    for (a, b) in map.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
    }
}

#[test]
fn synthetic_dataset_round_trips_through_the_folder_layout() {
    let index = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&index, dir.path()).unwrap();
    let loaded = load_dataset(dir.path(), 32).unwrap();
    let names: Vec<_> = loaded.categories.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["checker", "stripes"]);
    for cat in &loaded.categories {
        let orig = index.categories.iter().find(|c| c.name == cat.name).unwrap();
        assert_eq!(cat.train.len(), 3);
        assert_eq!(cat.test.len(), 4);
        for s in cat.train.iter().chain(&cat.test) {
            let o = orig.train.iter().chain(&orig.test).find(|o| o.id == s.id).unwrap();
            assert_eq!(s.label, o.label);
            assert_eq!(s.mask, o.mask);
            for (a, b) in s.image.data().iter().zip(o.image.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn single_category_root_is_accepted() {
    let index = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&index, dir.path()).unwrap();
    let loaded = load_dataset(&dir.path().join("stripes"), 16).unwrap();
    assert_eq!(loaded.categories.len(), 1);
    let anomalous = loaded.categories[0].test.iter().find(|s| s.label).unwrap();
    assert_eq!(anomalous.mask.as_ref().unwrap().shape(), &[1, 16, 16]);
    assert_eq!(loaded.train_images()[0].shape(), &[3, 16, 16]);
}

#[test]
fn missing_ground_truth_is_an_index_error() {
    let index = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&index, dir.path()).unwrap();
    fs::remove_dir_all(dir.path().join("checker/ground_truth")).unwrap();
    assert!(matches!(load_dataset(dir.path(), 32), Err(Error::Index(_))));
}

#[test]
fn empty_or_missing_roots_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), 32), Err(Error::Index(_))));
    assert!(matches!(load_dataset(&dir.path().join("nope"), 32), Err(Error::Index(_))));
}

#[test]
fn corrupt_png_is_a_decode_error() {
    let index = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&index, dir.path()).unwrap();
    fs::write(dir.path().join("stripes/train/good/000.png"), b"not a png").unwrap();
    assert!(matches!(load_dataset(dir.path(), 32), Err(Error::Decode { .. })));
}

#[test]
fn synthetic_generation_is_deterministic_and_labelled() {
    let a = generate_synthetic(&small_spec()).unwrap();
    let b = generate_synthetic(&small_spec()).unwrap();
    assert_eq!(a, b);
    for (_, s) in a.test_samples() {
        assert_eq!(s.label, s.mask.is_some());
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if let Some(m) = &s.mask {
            assert!(m.data().iter().filter(|&&v| v == 1.0).count() >= 8);
        }
    }
}

#[test]
fn bilinear_resize_keeps_constants_and_identity() {
    let c = Tensor::full(&[3, 10, 14], 0.25);
    let r = resize_bilinear(&c, 7, 5).unwrap();
    assert_eq!(r.shape(), &[3, 7, 5]);
    assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    let x = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
    assert_eq!(resize_bilinear(&x, 2, 2).unwrap(), x);
}
