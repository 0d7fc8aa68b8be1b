use std::fs;
use std::time::Instant;

use vpu::data::{read_dataset, read_manifest, sha256_hex, write_dataset, Split};
use vpu::AppError;
use vpu_core::synth::generate_instance;

#[test]
fn write_then_read_equals_generator_output() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_dataset(dir.path(), 25, 9, Split::Test, 64).unwrap();
    assert_eq!(m.split, Split::Test);
    let (m2, samples) = read_dataset(dir.path()).unwrap();
    assert_eq!(m2, m);
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(*s, generate_instance(9 + i as u64).unwrap(), "instance {i}");
    }
}

#[test]
fn manifest_lists_derived_seeds_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let m = write_dataset(dir.path(), 500, 42, Split::Train, 64).unwrap();
    let rate = 500.0 / t.elapsed().as_secs_f64();
    assert!(rate >= 100.0, "generated {rate:.0} instances/s");
    assert_eq!(m.entries.len(), 500);
    for (i, e) in m.entries.iter().enumerate() {
        assert_eq!(e.seed, 42 + i as u64);
        assert_eq!(sha256_hex(&fs::read(dir.path().join(&e.mask)).unwrap()), e.mask_sha256);
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(json["version"], 1);
    assert_eq!(json["split"], "train");
    assert_eq!(json["seed"], 42);
    for key in ["image", "mask", "seed", "image_sha256", "mask_sha256"] {
        assert!(json["entries"][0].get(key).is_some(), "{key}");
    }
}

#[test]
fn generation_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), 10, 5, Split::Train, 64).unwrap();
    write_dataset(b.path(), 10, 5, Split::Train, 64).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 21);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn tampered_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_dataset(dir.path(), 3, 1, Split::Train, 64).unwrap();
    let mask = dir.path().join(&m.entries[1].mask);
    let mut bytes = fs::read(&mask).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&mask, bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, AppError::Corrupt(_)), "{err}");
    assert_eq!(err.exit_code(), 3);

    fs::remove_file(dir.path().join(&m.entries[0].image)).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(AppError::Io { .. })));
    fs::write(dir.path().join("manifest.json"), "{").unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(AppError::Corrupt(_))));
}

#[test]
fn tiny_sizes_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(write_dataset(dir.path(), 1, 0, Split::Train, 4).unwrap_err().exit_code(), 2);
}
