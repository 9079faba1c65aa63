use std::fs;

use csou::dataset::{generate_dataset, read_all, DatasetConfig, DatasetReader};
use csou::recon::{read_recons, write_recons};
use csou::scene::ForwardModel;
use csou::Error;

fn small() -> DatasetConfig {
    DatasetConfig {
        count: 25,
        seed: 3,
        ..DatasetConfig::default()
    }
}

#[test]
fn written_records_read_back_at_f32_precision() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let files = generate_dataset(&cfg, dir.path()).unwrap();
    let (header, records) = read_all(&files.data).unwrap();
    assert_eq!(header.count, 25);
    assert_eq!(header.scene_config().rows, cfg.scene.rows);
    assert_eq!(records.len(), 25);
    let expected = csou::dataset::generate_records(&cfg).unwrap();
    for (a, b) in records.iter().zip(&expected) {
        assert_eq!(a.scene.len(), b.scene.len());
        for (u, v) in a.scene.targets.iter().zip(&b.scene.targets) {
            assert_eq!(u.x, u.x as f32 as f64);
            assert_eq!(u.x, v.x as f32 as f64);
            assert_eq!(u.y, v.y as f32 as f64);
            assert_eq!(u.s, v.s as f32 as f64);
        }
        for (u, v) in a
            .measurement
            .as_slice()
            .iter()
            .zip(b.measurement.as_slice())
        {
            assert_eq!(*u, *v as f32 as f64);
        }
    }
    let csv = fs::read_to_string(&files.targets_csv).unwrap();
    let total: usize = records.iter().map(|r| r.scene.len()).sum();
    assert_eq!(csv.lines().count(), total + 1);
    assert!(csv.starts_with("sample_id,x,y,s\n"));
    let manifest = fs::read_to_string(&files.manifest).unwrap();
    assert!(manifest.contains("count = 25"));
}

#[test]
fn noiseless_measurements_equal_the_forward_model() {
    let cfg = DatasetConfig {
        count: 1,
        k_min: 1,
        k_max: 1,
        ..small()
    };
    let mut noiseless = cfg.clone();
    noiseless.scene.noise_sigma = 0.0;
    let rec = &csou::dataset::generate_records(&noiseless).unwrap()[0];
    let model = ForwardModel::new(noiseless.scene.clone()).unwrap();
    let clean = model.observe(&rec.scene).unwrap();
    let rounded: Vec<f64> = clean.as_slice().iter().map(|v| *v as f32 as f64).collect();
    assert_eq!(rounded, rec.measurement.as_slice());
}

#[test]
fn corrupted_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let files = generate_dataset(&small(), dir.path()).unwrap();
    let bytes = fs::read(&files.data).unwrap();
    let path = dir.path().join("bad.bin");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    fs::write(&path, &magic).unwrap();
    assert!(matches!(
        DatasetReader::open(&path),
        Err(Error::BadMagic { .. })
    ));

    let mut version = bytes.clone();
    version[4] = 99;
    fs::write(&path, &version).unwrap();
    assert!(matches!(
        DatasetReader::open(&path),
        Err(Error::VersionMismatch { found: 99, .. })
    ));

    fs::write(&path, &bytes[..10]).unwrap();
    assert!(matches!(
        DatasetReader::open(&path),
        Err(Error::TruncatedHeader { .. })
    ));

    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let results: Vec<_> = DatasetReader::open(&path).unwrap().collect();
    assert_eq!(results.len(), 25);
    assert!(results[..24].iter().all(|r| r.is_ok()));
    assert!(matches!(
        results[24],
        Err(Error::TruncatedRecord { index: 24, .. })
    ));
    assert!(read_all(&path).is_err());

    let missing = dir.path().join("missing.bin");
    assert!(matches!(
        DatasetReader::open(&missing),
        Err(Error::Io { .. })
    ));
}

#[test]
fn reconstructions_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let records = csou::dataset::generate_records(&cfg).unwrap();
    let grids: Vec<_> = records
        .iter()
        .map(|r| r.truth(&cfg.scene).unwrap())
        .collect();
    let path = dir.path().join("r.recon.bin");
    write_recons(&path, &grids).unwrap();
    assert_eq!(read_recons(&path).unwrap(), grids);

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(
        read_recons(&path),
        Err(Error::TruncatedRecord { .. })
    ));
    fs::write(&path, b"NOPE").unwrap();
    assert!(matches!(read_recons(&path), Err(Error::BadMagic { .. })));
}
