use csou::dataset::{generate_records, DatasetConfig};
use csou::net::{NetConfig, Network};
use csou::pipeline;
use csou::train::{train, TrainConfig};

#[test]
fn smoothed_loss_decreases_on_a_small_set() {
    let data_cfg = DatasetConfig {
        count: 200,
        seed: 5,
        ..DatasetConfig::default()
    };
    let records = generate_records(&data_cfg).unwrap();
    let data = pipeline::examples(&records, &data_cfg.scene).unwrap();
    let mut net = Network::new(NetConfig::for_scene(&data_cfg.scene), 5).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let rows = train(&mut net, &data, &cfg, |row, _| {
        seen += 1;
        assert_eq!(row.epoch, seen);
        Ok(())
    })
    .unwrap();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows.last().unwrap().step, 20 * 200u64.div_ceil(32));
    let windows: Vec<f64> = rows
        .chunks(5)
        .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "smoothed loss rose: {windows:?}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data_cfg = DatasetConfig {
        count: 16,
        seed: 6,
        ..DatasetConfig::default()
    };
    let records = generate_records(&data_cfg).unwrap();
    let data = pipeline::examples(&records, &data_cfg.scene).unwrap();
    let mut net = Network::new(NetConfig::for_scene(&data_cfg.scene), 6).unwrap();
    let before = net.clone();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 0.0,
        batch_size: 8,
        seed: 6,
        ..TrainConfig::default()
    };
    let rows = train(&mut net, &data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(net, before);
    assert!(rows.iter().all(|r| r.loss == rows[0].loss));
}
