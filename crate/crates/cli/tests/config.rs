use invflow::harness::Preset;
use invflow::optim::LrSchedule;
use invflow::train::{ModelKind, TrainConfig};
use invflow_cli::{parse_train_config, train_config_to_toml};

/// Every key differs from both presets, so a dropped key would show up.
fn unusual() -> TrainConfig {
    TrainConfig {
        model: ModelKind::FlowG,
        lambda_i: 0.37,
        epochs: 11,
        batch_size: 17,
        lr: 2.5e-4,
        weight_decay: 3e-6,
        lr_schedule: LrSchedule::Constant,
        gate_warmup: 4,
        gate_weight: 1.25,
        gate_init_logit: -0.5,
        gate_lr_scale: 3.0,
        hsic_sigma: 0.7,
        prediction_draws: 9,
        seed: 12345,
        hidden: vec![7, 5, 3],
        flow_layers: 3,
        flow_k: 6,
        conditioner_hidden: 13,
        flow_feature_dim: 2,
        feature_dim: 5,
        wasserstein_weight: 0.5,
        n_train: 99,
    }
}

#[test]
fn config_round_trip_honors_every_key() {
    let cfg = unusual();
    let text = train_config_to_toml(&cfg).unwrap();
    for preset in [Preset::Desk, Preset::Full] {
        assert_eq!(parse_train_config(&text, None, preset).unwrap(), cfg);
    }
    let desk = TrainConfig::desk(ModelKind::FlowG);
    let full = TrainConfig::synthetic(ModelKind::FlowG);
    let line_count = text.lines().filter(|l| l.contains('=')).count();
    assert_eq!(line_count, 22, "{text}");
    // each key alone moves exactly that field away from the preset
    for line in text.lines().filter(|l| l.contains('=') && !l.starts_with("model")) {
        let one = parse_train_config(line, Some(ModelKind::FlowG), Preset::Desk).unwrap();
        assert_ne!(one, desk, "{line}");
        let one = parse_train_config(line, Some(ModelKind::FlowG), Preset::Full).unwrap();
        assert_ne!(one, full, "{line}");
    }
}
