use pear::pipeline::{pretrain, run_from_warmup, run_variant, warmup, PretrainConfig, TrainConfig, Variant};
use pear::task::{generate_task, SyntheticTask, TaskData};
use pear::{Backbone, BackboneConfig};

fn tiny() -> (Backbone, TaskData, TrainConfig) {
    let task = SyntheticTask {
        seed: 3,
        input_dim: 4,
        seq_len: 6,
        classes: 3,
        pretrain_examples: 96,
        train_examples: 80,
        val_examples: 40,
        test_examples: 40,
        ..SyntheticTask::default()
    };
    let data = generate_task(&task).unwrap();
    let config = BackboneConfig {
        model_dim: 8,
        heads: 2,
        input_dim: 4,
        seq_len: 6,
        classes: 3,
        ..BackboneConfig::default()
    };
    let backbone = pretrain(config, &data.pretrain, &PretrainConfig { epochs: 1, ..PretrainConfig::default() }).unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 2,
        total_epochs: 5,
        batch_size: 16,
        adapter: pear::AdapterConfig { rank: 2, scale: 1.0 },
        ..TrainConfig::default()
    };
    (backbone, data, cfg)
}

#[test]
fn identical_config_gives_identical_metrics() {
    let (backbone, data, cfg) = tiny();
    for v in [Variant::Pear, Variant::VanillaPrune] {
        let mut a = run_variant(v, &backbone, &data, &cfg).unwrap();
        let mut b = run_variant(v, &backbone, &data, &cfg).unwrap();
        a.wall_clock_seconds = 0.0;
        b.wall_clock_seconds = 0.0;
        assert_eq!(a, b);
    }
}

#[test]
fn importance_covers_every_warmup_step() {
    let (backbone, data, cfg) = tiny();
    let warm = warmup(&backbone, &data, &cfg).unwrap();
    assert_eq!(warm.report.steps_accumulated(), cfg.warmup_epochs * cfg.steps_per_epoch(80));
    assert_eq!(warm.bank.owned_count(), warm.bank.len());
    assert_eq!(warm.train_loss.len(), cfg.warmup_epochs);
}

#[test]
fn backbone_stays_frozen_and_budget_holds() {
    let (backbone, data, cfg) = tiny();
    let warm = warmup(&backbone, &data, &cfg).unwrap();
    let n = warm.bank.len();
    let pair = warm.bank.signature().pair_params();
    for v in Variant::ALL {
        let (metrics, model) = run_from_warmup(v, &warm, &backbone, &data, &cfg).unwrap();
        assert_eq!(model.backbone, backbone, "{v:?} moved the backbone");
        assert_eq!(metrics.train_loss.len(), cfg.total_epochs);
        let (owned, adapted) = match v {
            Variant::FullAdapters => (n, n),
            Variant::VanillaPrune => (n / 2, n / 2),
            _ => (n / 2, n),
        };
        assert_eq!(metrics.trainable_params, owned * pair, "{v:?}");
        assert_eq!(metrics.positions_adapted, adapted, "{v:?}");
        assert!((0.0..=1.0).contains(&metrics.test_accuracy));
    }
}

#[test]
fn invalid_epoch_split_is_rejected() {
    let (backbone, data, cfg) = tiny();
    let bad = TrainConfig { warmup_epochs: 5, ..cfg };
    assert!(warmup(&backbone, &data, &bad).is_err());
}
