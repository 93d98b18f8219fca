use catch_core::adapters::{init_adapter_pair, AdapterConfig, AdapterPair};
use catch_core::backbone::{Backbone, BackboneConfig};
use catch_core::synthdata::{gen_dataset, DomainSpec, SplitRatios, Splits};
use catch_core::hooks::HookEngine;
use catch_core::tensor::{AdamW, AdamWConfig, Gradients, ParamSet};
use catch_core::trainer::{adapter_loss, adapter_step, frozen_checksums, train_adapter_pair, TrainConfig, TrainLog};
use catch_core::Error;

fn setup() -> (Backbone, Splits) {
    let mut bb = Backbone::init(BackboneConfig {
        vision_layers: 4,
        decoder_layers: 2,
        ..BackboneConfig::default()
    })
    .unwrap();
    bb.freeze();
    let splits = gen_dataset(&DomainSpec::builtin_suite(), 40, SplitRatios { train: 0.6, val: 0.2, test: 0.2 }, 3).unwrap();
    (bb, splits)
}

fn pair(bb: &Backbone, domain: usize) -> AdapterPair {
    let cfg = AdapterConfig {
        prefix_len: 2,
        layers: vec![2, 4],
        ..AdapterConfig::default()
    };
    init_adapter_pair(DomainSpec::builtin_suite()[domain].id.clone(), &cfg, bb.config()).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        max_epochs: 3,
        early_stop_patience: 3,
        ..TrainConfig::default()
    }
}

fn run(bb: &Backbone, splits: &Splits, d: usize) -> (AdapterPair, TrainLog) {
    train_adapter_pair(bb, None, pair(bb, d), &splits.train.for_domain(d), &splits.val.for_domain(d), &cfg()).unwrap()
}

#[test]
fn unfrozen_backbone_is_a_contract_error() {
    let (mut bb, splits) = setup();
    bb.set_trainable(true);
    let p = pair(&bb, 0);
    let err = train_adapter_pair(&bb, None, p, &splits.train, &splits.val, &cfg()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn training_leaves_frozen_parameters_untouched() {
    let (bb, splits) = setup();
    let before = frozen_checksums(&bb, None);
    let other = pair(&bb, 1);
    let other_sum = other.checksum();
    let (trained, log) = run(&bb, &splits, 0);
    assert_eq!(frozen_checksums(&bb, None), before);
    assert_eq!(log.frozen_checksums, before);
    assert_eq!(other.checksum(), other_sum);
    // Epoch 0 is the initialisation, so restoring it must give the init back.
    assert_eq!(trained.checksum() == pair(&bb, 0).checksum(), log.best_epoch == 0);
}

#[test]
fn same_seed_same_log_and_weights() {
    let (bb, splits) = setup();
    let (a, la) = run(&bb, &splits, 2);
    let (b, lb) = run(&bb, &splits, 2);
    let bits = |l: &TrainLog| l.epochs.iter().map(|e| (e.train_loss.to_bits(), e.val_metric.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&la), bits(&lb));
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn best_epoch_holds_the_maximum_validation_metric() {
    let (bb, splits) = setup();
    for d in 0..4 {
        let (_, log) = run(&bb, &splits, d);
        assert!(log.epochs.len() <= cfg().max_epochs);
        let best = log.best_val_metric();
        let max = log.epochs.iter().map(|e| e.val_metric).fold(log.initial_val_metric, f64::max);
        assert_eq!(best, max);
        if log.best_epoch > 0 {
            assert_eq!(log.epochs[log.best_epoch - 1].val_metric, max);
        } else {
            assert_eq!(log.initial_val_metric, max);
        }
    }
}

#[test]
fn one_epoch_lowers_training_loss() {
    let (bb, splits) = setup();
    let train = splits.train.for_domain(0);
    let mut p = pair(&bb, 0);
    let start = adapter_loss(&bb, &p, &train).unwrap();
    let mut opt = AdamW::new(AdamWConfig::with_lr(1e-2));
    for batch in train.samples.chunks(8) {
        let mut engine = HookEngine::new(bb.sites());
        engine.install_pair(&p).unwrap();
        let mut grads = Gradients::default();
        for s in batch {
            grads.accumulate(&adapter_step(&bb, &engine, s, None).unwrap().1);
        }
        grads.scale(1.0 / batch.len() as f64);
        p.accumulate_grads(&grads);
        opt.step(&mut p).unwrap();
    }
    assert!(adapter_loss(&bb, &p, &train).unwrap() < start);
}
