//! End-to-end behaviour of data generation, training and evaluation.

mod common;

use std::fs;

use wvad_core::checkpoint::load_checkpoint;
use wvad_core::encoder::ModelParams;
use wvad_core::eval::evaluate;
use wvad_core::metrics::roc_auc;
use wvad_core::synthdata::{generate, SynthConfig};
use wvad_core::trainer::TrainConfig;
use wvad_core::trainer::{read_log, train, train_from, TrainOutput, TrainState, CHECKPOINT_FILE, LOG_FILE};

use common::{decreasing_fraction, overfit_losses, tiny_config, tiny_dataset};

/// Snippet score = mean of the coordinates carrying the anomaly shift.
fn probe_auc(cfg: &SynthConfig) -> f64 {
    let ds = generate(cfg).unwrap();
    let quarter = cfg.input_dim / 4;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for v in &ds.videos {
        for t in 0..cfg.snippets {
            scores.push(v.features.row(t)[..quarter].iter().sum::<f64>() / quarter as f64);
            labels.push(v.snippet_labels[t]);
        }
    }
    roc_auc(&scores, &labels).unwrap()
}

#[test]
fn strong_shift_is_linearly_separable() {
    let auc = probe_auc(&SynthConfig {
        anomaly_shift: 6.0,
        subtle_fraction: 0.0,
        ..SynthConfig::default()
    });
    assert!(auc > 0.99, "probe AUC {auc}");
}

#[test]
fn untrained_models_score_near_chance_on_average() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig::default().encoder;
    let aucs: Vec<f64> = (0..40)
        .map(|seed| evaluate(&ModelParams::init(&cfg, seed).unwrap(), &ds).unwrap().auc)
        .collect();
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((0.3..=0.7).contains(&mean), "mean AUC {mean}");
}

#[test]
fn training_is_bitwise_deterministic() {
    let ds = tiny_dataset(1);
    let cfg = tiny_config(3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train(
            &ds,
            &cfg,
            &TrainOutput {
                dir: Some(d.path().into()),
                ..Default::default()
            },
        )
        .unwrap();
    }
    for file in [CHECKPOINT_FILE, LOG_FILE] {
        let a = fs::read(dirs[0].path().join(file)).unwrap();
        let b = fs::read(dirs[1].path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn seed_changes_the_trajectory() {
    let ds = tiny_dataset(1);
    let a = train(&ds, &tiny_config(1), &TrainOutput::default()).unwrap();
    let b = train(
        &ds,
        &TrainConfig {
            seed: 5,
            ..tiny_config(1)
        },
        &TrainOutput::default(),
    )
    .unwrap();
    assert_ne!(a.state.params, b.state.params);
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let ds = tiny_dataset(2);
    let full = tempfile::tempdir().unwrap();
    let part = tempfile::tempdir().unwrap();
    let out = |d: &tempfile::TempDir| TrainOutput {
        dir: Some(d.path().into()),
        ..Default::default()
    };
    train(&ds, &tiny_config(4), &out(&full)).unwrap();
    train(&ds, &tiny_config(2), &out(&part)).unwrap();

    let ck = load_checkpoint(&part.path().join(CHECKPOINT_FILE)).unwrap();
    let state = TrainState::from_checkpoint(ck).unwrap();
    assert_eq!(state.epoch, 2);
    let previous_log = read_log(&part.path().join(LOG_FILE)).unwrap();
    train_from(
        &ds,
        &tiny_config(4),
        state,
        &TrainOutput {
            dir: Some(part.path().into()),
            previous_log,
        },
    )
    .unwrap();

    for file in [CHECKPOINT_FILE, LOG_FILE] {
        let a = fs::read(full.path().join(file)).unwrap();
        let b = fs::read(part.path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn one_batch_is_overfit() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let losses = overfit_losses(&ds, &TrainConfig::default(), 2, 101).unwrap();
    let frac = decreasing_fraction(&losses);
    let ratio = losses[100] / losses[0];
    assert!(frac >= 0.9, "decreasing in {frac} of steps");
    assert!(ratio < 0.25, "final / initial = {ratio}");
}

#[test]
fn short_training_beats_chance() {
    let ds = tiny_dataset(3);
    let out = train(&ds, &tiny_config(15), &TrainOutput::default()).unwrap();
    assert_eq!(out.log.len(), 15 * 2);
    assert!(out.log.iter().all(|r| r.l_total.is_finite()));
    assert!(out.log.iter().any(|r| r.hard_normal > 0));
    let report = evaluate(&out.state.params, &ds).unwrap();
    assert!(report.auc > 0.7, "AUC {}", report.auc);
}
