//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use wvad_core::synthdata::{generate, Dataset, SynthConfig};
use wvad_core::tensor_core::Tensor;
use wvad_core::trainer::{train_step, TrainConfig, TrainState};
use wvad_core::Result;

/// A small dataset for fast end-to-end runs: 8/6 training videos of 16
/// snippets with 8 features.
pub fn tiny_dataset(seed: u64) -> Dataset {
    generate(&SynthConfig {
        n_normal_train: 8,
        n_abnormal_train: 6,
        n_normal_test: 3,
        n_abnormal_test: 3,
        snippets: 16,
        frames_per_snippet: 2,
        input_dim: 8,
        region_len_range: [3, 6],
        seed,
        ..SynthConfig::default()
    })
    .expect("valid config")
}

pub fn tiny_config(epochs: u32) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_normal: 4,
        batch_abnormal: 3,
        mining_warmup_epochs: 1,
        ..TrainConfig::default()
    };
    cfg.encoder.snippets = 16;
    cfg.encoder.input_dim = 8;
    cfg.encoder.model_dim = 8;
    cfg.encoder.heads = 2;
    cfg
}

/// `l_total` before each of `steps` updates on one fixed batch holding the
/// first `per_class` normal and abnormal training videos.
pub fn overfit_losses(dataset: &Dataset, cfg: &TrainConfig, per_class: usize, steps: usize) -> Result<Vec<f64>> {
    let train: Vec<_> = dataset
        .videos
        .iter()
        .filter(|v| v.record.split == wvad_core::synthdata::Split::Train)
        .collect();
    let batch: Vec<_> = train
        .iter()
        .filter(|v| !v.is_abnormal())
        .take(per_class)
        .chain(train.iter().filter(|v| v.is_abnormal()).take(per_class))
        .collect();
    let features: Vec<&Tensor> = batch.iter().map(|v| &v.features).collect();
    let labels: Vec<bool> = batch.iter().map(|v| v.is_abnormal()).collect();
    let mut state = TrainState::new(cfg)?;
    (0..steps)
        .map(|_| Ok(train_step(&mut state, &features, &labels, cfg, true, None)?.loss.total))
        .collect()
}

/// Fraction of consecutive pairs that strictly decrease.
pub fn decreasing_fraction(losses: &[f64]) -> f64 {
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    down as f64 / (losses.len() - 1) as f64
}
