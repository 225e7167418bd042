//! The four-configuration component ablation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::evaluate;
use crate::synthdata::Dataset;
use crate::trainer::{train, TrainConfig, TrainOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Top-k ranking and regularisation on a linear snippet head over raw features.
    A,
    /// Adds the convolutional transformer encoder.
    B,
    /// Adds the video-level classifier.
    C,
    /// Adds the contrastive loss: the full model.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    /// `base` restricted to this variant's components.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let w = &mut cfg.loss.weights;
        match self {
            Variant::A => {
                cfg.encoder.use_transformer = false;
                w.video = 0.0;
                w.contrastive = 0.0;
            }
            Variant::B => {
                w.video = 0.0;
                w.contrastive = 0.0;
            }
            Variant::C => w.contrastive = 0.0,
            Variant::D => {}
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: Variant,
    pub seed: u64,
    pub auc: f64,
    pub ap: f64,
}

/// Trains and evaluates `variant` once per seed.
pub fn run_variant(dataset: &Dataset, base: &TrainConfig, variant: Variant, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                ..variant.configure(base)
            };
            let out = train(dataset, &cfg, &TrainOutput::default())?;
            let report = evaluate(&out.state.params, dataset)?;
            Ok(AblationRow {
                config: variant,
                seed,
                auc: report.auc,
                ap: report.ap,
            })
        })
        .collect()
}

/// Rows for every seed of each variant, variant-major.
pub fn run_ablation(dataset: &Dataset, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4 * seeds.len());
    for v in Variant::ALL {
        rows.extend(run_variant(dataset, base, v, seeds)?);
    }
    Ok(rows)
}

/// Mean `(AUC, AP)` of one variant's rows.
pub fn mean_metrics(rows: &[AblationRow], variant: Variant) -> Option<(f64, f64)> {
    let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.config == variant).collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    Some((
        sel.iter().map(|r| r.auc).sum::<f64>() / n,
        sel.iter().map(|r| r.ap).sum::<f64>() / n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_switch_components() {
        let base = TrainConfig::default();
        let a = Variant::A.configure(&base);
        assert!(!a.encoder.use_transformer);
        assert_eq!(a.loss.weights.video, 0.0);
        assert_eq!(a.loss.weights.contrastive, 0.0);
        let b = Variant::B.configure(&base);
        assert!(b.encoder.use_transformer);
        assert_eq!(b.loss.weights.video, 0.0);
        let c = Variant::C.configure(&base);
        assert_eq!(c.loss.weights.video, 1.0);
        assert_eq!(c.loss.weights.contrastive, 0.0);
        assert_eq!(Variant::D.configure(&base), base);
        for v in Variant::ALL {
            v.configure(&base).validate().unwrap();
        }
    }
}
