//! Frame-level evaluation of a model on the test split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::metrics::{average_precision, roc_auc, snippet_to_frame_scores};
use crate::synthdata::{Dataset, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub video_id: String,
    pub frame: usize,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub frames: Vec<FrameRow>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!("AUC={:.6} AP={:.6}", self.auc, self.ap)
    }
}

/// Score of snippet `t` of one video; the leading columns are the `mine` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetRow {
    pub video_id: String,
    pub t: usize,
    pub score: f64,
    pub video_label: u8,
    pub split: Split,
}

/// Scores every snippet of every video in `split` (or all videos).
pub fn export_scores(params: &ModelParams, dataset: &Dataset, split: Option<Split>) -> Result<Vec<SnippetRow>> {
    let mut rows = Vec::new();
    for v in dataset
        .videos
        .iter()
        .filter(|v| split.is_none_or(|s| v.record.split == s))
    {
        let (scores, _) = params.score(&v.features)?;
        rows.extend(scores.into_iter().enumerate().map(|(t, score)| SnippetRow {
            video_id: v.record.id.clone(),
            t,
            score,
            video_label: v.record.video_label,
            split: v.record.split,
        }));
    }
    Ok(rows)
}

/// Scores the test split, expands snippet scores to frames and computes
/// frame-level ROC-AUC and AP over all test videos together.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<EvalReport> {
    let mut frames = Vec::new();
    for v in dataset.split(Split::Test) {
        let labels = v
            .frame_labels
            .as_ref()
            .ok_or_else(|| Error::Argument(format!("test video {} has no frame labels", v.record.id)))?;
        let (scores, _) = params.score(&v.features)?;
        let per_frame = snippet_to_frame_scores(&scores, v.record.num_frames)?;
        frames.extend(
            per_frame
                .into_iter()
                .zip(labels)
                .enumerate()
                .map(|(frame, (score, &label))| FrameRow {
                    video_id: v.record.id.clone(),
                    frame,
                    score,
                    label: u8::from(label),
                }),
        );
    }
    let scores: Vec<f64> = frames.iter().map(|f| f.score).collect();
    let labels: Vec<bool> = frames.iter().map(|f| f.label == 1).collect();
    Ok(EvalReport {
        auc: roc_auc(&scores, &labels)?,
        ap: average_precision(&scores, &labels)?,
        frames,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::format(path, 0, format!("{kind:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synthdata::{generate, SynthConfig};

    #[test]
    fn report_covers_every_test_frame() {
        let ds = generate(&SynthConfig {
            n_normal_train: 1,
            n_abnormal_train: 1,
            n_normal_test: 2,
            n_abnormal_test: 2,
            snippets: 8,
            frames_per_snippet: 3,
            input_dim: 4,
            region_len_range: [2, 3],
            ..SynthConfig::default()
        })
        .unwrap();
        let params = ModelParams::init(
            &EncoderConfig {
                snippets: 8,
                input_dim: 4,
                model_dim: 4,
                heads: 1,
                depth: 1,
                ..EncoderConfig::default()
            },
            0,
        )
        .unwrap();
        let r = evaluate(&params, &ds).unwrap();
        assert_eq!(r.frames.len(), 4 * 24);
        assert!((0.0..=1.0).contains(&r.auc));
        assert!(r.ap > 0.0 && r.ap <= 1.0);
        assert_eq!(evaluate(&params, &ds).unwrap(), r);
        assert!(r.summary().starts_with("AUC="));

        let rows = export_scores(&params, &ds, None).unwrap();
        assert_eq!(rows.len(), 6 * 8);
    }
}
