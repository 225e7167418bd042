//! Frame-level ROC-AUC and average precision.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Expands per-snippet scores to `num_frames` frames: frame `f` takes the
/// score of snippet `⌊f·T/num_frames⌋`.
pub fn snippet_to_frame_scores(snippet_scores: &[f64], num_frames: usize) -> Result<Vec<f64>> {
    let t_len = snippet_scores.len();
    if t_len == 0 || num_frames < t_len {
        return Err(Error::Argument(format!(
            "cannot spread {t_len} snippets over {num_frames} frames"
        )));
    }
    Ok((0..num_frames)
        .map(|f| snippet_scores[f * t_len / num_frames])
        .collect())
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Argument(format!("score {bad} is not comparable")));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, computed from exact pair counts.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC-AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk tie groups in ascending score order; `twice_wins` counts each
    // (pos, neg) pair as 2 for a win and 1 for a tie.
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Non-interpolated average precision: the mean over positives of the
/// precision at each positive's rank. Equal scores rank negatives first.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| labels[a].cmp(&labels[b])));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn frame_expansion() {
        let s: Vec<f64> = (0..32).map(f64::from).collect();
        let f = snippet_to_frame_scores(&s, 64).unwrap();
        for (i, v) in f.iter().enumerate() {
            assert_eq!(*v, (i / 2) as f64);
        }
        // frame 1 maps to snippet ⌊1·2/3⌋ = 0
        assert_eq!(snippet_to_frame_scores(&[0.1, 0.9], 3).unwrap(), vec![0.1, 0.1, 0.9]);
        assert_eq!(snippet_to_frame_scores(&[0.4; 3], 7).unwrap(), vec![0.4; 7]);
        assert!(matches!(snippet_to_frame_scores(&[0.4; 3], 2), Err(Error::Argument(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &labels(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.8, 0.4, 0.6, 0.2], &labels(&[1, 0, 0, 1])).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.5, 0.5], &labels(&[1, 0])).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.5, 0.6], &labels(&[1, 1])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &labels(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.2, 0.8], &labels(&[1, 0])).unwrap(), 0.5);
        let ap = average_precision(&[0.9, 0.3, 0.5], &labels(&[1, 1, 0])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(
            average_precision(&[0.5], &labels(&[0])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_ties_are_pessimistic() {
        // Negative ranked first among the tie: precision 1/2.
        assert_eq!(average_precision(&[0.5, 0.5], &labels(&[1, 0])).unwrap(), 0.5);
    }
}
