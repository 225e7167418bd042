//! Contrastive snippet mining.
//!
//! Abnormal videos: snippets are binarised by a score threshold; the boundary
//! snippets of every predicted-abnormal run (prediction minus its erosion) and
//! the predicted-normal snippets inside majority-abnormal windows are hard
//! abnormal, and the top-k snippets not already hard are easy abnormal.
//! Normal videos: the top-k snippets are hard normal and the bottom-k easy
//! normal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::top_k_indices;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// Snippets scoring strictly above this are predicted abnormal.
    pub threshold: f64,
    /// Erosion structuring-element width (odd).
    pub erosion_width: usize,
    /// Pseudo-abnormal window length `K`.
    pub window: usize,
    /// Minimum predicted-abnormal count `R` that flags a window.
    pub min_abnormal: usize,
    pub k_hard_normal: usize,
    pub k_easy: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            threshold: 0.5,
            erosion_width: 3,
            window: 5,
            min_abnormal: 3,
            k_hard_normal: 3,
            k_easy: 3,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self, snippets: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "mining threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if self.erosion_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "erosion width must be odd, got {}",
                self.erosion_width
            )));
        }
        if self.min_abnormal == 0 || self.min_abnormal > self.window || self.window > snippets {
            return Err(Error::Config(format!(
                "need 1 <= R <= K <= T, got R={} K={} T={snippets}",
                self.min_abnormal, self.window
            )));
        }
        for (name, k) in [("k_hard_normal", self.k_hard_normal), ("k_easy", self.k_easy)] {
            if k == 0 || k > snippets {
                return Err(Error::Config(format!("{name} must be in 1..={snippets}, got {k}")));
            }
        }
        Ok(())
    }
}

/// `ŷ(t) = ỹ(t) > ε`.
pub fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

fn prefix_counts(pred: &[bool]) -> Vec<usize> {
    let mut prefix = Vec::with_capacity(pred.len() + 1);
    prefix.push(0);
    for &p in pred {
        prefix.push(prefix.last().unwrap() + usize::from(p));
    }
    prefix
}

/// Binary erosion with a centred window of `width` and replicate padding.
pub fn erode(pred: &[bool], width: usize) -> Vec<bool> {
    let n = pred.len();
    let half = width / 2;
    let prefix = prefix_counts(pred);
    // Replicate padding only repeats the boundary value, so the padded window
    // is all ones exactly when its clipped part is.
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(n - 1);
            prefix[hi + 1] - prefix[lo] == hi - lo + 1
        })
        .collect()
}

/// Predicted-abnormal snippets removed by erosion: the run boundaries.
pub fn temporal_edges(pred: &[bool], eroded: &[bool]) -> Vec<usize> {
    pred.iter()
        .zip(eroded)
        .enumerate()
        .filter_map(|(t, (&p, &e))| (p && !e).then_some(t))
        .collect()
}

/// Predicted-normal snippets inside any length-`window` stretch holding at
/// least `min_abnormal` predicted-abnormal snippets.
pub fn missed_pseudo_abnormal(pred: &[bool], window: usize, min_abnormal: usize) -> Vec<usize> {
    let n = pred.len();
    if window == 0 || window > n {
        return Vec::new();
    }
    let prefix = prefix_counts(pred);
    // coverage[t] > 0 iff t lies in some flagged window
    let mut delta = vec![0i64; n + 1];
    for start in 0..=n - window {
        if prefix[start + window] - prefix[start] >= min_abnormal {
            delta[start] += 1;
            delta[start + window] -= 1;
        }
    }
    let mut coverage = 0;
    let mut out = Vec::new();
    for t in 0..n {
        coverage += delta[t];
        if coverage > 0 && !pred[t] {
            out.push(t);
        }
    }
    out
}

/// Temporal edges together with missed pseudo-abnormal snippets, sorted.
pub fn mine_hard_abnormal(scores: &[f64], cfg: &MiningConfig) -> Vec<usize> {
    let pred = threshold_predictions(scores, cfg.threshold);
    let eroded = erode(&pred, cfg.erosion_width);
    let mut hard = temporal_edges(&pred, &eroded);
    hard.extend(missed_pseudo_abnormal(&pred, cfg.window, cfg.min_abnormal));
    hard.sort_unstable();
    hard.dedup();
    hard
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k must be in 1..={n}, got {k}")));
    }
    Ok(())
}

/// Indices of the `k` highest scores (ties to the lowest index), sorted.
pub fn mine_hard_normal(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, scores.len())?;
    let mut idx = top_k_indices(scores, k);
    idx.sort_unstable();
    Ok(idx)
}

/// Easy snippets: for abnormal videos the top-`k` indices not in
/// `hard_abnormal`; for normal videos the bottom-`k` indices. Sorted.
pub fn mine_easy(scores: &[f64], abnormal: bool, k: usize, hard_abnormal: &[usize]) -> Result<Vec<usize>> {
    check_k(k, scores.len())?;
    let mut idx = if abnormal {
        top_k_indices(scores, k)
            .into_iter()
            .filter(|i| !hard_abnormal.contains(i))
            .collect()
    } else {
        let mut all: Vec<usize> = (0..scores.len()).collect();
        all.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        all.truncate(k);
        all
    };
    idx.sort_unstable();
    Ok(idx)
}

/// A snippet `t` of the `video`-th video in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SnippetRef {
    pub video: usize,
    pub t: usize,
}

/// Hard/easy abnormal/normal snippet sets for one batch, each sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedSets {
    pub hard_abnormal: Vec<SnippetRef>,
    pub easy_abnormal: Vec<SnippetRef>,
    pub hard_normal: Vec<SnippetRef>,
    pub easy_normal: Vec<SnippetRef>,
}

impl MinedSets {
    pub fn is_empty(&self) -> bool {
        self.hard_abnormal.is_empty()
            && self.easy_abnormal.is_empty()
            && self.hard_normal.is_empty()
            && self.easy_normal.is_empty()
    }

    /// `(set name, members)` in the canonical HA, EA, HN, EN order.
    pub fn named(&self) -> [(&'static str, &[SnippetRef]); 4] {
        [
            ("HA", &self.hard_abnormal),
            ("EA", &self.easy_abnormal),
            ("HN", &self.hard_normal),
            ("EN", &self.easy_normal),
        ]
    }
}

/// Per-video mining result.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VideoMining {
    pub hard: Vec<usize>,
    pub easy: Vec<usize>,
}

pub fn mine_video(scores: &[f64], abnormal: bool, cfg: &MiningConfig) -> Result<VideoMining> {
    if abnormal {
        let hard = mine_hard_abnormal(scores, cfg);
        let easy = mine_easy(scores, true, cfg.k_easy, &hard)?;
        Ok(VideoMining { hard, easy })
    } else {
        Ok(VideoMining {
            hard: mine_hard_normal(scores, cfg.k_hard_normal)?,
            easy: mine_easy(scores, false, cfg.k_easy, &[])?,
        })
    }
}

/// Mines every video of a batch. `videos[i]` is `(scores, is_abnormal)`.
pub fn mine_batch<'a, I>(videos: I, cfg: &MiningConfig) -> Result<MinedSets>
where
    I: IntoIterator<Item = (&'a [f64], bool)>,
{
    let mut sets = MinedSets::default();
    for (video, (scores, abnormal)) in videos.into_iter().enumerate() {
        let m = mine_video(scores, abnormal, cfg)?;
        let refs = |ts: Vec<usize>| ts.into_iter().map(move |t| SnippetRef { video, t });
        if abnormal {
            sets.hard_abnormal.extend(refs(m.hard));
            sets.easy_abnormal.extend(refs(m.easy));
        } else {
            sets.hard_normal.extend(refs(m.hard));
            sets.easy_normal.extend(refs(m.easy));
        }
    }
    Ok(sets)
}
