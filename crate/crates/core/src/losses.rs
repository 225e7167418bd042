//! Training objective: contrastive + top-k ranking + video BCE +
//! smoothness/sparsity regularisation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::{MinedSets, SnippetRef};
use crate::tensor_core::{Tape, Tensor, Var};

/// Probabilities are clamped into `[LOG_CLAMP, 1 - LOG_CLAMP]` before `log`.
pub const LOG_CLAMP: f64 = 1e-7;

const NORMALIZE_EPS: f64 = 1e-12;

/// How abnormal and normal videos are paired in the ranking loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// i-th abnormal with i-th normal, cycling the shorter list.
    Matched,
    AllPairs,
}

/// Reduction over (anchor, positive) pairs in the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub contrastive: f64,
    pub snippet: f64,
    pub video: f64,
    pub regularisation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            contrastive: 1.0,
            snippet: 1.0,
            video: 1.0,
            regularisation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Snippets averaged by the top-k bag score.
    pub k: usize,
    /// Temporal smoothness weight.
    pub alpha: f64,
    /// Sparsity weight.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub weights: LossWeights,
    pub pairing: Pairing,
    pub contrastive_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            k: 3,
            alpha: 5e-4,
            beta: 5e-4,
            tau: 0.07,
            weights: LossWeights::default(),
            pairing: Pairing::Matched,
            contrastive_reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let w = &self.weights;
        if [w.contrastive, w.snippet, w.video, w.regularisation]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Values of every objective term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub snippet: f64,
    pub video: f64,
    pub regularisation: f64,
    pub contrastive: f64,
}

/// Binary cross-entropy between video scores and labels, averaged over the
/// batch.
pub fn loss_video(tape: &mut Tape, scores: &[Var], labels: &[bool]) -> Result<Var> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Argument(format!(
            "{} video scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(scores.len());
    for (&v, &y) in scores.iter().zip(labels) {
        let v = tape.clamp(v, LOG_CLAMP, 1.0 - LOG_CLAMP);
        let p = if y { v } else { tape.one_minus(v) };
        let lp = tape.log(p);
        terms.push(tape.sum(lp));
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, -1.0 / scores.len() as f64))
}

/// `max(0, 1 - g_k(abnormal) + g_k(normal))` summed over video pairs.
pub fn loss_snippet_topk(tape: &mut Tape, abnormal: &[Var], normal: &[Var], k: usize, pairing: Pairing) -> Result<Var> {
    if abnormal.is_empty() || normal.is_empty() {
        return Err(Error::Argument(
            "ranking loss needs at least one abnormal and one normal video".into(),
        ));
    }
    let ga: Vec<Var> = abnormal.iter().map(|&s| tape.topk_mean(s, k)).collect::<Result<_>>()?;
    let gn: Vec<Var> = normal.iter().map(|&s| tape.topk_mean(s, k)).collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = match pairing {
        Pairing::Matched => (0..ga.len().max(gn.len()))
            .map(|i| (i % ga.len(), i % gn.len()))
            .collect(),
        Pairing::AllPairs => (0..ga.len()).flat_map(|i| (0..gn.len()).map(move |j| (i, j))).collect(),
    };
    let mut hinges = Vec::with_capacity(pairs.len());
    for (i, j) in pairs {
        let gap = tape.sub(gn[j], ga[i])?;
        let margin = tape.add_scalar(gap, 1.0);
        hinges.push(tape.relu(margin));
    }
    tape.add_all(&hinges)
}

/// `α/T·Σ(ỹ(t) − ỹ(t−1))² + β/T·Σỹ(t)`, summed over videos.
pub fn loss_regularisation(tape: &mut Tape, scores: &[Var], alpha: f64, beta: f64) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::Argument("no score sequences".into()));
    }
    let mut terms = Vec::with_capacity(scores.len());
    for &s in scores {
        let t_len = tape.value(s).len();
        if t_len < 2 {
            return Err(Error::Argument(format!(
                "smoothness needs at least 2 snippets, got {t_len}"
            )));
        }
        let shape = tape.value(s).shape();
        if shape != [t_len, 1] {
            return Err(Error::Dimension(format!(
                "score sequences must be [T×1], got {shape:?}"
            )));
        }
        let next = tape.slice_rows(s, 1, t_len - 1)?;
        let prev = tape.slice_rows(s, 0, t_len - 1)?;
        let d = tape.sub(next, prev)?;
        let sq = tape.mul(d, d)?;
        let smooth = tape.sum(sq);
        let smooth = tape.scale(smooth, alpha / t_len as f64);
        let sparse = tape.sum(s);
        let sparse = tape.scale(sparse, beta / t_len as f64);
        terms.push(tape.add(smooth, sparse)?);
    }
    tape.add_all(&terms)
}

/// Stacks the feature rows named by `refs` (grouped per video, in order).
fn gather(tape: &mut Tape, features: &[Var], refs: &[SnippetRef]) -> Result<Option<Var>> {
    if refs.is_empty() {
        return Ok(None);
    }
    let mut by_video: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in refs {
        if r.video >= features.len() {
            return Err(Error::Argument(format!(
                "mined snippet refers to video {} but the batch has {}",
                r.video,
                features.len()
            )));
        }
        by_video.entry(r.video).or_default().push(r.t);
    }
    let parts = by_video
        .into_iter()
        .map(|(v, rows)| tape.gather_rows(features[v], &rows))
        .collect::<Result<Vec<_>>>()?;
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    Ok(Some(tape.l2_normalize_rows(stacked, NORMALIZE_EPS)))
}

/// One InfoNCE-style term: each anchor is pulled towards each positive
/// against all negatives. Inputs are L2-normalised row stacks.
fn contrastive_term(
    tape: &mut Tape,
    anchors: Option<Var>,
    positives: Option<Var>,
    negatives: Option<Var>,
    tau: f64,
    reduction: Reduction,
) -> Result<Option<Var>> {
    let (Some(a), Some(p)) = (anchors, positives) else {
        return Ok(None);
    };
    let pt = tape.transpose(p)?;
    let sim = tape.matmul(a, pt)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let mut denom = tape.exp(logits);
    if let Some(n) = negatives {
        let nt = tape.transpose(n)?;
        let neg = tape.matmul(a, nt)?;
        let neg = tape.scale(neg, 1.0 / tau);
        let neg = tape.exp(neg);
        let ones = tape.leaf(Tensor::full(&[tape.value(neg).cols(), 1], 1.0));
        let neg_sum = tape.matmul(neg, ones)?;
        denom = tape.add_col(denom, neg_sum)?;
    }
    let log_denom = tape.log(denom);
    let per_pair = tape.sub(log_denom, logits)?;
    let total = tape.sum(per_pair);
    Ok(Some(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => {
            let pairs = tape.value(per_pair).len();
            tape.scale(total, 1.0 / pairs as f64)
        }
    }))
}

/// Contrastive loss over mined sets: hard abnormal anchors with easy abnormal
/// positives against easy normal negatives, plus hard normal anchors with
/// easy normal positives against easy abnormal negatives. Empty anchor or
/// positive sets contribute zero.
pub fn loss_contrastive(
    tape: &mut Tape,
    mined: &MinedSets,
    features: &[Var],
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let ha = gather(tape, features, &mined.hard_abnormal)?;
    let ea = gather(tape, features, &mined.easy_abnormal)?;
    let hn = gather(tape, features, &mined.hard_normal)?;
    let en = gather(tape, features, &mined.easy_normal)?;
    let abn = contrastive_term(tape, ha, ea, en, tau, reduction)?;
    let nrm = contrastive_term(tape, hn, en, ea, tau, reduction)?;
    match (abn, nrm) {
        (Some(a), Some(n)) => tape.add(a, n),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Ok(tape.scalar(0.0)),
    }
}

/// Everything the objective needs from one batch forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    /// `[T×1]` snippet scores per video.
    pub snippet_scores: Vec<Var>,
    /// `[1×1]` video scores, absent for models without a video head.
    pub video_scores: Option<Vec<Var>>,
    /// `[T×D]` snippet features per video.
    pub features: Vec<Var>,
    pub labels: Vec<bool>,
}

/// Weighted sum of the four terms. Terms with zero weight are not evaluated
/// and report zero.
pub fn loss_total(
    tape: &mut Tape,
    out: &BatchOutputs,
    mined: &MinedSets,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let n_abn = out.labels.iter().filter(|&&y| y).count();
    if n_abn == 0 || n_abn == out.labels.len() {
        return Err(Error::Training(
            "a batch must contain both normal and abnormal videos".into(),
        ));
    }
    if out.snippet_scores.len() != out.labels.len() || out.features.len() != out.labels.len() {
        return Err(Error::Argument("batch outputs and labels differ in length".into()));
    }
    let w = &cfg.weights;
    let mut breakdown = LossBreakdown::default();
    let mut weighted = Vec::with_capacity(4);

    if w.contrastive != 0.0 {
        let l = loss_contrastive(tape, mined, &out.features, cfg.tau, cfg.contrastive_reduction)?;
        breakdown.contrastive = tape.value(l).item();
        weighted.push(tape.scale(l, w.contrastive));
    }
    if w.snippet != 0.0 {
        let (abn, nrm): (Vec<_>, Vec<_>) = out.snippet_scores.iter().zip(&out.labels).partition(|(_, &y)| y);
        let abn: Vec<Var> = abn.into_iter().map(|(&s, _)| s).collect();
        let nrm: Vec<Var> = nrm.into_iter().map(|(&s, _)| s).collect();
        let l = loss_snippet_topk(tape, &abn, &nrm, cfg.k, cfg.pairing)?;
        breakdown.snippet = tape.value(l).item();
        weighted.push(tape.scale(l, w.snippet));
    }
    if w.video != 0.0 {
        let scores = out
            .video_scores
            .as_ref()
            .ok_or_else(|| Error::Config("video loss weight is non-zero but the model has no video head".into()))?;
        let l = loss_video(tape, scores, &out.labels)?;
        breakdown.video = tape.value(l).item();
        weighted.push(tape.scale(l, w.video));
    }
    if w.regularisation != 0.0 {
        let l = loss_regularisation(tape, &out.snippet_scores, cfg.alpha, cfg.beta)?;
        breakdown.regularisation = tape.value(l).item();
        weighted.push(tape.scale(l, w.regularisation));
    }
    let total = if weighted.is_empty() {
        tape.scalar(0.0)
    } else {
        tape.add_all(&weighted)?
    };
    breakdown.total = tape.value(total).item();
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss: {breakdown:?}")));
    }
    Ok((total, breakdown))
}
