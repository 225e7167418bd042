//! Independent brute-force reimplementations used as test oracles.

use wvad_core::mining::MiningConfig;

/// Pads with copies of the boundary values and requires every value in the
/// window to be set.
pub fn erode(pred: &[bool], width: usize) -> Vec<bool> {
    let n = pred.len() as isize;
    let h = (width / 2) as isize;
    let padded = |i: isize| pred[i.clamp(0, n - 1) as usize];
    (0..n).map(|t| (t - h..=t + h).all(padded)).collect()
}

pub fn hard_abnormal(scores: &[f64], cfg: &MiningConfig) -> Vec<usize> {
    let n = scores.len();
    let pred: Vec<bool> = scores.iter().map(|&s| s > cfg.threshold).collect();
    let eroded = erode(&pred, cfg.erosion_width);
    let mut flagged = vec![false; n];
    for t in 0..n {
        if pred[t] && !eroded[t] {
            flagged[t] = true;
        }
    }
    if cfg.window <= n {
        for start in 0..=n - cfg.window {
            let w = start..start + cfg.window;
            if pred[w.clone()].iter().filter(|&&p| p).count() >= cfg.min_abnormal {
                for t in w {
                    if !pred[t] {
                        flagged[t] = true;
                    }
                }
            }
        }
    }
    (0..n).filter(|&t| flagged[t]).collect()
}

/// Indices ordered by descending score, ties by ascending index.
pub fn ranked_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    for i in 0..idx.len() {
        for j in 0..idx.len() - 1 - i {
            let (a, b) = (idx[j], idx[j + 1]);
            if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                idx.swap(j, j + 1);
            }
        }
    }
    idx
}

pub fn ranked_asc(scores: &[f64]) -> Vec<usize> {
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    ranked_desc(&neg)
}

pub fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort();
    v
}

pub fn hard_normal(scores: &[f64], k: usize) -> Vec<usize> {
    sorted(ranked_desc(scores)[..k].to_vec())
}

pub fn easy(scores: &[f64], abnormal: bool, k: usize, hard: &[usize]) -> Vec<usize> {
    if abnormal {
        sorted(
            ranked_desc(scores)[..k]
                .iter()
                .copied()
                .filter(|i| !hard.contains(i))
                .collect(),
        )
    } else {
        sorted(ranked_asc(scores)[..k].to_vec())
    }
}

/// Counts every (positive, negative) pair: 2 for a win, 1 for a tie.
pub fn auc(s: &[f64], y: &[bool]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1;
                twice += if s[i] > s[j] {
                    2
                } else if s[i] == s[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

/// Ranks each positive behind everything scored higher, every tied
/// negative, and tied positives of lower index; precision at that rank is
/// summed in rank order.
pub fn ap(s: &[f64], y: &[bool]) -> Option<f64> {
    let mut at_rank: Vec<(usize, f64)> = Vec::new();
    for i in (0..s.len()).filter(|&i| y[i]) {
        let mut ahead = 0;
        let mut pos_ahead = 0;
        for j in 0..s.len() {
            let before = s[j] > s[i] || (s[j] == s[i] && (!y[j] || j < i));
            if before {
                ahead += 1;
                if y[j] {
                    pos_ahead += 1;
                }
            }
        }
        at_rank.push((ahead, (pos_ahead + 1) as f64 / (ahead + 1) as f64));
    }
    if at_rank.is_empty() {
        return None;
    }
    at_rank.sort_by_key(|&(r, _)| r);
    let n = at_rank.len() as f64;
    Some(at_rank.iter().map(|&(_, p)| p).sum::<f64>() / n)
}
