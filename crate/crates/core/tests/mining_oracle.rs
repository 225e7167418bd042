//! Mining against a literal brute-force reimplementation.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wvad_core::mining::{
    erode, mine_easy, mine_hard_abnormal, mine_hard_normal, missed_pseudo_abnormal, temporal_edges,
    threshold_predictions, MiningConfig,
};

use common::oracle;

fn configs() -> Vec<MiningConfig> {
    let base = MiningConfig::default();
    vec![
        base.clone(),
        MiningConfig {
            erosion_width: 1,
            window: 3,
            min_abnormal: 2,
            ..base.clone()
        },
        MiningConfig {
            erosion_width: 5,
            window: 4,
            min_abnormal: 4,
            ..base.clone()
        },
        MiningConfig {
            window: 2,
            min_abnormal: 1,
            ..base.clone()
        },
        MiningConfig {
            erosion_width: 7,
            window: 8,
            min_abnormal: 5,
            ..base
        },
    ]
}

fn check_sequence(scores: &[f64], cfg: &MiningConfig) {
    let pred = threshold_predictions(scores, cfg.threshold);
    let eroded = erode(&pred, cfg.erosion_width);
    assert_eq!(eroded, oracle::erode(&pred, cfg.erosion_width), "erode {pred:?}");
    let edges = temporal_edges(&pred, &eroded);
    let oracle_edges: Vec<usize> = (0..pred.len()).filter(|&t| pred[t] && !eroded[t]).collect();
    assert_eq!(edges, oracle_edges);
    let missed = missed_pseudo_abnormal(&pred, cfg.window, cfg.min_abnormal);
    assert!(missed.iter().all(|&t| !pred[t]));

    let hard = mine_hard_abnormal(scores, cfg);
    assert_eq!(
        hard,
        oracle::hard_abnormal(scores, cfg),
        "scores {scores:?} cfg {cfg:?}"
    );
    let mut union = oracle::sorted([edges, missed].concat());
    union.dedup();
    assert_eq!(hard, union);

    let k = cfg.k_easy.min(scores.len());
    assert_eq!(mine_hard_normal(scores, k).unwrap(), oracle::hard_normal(scores, k));
    assert_eq!(
        mine_easy(scores, true, k, &hard).unwrap(),
        oracle::easy(scores, true, k, &hard)
    );
    assert_eq!(
        mine_easy(scores, false, k, &[]).unwrap(),
        oracle::easy(scores, false, k, &[])
    );
}

#[test]
fn every_binary_sequence_up_to_length_eight() {
    let mut checked = 0;
    for cfg in configs() {
        for n in 1..=8usize {
            for bits in 0u32..(1 << n) {
                let scores: Vec<f64> = (0..n).map(|t| if bits >> t & 1 == 1 { 0.9 } else { 0.1 }).collect();
                check_sequence(&scores, &cfg);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 5 * 510);
}

#[test]
fn random_score_sequences_of_length_32() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cfgs = configs();
    for i in 0..1000 {
        let scores: Vec<f64> = if i % 2 == 0 {
            (0..32).map(|_| rng.random::<f64>()).collect()
        } else {
            // coarse grid with many ties, including exact threshold hits
            (0..32).map(|_| f64::from(rng.random_range(0..=10u8)) / 10.0).collect()
        };
        check_sequence(&scores, &cfgs[i % cfgs.len()]);
    }
}

#[test]
fn threshold_is_strict() {
    assert_eq!(
        threshold_predictions(&[0.5, 0.500001, 0.49], 0.5),
        vec![false, true, false]
    );
}
