//! Balanced batch sampling, the optimisation loop, logging and resume.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, ResumeState};
use crate::encoder::{encode, round_f32, snippet_scores, video_score, Dropout, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{loss_total, BatchOutputs, LossBreakdown, LossConfig};
use crate::mining::{mine_batch, MinedSets, MiningConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::synthdata::{Dataset, Split, Video};
use crate::tensor_core::{Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.wvck";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_normal: usize,
    pub batch_abnormal: usize,
    pub seed: u64,
    /// Epochs trained with the contrastive term disabled before mining starts.
    pub mining_warmup_epochs: u32,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub mining: MiningConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            weight_decay: 5e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_normal: 16,
            batch_abnormal: 16,
            seed: 0,
            mining_warmup_epochs: 2,
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            mining: MiningConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_normal == 0 || self.batch_abnormal == 0 {
            return Err(Error::Config(
                "batch_normal and batch_abnormal must both be at least 1".into(),
            ));
        }
        self.adam().validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.mining.validate(self.encoder.snippets)?;
        if self.loss.k > self.encoder.snippets {
            return Err(Error::Config(format!(
                "k = {} exceeds the {} snippets per video",
                self.loss.k, self.encoder.snippets
            )));
        }
        if self.loss.weights.video != 0.0 && !self.encoder.use_transformer {
            return Err(Error::Config("the video loss needs the transformer's cls token".into()));
        }
        Ok(())
    }

    fn mining_active(&self, epoch: u32) -> bool {
        self.loss.weights.contrastive != 0.0 && epoch >= self.mining_warmup_epochs
    }
}

/// Generator for everything random in one epoch. Stream 0 of the seed is
/// used for parameter initialisation, stream `epoch + 1` for epoch `epoch`,
/// so a run resumed at an epoch boundary replays the same draws.
pub fn epoch_rng(seed: u64, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(epoch) + 1);
    rng
}

/// Video indices per step of one epoch: normal indices then abnormal
/// indices, each taken from its own shuffled pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Plans one epoch. Each class pool is shuffled once and read cyclically,
/// `batch` entries per step, for `⌈max(n_normal/b_normal, n_abnormal/b_abnormal)⌉`
/// steps, so within a batch no video repeats and across the epoch every
/// video of a class is used the same number of times up to one.
pub fn plan_epoch(
    normal: &[usize],
    abnormal: &[usize],
    batch_normal: usize,
    batch_abnormal: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochPlan> {
    if batch_normal == 0 || batch_abnormal == 0 {
        return Err(Error::Config("batch sizes must be at least 1".into()));
    }
    if normal.len() < batch_normal || abnormal.len() < batch_abnormal {
        return Err(Error::Config(format!(
            "need {batch_normal} normal and {batch_abnormal} abnormal training videos, have {} and {}",
            normal.len(),
            abnormal.len()
        )));
    }
    let steps = normal
        .len()
        .div_ceil(batch_normal)
        .max(abnormal.len().div_ceil(batch_abnormal));
    let mut n = normal.to_vec();
    let mut a = abnormal.to_vec();
    n.shuffle(rng);
    a.shuffle(rng);
    let take =
        |pool: &[usize], b: usize, s: usize| -> Vec<usize> { (0..b).map(|j| pool[(s * b + j) % pool.len()]).collect() };
    Ok(EpochPlan {
        batches: (0..steps)
            .map(|s| (take(&n, batch_normal, s), take(&a, batch_abnormal, s)))
            .collect(),
    })
}

/// Draws one balanced batch without replacement within each class.
pub fn sample_batch(
    normal: &[usize],
    abnormal: &[usize],
    batch_normal: usize,
    batch_abnormal: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let plan = plan_epoch(normal, abnormal, batch_normal, batch_abnormal, rng)?;
    Ok(plan.batches.into_iter().next().expect("at least one step"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u32,
    pub l_total: f64,
    pub l_snp: f64,
    pub l_vid: f64,
    pub l_reg: f64,
    pub l_cnt: f64,
    #[serde(rename = "|HA|")]
    pub hard_abnormal: usize,
    #[serde(rename = "|HN|")]
    pub hard_normal: usize,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::format(path, offset, format!("{kind:?}")),
    }
}

/// Parameters, optimiser moments and the number of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: u32,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(&cfg.encoder, cfg.seed)?;
        let adam = AdamState::new(params.tensors());
        Ok(TrainState { params, adam, epoch: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let resume = ck
            .resume
            .ok_or_else(|| Error::Config("checkpoint has no optimiser state to resume from".into()))?;
        Ok(TrainState {
            params: ck.params,
            adam: resume.adam,
            epoch: resume.epoch,
        })
    }

    pub fn resume_state(&self) -> ResumeState {
        ResumeState {
            adam: self.adam.clone(),
            epoch: self.epoch,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, Some(&self.resume_state()))
    }
}

/// Result of one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub mined: MinedSets,
}

/// Forward pass over a batch, mining on detached scores, backward pass and
/// one Adam update. Parameters and moments are rounded to `f32` afterwards
/// so that a checkpoint captures the state exactly.
pub fn train_step(
    state: &mut TrainState,
    features: &[&Tensor],
    labels: &[bool],
    cfg: &TrainConfig,
    mine: bool,
    mut dropout: Option<&mut Dropout>,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape);
    let want_video = state.params.has_video_head() && cfg.loss.weights.video != 0.0;
    let mut out = BatchOutputs {
        snippet_scores: Vec::with_capacity(features.len()),
        video_scores: want_video.then(Vec::new),
        features: Vec::with_capacity(features.len()),
        labels: labels.to_vec(),
    };
    for f in features {
        let x = tape.leaf((*f).clone());
        let enc = encode(&mut tape, &bound, x, dropout.as_deref_mut())?;
        out.snippet_scores.push(snippet_scores(&mut tape, &bound, &enc)?);
        out.features.push(enc.snippets);
        if let Some(v) = out.video_scores.as_mut() {
            v.push(video_score(&mut tape, &bound, &enc)?);
        }
    }
    let mined = if mine {
        let scores: Vec<Vec<f64>> = out
            .snippet_scores
            .iter()
            .map(|&s| tape.value(s).data().to_vec())
            .collect();
        mine_batch(
            scores.iter().map(Vec::as_slice).zip(labels.iter().copied()),
            &cfg.mining,
        )?
    } else {
        MinedSets::default()
    };
    let (loss, breakdown) = loss_total(&mut tape, &out, &mined, &cfg.loss)?;
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = bound
        .vars()
        .iter()
        .zip(state.params.tensors())
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    adam_step(state.params.tensors_mut(), &grads, &mut state.adam, &cfg.adam())?;
    for t in state
        .params
        .tensors_mut()
        .iter_mut()
        .chain(state.adam.m.iter_mut())
        .chain(state.adam.v.iter_mut())
    {
        for x in t.data_mut() {
            *x = round_f32(*x);
        }
    }
    if let Some((i, _)) = state.params.tensors().iter().enumerate().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Numerical(format!(
            "parameter {} became non-finite at optimiser step {}",
            state.params.names()[i],
            state.adam.step
        )));
    }
    Ok(StepReport { loss: breakdown, mined })
}

/// Where and whether to write per-epoch artefacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    /// Directory receiving `checkpoint.wvck` and `train_log.csv`.
    pub dir: Option<PathBuf>,
    /// Rows logged before this run, written ahead of the new rows.
    pub previous_log: Vec<LogRow>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Rows of the epochs trained in this call.
    pub log: Vec<LogRow>,
}

fn split_by_class(videos: &[&Video]) -> (Vec<usize>, Vec<usize>) {
    (0..videos.len()).partition(|&i| !videos[i].is_abnormal())
}

/// Trains from `state` until `cfg.epochs` epochs are complete.
pub fn train_from(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    output: &TrainOutput,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if state.params.config() != &cfg.encoder {
        return Err(Error::Config(
            "the starting parameters were built for a different encoder configuration".into(),
        ));
    }
    let videos: Vec<&Video> = dataset.split(Split::Train).collect();
    let (normal, abnormal) = split_by_class(&videos);
    if let Some(dir) = &output.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let plan = plan_epoch(&normal, &abnormal, cfg.batch_normal, cfg.batch_abnormal, &mut rng)?;
        let mut dropout = (cfg.encoder.dropout_rate > 0.0).then(|| Dropout {
            rate: cfg.encoder.dropout_rate,
            rng: rng.clone(),
        });
        for (n_idx, a_idx) in &plan.batches {
            let members: Vec<&Video> = n_idx.iter().chain(a_idx).map(|&i| videos[i]).collect();
            let features: Vec<&Tensor> = members.iter().map(|v| &v.features).collect();
            let labels: Vec<bool> = members.iter().map(|v| v.is_abnormal()).collect();
            let report = train_step(
                &mut state,
                &features,
                &labels,
                cfg,
                cfg.mining_active(epoch),
                dropout.as_mut(),
            )
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, step {}: {m}", state.adam.step + 1)),
                other => other,
            })?;
            let l = report.loss;
            log.push(LogRow {
                step: state.adam.step,
                epoch,
                l_total: l.total,
                l_snp: l.snippet,
                l_vid: l.video,
                l_reg: l.regularisation,
                l_cnt: l.contrastive,
                hard_abnormal: report.mined.hard_abnormal.len(),
                hard_normal: report.mined.hard_normal.len(),
            });
        }
        state.epoch += 1;
        if let Some(dir) = &output.dir {
            state.save(&dir.join(CHECKPOINT_FILE))?;
            let all: Vec<LogRow> = output.previous_log.iter().chain(&log).copied().collect();
            write_log(&dir.join(LOG_FILE), &all)?;
        }
    }
    Ok(TrainOutcome { state, log })
}

/// Trains from a fresh initialisation.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, output: &TrainOutput) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_from(dataset, cfg, TrainState::new(cfg)?, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthConfig};

    fn tiny_data() -> Dataset {
        generate(&SynthConfig {
            n_normal_train: 5,
            n_abnormal_train: 4,
            n_normal_test: 2,
            n_abnormal_test: 2,
            snippets: 8,
            input_dim: 4,
            region_len_range: [2, 4],
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_normal: 2,
            batch_abnormal: 2,
            mining_warmup_epochs: 1,
            encoder: EncoderConfig {
                snippets: 8,
                input_dim: 4,
                model_dim: 8,
                heads: 2,
                depth: 1,
                ..EncoderConfig::default()
            },
            mining: MiningConfig {
                window: 3,
                min_abnormal: 2,
                ..MiningConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plan_is_balanced_and_deterministic() {
        let normal: Vec<usize> = (0..5).collect();
        let abnormal: Vec<usize> = (5..9).collect();
        let p1 = plan_epoch(&normal, &abnormal, 2, 2, &mut epoch_rng(1, 0)).unwrap();
        let p2 = plan_epoch(&normal, &abnormal, 2, 2, &mut epoch_rng(1, 0)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.batches.len(), 3);
        for (n, a) in &p1.batches {
            assert_eq!(n.len(), 2);
            assert_eq!(a.len(), 2);
            assert!(n.iter().all(|i| normal.contains(i)));
            assert!(a.iter().all(|i| abnormal.contains(i)));
            assert_ne!(n[0], n[1]);
            assert_ne!(a[0], a[1]);
        }
    }

    #[test]
    fn insufficient_videos_is_a_config_error() {
        let err = plan_epoch(&[0], &[1, 2], 2, 1, &mut epoch_rng(0, 0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = tiny_data();
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let start = TrainState::new(&cfg).unwrap();
        let out = train(&ds, &cfg, &TrainOutput::default()).unwrap();
        assert_eq!(out.state.params, start.params);
        assert_eq!(out.log.len(), 9);
    }

    #[test]
    fn log_rows_cover_every_step() {
        let out = train(&tiny_data(), &tiny_config(), &TrainOutput::default()).unwrap();
        let steps: Vec<u64> = out.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, (1..=9).collect::<Vec<_>>());
        assert!(out.log.iter().filter(|r| r.epoch == 0).all(|r| r.l_cnt == 0.0));
        assert!(out.log.iter().all(|r| r.l_total.is_finite()));
    }

    #[test]
    fn log_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny_data(), &tiny_config(), &TrainOutput::default()).unwrap();
        let path = dir.path().join("log.csv");
        write_log(&path, &out.log).unwrap();
        assert_eq!(read_log(&path).unwrap(), out.log);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("step,epoch,l_total,l_snp,l_vid,l_reg,l_cnt,|HA|,|HN|\n"));
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let cfg = tiny_config();
        let other = TrainConfig {
            encoder: EncoderConfig {
                model_dim: 4,
                ..cfg.encoder.clone()
            },
            ..cfg.clone()
        };
        let state = TrainState::new(&other).unwrap();
        let err = train_from(&tiny_data(), &cfg, state, &TrainOutput::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
