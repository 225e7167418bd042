//! The `wvad` command-line tool.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ablation::{mean_metrics, run_ablation, Variant};
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_scores, write_csv};
use crate::gradsuite::{run_suite, FAULTY_CASE};
use crate::mining::mine_video;
use crate::synthdata::{generate_dataset, Dataset, Split};
use crate::trainer::{read_log, train_from, TrainOutput, TrainState, CHECKPOINT_FILE, LOG_FILE};

pub const RUN_FILE: &str = "run.json";
pub const FRAMES_FILE: &str = "frames.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const MINED_FILE: &str = "mined.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

#[derive(Debug, Parser)]
#[command(name = "wvad", version, about = "Weakly-supervised video anomaly detection")]
pub struct Cli {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "wvad_out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Generate a synthetic dataset into the output directory.
    Synth,
    /// Train the model; writes a checkpoint and a per-step log.
    Train {
        /// Dataset directory with manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Frame-level AUC and AP on the test split.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with manifest.json.
        #[arg(long)]
        data: PathBuf,
    },
    /// Mine hard and easy snippets from a score CSV.
    Mine {
        /// CSV with columns video_id, t, score, video_label.
        #[arg(long)]
        scores: PathBuf,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        /// Also check an operation with a deliberately wrong gradient,
        /// which must be caught.
        #[arg(long)]
        with_faulty_control: bool,
    },
    /// Train and evaluate the four ablation configurations.
    Ablate {
        /// Dataset directory with manifest.json.
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-snippet scores of every video.
    ExportScores {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one split; all videos by default.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
}

/// Loads the configuration and applies the seed override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
        cfg.ablation.seeds = vec![s];
        cfg.gradcheck.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    #[serde(flatten)]
    command: &'a Command,
    config: &'a RunConfig,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one command, returning the text for standard output.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    create_dir(out)?;
    let record = RunRecord {
        command: &cli.command,
        config: &cfg,
    };
    let json = serde_json::to_string_pretty(&record).expect("run record serialises");
    write_text(&out.join(RUN_FILE), &(json + "\n"))?;

    match &cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Train { data, resume } => cmd_train(&cfg, data, resume.as_deref(), out),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data, out),
        Command::Mine { scores } => cmd_mine(&cfg, scores, out),
        Command::Gradcheck { with_faulty_control } => cmd_gradcheck(&cfg, *with_faulty_control, out),
        Command::Ablate { data } => cmd_ablate(&cfg, data, out),
        Command::ExportScores {
            checkpoint,
            data,
            split,
        } => cmd_export_scores(checkpoint, data, split.map(Split::from), out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ds = generate_dataset(&cfg.synth, out)?;
    Ok(format!("wrote {} videos to {}\n", ds.videos.len(), out.display()))
}

fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::load(dir)?;
    cfg.check_dataset(&ds.manifest)?;
    Ok(ds)
}

fn cmd_train(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<String> {
    let ds = load_dataset(cfg, data)?;
    let (state, previous_log) = match resume {
        None => (TrainState::new(&cfg.train)?, Vec::new()),
        Some(path) => {
            let state = TrainState::from_checkpoint(load_checkpoint(path)?)?;
            let log_path = path.parent().unwrap_or(Path::new(".")).join(LOG_FILE);
            let log = if log_path.exists() {
                read_log(&log_path)?
                    .into_iter()
                    .filter(|r| r.epoch < state.epoch)
                    .collect()
            } else {
                Vec::new()
            };
            (state, log)
        }
    };
    let start = state.epoch;
    let output = TrainOutput {
        dir: Some(out.to_path_buf()),
        previous_log,
    };
    let outcome = train_from(&ds, &cfg.train, state, &output)?;
    let mut text = format!(
        "trained epochs {start}..{} ({} steps) -> {}\n",
        outcome.state.epoch,
        outcome.log.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    if let Some(last) = outcome.log.last() {
        text += &format!("final l_total={:.6}\n", last.l_total);
    }
    Ok(text)
}

fn load_params(path: &Path, ds: &Dataset) -> Result<ModelParams> {
    let params = load_checkpoint(path)?.params;
    let e = params.config();
    if (e.snippets, e.input_dim) != (ds.manifest.snippets, ds.manifest.input_dim) {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{} features but the dataset has {}x{}",
            e.snippets, e.input_dim, ds.manifest.snippets, ds.manifest.input_dim
        )));
    }
    Ok(params)
}

#[derive(Serialize)]
struct Metrics {
    auc: f64,
    ap: f64,
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<String> {
    let ds = Dataset::load(data)?;
    let params = load_params(checkpoint, &ds)?;
    let report = evaluate(&params, &ds)?;
    write_csv(&out.join(FRAMES_FILE), &report.frames)?;
    let metrics = Metrics {
        auc: report.auc,
        ap: report.ap,
    };
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialise");
    write_text(&out.join(METRICS_FILE), &(json + "\n"))?;
    Ok(report.summary() + "\n")
}

fn cmd_export_scores(checkpoint: &Path, data: &Path, split: Option<Split>, out: &Path) -> Result<String> {
    let ds = Dataset::load(data)?;
    let params = load_params(checkpoint, &ds)?;
    let rows = export_scores(&params, &ds, split)?;
    let path = out.join(SCORES_FILE);
    write_csv(&path, &rows)?;
    Ok(format!("wrote {} snippet scores to {}\n", rows.len(), path.display()))
}

/// One row of the `mine` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video_id: String,
    pub t: usize,
    pub score: f64,
    pub video_label: u8,
}

/// One row of the `mine` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedRow {
    pub set: String,
    pub video_id: String,
    pub t: usize,
}

struct ScoredVideo {
    id: String,
    abnormal: bool,
    scores: Vec<Option<f64>>,
}

/// Groups score rows by video in order of first appearance, checking that
/// every video has one finite score per snippet index `0..T` and a single
/// 0/1 label.
pub fn group_scores(rows: &[ScoreRow]) -> Result<Vec<(String, bool, Vec<f64>)>> {
    let mut order: Vec<ScoredVideo> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (line, r) in rows.iter().enumerate() {
        let bad = |m: String| Err(Error::Argument(format!("score row {}: {m}", line + 1)));
        if r.video_label > 1 {
            return bad(format!("video_label must be 0 or 1, got {}", r.video_label));
        }
        if !r.score.is_finite() {
            return bad(format!("score {} is not finite", r.score));
        }
        let i = *index.entry(&r.video_id).or_insert_with(|| {
            order.push(ScoredVideo {
                id: r.video_id.clone(),
                abnormal: r.video_label == 1,
                scores: Vec::new(),
            });
            order.len() - 1
        });
        let v = &mut order[i];
        if v.abnormal != (r.video_label == 1) {
            return bad(format!("video {} has conflicting labels", r.video_id));
        }
        if v.scores.len() <= r.t {
            v.scores.resize(r.t + 1, None);
        }
        if v.scores[r.t].replace(r.score).is_some() {
            return bad(format!("duplicate snippet {} of video {}", r.t, r.video_id));
        }
    }
    order
        .into_iter()
        .map(|v| {
            let scores: Option<Vec<f64>> = v.scores.iter().copied().collect();
            let scores = scores.ok_or_else(|| Error::Argument(format!("video {} is missing snippet indices", v.id)))?;
            Ok((v.id, v.abnormal, scores))
        })
        .collect()
}

/// Mined sets of every video, in HA, EA, HN, EN order, then by video and
/// snippet.
pub fn mine_rows(cfg: &RunConfig, rows: &[ScoreRow]) -> Result<Vec<MinedRow>> {
    let videos = group_scores(rows)?;
    let mut sets: [Vec<MinedRow>; 4] = Default::default();
    let m = &cfg.train.mining;
    for (id, abnormal, scores) in &videos {
        m.validate(scores.len())?;
        let mined = mine_video(scores, *abnormal, m)?;
        let (hard, easy) = if *abnormal { (0, 1) } else { (2, 3) };
        for (slot, ts) in [(hard, &mined.hard), (easy, &mined.easy)] {
            sets[slot].extend(ts.iter().map(|&t| MinedRow {
                set: ["HA", "EA", "HN", "EN"][slot].to_string(),
                video_id: id.clone(),
                t,
            }));
        }
    }
    Ok(sets.into_iter().flatten().collect())
}

fn read_score_rows(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Argument(format!("{}: {kind:?}", path.display())),
    })?;
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                match e.into_kind() {
                    csv::ErrorKind::Io(io) => Error::io(path, io),
                    kind => Error::Argument(format!("{} line {line}: {kind:?}", path.display())),
                }
            })
        })
        .collect()
}

fn cmd_mine(cfg: &RunConfig, scores: &Path, out: &Path) -> Result<String> {
    let rows = read_score_rows(scores)?;
    let mined = mine_rows(cfg, &rows)?;
    let path = out.join(MINED_FILE);
    write_csv(&path, &mined)?;
    Ok(format!("wrote {} mined snippets to {}\n", mined.len(), path.display()))
}

fn cmd_gradcheck(cfg: &RunConfig, with_faulty_control: bool, out: &Path) -> Result<String> {
    let g = &cfg.gradcheck;
    let report = run_suite(&g.seeds, g.check(), with_faulty_control)?;
    let genuine_ok = report
        .results
        .iter()
        .filter(|r| r.name != FAULTY_CASE)
        .all(|r| r.report.passed());
    let control_caught = report
        .results
        .iter()
        .filter(|r| r.name == FAULTY_CASE)
        .all(|r| !r.report.passed());
    let mut text = format!("{report}\n");
    if with_faulty_control {
        text += &format!(
            "negative control: {}\n",
            if control_caught {
                "wrong gradient detected"
            } else {
                "NOT DETECTED"
            }
        );
    }
    write_text(&out.join(GRADCHECK_FILE), &text)?;
    if !genuine_ok {
        return Err(Error::Numerical(format!("gradient check failed\n{text}")));
    }
    if !control_caught {
        return Err(Error::Numerical(format!(
            "the negative control passed the gradient check\n{text}"
        )));
    }
    Ok(text)
}

fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let ds = load_dataset(cfg, data)?;
    let rows = run_ablation(&ds, &cfg.train, &cfg.ablation.seeds)?;
    write_csv(&out.join(ABLATION_FILE), &rows)?;
    let mut text = String::from("config  mean_auc  mean_ap\n");
    for v in Variant::ALL {
        if let Some((auc, ap)) = mean_metrics(&rows, v) {
            text += &format!("{v:<6}  {auc:.6}  {ap:.6}\n");
        }
    }
    Ok(text)
}
