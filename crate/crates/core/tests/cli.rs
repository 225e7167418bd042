//! The `wvad` binary: outputs, exit codes and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use wvad_core::cli::{mine_rows, MinedRow, ScoreRow};
use wvad_core::config::RunConfig;

const TINY: &str = r#"{
  "synth": {"n_normal_train": 6, "n_abnormal_train": 4, "n_normal_test": 2, "n_abnormal_test": 2,
            "snippets": 12, "frames_per_snippet": 2, "input_dim": 8, "region_len_range": [3, 5]},
  "train": {"epochs": 2, "batch_normal": 3, "batch_abnormal": 2, "mining_warmup_epochs": 1,
            "encoder": {"snippets": 12, "input_dim": 8, "model_dim": 8, "heads": 2}},
  "ablation": {"seeds": [0, 1]},
  "gradcheck": {"seeds": [0]}
}"#;

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(w.path("tiny.json"), TINY).unwrap();
        w
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_wvad"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    fn synth(&self) {
        self.ok(&["--config", "tiny.json", "synth", "--out", "data"]);
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.path(rel)).unwrap()
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_reproducible_and_complete() {
    let w = Work::new();
    w.synth();
    w.ok(&["--config", "tiny.json", "synth", "--out", "again"]);
    assert_eq!(tree(&w.path("data")), tree(&w.path("again")));
    let features = fs::read_dir(w.path("data/features")).unwrap().count();
    let labels = fs::read_dir(w.path("data/labels")).unwrap().count();
    assert_eq!((features, labels), (14, 4));
    let run: serde_json::Value = serde_json::from_slice(&w.read("data/run.json")).unwrap();
    assert_eq!(run["command"], "synth");
    let cfg: RunConfig = serde_json::from_value(run["config"].clone()).unwrap();
    assert_eq!(cfg.synth.n_normal_train, 6);
}

#[test]
fn config_errors_exit_2() {
    let w = Work::new();
    fs::write(w.path("typo.json"), r#"{"synth": {"seeed": 1}}"#).unwrap();
    fs::write(w.path("invalid.json"), r#"{"synth": {"input_dim": 2}}"#).unwrap();
    fs::write(w.path("broken.json"), "{").unwrap();
    for cfg in ["typo.json", "invalid.json", "broken.json"] {
        assert_eq!(w.code(&["--config", cfg, "synth", "--out", "x"]), 2, "{cfg}");
    }
    assert_eq!(w.code(&["frobnicate"]), 2);
    assert_eq!(w.code(&["train"]), 2);
    assert_eq!(w.code(&["--config", "missing.json", "synth"]), 3);
}

#[test]
fn missing_dataset_exits_3() {
    let w = Work::new();
    assert_eq!(
        w.code(&["--config", "tiny.json", "train", "--data", "nowhere", "--out", "r"]),
        3
    );
    assert_eq!(w.code(&["eval", "--checkpoint", "none.wvck", "--data", "nowhere"]), 3);
}

#[test]
fn mismatched_dataset_exits_2() {
    let w = Work::new();
    w.synth();
    assert_eq!(w.code(&["train", "--data", "data", "--out", "r"]), 2);
}

#[test]
fn train_eval_and_resume() {
    let w = Work::new();
    w.synth();
    fs::write(w.path("four.json"), TINY.replace(r#""epochs": 2"#, r#""epochs": 4"#)).unwrap();
    w.ok(&["--config", "four.json", "train", "--data", "data", "--out", "full"]);
    w.ok(&["--config", "four.json", "train", "--data", "data", "--out", "repeat"]);
    assert_eq!(tree(&w.path("full")), tree(&w.path("repeat")));

    w.ok(&["--config", "tiny.json", "train", "--data", "data", "--out", "part"]);
    w.ok(&[
        "--config",
        "four.json",
        "train",
        "--data",
        "data",
        "--resume",
        "part/checkpoint.wvck",
        "--out",
        "part",
    ]);
    for f in ["checkpoint.wvck", "train_log.csv"] {
        assert_eq!(w.read(&format!("full/{f}")), w.read(&format!("part/{f}")), "{f}");
    }

    let summary = w.ok(&[
        "eval",
        "--checkpoint",
        "full/checkpoint.wvck",
        "--data",
        "data",
        "--out",
        "ev",
    ]);
    assert!(summary.starts_with("AUC=") && summary.contains(" AP="), "{summary}");
    let again = w.ok(&[
        "eval",
        "--checkpoint",
        "full/checkpoint.wvck",
        "--data",
        "data",
        "--out",
        "ev2",
    ]);
    assert_eq!(summary, again);
    assert_eq!(w.read("ev/frames.csv"), w.read("ev2/frames.csv"));
    let frames = String::from_utf8(w.read("ev/frames.csv")).unwrap();
    assert!(frames.starts_with("video_id,frame,score,label\n"));
    assert_eq!(frames.lines().count(), 1 + 4 * 24);

    w.ok(&[
        "--seed",
        "9",
        "--config",
        "four.json",
        "train",
        "--data",
        "data",
        "--out",
        "other",
    ]);
    assert_ne!(w.read("full/checkpoint.wvck"), w.read("other/checkpoint.wvck"));

    w.ok(&[
        "export-scores",
        "--checkpoint",
        "full/checkpoint.wvck",
        "--data",
        "data",
        "--split",
        "train",
        "--out",
        "ex",
    ]);
    let scores = String::from_utf8(w.read("ex/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 10 * 12);
    assert!(scores.starts_with("video_id,t,score,video_label,split\n"));
    w.ok(&["--config", "tiny.json", "mine", "--scores", "ex/scores.csv", "--out", "mined"]);
    let mined = String::from_utf8(w.read("mined/mined.csv")).unwrap();
    assert!(mined.lines().any(|l| l.starts_with("HN,")));
}

#[test]
fn resume_without_optimiser_state_exits_2() {
    let w = Work::new();
    w.synth();
    w.ok(&["--config", "tiny.json", "train", "--data", "data", "--out", "r"]);
    let mut bytes = w.read("r/checkpoint.wvck");
    let adam = bytes.windows(4).position(|s| s == b"ADAM").unwrap();
    bytes.truncate(adam);
    fs::write(w.path("bare.wvck"), bytes).unwrap();
    assert_eq!(
        w.code(&[
            "--config",
            "tiny.json",
            "train",
            "--data",
            "data",
            "--resume",
            "bare.wvck",
            "--out",
            "r2"
        ]),
        2
    );
    fs::write(w.path("junk.wvck"), b"WVCK\x07\0\0\0").unwrap();
    assert_eq!(w.code(&["eval", "--checkpoint", "junk.wvck", "--data", "data"]), 3);
}

fn score_fixture() -> Vec<ScoreRow> {
    let seqs: [(&str, u8, [f64; 8]); 3] = [
        ("abn", 1, [0.1, 0.8, 0.9, 0.2, 0.9, 0.95, 0.1, 0.05]),
        ("nrm", 0, [0.3, 0.1, 0.7, 0.2, 0.6, 0.05, 0.4, 0.2]),
        ("edge", 1, [0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.8]),
    ];
    seqs.iter()
        .flat_map(|(id, y, s)| {
            s.iter().enumerate().map(move |(t, &score)| ScoreRow {
                video_id: id.to_string(),
                t,
                score,
                video_label: *y,
            })
        })
        .collect()
}

#[test]
fn mine_matches_library_and_handles_edge_cases() {
    let w = Work::new();
    let rows = score_fixture();
    let mut wr = csv::Writer::from_path(w.path("scores.csv")).unwrap();
    // shuffled order must not matter
    for r in rows.iter().rev() {
        wr.serialize(r).unwrap();
    }
    wr.flush().unwrap();
    w.ok(&["mine", "--scores", "scores.csv", "--out", "m"]);
    let got: Vec<MinedRow> = csv::Reader::from_path(w.path("m/mined.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    let cfg = RunConfig::default();
    let mut want = mine_rows(&cfg, &rows).unwrap();
    let order = |r: &MinedRow| {
        (
            ["HA", "EA", "HN", "EN"].iter().position(|s| *s == r.set),
            r.video_id.clone(),
            r.t,
        )
    };
    want.sort_by_key(order);
    let mut sorted = got.clone();
    sorted.sort_by_key(order);
    assert_eq!(sorted, want);
    let ha: Vec<(String, usize)> = got
        .iter()
        .filter(|r| r.set == "HA")
        .map(|r| (r.video_id.clone(), r.t))
        .collect();
    let edge: Vec<usize> = ha.iter().filter(|(v, _)| v == "edge").map(|&(_, t)| t).collect();
    assert_eq!(edge, [2, 3, 4, 7]);
    assert_eq!(ha.iter().filter(|(v, _)| v == "abn").count(), 7);
    assert_eq!(got.iter().filter(|r| r.set == "HN").count(), 3);

    fs::write(w.path("empty.csv"), "video_id,t,score,video_label\n").unwrap();
    w.ok(&["mine", "--scores", "empty.csv", "--out", "e"]);
    assert!(w.read("e/mined.csv").is_empty());
    fs::write(w.path("blank.csv"), "").unwrap();
    w.ok(&["mine", "--scores", "blank.csv", "--out", "b"]);

    for (name, text) in [
        ("nonnumeric.csv", "video_id,t,score,video_label\na,0,high,1\n"),
        ("columns.csv", "video_id,t,score\na,0,0.5\n"),
        ("label.csv", "video_id,t,score,video_label\na,0,0.5,2\n"),
        ("gap.csv", "video_id,t,score,video_label\na,0,0.5,1\na,2,0.5,1\n"),
        ("dup.csv", "video_id,t,score,video_label\na,0,0.5,1\na,0,0.6,1\n"),
        ("mixed.csv", "video_id,t,score,video_label\na,0,0.5,1\na,1,0.5,0\n"),
    ] {
        fs::write(w.path(name), text).unwrap();
        assert_eq!(w.code(&["mine", "--scores", name, "--out", "bad"]), 2, "{name}");
    }
    assert_eq!(w.code(&["mine", "--scores", "absent.csv", "--out", "bad"]), 3);
}

#[test]
fn gradcheck_reports_every_case() {
    let w = Work::new();
    let report = w.ok(&["--seed", "2", "gradcheck", "--with-faulty-control", "--out", "g"]);
    for name in [
        "matmul",
        "layer_norm",
        "softmax",
        "dws_conv1d",
        "full_objective",
        "faulty_square",
    ] {
        assert!(report.contains(name), "{name} missing from\n{report}");
    }
    assert!(report.contains("wrong gradient detected"));
    assert_eq!(w.read("g/gradcheck.txt"), report.as_bytes());
}

#[test]
fn ablate_writes_four_rows_per_seed() {
    let w = Work::new();
    w.synth();
    let table = w.ok(&["--config", "tiny.json", "ablate", "--data", "data", "--out", "ab"]);
    assert_eq!(table.lines().count(), 5);
    let csv = String::from_utf8(w.read("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,seed,auc,ap");
    assert_eq!(lines.len(), 1 + 4 * 2);
    for (i, cfg) in ["a", "a", "b", "b", "c", "c", "d", "d"].iter().enumerate() {
        assert!(lines[i + 1].starts_with(&format!("{cfg},{}", i % 2)));
    }
}
