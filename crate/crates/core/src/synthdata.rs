//! Synthetic weak-label feature-sequence datasets and their on-disk format.
//!
//! Normal snippets are standard normal vectors. Abnormal regions add a mean
//! shift to the first quarter of the coordinates (a quarter of the shift for
//! subtle regions), region boundary snippets are partial blends, and normal
//! videos may contain a distractor burst shifted along the third quarter of
//! the coordinates.
//!
//! Directory layout:
//!
//! ```text
//! manifest.json
//! features/<id>.wvfd    "WVFD", u32 version, u32 T, u32 D, T·D f32 (all LE)
//! labels/<id>.bin       one byte (0 or 1) per frame, test split only
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"WVFD";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_normal_train: usize,
    pub n_abnormal_train: usize,
    pub n_normal_test: usize,
    pub n_abnormal_test: usize,
    pub snippets: usize,
    pub frames_per_snippet: usize,
    pub input_dim: usize,
    /// Mean offset of standard abnormal snippets.
    pub anomaly_shift: f64,
    /// Fraction of abnormal regions that use a quarter of the shift.
    pub subtle_fraction: f64,
    /// Blend the first and last snippet of each region with weight U(0.3, 0.7).
    pub edge_blend: bool,
    /// Probability that a normal video contains a distractor burst.
    pub distractor_prob: f64,
    /// Inclusive `[min, max]` length of abnormal regions and distractor bursts.
    pub region_len_range: [usize; 2],
    /// Probability that an abnormal video has a second region.
    pub second_region_prob: f64,
    /// Rotate all features by one random orthogonal matrix.
    pub orthogonal_mixing: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_normal_train: 40,
            n_abnormal_train: 40,
            n_normal_test: 15,
            n_abnormal_test: 15,
            snippets: 32,
            frames_per_snippet: 16,
            input_dim: 32,
            anomaly_shift: 4.0,
            subtle_fraction: 0.3,
            edge_blend: true,
            distractor_prob: 0.5,
            region_len_range: [4, 10],
            second_region_prob: 0.25,
            orthogonal_mixing: false,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.region_len_range;
        let fail = |m: String| Err(Error::Config(m));
        if self.snippets == 0 || self.frames_per_snippet == 0 {
            return fail("snippets and frames_per_snippet must be positive".into());
        }
        if self.input_dim < 4 {
            return fail(format!("input_dim must be at least 4, got {}", self.input_dim));
        }
        if lo == 0 || lo > hi || hi > self.snippets {
            return fail(format!(
                "region_len_range {:?} must satisfy 1 <= min <= max <= {}",
                self.region_len_range, self.snippets
            ));
        }
        for (name, p) in [
            ("subtle_fraction", self.subtle_fraction),
            ("distractor_prob", self.distractor_prob),
            ("second_region_prob", self.second_region_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !self.anomaly_shift.is_finite() {
            return fail("anomaly_shift must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub split: Split,
    pub video_label: u8,
    pub num_frames: usize,
    pub feature_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub snippets: usize,
    pub input_dim: usize,
    pub frames_per_snippet: usize,
    pub videos: Vec<VideoRecord>,
}

/// One video with its features and, for the test split, frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub record: VideoRecord,
    pub features: Tensor,
    pub frame_labels: Option<Vec<bool>>,
    /// Per-snippet ground truth, kept only for in-memory analysis.
    pub snippet_labels: Vec<bool>,
    /// Per-snippet abnormal shift magnitude (0 for normal snippets).
    pub snippet_shift: Vec<f64>,
}

impl Video {
    pub fn is_abnormal(&self) -> bool {
        self.record.video_label == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.record.split == split)
    }

    /// Writes the manifest, feature files and test label files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
        fs::create_dir_all(dir.join("labels")).map_err(|e| Error::io(dir, e))?;
        for v in &self.videos {
            write_features(&v.features, &dir.join(&v.record.feature_file))?;
            if let (Some(file), Some(labels)) = (&v.record.label_file, &v.frame_labels) {
                let path = dir.join(file);
                let bytes: Vec<u8> = labels.iter().map(|&l| u8::from(l)).collect();
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::format(&path, 0, e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a dataset directory written by [`Dataset::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&path, e.column() as u64, format!("line {}: {e}", e.line())))?;
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for rec in &manifest.videos {
            let fpath = dir.join(&rec.feature_file);
            let features = load_features(&fpath)?;
            if features.shape() != [manifest.snippets, manifest.input_dim] {
                return Err(Error::format(
                    &fpath,
                    8,
                    format!(
                        "shape {:?} disagrees with manifest [{}, {}]",
                        features.shape(),
                        manifest.snippets,
                        manifest.input_dim
                    ),
                ));
            }
            let frame_labels = match &rec.label_file {
                Some(file) => Some(load_frame_labels(&dir.join(file), rec.num_frames)?),
                None => None,
            };
            videos.push(Video {
                record: rec.clone(),
                features,
                snippet_labels: Vec::new(),
                snippet_shift: Vec::new(),
                frame_labels,
            });
        }
        Ok(Dataset { manifest, videos })
    }
}

fn load_frame_labels(path: &Path, num_frames: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != num_frames {
        return Err(Error::format(
            path,
            bytes.len().min(num_frames) as u64,
            format!("expected {num_frames} label bytes, found {}", bytes.len()),
        ));
    }
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::format(path, i as u64, format!("label byte {b:#04x}"))),
        })
        .collect()
}

/// Serialises a `[T×D]` feature matrix.
pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "feature files hold matrices, got shape {:?}",
            features.shape()
        )));
    }
    if !features.is_finite() {
        return Err(Error::Numerical("feature matrix is not finite".into()));
    }
    let (t, d) = features.dims2();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for dim in [t, d] {
        let dim = u32::try_from(dim).map_err(|_| Error::Dimension(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature file image; `path` is only used in error messages.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected WVFD"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(Error::format(path, 8, format!("empty shape {t}×{d}")));
    }
    let payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, 8, format!("shape {t}×{d} overflows")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated payload: {t}×{d} needs {payload} bytes, found {}", body.len()),
        ));
    }
    if body.len() > payload {
        return Err(Error::format(
            path,
            (HEADER_LEN + payload) as u64,
            "trailing bytes after payload",
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::matrix(t, d, data)
}

pub fn write_features(features: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_features(features)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Generator seeded per video so videos are independent of each other.
fn video_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn random_orthogonal(dim: usize, seed: u64) -> Vec<f64> {
    // Gram–Schmidt on a Gaussian matrix; rows form the basis.
    let mut rng = video_rng(seed, u64::MAX);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

fn place_region(rng: &mut ChaCha8Rng, cfg: &SynthConfig, taken: &[bool]) -> Option<(usize, usize)> {
    let [lo, hi] = cfg.region_len_range;
    for _ in 0..32 {
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=cfg.snippets - len);
        // keep one snippet of normal context between regions
        let lo_guard = start.saturating_sub(1);
        let hi_guard = (start + len).min(cfg.snippets - 1);
        if !taken[lo_guard..=hi_guard].iter().any(|&x| x) {
            return Some((start, len));
        }
    }
    None
}

struct SynthVideo {
    features: Vec<f64>,
    labels: Vec<bool>,
    shift: Vec<f64>,
}

fn synth_video(cfg: &SynthConfig, abnormal: bool, rng: &mut ChaCha8Rng) -> SynthVideo {
    let (t_len, d) = (cfg.snippets, cfg.input_dim);
    let mut features: Vec<f64> = (0..t_len * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut labels = vec![false; t_len];
    let mut shift = vec![0.0; t_len];
    let quarter = d / 4;
    if abnormal {
        let regions = if rng.random::<f64>() < cfg.second_region_prob {
            2
        } else {
            1
        };
        for r in 0..regions {
            let Some((start, len)) = place_region(rng, cfg, &labels) else {
                debug_assert!(r > 0, "the first region always fits");
                break;
            };
            let magnitude = if rng.random::<f64>() < cfg.subtle_fraction {
                cfg.anomaly_shift / 4.0
            } else {
                cfg.anomaly_shift
            };
            for t in start..start + len {
                let boundary = len >= 3 && (t == start || t == start + len - 1);
                let lambda = if cfg.edge_blend && boundary {
                    rng.random_range(0.3..0.7)
                } else {
                    1.0
                };
                for c in 0..quarter {
                    features[t * d + c] += lambda * magnitude;
                }
                labels[t] = true;
                shift[t] = lambda * magnitude;
            }
        }
    } else if rng.random::<f64>() < cfg.distractor_prob {
        let [lo, hi] = cfg.region_len_range;
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=t_len - len);
        for t in start..start + len {
            for c in d / 2..d / 2 + quarter {
                features[t * d + c] += cfg.anomaly_shift;
            }
        }
    }
    SynthVideo {
        features,
        labels,
        shift,
    }
}

/// Generates a dataset in memory. Feature values are rounded to `f32`, the
/// precision of the file format, so a written and reloaded dataset is equal.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mixing = cfg
        .orthogonal_mixing
        .then(|| random_orthogonal(cfg.input_dim, cfg.seed));
    let groups = [
        (Split::Train, false, cfg.n_normal_train),
        (Split::Train, true, cfg.n_abnormal_train),
        (Split::Test, false, cfg.n_normal_test),
        (Split::Test, true, cfg.n_abnormal_test),
    ];
    let num_frames = cfg.snippets * cfg.frames_per_snippet;
    let d = cfg.input_dim;
    let mut videos = Vec::new();
    let mut index = 0u64;
    for (split, abnormal, count) in groups {
        for i in 0..count {
            let mut rng = video_rng(cfg.seed, index);
            index += 1;
            let mut sv = synth_video(cfg, abnormal, &mut rng);
            if let Some(q) = &mixing {
                for row in sv.features.chunks_mut(d) {
                    let mixed: Vec<f64> = (0..d)
                        .map(|j| row.iter().enumerate().map(|(k, x)| x * q[k * d + j]).sum())
                        .collect();
                    row.copy_from_slice(&mixed);
                }
            }
            let data = sv.features.iter().map(|&v| v as f32 as f64).collect();
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let kind = if abnormal { "abn" } else { "nrm" };
            let id = format!("{prefix}_{kind}_{i:04}");
            let frame_labels: Vec<bool> = sv
                .labels
                .iter()
                .flat_map(|&l| std::iter::repeat_n(l, cfg.frames_per_snippet))
                .collect();
            let is_test = split == Split::Test;
            videos.push(Video {
                record: VideoRecord {
                    feature_file: format!("features/{id}.wvfd"),
                    label_file: is_test.then(|| format!("labels/{id}.bin")),
                    id,
                    split,
                    video_label: u8::from(abnormal),
                    num_frames,
                },
                features: Tensor::matrix(cfg.snippets, d, data)?,
                frame_labels: is_test.then_some(frame_labels),
                snippet_labels: sv.labels,
                snippet_shift: sv.shift,
            });
        }
    }
    let manifest = Manifest {
        version: FEATURE_VERSION,
        snippets: cfg.snippets,
        input_dim: cfg.input_dim,
        frames_per_snippet: cfg.frames_per_snippet,
        videos: videos.iter().map(|v| v.record.clone()).collect(),
    };
    Ok(Dataset { manifest, videos })
}

/// Generates a dataset and writes it to `dir`.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate(cfg)?;
    ds.write(dir)?;
    Ok(ds)
}
