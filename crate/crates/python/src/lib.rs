//! Python bindings: dataset generation and loading, training, evaluation,
//! mining, metrics and the gradient suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wvad_core::ablation::run_ablation;
use wvad_core::checkpoint::{load_checkpoint, save_checkpoint};
use wvad_core::config::RunConfig;
use wvad_core::encoder::ModelParams;
use wvad_core::eval::evaluate as core_evaluate;
use wvad_core::gradsuite::run_suite;
use wvad_core::metrics;
use wvad_core::mining::mine_video as core_mine_video;
use wvad_core::synthdata::{generate, Dataset, Split, Video};
use wvad_core::tensor_core::Tensor;
use wvad_core::trainer::{train as core_train, LogRow, TrainOutput};
use wvad_core::Error;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Numerical(_) | Error::UndefinedMetric(_) => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!(
            "split must be 'train' or 'test', got {other:?}"
        ))),
    }
}

fn config_or_default(config: Option<PyRef<'_, PyRunConfig>>) -> RunConfig {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

/// Every setting of a run: synthetic data, training, ablation and gradient checks.
#[pyclass(name = "RunConfig", module = "wvad", frozen)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses a JSON document; omitted fields keep their defaults.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => RunConfig::from_json(text).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({})", self.inner.to_json())
    }
}

/// Videos of snippet features with weak labels and, for the test split, frame labels.
#[pyclass(name = "Dataset", module = "wvad", frozen)]
struct PyDataset {
    inner: Dataset,
}

impl PyDataset {
    fn find(&self, id: &str) -> PyResult<&Video> {
        self.inner
            .videos
            .iter()
            .find(|v| v.record.id == id)
            .ok_or_else(|| PyValueError::new_err(format!("no video {id:?}")))
    }
}

#[pymethods]
impl PyDataset {
    /// Generates the synthetic dataset described by `config.synth`.
    #[staticmethod]
    #[pyo3(signature = (config = None))]
    fn generate(py: Python<'_>, config: Option<PyRef<'_, PyRunConfig>>) -> PyResult<Self> {
        let cfg = config_or_default(config).synth;
        let inner = py.detach(|| generate(&cfg)).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: Dataset::load(&path).map_err(to_py)?,
        })
    }

    /// Writes `manifest.json`, `features/` and `labels/` under `path`.
    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(to_py)
    }

    #[getter]
    fn snippets(&self) -> usize {
        self.inner.manifest.snippets
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.manifest.input_dim
    }

    #[getter]
    fn frames_per_snippet(&self) -> usize {
        self.inner.manifest.frames_per_snippet
    }

    /// Video ids in manifest order, optionally restricted to `"train"` or `"test"`.
    #[pyo3(signature = (split = None))]
    fn video_ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        let split = split.map(parse_split).transpose()?;
        Ok(self
            .inner
            .videos
            .iter()
            .filter(|v| split.is_none_or(|s| v.record.split == s))
            .map(|v| v.record.id.clone())
            .collect())
    }

    /// One video as a dict with its label, features and available ground truth.
    fn video<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyDict>> {
        let v = self.find(id)?;
        let d = PyDict::new(py);
        d.set_item("id", &v.record.id)?;
        d.set_item(
            "split",
            if v.record.split == Split::Train {
                "train"
            } else {
                "test"
            },
        )?;
        d.set_item("video_label", v.record.video_label)?;
        d.set_item("num_frames", v.record.num_frames)?;
        let rows: Vec<Vec<f64>> = (0..v.features.rows()).map(|r| v.features.row(r).to_vec()).collect();
        d.set_item("features", rows)?;
        d.set_item("frame_labels", v.frame_labels.clone())?;
        d.set_item("snippet_labels", v.snippet_labels.clone())?;
        Ok(d)
    }

    fn __len__(&self) -> usize {
        self.inner.videos.len()
    }

    fn __repr__(&self) -> String {
        let m = &self.inner.manifest;
        format!(
            "Dataset(videos={}, snippets={}, input_dim={})",
            m.videos.len(),
            m.snippets,
            m.input_dim
        )
    }
}

/// Trained or freshly initialised network parameters.
#[pyclass(name = "Model", module = "wvad", frozen)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Initialises the encoder described by `config.train.encoder`.
    #[staticmethod]
    #[pyo3(signature = (config = None, seed = 0))]
    fn init(config: Option<PyRef<'_, PyRunConfig>>, seed: u64) -> PyResult<Self> {
        let cfg = config_or_default(config).train.encoder;
        Ok(PyModel {
            inner: ModelParams::init(&cfg, seed).map_err(to_py)?,
        })
    }

    /// Reads the parameters of a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(&path).map_err(to_py)?.params,
        })
    }

    /// Writes a parameters-only checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, None).map_err(to_py)
    }

    /// Snippet scores and, when the model has a video head, the video score.
    fn score(&self, features: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Option<f64>)> {
        let x = Tensor::from_rows(&features).map_err(to_py)?;
        self.inner.score(&x).map_err(to_py)
    }

    #[getter]
    fn parameter_names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    #[getter]
    fn num_values(&self) -> usize {
        self.inner.num_values()
    }

    #[getter]
    fn has_video_head(&self) -> bool {
        self.inner.has_video_head()
    }
}

fn log_dict<'py>(py: Python<'py>, r: &LogRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("epoch", r.epoch)?;
    d.set_item("l_total", r.l_total)?;
    d.set_item("l_snp", r.l_snp)?;
    d.set_item("l_vid", r.l_vid)?;
    d.set_item("l_reg", r.l_reg)?;
    d.set_item("l_cnt", r.l_cnt)?;
    d.set_item("hard_abnormal", r.hard_abnormal)?;
    d.set_item("hard_normal", r.hard_normal)?;
    Ok(d)
}

/// Trains with `config.train`; returns the model and one log dict per step.
/// With `out_dir`, the checkpoint and log are also written there after every epoch.
#[pyfunction]
#[pyo3(signature = (dataset, config = None, out_dir = None))]
fn train<'py>(
    py: Python<'py>,
    dataset: PyRef<'_, PyDataset>,
    config: Option<PyRef<'_, PyRunConfig>>,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let cfg = config_or_default(config);
    cfg.check_dataset(&dataset.inner.manifest).map_err(to_py)?;
    let output = TrainOutput {
        dir: out_dir,
        previous_log: Vec::new(),
    };
    let data = &dataset.inner;
    let outcome = py.detach(|| core_train(data, &cfg.train, &output)).map_err(to_py)?;
    let log = outcome.log.iter().map(|r| log_dict(py, r)).collect::<PyResult<_>>()?;
    Ok((
        PyModel {
            inner: outcome.state.params,
        },
        log,
    ))
}

/// Frame-level `{"auc", "ap"}` on the test split.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    model: PyRef<'_, PyModel>,
    dataset: PyRef<'_, PyDataset>,
) -> PyResult<Bound<'py, PyDict>> {
    let report = core_evaluate(&model.inner, &dataset.inner).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("auc", report.auc)?;
    d.set_item("ap", report.ap)?;
    Ok(d)
}

/// Trains and evaluates the four ablation variants for each of `config.ablation.seeds`.
#[pyfunction]
#[pyo3(signature = (dataset, config = None))]
fn ablate<'py>(
    py: Python<'py>,
    dataset: PyRef<'_, PyDataset>,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config_or_default(config);
    cfg.check_dataset(&dataset.inner.manifest).map_err(to_py)?;
    let data = &dataset.inner;
    let rows = py
        .detach(|| run_ablation(data, &cfg.train, &cfg.ablation.seeds))
        .map_err(to_py)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("config", r.config.to_string())?;
            d.set_item("seed", r.seed)?;
            d.set_item("auc", r.auc)?;
            d.set_item("ap", r.ap)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::average_precision(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn snippet_to_frame_scores(scores: Vec<f64>, num_frames: usize) -> PyResult<Vec<f64>> {
    metrics::snippet_to_frame_scores(&scores, num_frames).map_err(to_py)
}

/// `(hard, easy)` snippet indices of one video under `config.train.mining`.
#[pyfunction]
#[pyo3(signature = (scores, abnormal, config = None))]
fn mine_video(
    scores: Vec<f64>,
    abnormal: bool,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let cfg = config_or_default(config).train.mining;
    cfg.validate(scores.len()).map_err(to_py)?;
    let m = core_mine_video(&scores, abnormal, &cfg).map_err(to_py)?;
    Ok((m.hard, m.easy))
}

/// Runs the finite-difference gradient suite over `config.gradcheck`.
#[pyfunction]
#[pyo3(signature = (config = None, with_faulty_control = false))]
fn gradcheck<'py>(
    py: Python<'py>,
    config: Option<PyRef<'_, PyRunConfig>>,
    with_faulty_control: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let g = config_or_default(config).gradcheck;
    let report = py
        .detach(|| run_suite(&g.seeds, g.check(), with_faulty_control))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    let genuine_ok = report.failures().all(|r| r.name == wvad_core::gradsuite::FAULTY_CASE);
    d.set_item("passed", genuine_ok)?;
    d.set_item("max_rel_error", report.max_rel_error())?;
    d.set_item("cases", report.case_names())?;
    d.set_item("report", report.to_string())?;
    Ok(d)
}

/// Runs the command-line tool with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("wvad".to_string()).chain(args).collect();
    py.detach(|| wvad_core::cli::run(argv))
}

#[pymodule]
fn wvad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(snippet_to_frame_scores, m)?)?;
    m.add_function(wrap_pyfunction!(mine_video, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
