//! Python bindings.
//!
//! Structured results (reports, logs, predictions) cross the boundary as
//! plain dicts and lists, decoded from their JSON form.

use std::path::PathBuf;

use moevrd::analysis::gate_stats;
use moevrd::cli::model_config_for;
use moevrd::config::RunConfig;
use moevrd::data::Dataset;
use moevrd::eval::{self, Trajectory, ViouMode};
use moevrd::features::BBox;
use moevrd::gate;
use moevrd::model::{fit, MoEModel};
use moevrd::pipeline::{check_compatible, evaluate_model, predict_video};
use moevrd::synth::{generate_split, Split};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py_err(e: moevrd::Error) -> PyErr {
    let msg = e.to_string();
    match e {
        moevrd::Error::Io { .. } => PyOSError::new_err(msg),
        moevrd::Error::Numeric(_) => PyArithmeticError::new_err(msg),
        moevrd::Error::Contract(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for moevrd::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Resolved run configuration: defaults, then TOML text, then `key=value` overrides.
#[pyclass(name = "RunConfig", module = "moevrd")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = None, overrides = Vec::new()))]
    fn new(toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::from_toml_str(toml.unwrap_or(""), &overrides).py_err()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::load(Some(&path), &overrides).py_err()?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={})", self.inner.seed)
    }
}

#[pyclass(name = "Dataset", module = "moevrd")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let inner = py.detach(|| Dataset::load(&path)).py_err()?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py_err()
    }

    #[getter]
    fn num_videos(&self) -> usize {
        self.inner.videos.len()
    }

    #[getter]
    fn num_tracklets(&self) -> usize {
        self.inner.num_tracklets()
    }

    #[getter]
    fn num_relations(&self) -> usize {
        self.inner.relations.len()
    }

    #[getter]
    fn entity_classes(&self) -> Vec<String> {
        self.inner.meta.entity_classes.clone()
    }

    #[getter]
    fn predicate_classes(&self) -> Vec<String> {
        self.inner.meta.predicate_classes.clone()
    }

    #[getter]
    fn video_ids(&self) -> Vec<String> {
        self.inner.videos.iter().map(|v| v.meta.id.clone()).collect()
    }

    /// Relation counts per predicate name.
    fn predicate_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.predicate_counts())
    }

    /// Ground-truth relation records.
    fn relations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.relations)
    }

    fn __len__(&self) -> usize {
        self.inner.videos.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(videos={}, tracklets={}, relations={})",
            self.inner.videos.len(),
            self.inner.num_tracklets(),
            self.inner.relations.len()
        )
    }
}

/// Generates the `(train, test)` synthetic splits for `config`.
#[pyfunction]
fn generate(py: Python<'_>, config: &PyRunConfig) -> PyResult<(PyDataset, PyDataset)> {
    let synth = config.inner.synth_config();
    let (train, test) = py
        .detach(|| Ok::<_, moevrd::Error>((generate_split(&synth, Split::Train)?, generate_split(&synth, Split::Test)?)))
        .py_err()?;
    Ok((PyDataset { inner: train }, PyDataset { inner: test }))
}

#[pyclass(name = "Model", module = "moevrd")]
struct PyModel {
    inner: MoEModel,
}

#[pymethods]
impl PyModel {
    /// Fresh model sized for `dataset`, seeded from `config.seed` unless `seed` is given.
    #[new]
    #[pyo3(signature = (config, dataset, seed = None))]
    fn new(config: &PyRunConfig, dataset: &PyDataset, seed: Option<u64>) -> PyResult<Self> {
        let cfg = model_config_for(&config.inner, &dataset.inner);
        let inner = MoEModel::new(cfg, seed.unwrap_or(config.inner.seed)).py_err()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MoEModel::load(&path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py_err()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.inner.config.num_experts
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.config.top_k
    }

    /// Trains in place with `config.train` and returns the per-epoch log.
    fn fit<'py>(&mut self, py: Python<'py>, dataset: &PyDataset, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
        let ds = &dataset.inner;
        let train = &config.inner.train;
        let model = self.inner.clone();
        let (model, log, _) = py
            .detach(|| {
                check_compatible(&model, ds)?;
                let samples = ds.training_samples()?;
                fit(model, &samples, train, None)
            })
            .py_err()?;
        self.inner = model;
        to_object(py, &log.epochs)
    }

    /// Predicts and scores every video of `dataset` with `config.eval`.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
        let (model, ds, cfg) = (&self.inner, &dataset.inner, &config.inner.eval);
        let (_, report) = py.detach(|| evaluate_model(model, ds, cfg)).py_err()?;
        to_object(py, &report)
    }

    /// Ranked relation instances for one video.
    fn predict_video<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        video_id: &str,
        config: &PyRunConfig,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = &dataset.inner;
        let video = ds
            .videos
            .iter()
            .find(|v| v.meta.id == video_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown video `{video_id}`")))?;
        check_compatible(&self.inner, ds).py_err()?;
        let preds = predict_video(&self.inner, video, ds.meta.segment, &config.inner.eval).py_err()?;
        to_object(py, &preds)
    }

    /// Noise-free routing statistics over `dataset`.
    fn gate_stats<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let report = gate_stats(&self.inner, &dataset.inner).py_err()?;
        to_object(py, &report)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(experts={}, top_k={}, parameters={})",
            self.inner.config.num_experts,
            self.inner.config.top_k,
            self.inner.num_parameters()
        )
    }
}

fn trajectory(boxes: Vec<(u32, f64, f64, f64, f64)>) -> PyResult<Trajectory> {
    Trajectory::new(boxes.into_iter().map(|(t, x, y, w, h)| BBox::new(t, x, y, w, h)).collect()).py_err()
}

/// Trajectory overlap; boxes are `(t, cx, cy, w, h)` on contiguous frames.
#[pyfunction]
#[pyo3(signature = (a, b, mode = "volumetric"))]
fn viou(a: Vec<(u32, f64, f64, f64, f64)>, b: Vec<(u32, f64, f64, f64, f64)>, mode: &str) -> PyResult<f64> {
    let mode = match mode {
        "volumetric" => ViouMode::Volumetric,
        "shared_extent" => ViouMode::SharedExtent,
        other => return Err(PyValueError::new_err(format!("unknown vIoU mode `{other}`"))),
    };
    Ok(eval::viou(&trajectory(a)?, &trajectory(b)?, mode))
}

/// Average precision of a ranked hit list against `n_gt` ground truths.
#[pyfunction]
fn average_precision(hits: Vec<bool>, n_gt: usize) -> f64 {
    eval::average_precision(&hits, n_gt)
}

/// Squared coefficient of variation, `var / (mean² + eps)`.
#[pyfunction]
#[pyo3(signature = (values, eps = 1e-10))]
fn coefficient_of_variation(values: Vec<f64>, eps: f64) -> PyResult<f64> {
    gate::coefficient_of_variation(&values, eps).py_err()
}

/// Indices of the `k` largest values, ties to the lower index.
#[pyfunction]
fn top_k_indices(values: Vec<f64>, k: usize) -> Vec<usize> {
    gate::top_k_indices(&values, k)
}

#[pyfunction]
fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    moevrd::rng::derive_seed(root, stream, index)
}

#[pymodule]
#[pyo3(name = "moevrd")]
fn moevrd_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(viou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(coefficient_of_variation, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_indices, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
