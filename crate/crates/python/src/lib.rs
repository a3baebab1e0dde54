//! Python bindings. Prompt sets cross the boundary as the JSON wire
//! documents; masks as `(height, width, flat list of bools)` or RLE dicts.

use std::path::PathBuf;

use promptseg::eval::{self, BenchConfig, EvalOptions};
use promptseg::model::{self, ImageEmbedding, ModelConfig};
use promptseg::preprocess;
use promptseg::sim::{self, NextClick};
use promptseg::tensor::Tensor;
use promptseg::training::{self, TrainConfig, Trainer};
use promptseg::{Mask, PromptSet};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: promptseg::Error) -> PyErr {
    match e {
        promptseg::Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn prompts(doc: Option<&str>) -> PyResult<PromptSet> {
    doc.map_or(Ok(PromptSet::default()), |d| PromptSet::from_json(d).map_err(err))
}

fn to_mask(height: usize, width: usize, data: Vec<bool>) -> PyResult<Mask> {
    Mask::new(height, width, data).map_err(err)
}

/// Binary mask with row-major data.
#[pyclass(name = "Mask", module = "promptseg_py")]
#[derive(Clone)]
struct PyMask {
    inner: Mask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(height: usize, width: usize, data: Vec<bool>) -> PyResult<Self> {
        Ok(Self { inner: to_mask(height, width, data)? })
    }

    #[staticmethod]
    fn from_rle(json: &str) -> PyResult<Self> {
        let rle: promptseg::Rle = serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner: rle.decode().map_err(err)? })
    }

    fn to_rle(&self) -> String {
        serde_json::to_string(&self.inner.to_rle()).expect("rle serializes")
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn area(&self) -> usize {
        self.inner.area()
    }

    fn data(&self) -> Vec<bool> {
        self.inner.data().to_vec()
    }

    fn iou(&self, other: &PyMask) -> PyResult<f64> {
        eval::iou(&self.inner, &other.inner).map_err(err)
    }

    fn __eq__(&self, other: &PyMask) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.shape();
        format!("Mask({h}x{w}, area={})", self.inner.area())
    }
}

/// Cached encoder output for one image.
#[pyclass(name = "Embedding", module = "promptseg_py")]
struct PyEmbedding {
    inner: ImageEmbedding,
}

#[pymethods]
impl PyEmbedding {
    #[getter]
    fn image_hash(&self) -> String {
        self.inner.image_hash().to_string()
    }

    #[getter]
    fn size_bytes(&self) -> usize {
        self.inner.size_bytes()
    }
}

#[pyclass(name = "Model", module = "promptseg_py")]
struct PyModel {
    inner: model::Model,
}

fn image_tensor(height: usize, width: usize, rgb: Vec<f32>) -> PyResult<Tensor<f32>> {
    Tensor::new(&[3, height, width], rgb).map_err(err)
}

#[pymethods]
impl PyModel {
    /// `config` is a JSON model config; omitted fields take defaults.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = match config {
            Some(c) => serde_json::from_str(c).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::default(),
        };
        Ok(Self { inner: model::Model::new(cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: model::load_checkpoint(&path).map_err(err)?.model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&path, &self.inner, None).map_err(err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config().input_size
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serializes")
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.config().fingerprint()
    }

    fn weights_fingerprint(&self) -> String {
        self.inner.weights_fingerprint()
    }

    fn num_params(&self) -> usize {
        self.inner.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// `rgb` is a channel-major `3×H×W` list in `[0, 1]`; it is resized to the
    /// model input and normalized.
    fn encode(&self, py: Python<'_>, height: usize, width: usize, rgb: Vec<f32>) -> PyResult<PyEmbedding> {
        let img = image_tensor(height, width, rgb)?;
        let size = self.inner.config().input_size;
        let inner = py
            .allow_threads(|| preprocess::model_input(&img, size).and_then(|x| self.inner.encode_image(&x)))
            .map_err(err)?;
        Ok(PyEmbedding { inner })
    }

    #[pyo3(signature = (embedding, prompts=None))]
    fn predict(&self, py: Python<'_>, embedding: &PyEmbedding, prompts: Option<&str>) -> PyResult<PyMask> {
        let p = self::prompts(prompts)?;
        let logits = py.allow_threads(|| self.inner.predict(&embedding.inner, &p)).map_err(err)?;
        Ok(PyMask { inner: logits.to_mask() })
    }

    /// Single pass from image to mask, re-encoding every call.
    #[pyo3(signature = (height, width, rgb, prompts=None))]
    fn forward(&self, py: Python<'_>, height: usize, width: usize, rgb: Vec<f32>, prompts: Option<&str>) -> PyResult<PyMask> {
        let img = image_tensor(height, width, rgb)?;
        let p = self::prompts(prompts)?;
        let size = self.inner.config().input_size;
        let logits = py
            .allow_threads(|| preprocess::model_input(&img, size).and_then(|x| self.inner.forward(&x, &p)))
            .map_err(err)?;
        Ok(PyMask { inner: logits.to_mask() })
    }

    /// Runs the click benchmark on a dataset folder and writes the report.
    #[pyo3(signature = (data_dir, out_dir, max_clicks=20, mask_feedback=true))]
    fn evaluate(&self, data_dir: PathBuf, out_dir: PathBuf, max_clicks: usize, mask_feedback: bool) -> PyResult<String> {
        let size = self.inner.config().input_size;
        let samples: Vec<_> = training::load_dataset(&data_dir)
            .and_then(|s| s.iter().map(|x| x.resized(size, preprocess::ResizeMode::Test)).collect())
            .map_err(err)?;
        let cfg = BenchConfig { options: EvalOptions { max_clicks, mask_feedback }, ..Default::default() };
        let report = eval::run_benchmark(&self.inner, &samples, &cfg).map_err(err)?;
        eval::write_report(&report, &out_dir).map_err(err)?;
        Ok(report.to_json())
    }
}

/// Dense `3×H×W` prompt map as a flat channel-major list.
#[pyfunction]
fn rasterize(prompts: &str, height: usize, width: usize, radius: u32) -> PyResult<Vec<f32>> {
    let p = PromptSet::from_json(prompts).map_err(err)?;
    Ok(promptseg::prompt::rasterize(&p, height, width, radius).map_err(err)?.data().to_vec())
}

/// Next corrective click as `(row, col, polarity)`, or `None` when converged.
#[pyfunction]
fn next_click(pred: &PyMask, gt: &PyMask) -> PyResult<Option<(i64, i64, String)>> {
    Ok(match sim::simulate_iterative(&pred.inner, &gt.inner).map_err(err)? {
        NextClick::Converged => None,
        NextClick::Click(c) => {
            let pol = serde_json::to_value(c.polarity).expect("polarity serializes");
            Some((c.row, c.col, pol.as_str().unwrap_or_default().to_string()))
        }
    })
}

/// Trains from a JSON config, writing checkpoints to `out_dir`; returns the
/// metrics log as JSON.
#[pyfunction]
fn train(py: Python<'_>, config: &str, out_dir: PathBuf) -> PyResult<String> {
    let cfg: TrainConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let log = py
        .allow_threads(|| {
            let data = cfg.load_data()?;
            let mut trainer = Trainer::new(cfg)?;
            training::fit(&mut trainer, &data, Some(&out_dir), |_| {})
        })
        .map_err(err)?;
    Ok(serde_json::to_string(&log.metrics).expect("metrics serialize"))
}

/// Writes a synthetic dataset folder.
#[pyfunction]
fn synthetic_dataset(out_dir: PathBuf, n: usize, height: usize, width: usize, seed: u64) -> PyResult<()> {
    let data = training::generate_synthetic_dataset(n, height, width, seed).map_err(err)?;
    training::save_dataset(&data, &out_dir).map_err(err)
}

#[pymodule]
fn promptseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_class::<PyEmbedding>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(next_click, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    Ok(())
}
