use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mrcdet::cost::{count_flops, count_params};
use mrcdet::data::{generate, load_samples, GenConfig, Image, Manifest, Split};
use mrcdet::gradcheck::{run_module, GradCheckConfig};
use mrcdet::metrics::{self, BBox};
use mrcdet::model::{checkpoint, train};
use mrcdet::{Detector, ExperimentConfig, Mode, Preset, Tensor};

fn err(e: mrcdet::Error) -> PyErr {
    match e {
        mrcdet::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Box4 = (f64, f64, f64, f64);

/// `(x1, y1, x2, y2, class_id, score)` rows.
type DetRow = (f64, f64, f64, f64, usize, f64);

fn image_tensor(pixels: Vec<f32>, height: usize, width: usize) -> PyResult<Tensor<f32>> {
    Tensor::from_vec([1, 3, height, width], pixels).map_err(err)
}

#[pyclass(name = "Detector")]
struct PyDetector {
    inner: Detector<f32>,
}

#[pymethods]
impl PyDetector {
    /// `config` is a JSON string of overrides on top of `preset`.
    #[new]
    #[pyo3(signature = (config=None, preset="desk", seed=None))]
    fn new(config: Option<&str>, preset: &str, seed: Option<u64>) -> PyResult<Self> {
        let preset: Preset = preset.parse().map_err(err)?;
        let mut cfg = match config {
            Some(json) => ExperimentConfig::preset(preset).overlay(json).map_err(err)?,
            None => ExperimentConfig::preset(preset),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        Ok(PyDetector {
            inner: Detector::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, _) = checkpoint::load_file(Path::new(path)).map_err(err)?;
        Ok(PyDetector { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_file(Path::new(path), &self.inner, None).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> u64 {
        count_params(&self.inner.store)
    }

    fn flops(&mut self, height: usize, width: usize) -> PyResult<u64> {
        count_flops(&mut self.inner, [1, 3, height, width]).map_err(err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json_string(&self.inner.config)
    }

    /// Raw head maps for one CHW image with values in [0, 1], as
    /// `(flat data, [N, C, H, W])` pairs for strides 8, 16 and 32.
    fn forward(&mut self, pixels: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<(Vec<f32>, [usize; 4])>> {
        let x = image_tensor(pixels, height, width)?;
        let maps = self.inner.forward_maps(&x, Mode::Eval).map_err(err)?;
        Ok(maps.into_iter().map(|m| (m.data().to_vec(), m.shape())).collect())
    }

    fn predict(&mut self, pixels: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<DetRow>> {
        let x = image_tensor(pixels, height, width)?;
        let dets = self.inner.predict(&x).map_err(err)?;
        Ok(rows(&dets[0]))
    }

    /// Detections for a PPM or PGM file.
    fn predict_file(&mut self, path: &str) -> PyResult<Vec<DetRow>> {
        let img = Image::read(Path::new(path)).map_err(err)?;
        let dets = self.inner.predict(&img.to_tensor()).map_err(err)?;
        Ok(rows(&dets[0]))
    }

    fn __repr__(&self) -> String {
        format!(
            "Detector(attention={}, width={}, params={})",
            self.inner.config.aspn.attention,
            self.inner.config.aspn.width,
            count_params(&self.inner.store)
        )
    }
}

fn serde_json_string(cfg: &ExperimentConfig) -> PyResult<String> {
    serde_json::to_string_pretty(cfg).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(dets: &[metrics::Detection]) -> Vec<DetRow> {
    dets.iter()
        .map(|d| (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.class_id, d.score))
        .collect()
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> f64 {
    metrics::iou(&BBox::new(a.0, a.1, a.2, a.3), &BBox::new(b.0, b.1, b.2, b.3))
}

/// All-point AP of `(score, is_true_positive)` pairs; `None` without ground truth.
#[pyfunction]
fn average_precision(scored: Vec<(f64, bool)>, gt_count: usize) -> Option<f64> {
    metrics::average_precision(&scored, gt_count)
}

/// Writes a synthetic dataset and returns the number of images.
#[pyfunction]
#[pyo3(signature = (out, count=200, size=64, seed=0, train_frac=0.8))]
fn generate_dataset(out: &str, count: usize, size: usize, seed: u64, train_frac: f64) -> PyResult<usize> {
    let cfg = GenConfig {
        count,
        size,
        seed,
        train_frac,
        ..GenConfig::default()
    };
    Ok(generate(&cfg, Path::new(out)).map_err(err)?.records.len())
}

/// `(suite, max relative error, passed)` per finite-difference suite.
#[pyfunction]
#[pyo3(signature = (module="all", seed=0))]
fn gradcheck(module: &str, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let reports = run_module(module, &cfg).map_err(err)?;
    Ok(reports
        .iter()
        .map(|r| (r.suite.clone(), r.max_rel_error(), r.passed()))
        .collect())
}

/// Evaluation report (JSON) of a checkpoint on one split of a dataset.
#[pyfunction]
#[pyo3(signature = (ckpt, data, split="val"))]
fn evaluate(ckpt: &str, data: &str, split: &str) -> PyResult<String> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        s => return Err(PyValueError::new_err(format!("unknown split {s:?}"))),
    };
    let (mut det, _) = checkpoint::load_file::<f32>(Path::new(ckpt)).map_err(err)?;
    let manifest = Manifest::load(Path::new(data)).map_err(err)?;
    let samples = load_samples(&manifest, Path::new(data), split).map_err(err)?;
    let report = train::evaluate(&mut det, &samples, &manifest.classes).map_err(err)?;
    Ok(report.to_json())
}

#[pymodule]
fn mrcdet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
