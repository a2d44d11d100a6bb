//! Python bindings: scene synthesis, weak annotation, training, and
//! checkpoint inference in-process, without shelling out to the CLI.
//!
//! Images cross the boundary as flat row-major lists (`rgb` interleaved
//! bytes, masks as booleans); nothing here depends on numpy.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

use pks_core::config::RunConfig;
use pks_core::inference::ScoredMask;
use pks_core::params::ParamStore;
use pks_core::pgm::{GrayImage, RgbImage};
use pks_core::synth::SceneSpec;
use pks_core::train::Purpose;
use pks_core::{checkpoint, dataset, inference, synth, train, vocab, weak};

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rgb_from_flat(rgb: Vec<u8>, height: usize, width: usize) -> PyResult<RgbImage> {
    if rgb.len() != 3 * height * width {
        return Err(PyValueError::new_err(format!(
            "rgb needs 3*{height}*{width} = {} bytes, got {}",
            3 * height * width,
            rgb.len()
        )));
    }
    Ok(RgbImage { width, height, pixels: rgb })
}

/// Token list of the fixed vocabulary, in id order.
#[pyfunction]
fn vocabulary() -> Vec<String> {
    vocab::TOKENS.iter().map(|t| t.to_string()).collect()
}

/// Whitespace-tokenizes an expression into vocabulary ids.
#[pyfunction]
fn tokenize(expression: &str) -> PyResult<Vec<usize>> {
    vocab::tokenize(expression).map_err(value_err)
}

/// Renders one synthetic scene. Returns a dict with the interleaved `rgb`
/// bytes, the binary target `mask`, the referring `expression`, and sizes.
#[pyfunction]
#[pyo3(signature = (index, image_size = 64, seed = 0))]
fn generate_scene(py: Python<'_>, index: usize, image_size: usize, seed: u64) -> PyResult<Py<PyDict>> {
    let spec = SceneSpec { image_size, seed, ..SceneSpec::default() };
    let sample = synth::generate_scene(&spec, index).map_err(runtime_err)?;
    let dict = PyDict::new(py);
    dict.set_item("width", sample.image.width)?;
    dict.set_item("height", sample.image.height)?;
    dict.set_item("rgb", sample.image.pixels)?;
    let mask: Vec<bool> = sample.mask.pixels.iter().map(|&p| p > 0).collect();
    dict.set_item("mask", mask)?;
    dict.set_item("expression", sample.tokens.join(" "))?;
    dict.set_item("objects", sample.scene.objects.len())?;
    Ok(dict.into())
}

/// Writes `count` rendered samples with annotations under `root/split`.
#[pyfunction]
#[pyo3(signature = (root, split, count, image_size = 64, seed = 0, offset = 0))]
fn generate_dataset(
    root: PathBuf,
    split: &str,
    count: usize,
    image_size: usize,
    seed: u64,
    offset: usize,
) -> PyResult<()> {
    let spec = SceneSpec { image_size, seed, ..SceneSpec::default() };
    dataset::generate_split(&root, split, &spec, count, offset).map_err(runtime_err)?;
    Ok(())
}

/// Derives clicks, superpixels, and weak masks for a generated split.
/// Returns the number of records skipped for empty masks.
#[pyfunction]
#[pyo3(signature = (root, split, superpixels = 100, compactness = 10.0, iterations = 10))]
fn weak_annotate(
    root: PathBuf,
    split: &str,
    superpixels: usize,
    compactness: f64,
    iterations: usize,
) -> PyResult<usize> {
    dataset::annotate_split_weak(&root, split, superpixels, compactness, iterations)
        .map_err(runtime_err)
}

/// SLIC superpixel labels for a flat interleaved rgb image, row-major.
#[pyfunction]
#[pyo3(signature = (rgb, height, width, n_segments = 100, compactness = 10.0, iterations = 10))]
fn superpixel_labels(
    rgb: Vec<u8>,
    height: usize,
    width: usize,
    n_segments: usize,
    compactness: f64,
    iterations: usize,
) -> PyResult<Vec<u32>> {
    let image = rgb_from_flat(rgb, height, width)?;
    let map = weak::compute_superpixels(&image, n_segments, compactness, iterations)
        .map_err(value_err)?;
    Ok(map.labels)
}

/// Click-derived weak labels for a full mask: 1 = foreground, 0 = background,
/// -1 = unknown, flat row-major.
#[pyfunction]
#[pyo3(signature = (rgb, mask, height, width, n_segments = 100, compactness = 10.0, iterations = 10))]
fn weak_labels(
    rgb: Vec<u8>,
    mask: Vec<bool>,
    height: usize,
    width: usize,
    n_segments: usize,
    compactness: f64,
    iterations: usize,
) -> PyResult<Vec<i8>> {
    let image = rgb_from_flat(rgb, height, width)?;
    if mask.len() != height * width {
        return Err(PyValueError::new_err("mask length must be height*width"));
    }
    let mut gray = GrayImage::new(width, height);
    for (i, &on) in mask.iter().enumerate() {
        gray.pixels[i] = if on { 255 } else { 0 };
    }
    let clicks = weak::derive_clicks(&gray).map_err(value_err)?;
    let sp = weak::compute_superpixels(&image, n_segments, compactness, iterations)
        .map_err(value_err)?;
    Ok(weak::expand_weak_labels(&clicks, &sp))
}

/// Intersection over union of two equally-sized binary masks.
#[pyfunction]
fn iou(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("masks must have equal length"));
    }
    Ok(inference::iou(&a, &b))
}

/// Matrix NMS decay: each soft mask is binarized at `threshold` and its
/// score decayed by overlap with higher-scoring masks. Returns decayed
/// scores in input order.
#[pyfunction]
#[pyo3(signature = (soft_masks, scores, height, width, threshold = 0.5, sigma = 2.0))]
fn matrix_nms(
    soft_masks: Vec<Vec<f64>>,
    scores: Vec<f64>,
    height: usize,
    width: usize,
    threshold: f64,
    sigma: f64,
) -> PyResult<Vec<f64>> {
    if soft_masks.len() != scores.len() {
        return Err(PyValueError::new_err("need one score per mask"));
    }
    let candidates: Vec<ScoredMask> = soft_masks
        .into_iter()
        .zip(&scores)
        .map(|(soft, &score)| {
            if soft.len() != height * width {
                return Err(PyValueError::new_err("each mask must be height*width long"));
            }
            Ok(ScoredMask::new(soft, height, width, score, threshold))
        })
        .collect::<PyResult<_>>()?;
    Ok(inference::matrix_nms(&candidates, sigma))
}

/// Runs the training loop described by a JSON config file. `seed` overrides
/// the configured one. Returns a dict with the step count, final losses, and
/// the checkpoint/log paths.
#[pyfunction]
#[pyo3(signature = (config_path, seed = None))]
fn train_run(py: Python<'_>, config_path: PathBuf, seed: Option<u64>) -> PyResult<Py<PyDict>> {
    let mut cfg = RunConfig::load(&config_path).map_err(value_err)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(value_err)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(runtime_err)?;
    let summary = train::train(&cfg).map_err(runtime_err)?;
    let dict = PyDict::new(py);
    dict.set_item("steps", summary.steps_run)?;
    dict.set_item("loss_total", summary.final_loss.total)?;
    dict.set_item("loss_pos", summary.final_loss.pos)?;
    dict.set_item("loss_seg", summary.final_loss.seg)?;
    dict.set_item("last_val_miou", summary.last_val.as_ref().map(|v| v.miou))?;
    dict.set_item("checkpoint", summary.checkpoint_path)?;
    dict.set_item("log", summary.log_path)?;
    Ok(dict.into())
}

/// A trained model loaded from a checkpoint, ready for segmentation.
#[pyclass]
struct Segmenter {
    cfg: RunConfig,
    params: ParamStore,
}

#[pymethods]
impl Segmenter {
    /// Loads a checkpoint written by training.
    #[new]
    fn new(checkpoint_path: PathBuf) -> PyResult<Self> {
        let ckpt = checkpoint::load(&checkpoint_path).map_err(runtime_err)?;
        Ok(Segmenter { cfg: ckpt.config, params: ckpt.params })
    }

    /// Model configuration as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.cfg).map_err(runtime_err)
    }

    /// Segments a flat interleaved rgb image given a referring expression.
    /// Returns a dict with the full-resolution boolean `mask`, the
    /// quarter-resolution `quarter` it was upsampled from, and sizes.
    fn predict(
        &self,
        py: Python<'_>,
        rgb: Vec<u8>,
        expression: &str,
    ) -> PyResult<Py<PyDict>> {
        let size = self.cfg.image_size;
        let image = rgb_from_flat(rgb, size, size)?;
        let tokens = vocab::tokenize(expression).map_err(value_err)?;
        let planar = image.to_planar_f64();
        let out = train::infer_sample(&self.params, &self.cfg, &planar, &tokens, None)
            .map_err(runtime_err)?;
        let dict = PyDict::new(py);
        dict.set_item("mask", out.mask)?;
        dict.set_item("quarter", out.quarter)?;
        dict.set_item("size", size)?;
        dict.set_item("quarter_size", size / 4)?;
        dict.set_item("n_candidates", out.n_candidates)?;
        Ok(dict.into())
    }

    /// Segments a PPM image file given a referring expression.
    fn predict_file(
        &self,
        py: Python<'_>,
        image_path: PathBuf,
        expression: &str,
    ) -> PyResult<Py<PyDict>> {
        let image = pks_core::pgm::read_ppm(&image_path).map_err(runtime_err)?;
        if image.width != self.cfg.image_size || image.height != self.cfg.image_size {
            return Err(PyValueError::new_err(format!(
                "image is {}x{}, the model expects {}x{}",
                image.width, image.height, self.cfg.image_size, self.cfg.image_size
            )));
        }
        self.predict(py, image.pixels, expression)
    }

    /// Scores the model over a generated split. Returns a dict with mIoU
    /// and precision at the standard overlap thresholds.
    fn evaluate(&self, py: Python<'_>, data_root: PathBuf, split: &str) -> PyResult<Py<PyDict>> {
        let mut cfg = self.cfg.clone();
        cfg.data_root = data_root;
        let raw = dataset::read_split(&cfg.data_root, split).map_err(runtime_err)?;
        let prepared = train::prepare_samples(&cfg, &raw, Purpose::Eval).map_err(runtime_err)?;
        let report = train::evaluate_samples(&self.params, &cfg, &prepared).map_err(runtime_err)?;
        let dict = PyDict::new(py);
        dict.set_item("miou", report.miou)?;
        let p = report.prec_values();
        for (name, value) in ["prec@0.5", "prec@0.6", "prec@0.7", "prec@0.8", "prec@0.9"]
            .iter()
            .zip(p)
        {
            dict.set_item(name, value)?;
        }
        dict.set_item("n", report.samples.len())?;
        Ok(dict.into())
    }
}

#[pymodule]
fn pks_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Segmenter>()?;
    m.add_function(wrap_pyfunction!(vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(weak_annotate, m)?)?;
    m.add_function(wrap_pyfunction!(superpixel_labels, m)?)?;
    m.add_function(wrap_pyfunction!(weak_labels, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_nms, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    Ok(())
}
