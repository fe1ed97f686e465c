//! Python bindings: feature maps, the attention module, CAM localization,
//! and the synthetic data generator, mirroring the Rust API shapes.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use dfm_core::cam;
use dfm_core::data;
use dfm_core::dfm;
use dfm_core::rng::{RngStream, StreamKind};
use dfm_core::tensor::{self, ChannelVector, FeatureMap, SpatialMap};

fn err(e: dfm_core::CoreError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A c x h x w activation tensor of finite f64 values.
#[pyclass(name = "FeatureMap")]
#[derive(Clone)]
struct PyFeatureMap {
    inner: FeatureMap,
}

#[pymethods]
impl PyFeatureMap {
    #[new]
    fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyFeatureMap { inner: FeatureMap::new(c, h, w, data).map_err(err)? })
    }

    /// (channels, height, width)
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    /// Row-major channel-first copy of the values.
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.inner.at(k, i, j)
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.inner.shape();
        format!("FeatureMap({c}x{h}x{w})")
    }
}

/// Module hyperparameters; defaults match the library's.
#[pyclass(name = "DfmConfig")]
#[derive(Clone)]
struct PyDfmConfig {
    inner: dfm::DfmConfig,
}

#[pymethods]
impl PyDfmConfig {
    #[new]
    #[pyo3(signature = (alpha=0.85, beta=0.95, omega=0.15, delta=0.6, gamma=0.4, tau=0.70,
                        apply_mode="additive", active_in_eval=false, variant="focused"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        alpha: f64,
        beta: f64,
        omega: f64,
        delta: f64,
        gamma: f64,
        tau: f64,
        apply_mode: &str,
        active_in_eval: bool,
        variant: &str,
    ) -> PyResult<Self> {
        let cfg = dfm::DfmConfig {
            alpha,
            beta,
            omega,
            delta,
            gamma,
            tau,
            apply_mode: apply_mode.parse().map_err(err)?,
            active_in_eval,
            variant: variant.parse().map_err(err)?,
        };
        cfg.validate().map_err(err)?;
        Ok(PyDfmConfig { inner: cfg })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }
    #[getter]
    fn omega(&self) -> f64 {
        self.inner.omega
    }
    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }
    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }
    #[getter]
    fn apply_mode(&self) -> &'static str {
        self.inner.apply_mode.as_str()
    }
    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.as_str()
    }

    fn __repr__(&self) -> String {
        format!(
            "DfmConfig(alpha={}, beta={}, omega={}, delta={}, gamma={}, tau={}, apply_mode={:?}, variant={:?})",
            self.inner.alpha,
            self.inner.beta,
            self.inner.omega,
            self.inner.delta,
            self.inner.gamma,
            self.inner.tau,
            self.inner.apply_mode.as_str(),
            self.inner.variant.as_str(),
        )
    }
}

/// A named deterministic random stream.
#[pyclass(name = "RngStream")]
struct PyRngStream {
    inner: RngStream,
}

fn kind_from_str(kind: &str) -> PyResult<StreamKind> {
    match kind {
        "data" => Ok(StreamKind::DataGen),
        "init" => Ok(StreamKind::WeightInit),
        "select" => Ok(StreamKind::DfmSelect),
        "shuffle" => Ok(StreamKind::Shuffle),
        other => Err(PyValueError::new_err(format!(
            "stream kind must be data|init|select|shuffle, got {other:?}"
        ))),
    }
}

#[pymethods]
impl PyRngStream {
    #[new]
    #[pyo3(signature = (seed, kind="data"))]
    fn new(seed: u64, kind: &str) -> PyResult<Self> {
        Ok(PyRngStream { inner: RngStream::new(seed, kind_from_str(kind)?) })
    }

    fn next_f64(&mut self) -> f64 {
        self.inner.next_f64()
    }

    fn bernoulli(&mut self, p: f64) -> PyResult<bool> {
        self.inner.bernoulli(p).map_err(err)
    }
}

/// Per-channel spatial mean (the channel attention vector).
#[pyfunction]
fn gap(fm: &PyFeatureMap) -> Vec<f64> {
    tensor::gap(&fm.inner).data().to_vec()
}

/// Per-position channel mean (the position attention map), as (h, w, values).
#[pyfunction]
fn cap(fm: &PyFeatureMap) -> (usize, usize, Vec<f64>) {
    let m = tensor::cap(&fm.inner);
    (m.h(), m.w(), m.data().to_vec())
}

/// Run the module. Returns (output, branch) where branch is "channel" or
/// "position" in training mode and None in eval mode (pass-through).
#[pyfunction]
#[pyo3(signature = (fm, cfg, rng, train=true))]
fn dfm_forward(
    fm: &PyFeatureMap,
    cfg: &PyDfmConfig,
    rng: &mut PyRngStream,
    train: bool,
) -> PyResult<(PyFeatureMap, Option<&'static str>)> {
    let mode = if train { dfm::Mode::Train } else { dfm::Mode::Eval };
    let (out, cache) = dfm::dfm_forward(&fm.inner, &cfg.inner, &mut rng.inner, mode).map_err(err)?;
    let branch = cache.map(|c| match c.branch {
        dfm::Branch::Channel => "channel",
        dfm::Branch::Position => "position",
    });
    Ok((PyFeatureMap { inner: out }, branch))
}

/// Weighted channel sum of the features: the class activation map,
/// as (h, w, values).
#[pyfunction]
fn compute_cam(features: &PyFeatureMap, weights: Vec<f64>) -> PyResult<(usize, usize, Vec<f64>)> {
    let w = ChannelVector::new(weights).map_err(err)?;
    let m = cam::compute_cam(&features.inner, &w).map_err(err)?;
    Ok((m.h(), m.w(), m.data().to_vec()))
}

/// Upsample, normalize, threshold, take the largest connected component.
/// Returns a half-open (x0, y0, x1, y1) box, or None for a flat map.
#[pyfunction]
#[pyo3(signature = (h, w, values, image_h, image_w, theta_seg=0.20))]
fn cam_to_box(
    h: usize,
    w: usize,
    values: Vec<f64>,
    image_h: usize,
    image_w: usize,
    theta_seg: f64,
) -> PyResult<Option<(usize, usize, usize, usize)>> {
    let m = SpatialMap::new(h, w, values).map_err(err)?;
    let b = cam::cam_to_box(&m, image_h, image_w, theta_seg).map_err(err)?;
    Ok(b.map(|b| (b.x0, b.y0, b.x1, b.y1)))
}

/// Intersection over union of two half-open (x0, y0, x1, y1) boxes.
#[pyfunction]
fn iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> PyResult<f64> {
    let a = cam::BBox::new(a.0, a.1, a.2, a.3).map_err(err)?;
    let b = cam::BBox::new(b.0, b.1, b.2, b.3).map_err(err)?;
    Ok(cam::iou(&a, &b))
}

/// Render one synthetic sample deterministically.
/// Returns (image, label, (x0, y0, x1, y1) ground-truth box).
#[pyfunction]
#[pyo3(signature = (seed, id, label, image_size=64))]
fn render_sample(
    seed: u64,
    id: u64,
    label: usize,
    image_size: usize,
) -> PyResult<(PyFeatureMap, usize, (usize, usize, usize, usize))> {
    let spec = data::DatasetSpec { seed, image_size, ..data::DatasetSpec::default() };
    spec.validate().map_err(err)?;
    let mut rng = data::sample_stream(seed, id);
    let s = data::render_sample(&spec, label, id, &mut rng).map_err(err)?;
    let b = s.gt_box;
    Ok((PyFeatureMap { inner: s.image }, s.label, (b.x0, b.y0, b.x1, b.y1)))
}

#[pymodule]
fn dfm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyDfmConfig>()?;
    m.add_class::<PyRngStream>()?;
    m.add_function(wrap_pyfunction!(gap, m)?)?;
    m.add_function(wrap_pyfunction!(cap, m)?)?;
    m.add_function(wrap_pyfunction!(dfm_forward, m)?)?;
    m.add_function(wrap_pyfunction!(compute_cam, m)?)?;
    m.add_function(wrap_pyfunction!(cam_to_box, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(render_sample, m)?)?;
    Ok(())
}
