//! Python bindings: images and saliency maps, the metrics, mask proposals,
//! the alignment kernels, text metrics and the mock-backed loop.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use retouch_core::alignment::{self, check, CategoricalPolicy, GrpoConfig, GrpoGroup};
use retouch_core::dataset;
use retouch_core::media::{self, ImageBuffer};
use retouch_core::metrics::{self, FixationSet};
use retouch_core::providers::mock::{mock_providers, SyntheticScene};
use retouch_core::retouch::{run_loop, trace_to_report, LoopConfig};
use retouch_core::saliency::{self, HybridLossConfig, ProposalConfig, DEFAULT_KLD_EPSILON};
use retouch_core::text;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// 8-bit image with 1 or 3 interleaved channels.
#[pyclass(name = "Image", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage(ImageBuffer);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> PyResult<Self> {
        ImageBuffer::new(width, height, channels, data).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_pnm(bytes: &[u8]) -> PyResult<Self> {
        media::read_pnm(bytes).map(Self).map_err(err)
    }

    fn to_pnm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &media::write_pnm(&self.0))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.data())
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.0.width(), self.0.height(), self.0.channels())
    }
}

/// Row-major saliency values in [0, 1].
#[pyclass(name = "SaliencyMap", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySaliencyMap(saliency::SaliencyMap);

#[pymethods]
impl PySaliencyMap {
    #[new]
    fn new(width: usize, height: usize, values: Vec<f64>) -> PyResult<Self> {
        saliency::SaliencyMap::new(width, height, values).map(Self).map_err(err)
    }

    #[staticmethod]
    fn zeros(width: usize, height: usize) -> Self {
        Self(saliency::SaliencyMap::zeros(width, height))
    }

    #[staticmethod]
    fn from_fsal(bytes: &[u8]) -> PyResult<Self> {
        let grid = media::read_float_grid(bytes).map_err(err)?;
        saliency::SaliencyMap::from_grid(&grid).map(Self).map_err(err)
    }

    fn to_fsal<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = media::write_float_grid(&self.0.to_grid()).map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn max(&self) -> f64 {
        self.0.max()
    }

    fn __repr__(&self) -> String {
        format!("SaliencyMap({}x{}, max={})", self.0.width(), self.0.height(), self.0.max())
    }
}

fn fixations(points: Vec<(usize, usize)>) -> FixationSet {
    FixationSet::new(points)
}

#[pyfunction]
fn auc_judd(pred: &PySaliencyMap, fixations_xy: Vec<(usize, usize)>) -> PyResult<f64> {
    metrics::auc_judd(&pred.0, &fixations(fixations_xy)).map_err(err)
}

#[pyfunction]
fn nss(pred: &PySaliencyMap, fixations_xy: Vec<(usize, usize)>) -> PyResult<f64> {
    metrics::nss(&pred.0, &fixations(fixations_xy)).map_err(err)
}

#[pyfunction]
fn cc(pred: &PySaliencyMap, truth: &PySaliencyMap) -> PyResult<f64> {
    metrics::cc(&pred.0, &truth.0).map_err(err)
}

#[pyfunction]
fn sim(pred: &PySaliencyMap, truth: &PySaliencyMap) -> PyResult<f64> {
    metrics::sim(&pred.0, &truth.0).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, epsilon = DEFAULT_KLD_EPSILON))]
fn kld(pred: &PySaliencyMap, truth: &PySaliencyMap, epsilon: f64) -> PyResult<f64> {
    metrics::kld(&pred.0, &truth.0, epsilon).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, alpha = 0.5, epsilon = DEFAULT_KLD_EPSILON))]
fn hybrid_loss(pred: &PySaliencyMap, truth: &PySaliencyMap, alpha: f64, epsilon: f64) -> PyResult<f64> {
    saliency::hybrid_loss(&pred.0, &truth.0, &HybridLossConfig { alpha, epsilon }).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, alpha = 0.5, epsilon = DEFAULT_KLD_EPSILON))]
fn hybrid_loss_gradient(pred: &PySaliencyMap, truth: &PySaliencyMap, alpha: f64, epsilon: f64) -> PyResult<Vec<f64>> {
    saliency::hybrid_loss_gradient(&pred.0, &truth.0, &HybridLossConfig { alpha, epsilon }).map_err(err)
}

/// Region proposals as dicts with `bbox` `(x0, y0, x1, y1)`, `area`,
/// `peak_saliency` and a flat row-major `mask`.
#[pyfunction]
#[pyo3(signature = (map, tau = 0.5, dilation_radius = 1, min_area = 4))]
fn propose_masks<'py>(
    py: Python<'py>,
    map: &PySaliencyMap,
    tau: f64,
    dilation_radius: usize,
    min_area: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ProposalConfig { tau, dilation_radius, min_area };
    saliency::propose_masks(&map.0, &cfg)
        .map_err(err)?
        .into_iter()
        .map(|p| {
            let d = PyDict::new(py);
            let b = p.bbox;
            d.set_item("bbox", (b.x0, b.y0, b.x1, b.y1))?;
            d.set_item("area", p.area)?;
            d.set_item("peak_saliency", p.peak_saliency)?;
            d.set_item("mask", p.mask.bits().to_vec())?;
            Ok(d)
        })
        .collect()
}

/// Flat row-major disc mask of radius `height / 20`.
#[pyfunction]
fn rasterize_region(x: usize, y: usize, height: usize, width: usize) -> PyResult<Vec<bool>> {
    if x >= width || y >= height {
        return Err(err(format!("center ({x}, {y}) outside {width}x{height} image")));
    }
    Ok(dataset::rasterize_region((x, y), height, width).bits().to_vec())
}

#[pyfunction]
fn group_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    alignment::group_advantages(&rewards).map_err(err)
}

fn policy(probs: Vec<f64>) -> PyResult<CategoricalPolicy> {
    CategoricalPolicy::new(probs).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (theta, reference, old, actions, rewards, epsilon_clip = 0.2, beta = 0.04))]
fn grpo_objective(
    theta: Vec<f64>,
    reference: Vec<f64>,
    old: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    epsilon_clip: f64,
    beta: f64,
) -> PyResult<f64> {
    let group = GrpoGroup::new(actions, rewards).map_err(err)?;
    let cfg = GrpoConfig { epsilon_clip, beta };
    alignment::grpo_objective(&policy(theta)?, &policy(reference)?, &policy(old)?, &group, &cfg).map_err(err)
}

/// Gradient of the objective with respect to the logits of the current policy.
#[pyfunction]
#[pyo3(signature = (theta_logits, reference, old, actions, rewards, epsilon_clip = 0.2, beta = 0.04))]
fn grpo_gradient(
    theta_logits: Vec<f64>,
    reference: Vec<f64>,
    old: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    epsilon_clip: f64,
    beta: f64,
) -> PyResult<Vec<f64>> {
    let group = GrpoGroup::new(actions, rewards).map_err(err)?;
    let cfg = GrpoConfig { epsilon_clip, beta };
    alignment::grpo_gradient(&theta_logits, &policy(reference)?, &policy(old)?, &group, &cfg).map_err(err)
}

/// One line per self-check suite, each starting with PASS or FAIL.
#[pyfunction]
#[pyo3(signature = (seed = 7))]
fn grpo_check(seed: u64) -> Vec<String> {
    check::run_all(seed).iter().map(|r| r.line()).collect()
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> PyResult<f64> {
    text::rouge_l(candidate, reference).map_err(err)
}

#[pyfunction]
fn meteor_lite(candidate: &str, reference: &str) -> PyResult<f64> {
    text::meteor_lite(candidate, reference).map_err(err)
}

/// Statistics of a JSON-lines annotation dataset given as text.
#[pyfunction]
fn dataset_stats<'py>(py: Python<'py>, jsonl: &str) -> PyResult<Bound<'py, PyDict>> {
    let records = dataset::parse_dataset(jsonl.as_bytes()).map_err(err)?;
    let stats = dataset::compute_stats(&records).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("image_count", stats.image_count)?;
    d.set_item("region_count", stats.region_count)?;
    d.set_item("regions_per_image", stats.regions_per_image)?;
    d.set_item("mean_description_words", stats.mean_description_words)?;
    d.set_item("category_histogram", stats.category_histogram)?;
    Ok(d)
}

/// Run the loop against the deterministic mock scene whose hidden artifact
/// field is `field`. Returns `(report, final_image, trace_json)`.
#[pyfunction]
#[pyo3(signature = (image, field, prompt, tau = 0.5, max_iterations = 3, decay = 0.5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_mock_loop<'py>(
    py: Python<'py>,
    image: &PyImage,
    field: &PySaliencyMap,
    prompt: &str,
    tau: f64,
    max_iterations: usize,
    decay: f64,
    seed: u64,
) -> PyResult<(Bound<'py, PyDict>, PyImage, String)> {
    let scene = SyntheticScene::new(image.0.clone(), field.0.clone(), decay).map_err(err)?;
    let (providers, _) = mock_providers(scene, seed);
    let cfg = LoopConfig { tau_s: tau, max_iterations, ..Default::default() };
    let trace = py
        .detach(|| run_loop(&image.0, prompt, &providers, &cfg))
        .map_err(err)?;
    let report = trace_to_report(&trace);
    let d = PyDict::new(py);
    d.set_item("iterations", report.iterations)?;
    d.set_item("actions_total", report.actions_total)?;
    d.set_item("initial_max_saliency", report.initial_max_saliency)?;
    d.set_item("final_max_saliency", report.final_max_saliency)?;
    d.set_item("converged", report.converged)?;
    let json = trace.to_json(|t| match t {
        Some(t) => format!("t{t}.pnm"),
        None => "final.pnm".to_string(),
    });
    Ok((d, PyImage((*trace.final_image).clone()), json.to_string()))
}

#[pymodule]
fn retouch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PySaliencyMap>()?;
    m.add_function(wrap_pyfunction!(auc_judd, m)?)?;
    m.add_function(wrap_pyfunction!(nss, m)?)?;
    m.add_function(wrap_pyfunction!(cc, m)?)?;
    m.add_function(wrap_pyfunction!(sim, m)?)?;
    m.add_function(wrap_pyfunction!(kld, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_loss_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(propose_masks, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize_region, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_objective, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_check, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(meteor_lite, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run_mock_loop, m)?)?;
    Ok(())
}
