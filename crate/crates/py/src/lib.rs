//! Python bindings for the `sgsformer` core crate.

use numpy::ndarray::{ArrayD, IxDyn};
use numpy::{IntoPyArray, PyArrayDyn, PyReadonlyArrayDyn};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sgsformer::degrade::{degrade_simple, make_sample, DegradeParams};
use sgsformer::model::{Model, ModelConfig};
use sgsformer::seg::{compose_seg_map, naive_segment, MaskSet, MaskSource};
use sgsformer::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape { .. } | Error::Invalid { .. } | Error::Config(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_tensor(a: &PyReadonlyArrayDyn<'_, f32>) -> Tensor<f32> {
    let view = a.as_array();
    Tensor::from_vec(view.shape().to_vec(), view.iter().copied().collect())
}

fn to_array<'py>(py: Python<'py>, t: &Tensor<f32>) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
    let arr = ArrayD::from_shape_vec(IxDyn(t.shape()), t.data().to_vec()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(arr.into_pyarray(py))
}

fn degrade_params(json: Option<&str>) -> PyResult<DegradeParams> {
    let p: DegradeParams = match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => DegradeParams::default(),
    };
    p.validate().map_err(py_err)?;
    Ok(p)
}

fn mask_set(h: usize, w: usize, masks: &[PyReadonlyArrayDyn<'_, f32>]) -> PyResult<MaskSet> {
    let masks = masks.iter().map(|m| to_tensor(m).reshape([h, w])).collect::<sgsformer::Result<Vec<_>>>().map_err(py_err)?;
    MaskSet::new(h, w, masks, MaskSource::File).map_err(py_err)
}

fn image_hw(t: &Tensor<f32>) -> PyResult<(usize, usize)> {
    match t.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(PyValueError::new_err(format!("expected a [3,H,W] image, got {:?}", s))),
    }
}

/// Restoration network with its parameters.
#[pyclass(name = "Model", module = "sgsformer")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Builds a model from a preset name (`tiny`, `paper`) or a JSON config.
    #[new]
    #[pyo3(signature = (preset = "tiny", config_json = None, zero_init = false))]
    fn new(preset: &str, config_json: Option<&str>, zero_init: bool) -> PyResult<Self> {
        let cfg = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::preset(preset).map_err(py_err)?,
        };
        let mut inner = Model::new(&cfg).map_err(py_err)?;
        if zero_init {
            inner.zero_output_projections();
        }
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let (inner, _) = Model::load(&path).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    /// Writes a checkpoint without optimizer state.
    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&path, Vec::new()).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn zero_output_projections(&mut self) {
        self.inner.zero_output_projections();
    }

    /// Restores a `[3,H,W]` float32 image in [0,1]. Without masks the
    /// built-in segmenter runs on the input.
    #[pyo3(signature = (image, masks = None, threshold = 0.25))]
    fn restore<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArrayDyn<'py, f32>,
        masks: Option<Vec<PyReadonlyArrayDyn<'py, f32>>>,
        threshold: f64,
    ) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
        let img = to_tensor(&image);
        let (h, w) = image_hw(&img)?;
        let set = match masks {
            Some(m) => mask_set(h, w, &m)?,
            None => naive_segment(&img, threshold).map_err(py_err)?,
        };
        let x = img.reshape([1, 3, h, w]).map_err(py_err)?;
        let y = py.detach(|| self.inner.restore(&x, std::slice::from_ref(&set))).map_err(py_err)?;
        to_array(py, &y.reshape([3, h, w]).map_err(py_err)?)
    }

    fn __repr__(&self) -> String {
        format!("Model(base_width={}, params={})", self.inner.cfg.base_width, self.inner.param_count())
    }
}

#[pyfunction]
fn psnr(a: PyReadonlyArrayDyn<'_, f32>, b: PyReadonlyArrayDyn<'_, f32>) -> PyResult<f64> {
    sgsformer::train::psnr(&to_tensor(&a), &to_tensor(&b)).map_err(py_err)
}

#[pyfunction]
fn ssim(a: PyReadonlyArrayDyn<'_, f32>, b: PyReadonlyArrayDyn<'_, f32>) -> PyResult<f64> {
    sgsformer::train::ssim(&to_tensor(&a), &to_tensor(&b)).map_err(py_err)
}

/// Binary `[H,W]` masks partitioning a `[3,H,W]` image.
#[pyfunction]
#[pyo3(signature = (image, threshold = 0.25))]
fn segment<'py>(py: Python<'py>, image: PyReadonlyArrayDyn<'py, f32>, threshold: f64) -> PyResult<Vec<Bound<'py, PyArrayDyn<f32>>>> {
    let set = naive_segment(&to_tensor(&image), threshold).map_err(py_err)?;
    set.masks.iter().map(|m| to_array(py, m)).collect()
}

#[pyfunction]
fn compose<'py>(
    py: Python<'py>,
    image: PyReadonlyArrayDyn<'py, f32>,
    masks: Vec<PyReadonlyArrayDyn<'py, f32>>,
    alpha: f64,
) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
    let img = to_tensor(&image);
    let (h, w) = image_hw(&img)?;
    let out = compose_seg_map(&img, &mask_set(h, w, &masks)?, alpha).map_err(py_err)?;
    to_array(py, &out)
}

/// Blur, attenuation and noise of the simple display model. `params_json`
/// follows the `degrade` section of the run config.
#[pyfunction]
#[pyo3(signature = (image, params_json = None))]
fn degrade<'py>(py: Python<'py>, image: PyReadonlyArrayDyn<'py, f32>, params_json: Option<&str>) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
    let p = degrade_params(params_json)?;
    let psf = p.psf.build().map_err(py_err)?;
    let out = degrade_simple(&to_tensor(&image), &psf, &p).map_err(py_err)?;
    to_array(py, &out)
}

/// One synthetic `(degraded, clean, masks)` training pair.
#[allow(clippy::type_complexity)]
#[pyfunction]
#[pyo3(signature = (index, patch = 64, params_json = None))]
fn simulate_sample<'py>(
    py: Python<'py>,
    index: usize,
    patch: usize,
    params_json: Option<&str>,
) -> PyResult<(Bound<'py, PyArrayDyn<f32>>, Bound<'py, PyArrayDyn<f32>>, Vec<Bound<'py, PyArrayDyn<f32>>>)> {
    let p = degrade_params(params_json)?;
    let psf = p.psf.build().map_err(py_err)?;
    let s = make_sample(index, patch, &psf, &p, None).map_err(py_err)?;
    let masks = s.masks.masks.iter().map(|m| to_array(py, m)).collect::<PyResult<_>>()?;
    Ok((to_array(py, &s.degraded)?, to_array(py, &s.clean)?, masks))
}

/// Row-wise top-k selection over the last axis; ties keep the lower index.
#[pyfunction]
fn topk_keep<'py>(py: Python<'py>, logits: PyReadonlyArrayDyn<'py, f32>, k: usize) -> PyResult<Bound<'py, PyArrayDyn<bool>>> {
    let t = to_tensor(&logits);
    let keep = sgsformer::attention::topk_keep(&t, k).map_err(py_err)?;
    let arr = ArrayD::from_shape_vec(IxDyn(t.shape()), keep).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(arr.into_pyarray(py))
}

#[pyfunction]
fn cyclic_lr(step: u64, lo: f64, hi: f64, period: u64) -> f64 {
    sgsformer::train::cyclic_lr(step, lo, hi, period)
}

#[pyfunction]
fn param_count(preset: &str) -> PyResult<usize> {
    sgsformer::model::param_count(&ModelConfig::preset(preset).map_err(py_err)?).map_err(py_err)
}

/// Runs the finite-difference gradient checks, returning
/// `(module, check, max_rel_err, passed)` rows.
#[pyfunction]
#[pyo3(signature = (module = None, seeds = 2))]
fn grad_check(py: Python<'_>, module: Option<String>, seeds: u64) -> PyResult<Vec<(String, String, f64, bool)>> {
    let reports = py.detach(|| sgsformer::gradsuite::run_suite(module.as_deref(), seeds)).map_err(py_err)?;
    if reports.is_empty() {
        return Err(PyValueError::new_err(format!("no gradient check matches {:?}", module)));
    }
    Ok(reports.into_iter().map(|(m, r)| (m.to_string(), r.name.clone(), r.max_rel_err(), r.passed())).collect())
}

#[pymodule]
#[pyo3(name = "sgsformer")]
fn sgsformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(topk_keep, m)?)?;
    m.add_function(wrap_pyfunction!(cyclic_lr, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
