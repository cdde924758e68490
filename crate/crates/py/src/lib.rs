//! Python bindings: images and masks as classes, everything else as functions.
//!
//! Arrays cross the boundary as nested lists, so `numpy.asarray(x.tolist())`
//! and `Image(arr.tolist())` are the usual conversions.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fginpaint::config::{parse_override_args, RunConfig};
use fginpaint::features::{VggConfig, VggExtractor};
use fginpaint::imaging::{self, BinaryMask, ForegroundMask, HoleMask, ImageTensor, ValueRange};
use fginpaint::masks::{self, AttributeMap, StrokeConfig};
use fginpaint::train as pipeline;
use fginpaint::{loss, metrics, synth, Error};
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_range(name: &str) -> PyResult<ValueRange> {
    match name {
        "unit" => Ok(ValueRange::Unit),
        "symmetric" => Ok(ValueRange::Symmetric),
        other => Err(PyValueError::new_err(format!("unknown range `{other}`, expected `unit` or `symmetric`"))),
    }
}

fn range_name(r: ValueRange) -> &'static str {
    match r {
        ValueRange::Unit => "unit",
        ValueRange::Symmetric => "symmetric",
    }
}

fn array2<T: Clone>(rows: Vec<Vec<T>>) -> PyResult<Array2<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged 2-d list"));
    }
    Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows<T: Clone>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// An H×W×C image in the unit or symmetric value range.
#[pyclass(name = "Image", module = "fginpaint")]
#[derive(Clone)]
struct PyImage(ImageTensor);

#[pymethods]
impl PyImage {
    #[new]
    #[pyo3(signature = (data, range = "unit"))]
    fn new(data: Vec<Vec<Vec<f64>>>, range: &str) -> PyResult<Self> {
        let h = data.len();
        let w = data.first().map_or(0, Vec::len);
        let c = data.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if data.iter().any(|r| r.len() != w || r.iter().any(|p| p.len() != c)) {
            return Err(PyValueError::new_err("ragged 3-d list"));
        }
        let flat: Vec<f64> = data.into_iter().flatten().flatten().collect();
        let arr = Array3::from_shape_vec((h, w, c), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
        ImageTensor::new(arr, parse_range(range)?).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (path, range = "unit"))]
    fn load(path: PathBuf, range: &str) -> PyResult<Self> {
        ImageTensor::load_png(&path, parse_range(range)?).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_png(&path).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), self.0.channels())
    }

    #[getter]
    fn range(&self) -> &'static str {
        range_name(self.0.range())
    }

    fn to_range(&self, range: &str) -> PyResult<Self> {
        Ok(Self(self.0.to_range(parse_range(range)?)))
    }

    fn resize(&self, height: usize, width: usize) -> PyResult<Self> {
        imaging::resize_image(&self.0, (height, width)).map(Self).map_err(to_py)
    }

    fn tolist(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.data().outer_iter().map(|r| r.outer_iter().map(|p| p.to_vec()).collect()).collect()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.shape();
        format!("Image({h}x{w}x{c}, range={})", self.range())
    }
}

macro_rules! mask_class {
    ($py:ident, $inner:ty, $name:literal, $doc:literal, { $($extra:item)* }) => {
        #[doc = $doc]
        #[pyclass(name = $name, module = "fginpaint")]
        #[derive(Clone)]
        struct $py($inner);

        #[pymethods]
        impl $py {
            #[new]
            fn new(data: Vec<Vec<f64>>) -> PyResult<Self> {
                <$inner>::new(array2(data)?).map(Self).map_err(to_py)
            }

            #[staticmethod]
            fn ones(height: usize, width: usize) -> Self {
                Self(<$inner>::from_binary(BinaryMask::ones(height, width)))
            }

            #[staticmethod]
            fn zeros(height: usize, width: usize) -> Self {
                Self(<$inner>::from_binary(BinaryMask::zeros(height, width)))
            }

            #[staticmethod]
            fn load(path: PathBuf) -> PyResult<Self> {
                BinaryMask::load_png(&path).map(|m| Self(<$inner>::from_binary(m))).map_err(to_py)
            }

            fn save(&self, path: PathBuf) -> PyResult<()> {
                self.0.save_png(&path).map_err(to_py)
            }

            #[getter]
            fn shape(&self) -> (usize, usize) {
                self.0.dim()
            }

            fn count_ones(&self) -> usize {
                self.0.count_ones()
            }

            fn tolist(&self) -> Vec<Vec<f64>> {
                rows(self.0.data())
            }

            fn __eq__(&self, other: &Self) -> bool {
                self.0.data() == other.0.data()
            }

            fn __repr__(&self) -> String {
                let (h, w) = self.0.dim();
                format!("{}({h}x{w}, ones={})", $name, self.0.count_ones())
            }

            $($extra)*
        }
    };
}

mask_class!(PyHoleMask, HoleMask, "HoleMask", "Hole mask: 1 keeps a pixel, 0 marks it missing.", {
    /// Fraction of pixels that are holes.
    fn ratio(&self) -> f64 {
        masks::hole_to_image_ratio(&self.0)
    }
});
mask_class!(PyForegroundMask, ForegroundMask, "ForegroundMask", "Foreground mask: 1 on skin and hair.", {});

/// Seeded free-form stroke mask with the default stroke settings for its size.
#[pyfunction]
fn generate_freeform_mask(seed: u64, height: usize, width: usize) -> PyResult<PyHoleMask> {
    masks::generate_freeform_mask(seed, (height, width), &StrokeConfig::for_size(height, width))
        .map(PyHoleMask)
        .map_err(to_py)
}

/// `n` masks from one seed, identical to `fginpaint gen-masks`.
#[pyfunction]
fn generate_mask_set(seed: u64, n: usize, height: usize, width: usize) -> PyResult<Vec<PyHoleMask>> {
    masks::generate_mask_set(seed, n, (height, width), &StrokeConfig::for_size(height, width))
        .map(|v| v.into_iter().map(PyHoleMask).collect())
        .map_err(to_py)
}

/// Foreground mask from a label map; `names` defaults to skin and hair.
#[pyfunction]
#[pyo3(signature = (labels_map, labels, names = None))]
fn foreground_from_labels(
    labels_map: Vec<Vec<u32>>,
    labels: BTreeMap<String, u32>,
    names: Option<Vec<String>>,
) -> PyResult<PyForegroundMask> {
    let attrs = AttributeMap::new(array2(labels_map)?, labels).map_err(to_py)?;
    let fg = match names {
        Some(n) => masks::foreground_from_labels(&attrs, &n.iter().map(String::as_str).collect::<Vec<_>>()),
        None => masks::foreground_from_attributes(&attrs),
    };
    fg.map(PyForegroundMask).map_err(to_py)
}

#[pyfunction]
fn apply_hole_mask(image: &PyImage, hole: &PyHoleMask) -> PyResult<PyImage> {
    imaging::apply_hole_mask(&image.0, &hole.0).map(PyImage).map_err(to_py)
}

/// Known pixels from `gt`, hole pixels from `pred`.
#[pyfunction]
fn composite_output(pred: &PyImage, gt: &PyImage, hole: &PyHoleMask) -> PyResult<PyImage> {
    imaging::composite_output(&pred.0, &gt.0, &hole.0).map(PyImage).map_err(to_py)
}

#[pyfunction]
fn loss_cf(masked: &PyImage, pred: &PyImage, fg: &PyForegroundMask) -> PyResult<f64> {
    loss::loss_cf(&masked.0, &pred.0, &fg.0).map_err(to_py)
}

#[pyfunction]
fn loss_f(gt: &PyImage, pred: &PyImage, fg: &PyForegroundMask) -> PyResult<f64> {
    loss::loss_f(&gt.0, &pred.0, &fg.0).map_err(to_py)
}

/// Perceptual foreground loss with a seeded random `vgg16` or `compact` extractor.
#[pyfunction]
#[pyo3(signature = (masked, pred, fg, feature_net = "compact", seed = 0))]
fn loss_pf(masked: &PyImage, pred: &PyImage, fg: &PyForegroundMask, feature_net: &str, seed: u64) -> PyResult<f64> {
    let cfg = match feature_net {
        "vgg16" => VggConfig::vgg16(),
        "compact" => VggConfig::compact(),
        other => return Err(PyValueError::new_err(format!("unknown feature_net `{other}`"))),
    };
    let fx = VggExtractor::random(cfg, seed).map_err(to_py)?;
    loss::loss_pf(&masked.0, &pred.0, &fg.0, &fx).map_err(to_py)
}

#[pyfunction]
fn critic_loss(real_scores: Vec<f64>, fake_scores: Vec<f64>) -> PyResult<f64> {
    loss::critic_loss(&real_scores, &fake_scores).map_err(to_py)
}

#[pyfunction]
fn generator_adv_loss(fake_scores: Vec<f64>) -> PyResult<f64> {
    loss::generator_adv_loss(&fake_scores).map_err(to_py)
}

fn scope(fg: Option<&PyForegroundMask>) -> Option<&BinaryMask> {
    fg.map(|m| &*m.0)
}

#[pyfunction]
#[pyo3(signature = (gt, pred, fg = None))]
fn mse(gt: &PyImage, pred: &PyImage, fg: Option<&PyForegroundMask>) -> PyResult<f64> {
    metrics::mse(&gt.0, &pred.0, scope(fg)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (gt, pred, fg = None))]
fn mae(gt: &PyImage, pred: &PyImage, fg: Option<&PyForegroundMask>) -> PyResult<f64> {
    metrics::mae(&gt.0, &pred.0, scope(fg)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (gt, pred, fg = None))]
fn psnr(gt: &PyImage, pred: &PyImage, fg: Option<&PyForegroundMask>) -> PyResult<f64> {
    metrics::psnr(&gt.0, &pred.0, scope(fg)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (gt, pred, fg = None))]
fn ssim(gt: &PyImage, pred: &PyImage, fg: Option<&PyForegroundMask>) -> PyResult<f64> {
    metrics::ssim(&gt.0, &pred.0, scope(fg)).map_err(to_py)
}

/// FID between two image sets under a named embedding backend.
#[pyfunction]
#[pyo3(signature = (set_a, set_b, backend = "fixed-conv"))]
fn fid(set_a: Vec<PyImage>, set_b: Vec<PyImage>, backend: &str) -> PyResult<f64> {
    let backend = metrics::backend_by_name(backend).map_err(to_py)?;
    let a: Vec<&ImageTensor> = set_a.iter().map(|i| &i.0).collect();
    let b: Vec<&ImageTensor> = set_b.iter().map(|i| &i.0).collect();
    metrics::fid(&a, &b, backend.as_ref(), None).map_err(to_py)
}

/// Seeded synthetic face and its foreground mask.
#[pyfunction]
fn synthetic_face(seed: u64, size: usize) -> PyResult<(PyImage, PyForegroundMask)> {
    synth::synthetic_face(seed, size).map(|(i, f)| (PyImage(i), PyForegroundMask(f))).map_err(to_py)
}

/// Writes `images/`, `foreground/` and `holes/` under `root`.
#[pyfunction]
fn write_synthetic_dataset(root: PathBuf, n: usize, size: usize, seed: u64) -> PyResult<()> {
    synth::write_synthetic_dataset(&root, n, size, seed).map_err(to_py)
}

fn resolve(config: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> PyResult<RunConfig> {
    let args: Vec<String> = overrides
        .unwrap_or_default()
        .into_iter()
        .flat_map(|(k, v)| [format!("--{k}"), v])
        .collect();
    let pairs = parse_override_args(&args).map_err(to_py)?;
    RunConfig::resolve(config.as_deref(), &pairs).map_err(to_py)
}

/// The fully resolved run configuration as TOML text.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = None))]
fn resolve_config(config: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> PyResult<String> {
    Ok(resolve(config, overrides)?.to_toml())
}

/// Trains and returns the final checkpoint path. Override values are strings,
/// as on the command line.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = None))]
fn train(py: Python<'_>, config: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> PyResult<PathBuf> {
    let cfg = resolve(config, overrides)?;
    py.detach(|| pipeline::train(&cfg)).map_err(to_py)
}

/// Runs the generator on one image and writes the result.
#[pyfunction]
#[pyo3(signature = (ckpt, image, hole, out, composite = true))]
fn infer(py: Python<'_>, ckpt: PathBuf, image: PathBuf, hole: PathBuf, out: PathBuf, composite: bool) -> PyResult<PyImage> {
    py.detach(|| pipeline::infer(&ckpt, &image, &hole, &out, composite)).map(PyImage).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "fginpaint")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyHoleMask>()?;
    m.add_class::<PyForegroundMask>()?;
    m.add_function(wrap_pyfunction!(generate_freeform_mask, m)?)?;
    m.add_function(wrap_pyfunction!(generate_mask_set, m)?)?;
    m.add_function(wrap_pyfunction!(foreground_from_labels, m)?)?;
    m.add_function(wrap_pyfunction!(apply_hole_mask, m)?)?;
    m.add_function(wrap_pyfunction!(composite_output, m)?)?;
    m.add_function(wrap_pyfunction!(loss_cf, m)?)?;
    m.add_function(wrap_pyfunction!(loss_f, m)?)?;
    m.add_function(wrap_pyfunction!(loss_pf, m)?)?;
    m.add_function(wrap_pyfunction!(critic_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generator_adv_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_face, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    Ok(())
}
