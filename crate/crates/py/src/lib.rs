//! Python bindings: configuration, models, anonymization pipelines and metrics.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use semanon::anonymizer::{Anonymizer, Arity, Mode};
use semanon::blending::{blend_mask, BlendConfig};
use semanon::checkpoint::Checkpoint;
use semanon::config::RunConfig;
use semanon::evaluation::{frechet_distance, mask_iou, region_l1, region_psnr, GaussianSummary};
use semanon::image::{Image, LabelMap, MaskImage};
use semanon::latent::sample_latent;
use semanon::rng::derive_seed;
use semanon::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Data(_) | Error::Json(_) => PyValueError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Domain(_) | Error::Numerical(_) => PyArithmeticError::new_err(msg),
    }
}

/// RGB image with values in [-1, 1], stored row-major as `height * width * 3` floats.
#[pyclass(name = "Image", module = "semanon_py", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: Image::new(height, width, data).map_err(py_err)? })
    }

    #[staticmethod]
    fn load_png(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Image::load_png(path.as_ref()).map_err(py_err)? })
    }

    fn save_png(&self, path: &str) -> PyResult<()> {
        self.inner.save_png(path.as_ref()).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    fn to_list(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height, self.inner.width)
    }
}

/// Per-pixel component indices.
#[pyclass(name = "LabelMap", module = "semanon_py", from_py_object)]
#[derive(Clone)]
pub struct PyLabelMap {
    inner: LabelMap,
}

#[pymethods]
impl PyLabelMap {
    #[new]
    fn new(height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: LabelMap::new(height, width, data).map_err(py_err)? })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    fn to_list(&self) -> Vec<u8> {
        self.inner.data.clone()
    }

    /// Boolean mask of the listed component indices.
    fn mask_of(&self, components: Vec<usize>) -> Vec<bool> {
        self.inner.mask_of(&components).data
    }
}

/// Run configuration document.
#[pyclass(name = "Config", module = "semanon_py", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => RunConfig::from_json(text).map_err(py_err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.generator.resolution()
    }
}

/// Generator, mapping network and latent mean.
#[pyclass(name = "Model", module = "semanon_py")]
pub struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model for a configuration.
    #[staticmethod]
    fn initial(config: &PyConfig) -> PyResult<Self> {
        Ok(Self { inner: config.inner.initial_checkpoint().map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(path.as_ref()).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(py_err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.encode().map_err(py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn components(&self) -> Vec<String> {
        self.inner.layout.names().to_vec()
    }

    /// Random face and its semantic labels.
    fn sample(&self, seed: u64) -> PyResult<(PyImage, PyLabelMap)> {
        let config = &self.inner.generator.config.latent;
        let z = sample_latent(derive_seed(seed, "sample/0"), config).map_err(py_err)?;
        let w = self.inner.mapping.map_to_w(&z).map_err(py_err)?;
        let out = self.inner.generator.generate(&w).map_err(py_err)?;
        let labels = out.labels();
        Ok((PyImage { inner: out.image }, PyLabelMap { inner: labels }))
    }
}

/// Anonymization pipelines over a model.
#[pyclass(name = "Anonymizer", module = "semanon_py")]
pub struct PyAnonymizer {
    inner: Anonymizer,
    config: RunConfig,
}

impl PyAnonymizer {
    fn request(&self, mode: &str, preserve: Vec<String>, arity: Arity, seed: u64) -> PyResult<semanon::anonymizer::AnonymizationRequest> {
        let mode: Mode = mode.parse().map_err(py_err)?;
        let mut template = self.config.request.clone();
        template.mode = mode;
        template.preserve = preserve;
        Ok(template.request(arity, seed))
    }
}

#[pymethods]
impl PyAnonymizer {
    #[new]
    fn new(model: &PyModel, config: &PyConfig) -> PyResult<Self> {
        Ok(Self { inner: config.inner.anonymizer(&model.inner).map_err(py_err)?, config: config.inner.clone() })
    }

    /// Returns the anonymized image and the provenance report as JSON.
    #[pyo3(signature = (image, labels, mode = "regular", preserve = Vec::new(), seed = 0))]
    fn anonymize(
        &self,
        py: Python<'_>,
        image: &PyImage,
        labels: &PyLabelMap,
        mode: &str,
        preserve: Vec<String>,
        seed: u64,
    ) -> PyResult<(PyImage, String)> {
        let request = self.request(mode, preserve, Arity::Single, seed)?;
        let result = py
            .detach(|| self.inner.anonymize_single(&image.inner, &labels.inner, &request))
            .map_err(py_err)?;
        let report = serde_json::to_string(&result.report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok((PyImage { inner: result.outputs[0].clone() }, report))
    }

    /// Paired pipeline: both images receive the same new identity.
    #[pyo3(signature = (images, labels, mode = "regular", preserve = Vec::new(), seed = 0))]
    fn anonymize_pair(
        &self,
        py: Python<'_>,
        images: (PyImage, PyImage),
        labels: (PyLabelMap, PyLabelMap),
        mode: &str,
        preserve: Vec<String>,
        seed: u64,
    ) -> PyResult<(PyImage, PyImage, String)> {
        let request = self.request(mode, preserve, Arity::Paired, seed)?;
        let result = py
            .detach(|| {
                self.inner.anonymize_paired(
                    [&images.0.inner, &images.1.inner],
                    [&labels.0.inner, &labels.1.inner],
                    &request,
                )
            })
            .map_err(py_err)?;
        let report = serde_json::to_string(&result.report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let mut outputs = result.outputs.into_iter();
        let a = outputs.next().expect("two outputs");
        let b = outputs.next().expect("two outputs");
        Ok((PyImage { inner: a }, PyImage { inner: b }, report))
    }
}

fn mask(height: usize, width: usize, data: Vec<bool>) -> PyResult<MaskImage> {
    MaskImage::new(height, width, data).map_err(py_err)
}

/// Inpainting band around `real` given the synthetic region `syn`.
#[pyfunction]
#[pyo3(signature = (height, width, real, syn, sigma = 3.0, kernel_size = 13, threshold = 0.4))]
fn blend_band(
    height: usize,
    width: usize,
    real: Vec<bool>,
    syn: Vec<bool>,
    sigma: f64,
    kernel_size: usize,
    threshold: f64,
) -> PyResult<Vec<bool>> {
    let config = BlendConfig { sigma, kernel_size, threshold };
    let band = blend_mask(&mask(height, width, real)?, &mask(height, width, syn)?, &config).map_err(py_err)?;
    Ok(band.data)
}

#[pyfunction(name = "mask_iou")]
fn py_mask_iou(height: usize, width: usize, a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    mask_iou(&mask(height, width, a)?, &mask(height, width, b)?).map_err(py_err)
}

/// `(l1, psnr)` over the masked pixels on the 0-255 scale.
#[pyfunction]
fn region_metrics(a: &PyImage, b: &PyImage, region: Vec<bool>) -> PyResult<(f64, f64)> {
    let m = mask(a.inner.height, a.inner.width, region)?;
    Ok((
        region_l1(&a.inner, &b.inner, &m).map_err(py_err)?,
        region_psnr(&a.inner, &b.inner, &m).map_err(py_err)?,
    ))
}

fn summary(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<GaussianSummary> {
    GaussianSummary::from_rows(mean, &cov).map_err(py_err)
}

/// Fréchet distance between two Gaussians given as mean vectors and covariance rows.
#[pyfunction(name = "frechet_distance")]
fn py_frechet_distance(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    frechet_distance(&summary(mean_a, cov_a)?, &summary(mean_b, cov_b)?).map_err(py_err)
}

/// Symmetric contrastive loss of the pair `(alpha, beta)` among `vectors`.
#[pyfunction]
fn mirrored_loss(vectors: Vec<Vec<f64>>, alpha: usize, beta: usize, temperature: f64) -> PyResult<f64> {
    semanon::contrastive::mirrored_loss(&vectors, alpha, beta, temperature).map_err(py_err)
}

#[pymodule]
fn semanon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyLabelMap>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyAnonymizer>()?;
    m.add_function(wrap_pyfunction!(blend_band, m)?)?;
    m.add_function(wrap_pyfunction!(py_mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(region_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(py_frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(mirrored_loss, m)?)?;
    Ok(())
}
