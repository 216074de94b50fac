//! Python bindings: images, the structure prior, metrics, checkpoints and the
//! synth/train pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dimsplat::image::{load_image, save_image};
use dimsplat::prior::PriorConfig;
use dimsplat::scene::{
    load_checkpoint, save_checkpoint, Camera as CoreCamera, CameraJson,
    Checkpoint as CoreCheckpoint, Dataset,
};
use dimsplat::trainer::{SynthSpec, TrainConfig};
use dimsplat::Error;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::NonFinite { .. } => PyArithmeticError::new_err(msg),
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Json(_) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Row-major interleaved float image.
#[pyclass(module = "dimsplat", from_py_object)]
#[derive(Clone)]
struct Image {
    inner: dimsplat::Image,
}

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        dimsplat::Image::from_vec(width, height, channels, data)
            .map(|inner| Image { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_image(path).map(|inner| Image { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_image(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, x: usize, y: usize, c: usize) -> PyResult<f64> {
        if x >= self.inner.width() || y >= self.inner.height() || c >= self.inner.channels() {
            return Err(PyValueError::new_err("pixel index out of range"));
        }
        Ok(self.inner.get(x, y, c))
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __repr__(&self) -> String {
        format!(
            "Image(width={}, height={}, channels={})",
            self.inner.width(),
            self.inner.height(),
            self.inner.channels()
        )
    }
}

#[pyclass(module = "dimsplat", from_py_object)]
#[derive(Clone)]
struct Camera {
    inner: CoreCamera,
}

#[pymethods]
impl Camera {
    #[staticmethod]
    #[pyo3(signature = (eye, target, width, height, focal, up = [0.0, -1.0, 0.0]))]
    fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        width: usize,
        height: usize,
        focal: f64,
        up: [f64; 3],
    ) -> PyResult<Self> {
        CoreCamera::look_at(eye, target, up, width, height, focal)
            .map(|inner| Camera { inner })
            .map_err(to_py)
    }

    /// Parses the manifest camera record.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let j: CameraJson = serde_json::from_str(text).map_err(json_err)?;
        CoreCamera::from_json(&j)
            .map(|inner| Camera { inner })
            .map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.to_json()).map_err(json_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn center(&self) -> [f64; 3] {
        self.inner.center()
    }
}

/// A trained cloud plus optional denoiser weights.
#[pyclass(module = "dimsplat", from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(path)
            .map(|inner| Checkpoint { inner })
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn n_gaussians(&self) -> usize {
        self.inner.cloud.len()
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.inner.cloud.sh_degree
    }

    #[getter]
    fn has_denoiser(&self) -> bool {
        self.inner.pdm.is_some()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.cloud.positions.clone()
    }

    /// Renders every output channel. `config` is a training-config JSON string
    /// supplying render and denoiser settings.
    #[pyo3(signature = (camera, background = [0.0; 3], config = None))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        camera: &Camera,
        background: [f64; 3],
        config: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = match config {
            Some(t) => serde_json::from_str(t).map_err(json_err)?,
            None => TrainConfig::default(),
        };
        cfg.validate().map_err(to_py)?;
        let v = py
            .detach(|| {
                dimsplat::trainer::render_view(
                    &self.inner.cloud,
                    self.inner.pdm.as_ref(),
                    &camera.inner,
                    background,
                    &cfg,
                )
            })
            .map_err(to_py)?;
        let d = PyDict::new(py);
        for (k, img) in [
            ("r0", v.r0),
            ("r", v.r),
            ("pr", v.pr),
            ("dr", v.dr),
            ("lr", v.lr),
            ("ngs", v.ngs),
            ("i_out", v.i_out),
        ] {
            d.set_item(k, Image { inner: img })?;
        }
        Ok(d)
    }
}

#[pyfunction]
#[pyo3(signature = (image, sigma = 1.0, beta = 1.0, gamma = 1.0))]
fn extract_prior(
    py: Python<'_>,
    image: &Image,
    sigma: f64,
    beta: f64,
    gamma: f64,
) -> PyResult<Image> {
    let cfg = PriorConfig {
        sigma,
        beta,
        gamma,
        ..PriorConfig::default()
    };
    py.detach(|| dimsplat::prior::extract_prior(&image.inner, &cfg))
        .map(|inner| Image { inner })
        .map_err(to_py)
}

#[pyfunction]
fn psnr(a: &Image, b: &Image) -> PyResult<f64> {
    dimsplat::losses::psnr(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &Image, b: &Image) -> PyResult<f64> {
    dimsplat::losses::ssim(&a.inner, &b.inner).map_err(to_py)
}

/// Writes a synthetic scene and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, spec = None))]
fn synth(py: Python<'_>, out_dir: PathBuf, spec: Option<&str>) -> PyResult<PathBuf> {
    let spec: SynthSpec = match spec {
        Some(t) => serde_json::from_str(t).map_err(json_err)?,
        None => SynthSpec::default(),
    };
    py.detach(|| dimsplat::trainer::synth_dataset(&spec, &out_dir))
        .map_err(to_py)?;
    Ok(out_dir.join("scene.json"))
}

/// Trains on a manifest and returns the final checkpoint. With `out_dir` the
/// run also writes its log, resolved config and checkpoints there.
#[pyfunction]
#[pyo3(signature = (manifest, config = None, out_dir = None))]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    config: Option<&str>,
    out_dir: Option<PathBuf>,
) -> PyResult<Checkpoint> {
    let cfg: TrainConfig = match config {
        Some(t) => serde_json::from_str(t).map_err(json_err)?,
        None => TrainConfig::default(),
    };
    let t = py
        .detach(|| {
            let ds = Dataset::load(&manifest)?;
            dimsplat::trainer::train(&ds, &cfg, out_dir.as_deref(), |_| {})
        })
        .map_err(to_py)?;
    Ok(Checkpoint {
        inner: t.checkpoint(),
    })
}

#[pymodule(name = "dimsplat")]
fn dimsplat_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Camera>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(extract_prior, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
