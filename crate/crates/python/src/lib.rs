//! Python bindings: rendering, BRDF evaluation, the recursive network,
//! normal integration and angular error.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use homelight::brdf::{self, BrdfParams, ShadingGeometry};
use homelight::math::Vec3;
use homelight::netarch::{self, NetConfig, NetworkWeights};
use homelight::raster;
use homelight::render::{self, ImageStack, RenderOptions};
use homelight::scene::{SceneConfig, NUM_SLOTS};
use homelight::{eval, geometry, training};

fn py_err(e: homelight::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

/// Planar float raster (`channels × height × width`, row-major).
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: raster::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        raster::Image::from_data(width, height, channels, data).map(|inner| PyImage { inner }).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    fn get(&self, channel: usize, row: usize, col: usize) -> PyResult<f32> {
        if channel >= self.inner.channels || row >= self.inner.height || col >= self.inner.width {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(channel, row, col))
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    /// Little-endian f32 bytes in planar order (for `numpy.frombuffer`).
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let bytes: Vec<u8> = self.inner.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        PyBytes::new(py, &bytes)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.inner.width, self.inner.height, self.inner.channels)
    }
}

fn wrap(inner: raster::Image) -> PyImage {
    PyImage { inner }
}

/// Six HDR renders with ground-truth maps and mask.
#[pyclass(name = "RenderBundle")]
pub struct PyBundle {
    inner: render::RenderBundle,
}

#[pymethods]
impl PyBundle {
    #[getter]
    fn images(&self) -> Vec<PyImage> {
        self.inner.images.iter().cloned().map(wrap).collect()
    }

    #[getter]
    fn normal(&self) -> PyImage {
        wrap(self.inner.gt.normal.clone())
    }

    #[getter]
    fn albedo(&self) -> PyImage {
        wrap(self.inner.gt.albedo.clone())
    }

    #[getter]
    fn roughness(&self) -> PyImage {
        wrap(self.inner.gt.roughness.clone())
    }

    #[getter]
    fn mask(&self) -> PyImage {
        wrap(self.inner.mask.clone())
    }

    /// Tonemapped stack with the given active slots (slot 0 is required).
    fn stack(&self, active: Vec<bool>) -> PyResult<PyStack> {
        let active: [bool; NUM_SLOTS] =
            active.try_into().map_err(|_| PyValueError::new_err(format!("expected {NUM_SLOTS} flags")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ImageStack::from_hdr(&self.inner.images, &self.inner.mask, active, false, &mut rng)
            .map(|inner| PyStack { inner })
            .map_err(py_err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        render::RenderBundle::load(&dir).map(|inner| PyBundle { inner }).map_err(py_err)
    }
}

/// Six LDR slot images plus mask: the network input.
#[pyclass(name = "ImageStack")]
pub struct PyStack {
    inner: ImageStack,
}

#[pymethods]
impl PyStack {
    #[new]
    #[pyo3(signature = (images, mask))]
    fn new(images: Vec<Option<PyImage>>, mask: PyImage) -> PyResult<Self> {
        let images = images.into_iter().map(|i| i.map(|i| i.inner)).collect();
        ImageStack::new(images, mask.inner).map(|inner| PyStack { inner }).map_err(py_err)
    }

    #[getter]
    fn active(&self) -> Vec<bool> {
        self.inner.active.to_vec()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }
}

/// InitNet + RecNet weights.
#[pyclass(name = "Network")]
pub struct PyNetwork {
    inner: NetworkWeights,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (width = netarch::DEFAULT_WIDTH, seed = 0, max_level = netarch::DEFAULT_MAX_LEVEL))]
    fn new(width: usize, seed: u64, max_level: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PyNetwork { inner: NetworkWeights::new(NetConfig { width, max_level }, false, &mut rng) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        netarch::load_checkpoint(&path, None).map(|inner| PyNetwork { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        netarch::save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    fn num_parameters(&self) -> usize {
        netarch::count_parameters(&[&self.inner.init, &self.inner.rec])
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Coarse-to-fine prediction; returns `[(normal, albedo, roughness), ...]` from 32×32 up.
    fn predict(&self, stack: &PyStack) -> PyResult<Vec<(PyImage, PyImage, PyImage)>> {
        let levels = netarch::recursive_predict(&self.inner, &stack.inner).map_err(py_err)?;
        Ok(levels.into_iter().map(|m| (wrap(m.normal), wrap(m.albedo), wrap(m.roughness))).collect())
    }

    /// Trains on rendered bundles for `steps` optimizer steps; returns the loss per step.
    #[pyo3(signature = (bundles, steps, batch_size = 2, learning_rate = 1e-3, seed = 0))]
    fn train(
        &mut self,
        bundles: Vec<PyRef<'_, PyBundle>>,
        steps: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data: Vec<render::RenderBundle> = bundles.iter().map(|b| b.inner.clone()).collect();
        let res = data.first().map(|b| b.resolution()).ok_or_else(|| PyValueError::new_err("no bundles"))?;
        let cfg = training::TrainConfig {
            batch_size,
            learning_rate,
            resolution: res,
            network: self.inner.config,
            seed,
            max_steps: Some(steps),
            epochs: usize::MAX,
            augment: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log = training::train(&cfg, &data, &mut self.inner, &mut rng, None).map_err(py_err)?;
        Ok(log.iter().map(|l| l.loss.total).collect())
    }
}

#[pyfunction]
fn beckmann_d(roughness: f64, cos_theta_h: f64) -> PyResult<f64> {
    brdf::beckmann_d(roughness, cos_theta_h).map_err(py_err)
}

#[pyfunction]
fn fresnel_schlick(f0: f64, cos_hv: f64) -> f64 {
    brdf::fresnel_schlick(f0, cos_hv)
}

#[pyfunction]
fn smith_g1(cos_xn: f64, cos_xh: f64, roughness: f64) -> f64 {
    brdf::smith_g1(cos_xn, cos_xh, roughness)
}

/// Cook-Torrance BRDF value (RGB) for unit view, light and normal vectors.
#[pyfunction]
fn eval_brdf(albedo: [f64; 3], roughness: f64, view: [f64; 3], light: [f64; 3], normal: [f64; 3]) -> PyResult<[f64; 3]> {
    let params = BrdfParams::new(vec3(albedo), roughness).map_err(py_err)?;
    let geom = ShadingGeometry::new(vec3(view), vec3(light), vec3(normal)).map_err(py_err)?;
    let v = brdf::eval_brdf(&params, &geom);
    Ok([v.x, v.y, v.z])
}

#[pyfunction]
fn srgb_encode(v: f32) -> f32 {
    render::srgb_encode(v)
}

/// Samples and renders one synthetic scene.
#[pyfunction]
#[pyo3(signature = (seed, resolution = 256))]
fn generate_bundle(seed: u64, resolution: usize) -> PyResult<PyBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render::generate_bundle(&mut rng, &SceneConfig::default(), resolution, RenderOptions::default())
        .map(|inner| PyBundle { inner })
        .map_err(py_err)
}

/// `(InitNet + RecNet, ResNet triplet)` parameter counts at a width.
#[pyfunction]
#[pyo3(signature = (width = netarch::DEFAULT_WIDTH))]
fn parameter_counts(width: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = NetworkWeights::new(NetConfig { width, max_level: 6 }, true, &mut rng);
    let resnet = w.resnet.as_ref().expect("built with the baseline");
    (netarch::count_parameters(&[&w.init, &w.rec]), netarch::count_parameters(&[resnet]))
}

#[pyfunction]
#[pyo3(signature = (seed, distribution = training::DEFAULT_ACTIVE_DISTRIBUTION))]
fn sample_active_images(seed: u64, distribution: [f64; NUM_SLOTS]) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    training::sample_active_images(&mut rng, &distribution).to_vec()
}

/// Least-squares depth (1 channel, zero outside the mask) from unit normals.
#[pyfunction]
fn integrate_normals(normals: &PyImage, mask: &PyImage) -> PyResult<PyImage> {
    geometry::integrate_normals(&normals.inner, &mask.inner).map(|d| wrap(d.to_image())).map_err(py_err)
}

#[pyfunction]
fn mean_angular_error(pred: &PyImage, gt: &PyImage, mask: &PyImage) -> PyResult<f64> {
    eval::mean_angular_error(&pred.inner, &gt.inner, &mask.inner).map_err(py_err)
}

#[pymodule]
fn homelight_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyBundle>()?;
    m.add_class::<PyStack>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(beckmann_d, m)?)?;
    m.add_function(wrap_pyfunction!(fresnel_schlick, m)?)?;
    m.add_function(wrap_pyfunction!(smith_g1, m)?)?;
    m.add_function(wrap_pyfunction!(eval_brdf, m)?)?;
    m.add_function(wrap_pyfunction!(srgb_encode, m)?)?;
    m.add_function(wrap_pyfunction!(generate_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_counts, m)?)?;
    m.add_function(wrap_pyfunction!(sample_active_images, m)?)?;
    m.add_function(wrap_pyfunction!(integrate_normals, m)?)?;
    m.add_function(wrap_pyfunction!(mean_angular_error, m)?)?;
    Ok(())
}
