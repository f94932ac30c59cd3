//! Python bindings. Grids travel as flat lists (x fastest) with their dims;
//! configs travel as plain dicts with the same keys as the JSON run config.

use std::path::PathBuf;

use forge_cli::tasks::{load_shape_model, load_texture_model};
use forge_cli::CliError;
use forge_core::diffusion::{sample, DenoiserBackend, NoiseSchedule};
use forge_core::guidance::{synthesize_mask, GuidanceConfig};
use forge_core::latent::LatentCodec;
use forge_core::metrics::{dice, evaluate, ShapeSet};
use forge_core::sdf::{
    binarize, curvature_index, curvature_index_grad, export_mesh, make_shape, refine, signed_distance_transform,
    BinaryMask, Dims, SdfGrid, ShapeDistribution, ShapeParams, DEFAULT_BAND_FACTOR,
};
use forge_core::texture::{make_toy_background, signal_intensity, synthesize_volume, Placement, TexturePrior, Volume};
use forge_core::{io, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn core_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } | Error::EmptyBand { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Numerical(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Python dict (or None for the default) into a serde type via `json`.
fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else { return Ok(T::default()) };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "SdfGrid", module = "forge_py", from_py_object)]
#[derive(Clone)]
pub struct PySdfGrid(pub SdfGrid);

#[pymethods]
impl PySdfGrid {
    #[new]
    #[pyo3(signature = (dims, values, spacing=1.0))]
    fn new(dims: Dims, values: Vec<f64>, spacing: f64) -> PyResult<Self> {
        SdfGrid::new(dims, spacing, values).map(Self).map_err(core_err)
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        io::read_sdf(&stem).map(Self).map_err(core_err)
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        io::write_sdf(&stem, &self.0).map_err(core_err)
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.0.dims
    }

    #[getter]
    fn spacing(&self) -> f64 {
        self.0.spacing
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values.clone()
    }

    #[pyo3(signature = (band=DEFAULT_BAND_FACTOR))]
    fn curvature_index(&self, band: f64) -> PyResult<f64> {
        curvature_index(&self.0, band * self.0.spacing).map_err(core_err)
    }

    /// Gradient of the Curvature Index with respect to every voxel value.
    #[pyo3(signature = (band=DEFAULT_BAND_FACTOR))]
    fn curvature_index_grad(&self, band: f64) -> PyResult<Self> {
        curvature_index_grad(&self.0, band * self.0.spacing).map(Self).map_err(core_err)
    }

    #[pyo3(signature = (smoothing_passes=1))]
    fn refine(&self, smoothing_passes: usize) -> PyResult<Self> {
        refine(&self.0, smoothing_passes).map(Self).map_err(core_err)
    }

    #[pyo3(signature = (iso=0.0))]
    fn binarize(&self, iso: f64) -> PyMask {
        PyMask(binarize(&self.0, iso))
    }

    fn satisfies_eikonal(&self) -> bool {
        self.0.satisfies_eikonal()
    }

    /// Writes an OBJ surface; returns the triangle count.
    fn export_mesh(&self, path: PathBuf) -> PyResult<usize> {
        export_mesh(&self.0, &path).map_err(core_err)
    }

    fn __repr__(&self) -> String {
        format!("SdfGrid(dims={:?}, spacing={})", self.0.dims, self.0.spacing)
    }
}

#[pyclass(name = "BinaryMask", module = "forge_py", from_py_object)]
#[derive(Clone)]
pub struct PyMask(pub BinaryMask);

#[pymethods]
impl PyMask {
    #[new]
    #[pyo3(signature = (dims, values, spacing=1.0))]
    fn new(dims: Dims, values: Vec<bool>, spacing: f64) -> PyResult<Self> {
        BinaryMask::new(dims, spacing, values).map(Self).map_err(core_err)
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        io::read_mask(&stem).map(Self).map_err(core_err)
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        io::write_mask(&stem, &self.0).map_err(core_err)
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.0.dims
    }

    #[getter]
    fn values(&self) -> Vec<bool> {
        self.0.values.clone()
    }

    fn count(&self) -> usize {
        self.0.count()
    }

    fn connected_components(&self) -> usize {
        self.0.connected_components()
    }

    fn signed_distance(&self) -> PyResult<PySdfGrid> {
        signed_distance_transform(&self.0).map(PySdfGrid).map_err(core_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("BinaryMask(dims={:?}, count={})", self.0.dims, self.0.count())
    }
}

#[pyclass(name = "Volume", module = "forge_py", from_py_object)]
#[derive(Clone)]
pub struct PyVolume(pub Volume);

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, values, spacing=1.0))]
    fn new(dims: Dims, values: Vec<f64>, spacing: f64) -> PyResult<Self> {
        Volume::new(dims, spacing, values).map(Self).map_err(core_err)
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        io::read_volume(&stem).map(Self).map_err(core_err)
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        io::write_volume(&stem, &self.0).map_err(core_err)
    }

    #[getter]
    fn dims(&self) -> Dims {
        self.0.dims
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values.clone()
    }

    fn signal_intensity(&self, mask: &PyMask) -> PyResult<f64> {
        signal_intensity(&self.0, &mask.0).map_err(core_err)
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.0.dims)
    }
}

/// A trained shape model: denoiser, latent codec and noise schedule.
#[pyclass(name = "ShapeModel", module = "forge_py")]
pub struct PyShapeModel {
    backend: DenoiserBackend,
    codec: LatentCodec,
    schedule: NoiseSchedule,
}

#[pymethods]
impl PyShapeModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (backend, codec, schedule) = load_shape_model(&path).map_err(cli_err)?;
        Ok(Self { backend, codec, schedule })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.codec.latent_dim()
    }

    /// Unguided latent sample.
    fn sample_latent(&self, seed: u64) -> PyResult<Vec<f64>> {
        sample(&self.backend, &self.schedule, seed).map_err(core_err)
    }

    fn decode(&self, latent: Vec<f64>) -> PyResult<PySdfGrid> {
        self.codec.decode(&latent).map(PySdfGrid).map_err(core_err)
    }

    fn encode(&self, sdf: &PySdfGrid) -> PyResult<Vec<f64>> {
        self.codec.encode(&sdf.0).map_err(core_err)
    }

    /// Guided mask synthesis. Returns a dict with `sdf`, `mask`,
    /// `achieved_ci` and `final_loss`.
    #[pyo3(signature = (seed, guidance=None, refine_passes=1))]
    fn synthesize<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        guidance: Option<&Bound<'py, PyAny>>,
        refine_passes: usize,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let cfg: GuidanceConfig = from_py(guidance)?;
        let s = py
            .detach(|| synthesize_mask(&self.backend, &cfg, &self.codec, &self.schedule, seed, refine_passes))
            .map_err(core_err)?;
        let out = pyo3::types::PyDict::new(py);
        out.set_item("sdf", PySdfGrid(s.sdf))?;
        out.set_item("mask", PyMask(s.mask))?;
        out.set_item("achieved_ci", s.achieved_ci)?;
        out.set_item("final_loss", s.final_loss)?;
        Ok(out)
    }
}

#[pyclass(name = "TexturePrior", module = "forge_py")]
pub struct PyTexturePrior {
    prior: TexturePrior,
    schedule: NoiseSchedule,
}

#[pymethods]
impl PyTexturePrior {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (prior, schedule) = load_texture_model(&path).map_err(cli_err)?;
        Ok(Self { prior, schedule })
    }

    #[getter]
    fn patch_dims(&self) -> Dims {
        self.prior.patch_dims
    }

    /// Places `mask` in `background` and synthesizes its texture. Returns
    /// `(volume, placed_mask, offset)`.
    #[pyo3(signature = (background, mask, seed, si_target=None, guidance=None, placement=None, n_resample=1))]
    #[allow(clippy::too_many_arguments)]
    fn synthesize<'py>(
        &self,
        py: Python<'py>,
        background: &PyVolume,
        mask: &PyMask,
        seed: u64,
        si_target: Option<f64>,
        guidance: Option<&Bound<'py, PyAny>>,
        placement: Option<&Bound<'py, PyAny>>,
        n_resample: usize,
    ) -> PyResult<(PyVolume, PyMask, [usize; 3])> {
        let cfg: GuidanceConfig = from_py(guidance)?;
        let placement: Placement = from_py(placement)?;
        let s = py
            .detach(|| {
                synthesize_volume(&self.prior, &background.0, &mask.0, &placement, si_target, &cfg, &self.schedule, seed, n_resample)
            })
            .map_err(core_err)?;
        Ok((PyVolume(s.volume), PyMask(s.mask), s.offset))
    }
}

/// Signed distance field of a parametric shape, e.g.
/// `{"kind": "sphere", "center": [15.5]*3, "radius": 6}`.
#[pyfunction]
#[pyo3(signature = (params, dims, spacing=1.0, seed=0))]
fn make_shape_sdf(params: &Bound<'_, PyAny>, dims: Dims, spacing: f64, seed: u64) -> PyResult<PySdfGrid> {
    let text: String = params.py().import("json")?.call_method1("dumps", (params,))?.extract()?;
    let params: ShapeParams = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    make_shape(&params, dims, spacing, seed).map(PySdfGrid).map_err(core_err)
}

/// Seeded shape parameters from the training distribution.
#[pyfunction]
#[pyo3(signature = (dims, seed, spacing=1.0, distribution=None))]
fn sample_shape_params<'py>(
    py: Python<'py>,
    dims: Dims,
    seed: u64,
    spacing: f64,
    distribution: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let dist: ShapeDistribution = from_py(distribution)?;
    to_py(py, &dist.sample(dims, spacing, seed))
}

#[pyfunction]
#[pyo3(signature = (dims, seed, spacing=1.0))]
fn toy_background(dims: Dims, seed: u64, spacing: f64) -> PyResult<PyVolume> {
    make_toy_background(dims, spacing, seed).map(PyVolume).map_err(core_err)
}

#[pyfunction(name = "dice")]
fn py_dice(a: &PyMask, b: &PyMask) -> PyResult<f64> {
    dice(&a.0, &b.0).map_err(core_err)
}

/// MMD, coverage and pairwise Dice between two mask lists.
#[pyfunction]
#[pyo3(signature = (generated, reference, align=true))]
fn metrics<'py>(
    py: Python<'py>,
    generated: Vec<PyMask>,
    reference: Vec<PyMask>,
    align: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let gen = ShapeSet::new(generated.into_iter().map(|m| m.0).collect()).map_err(core_err)?;
    let reference = ShapeSet::new(reference.into_iter().map(|m| m.0).collect()).map_err(core_err)?;
    let report = py.detach(|| evaluate(&gen, &reference, align)).map_err(core_err)?;
    to_py(py, &report)
}

#[pymodule]
fn forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySdfGrid>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyShapeModel>()?;
    m.add_class::<PyTexturePrior>()?;
    m.add_function(wrap_pyfunction!(make_shape_sdf, m)?)?;
    m.add_function(wrap_pyfunction!(sample_shape_params, m)?)?;
    m.add_function(wrap_pyfunction!(toy_background, m)?)?;
    m.add_function(wrap_pyfunction!(py_dice, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
