//! Python bindings: volumes, the tail filter, phantoms, metrics,
//! quantification and model inference.
//!
//! Arrays cross the boundary as flat row-major lists with explicit dims.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use octa_core::blocks::Variant;
use octa_core::checkpoint::Checkpoint;
use octa_core::error::Error;
use octa_core::masf::{self as core_masf, MasfConfig};
use octa_core::metrics::{self, GmsdConfig, MetricReport, Peak, SsimConfig};
use octa_core::model::{Model, ModelConfig, Preset};
use octa_core::phantom::{self, PhantomConfig};
use octa_core::vasc3d;
use octa_core::volume::{Mask, Volume};

fn err(e: Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// A `[D, H, W]` float volume with voxel spacing in millimetres.
#[pyclass(name = "Volume", module = "octa_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume(Volume);

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, data, voxel_size_mm = [1.0, 1.0, 1.0]))]
    fn new(dims: [usize; 3], data: Vec<f32>, voxel_size_mm: [f64; 3]) -> PyResult<Self> {
        Volume::new(dims, voxel_size_mm, data).map(PyVolume).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (dims, voxel_size_mm = [1.0, 1.0, 1.0]))]
    fn zeros(dims: [usize; 3], voxel_size_mm: [f64; 3]) -> PyResult<Self> {
        Volume::zeros(dims, voxel_size_mm).map(PyVolume).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Volume::load(&path).map(PyVolume).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    #[getter]
    fn voxel_size_mm(&self) -> [f64; 3] {
        self.0.voxel_size_mm()
    }

    fn get(&self, d: usize, h: usize, w: usize) -> PyResult<f32> {
        let [dd, hh, ww] = self.0.dims();
        if d >= dd || h >= hh || w >= ww {
            return Err(PyValueError::new_err(format!("index ({d}, {h}, {w}) outside {:?}", self.0.dims())));
        }
        Ok(self.0.get(d, h, w))
    }

    /// Flat row-major copy of the voxel data.
    fn to_list(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    /// Flat copy of depth plane `d`.
    fn plane(&self, d: usize) -> PyResult<Vec<f32>> {
        if d >= self.0.dims()[0] {
            return Err(PyValueError::new_err(format!("plane {d} out of range")));
        }
        Ok(self.0.plane(d).to_vec())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, voxel_size_mm={:?})", self.0.dims(), self.0.voxel_size_mm())
    }
}

/// Applies the moving average subtraction filter to every A-line.
#[pyfunction]
#[pyo3(signature = (volume, gamma = 0.8, window = 11, flip_depth = false))]
fn masf(volume: &PyVolume, gamma: f64, window: usize, flip_depth: bool) -> PyResult<PyVolume> {
    let cfg = MasfConfig { gamma, window, depth_axis_ascending: !flip_depth };
    core_masf::masf_volume(&volume.0, &cfg).map(PyVolume).map_err(err)
}

/// Filters a single anterior-to-posterior A-line.
#[pyfunction]
#[pyo3(signature = (aline, gamma = 0.8, window = 11))]
fn masf_aline(aline: Vec<f64>, gamma: f64, window: usize) -> PyResult<Vec<f64>> {
    let cfg = MasfConfig { gamma, window, depth_axis_ascending: true };
    core_masf::masf_aline_f64(&aline, &cfg).map_err(err)
}

/// One synthetic phantom volume with its repeated scans and ground truth.
#[pyclass(name = "Phantom", module = "octa_py")]
struct PyPhantom(phantom::PhantomVolume);

fn mask_volume(m: &Mask, like: &Volume) -> PyResult<PyVolume> {
    m.to_volume(like.voxel_size_mm()).map(PyVolume).map_err(err)
}

#[pymethods]
impl PyPhantom {
    #[getter]
    fn clean(&self) -> PyVolume {
        PyVolume(self.0.truth.clean_volume.clone())
    }

    #[getter]
    fn merged(&self) -> PyVolume {
        PyVolume(self.0.merged.clone())
    }

    #[getter]
    fn scans(&self) -> Vec<PyVolume> {
        self.0.scans.iter().cloned().map(PyVolume).collect()
    }

    #[getter]
    fn vessel_mask(&self) -> PyResult<PyVolume> {
        mask_volume(&self.0.truth.vessel_mask, &self.0.merged)
    }

    #[getter]
    fn artifact_mask(&self) -> PyResult<PyVolume> {
        mask_volume(&self.0.truth.artifact_mask, &self.0.merged)
    }

    #[getter]
    fn segment_count(&self) -> usize {
        self.0.truth.segment_ground_truth.count()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.truth.seed
    }
}

/// Generates one phantom volume. `config` is an optional JSON document of
/// phantom settings; `seed` overrides its seed.
#[pyfunction]
#[pyo3(signature = (seed = 42, config = None))]
fn generate_phantom(seed: u64, config: Option<&str>) -> PyResult<PyPhantom> {
    let mut cfg: PhantomConfig = match config {
        Some(s) => serde_json_from(s)?,
        None => PhantomConfig::default(),
    };
    cfg.seed = seed;
    phantom::generate_volume(&cfg).map(PyPhantom).map_err(err)
}

/// Writes a phantom dataset with a checksummed manifest; returns the number of plane pairs.
#[pyfunction]
#[pyo3(signature = (out, volumes = 5, seed = 42))]
fn build_dataset(out: PathBuf, volumes: usize, seed: u64) -> PyResult<usize> {
    let cfg = PhantomConfig { seed, ..PhantomConfig::default() };
    phantom::build_dataset(&cfg, volumes, &out).map(|m| m.pairs.len()).map_err(err)
}

fn serde_json_from<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn shape_of(shape: Vec<usize>, n: usize) -> PyResult<Vec<usize>> {
    if shape.iter().product::<usize>() != n {
        return Err(PyValueError::new_err(format!("shape {shape:?} does not hold {n} values")));
    }
    Ok(shape)
}

/// PSNR in dB; the peak defaults to the maximum of `img`.
#[pyfunction]
#[pyo3(signature = (img, reference, peak = None))]
fn psnr(img: Vec<f32>, reference: Vec<f32>, peak: Option<f64>) -> PyResult<f64> {
    let peak = peak.map_or(Peak::ImageMax, Peak::Fixed);
    metrics::psnr(&img, &reference, peak).map_err(err)
}

/// Mean SSIM of a 2-D (`[H, W]`) or 3-D (`[D, H, W]`) array pair.
#[pyfunction]
fn ssim(img: Vec<f32>, reference: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    let shape = shape_of(shape, img.len())?;
    metrics::ssim(&img, &reference, &shape, &SsimConfig::default()).map_err(err)
}

/// GMSD of a 2-D or 3-D array pair.
#[pyfunction]
fn gmsd(img: Vec<f32>, reference: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    let shape = shape_of(shape, img.len())?;
    metrics::gmsd(&img, &reference, &shape, &GmsdConfig::default()).map_err(err)
}

/// PSNR, SSIM and GMSD of `a` against `b`, plane-averaged or volumetric.
#[pyfunction]
#[pyo3(signature = (a, b, volumetric = false))]
fn compare_volumes<'py>(py: Python<'py>, a: &PyVolume, b: &PyVolume, volumetric: bool) -> PyResult<Bound<'py, PyDict>> {
    let r: MetricReport = MetricReport::for_volumes(&a.0, &b.0, volumetric).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("psnr", r.psnr)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("gmsd", r.gmsd)?;
    d.set_item("volumetric", r.volumetric)?;
    Ok(d)
}

/// Skeleton-based vessel quantification of a volume.
#[pyfunction]
#[pyo3(signature = (volume, threshold = vasc3d::DEFAULT_THRESHOLD, mask = None))]
fn quantify<'py>(
    py: Python<'py>,
    volume: &PyVolume,
    threshold: f32,
    mask: Option<&PyVolume>,
) -> PyResult<Bound<'py, PyDict>> {
    let region = mask.map(|m| Mask::from_volume(&m.0));
    let r = vasc3d::quantify_volume(&volume.0, threshold, region.as_ref()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("segment_count", r.segment_count)?;
    d.set_item("segment_density_per_mm3", r.segment_density_per_mm3)?;
    d.set_item("mean_length", r.mean_length())?;
    d.set_item("length_histogram", r.length_histogram.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>())?;
    d.set_item("mean_flow_index_skeleton", r.mean_flow_index_skeleton)?;
    d.set_item("mean_flow_index_mask", r.mean_flow_index_mask)?;
    Ok(d)
}

/// An enhancement network, freshly initialised or loaded from a checkpoint.
#[pyclass(name = "Model", module = "octa_py")]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (preset = "tiny", variant = "a", seed = 42))]
    fn new(preset: &str, variant: &str, seed: u64) -> PyResult<Self> {
        let preset: Preset = preset.parse().map_err(err)?;
        let variant: Variant = variant.parse().map_err(err)?;
        Model::new(&ModelConfig::preset(preset).with_variant(variant), seed)
            .map(PyModel)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path)
            .and_then(|c| c.to_model())
            .map(PyModel)
            .map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.0, None).save(&path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Enhances every depth plane of a `[0, 255]` volume.
    #[pyo3(signature = (volume, workers = 1))]
    fn enhance(&self, py: Python<'_>, volume: &PyVolume, workers: usize) -> PyResult<PyVolume> {
        let vol = volume.0.clone();
        py.detach(|| self.0.enhance_volume(&vol, workers.max(1)))
            .map(PyVolume)
            .map_err(err)
    }
}

#[pymodule]
fn octa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyPhantom>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(masf, m)?)?;
    m.add_function(wrap_pyfunction!(masf_aline, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(gmsd, m)?)?;
    m.add_function(wrap_pyfunction!(compare_volumes, m)?)?;
    m.add_function(wrap_pyfunction!(quantify, m)?)?;
    Ok(())
}
