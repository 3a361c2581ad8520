//! Python bindings: grids, smoothing, registration, the resolution measure,
//! the sharp-edge model and rendering.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use tempres_core as core;
use tempres_core::io::FieldLabel;

fn to_py(e: core::Error) -> PyErr {
    match e {
        core::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense row-major grid of `f64` values.
#[pyclass(name = "ImageGrid", module = "tempres", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyImageGrid {
    inner: core::ImageGrid,
}

impl From<core::ImageGrid> for PyImageGrid {
    fn from(inner: core::ImageGrid) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyImageGrid {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        core::ImageGrid::new(shape, data).map(Self::from).map_err(to_py)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        core::ImageGrid::zeros(&shape).map(Self::from).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, index: Vec<usize>) -> PyResult<f64> {
        if index.len() != self.inner.dim() || index.iter().zip(self.inner.shape()).any(|(i, n)| i >= n) {
            return Err(PyValueError::new_err(format!("index {index:?} outside shape {:?}", self.inner.shape())));
        }
        Ok(self.inner.get(&index))
    }

    fn sample_linear(&self, point: Vec<f64>) -> PyResult<f64> {
        self.inner.sample_linear(&point).map_err(to_py)
    }

    fn min_max(&self) -> (f64, f64) {
        self.inner.min_max()
    }

    fn __repr__(&self) -> String {
        format!("ImageGrid(shape={:?})", self.inner.shape())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn stack_of(images: Vec<PyImageGrid>) -> PyResult<core::ImageStack> {
    core::ImageStack::new(images.into_iter().map(|g| g.inner).collect()).map_err(to_py)
}

fn grids(stack: core::ImageStack) -> Vec<PyImageGrid> {
    stack.into_images().into_iter().map(PyImageGrid::from).collect()
}

#[pyclass(name = "ResolutionField", module = "tempres", frozen, get_all)]
pub struct PyResolutionField {
    sigma_star: PyImageGrid,
    iterations_used: usize,
    capped_pixels: usize,
    max: f64,
    mean_positive: f64,
}

#[pyclass(name = "RegistrationResult", module = "tempres", frozen, get_all)]
pub struct PyRegistrationResult {
    template: PyImageGrid,
    registered: Vec<PyImageGrid>,
    /// Parameter vectors: matrix then translation (affine), angles then translation (rigid).
    transforms: Vec<Vec<f64>>,
    intensity_scales: Vec<f64>,
    energy_trace: Vec<f64>,
}

#[pyfunction]
fn gaussian_smooth(grid: &PyImageGrid, sigma: f64) -> PyResult<PyImageGrid> {
    core::smoothing::gaussian_smooth(&grid.inner, sigma).map(PyImageGrid::from).map_err(to_py)
}

#[pyfunction]
fn gaussian_derivative(grid: &PyImageGrid, sigma: f64, axis: usize) -> PyResult<PyImageGrid> {
    core::smoothing::gaussian_derivative(&grid.inner, sigma, axis)
        .map(PyImageGrid::from)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (images, p0 = 0.1, p1 = 0.9))]
fn pixelwise_quantile_range(images: Vec<PyImageGrid>, p0: f64, p1: f64) -> PyResult<PyImageGrid> {
    core::grid::pixelwise_quantile_range(&stack_of(images)?, p0, p1)
        .map(PyImageGrid::from)
        .map_err(to_py)
}

/// Per-pixel resolution of a registered stack. `sigma_cap` defaults to twice
/// the largest grid extent.
#[pyfunction]
#[pyo3(signature = (images, eta, p0 = 0.1, p1 = 0.9, step = 0.25, sigma_cap = None))]
fn resolution_measure(
    py: Python<'_>,
    images: Vec<PyImageGrid>,
    eta: f64,
    p0: f64,
    p1: f64,
    step: f64,
    sigma_cap: Option<f64>,
) -> PyResult<PyResolutionField> {
    let stack = stack_of(images)?;
    let extent = stack.shape().iter().copied().max().unwrap_or(1) as f64;
    let cfg = core::ResolutionConfig::new(eta, p0, p1, step, sigma_cap.unwrap_or(2.0 * extent)).map_err(to_py)?;
    let field = py.detach(|| core::resolution_measure(&stack, &cfg)).map_err(to_py)?;
    Ok(PyResolutionField {
        max: field.max(),
        mean_positive: field.mean_positive(),
        iterations_used: field.iterations_used,
        capped_pixels: field.capped_pixels,
        sigma_star: field.sigma_star.into(),
    })
}

#[pyfunction]
#[pyo3(signature = (
    images,
    transform = "affine",
    norm = "l2",
    reg_weight = 1e-3,
    outer_iterations = 50,
    fit_intensity_scale = false,
    seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn groupwise_register(
    py: Python<'_>,
    images: Vec<PyImageGrid>,
    transform: &str,
    norm: &str,
    reg_weight: f64,
    outer_iterations: usize,
    fit_intensity_scale: bool,
    seed: u64,
) -> PyResult<PyRegistrationResult> {
    let stack = stack_of(images)?;
    let cfg = core::RegistrationConfig {
        transform_kind: transform.parse().map_err(to_py)?,
        norm: norm.parse().map_err(to_py)?,
        lambda: reg_weight,
        outer_iterations,
        fit_intensity_scale,
        seed,
        ..Default::default()
    };
    let res = py.detach(|| core::groupwise_register(&stack, &cfg)).map_err(to_py)?;
    Ok(PyRegistrationResult {
        template: res.template.into(),
        transforms: res.transforms.iter().map(|t| t.params()).collect(),
        intensity_scales: res.intensity_scales,
        energy_trace: res.energy_trace.iter().map(|r| r.energy).collect(),
        registered: grids(res.registered),
    })
}

#[pyfunction]
fn std_normal_cdf(x: f64) -> f64 {
    core::model::std_normal_cdf(x)
}

#[pyfunction]
fn edge_max_diff(tau: f64, sigma: f64) -> PyResult<f64> {
    core::model::edge_max_diff(tau, sigma).map_err(to_py)
}

#[pyfunction]
fn point_mass_max_diff_approx(tau: f64, sigma: f64) -> PyResult<f64> {
    core::model::point_mass_max_diff_approx(tau, sigma).map_err(to_py)
}

#[pyfunction]
fn point_mass_max_diff_exact(tau: f64, sigma: f64) -> PyResult<f64> {
    core::model::point_mass_max_diff_exact(tau, sigma).map_err(to_py)
}

/// Sharp 1D edges with normally distributed positions, on a grid with
/// `x = 0` at pixel `length // 2`. Returns `(shifts, images)`.
#[pyfunction]
#[pyo3(signature = (n, tau, length = 128, seed = 0))]
fn sample_edges(n: usize, tau: f64, length: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<PyImageGrid>)> {
    let spec = core::model::EdgeSampleSpec { n, tau, grid: core::model::EdgeGrid::centered(length), seed };
    let s = core::model::sample_edges(&spec).map_err(to_py)?;
    Ok((s.shifts, grids(s.stack)))
}

#[pyfunction]
#[pyo3(signature = (path, limit = None))]
fn load_idx_images(path: PathBuf, limit: Option<usize>) -> PyResult<Vec<PyImageGrid>> {
    core::io::load_idx_images(&path, limit).map(grids).map_err(to_py)
}

#[pyfunction]
fn load_idx_digit(images: PathBuf, labels: PathBuf, digit: u8, limit: usize) -> PyResult<Vec<PyImageGrid>> {
    core::io::load_idx_digit(&images, &labels, digit, limit).map(grids).map_err(to_py)
}

/// Returns `(label, grid)`.
#[pyfunction]
fn load_field(path: PathBuf) -> PyResult<(String, PyImageGrid)> {
    let f = core::io::load_field(&path).map_err(to_py)?;
    Ok((f.label.to_string(), f.grid.into()))
}

#[pyfunction]
#[pyo3(signature = (path, grid, label = "image"))]
fn save_field(path: PathBuf, grid: &PyImageGrid, label: &str) -> PyResult<()> {
    let label: FieldLabel = label.parse().map_err(to_py)?;
    core::io::save_field(&path, &grid.inner, label).map_err(to_py)
}

fn slice_of(slice: Option<(usize, usize)>) -> Option<core::SliceSpec> {
    slice.map(|(axis, index)| core::SliceSpec { axis, index })
}

/// PNG bytes of a viridis heatmap.
#[pyfunction]
#[pyo3(signature = (field, slice = None))]
fn render_heatmap<'py>(py: Python<'py>, field: &PyImageGrid, slice: Option<(usize, usize)>) -> PyResult<Bound<'py, PyBytes>> {
    let png = core::viz::render_heatmap(&field.inner, slice_of(slice)).map_err(to_py)?;
    Ok(PyBytes::new(py, &png))
}

/// SVG bar overlay of `sigma_star` on the template.
#[pyfunction]
#[pyo3(signature = (template, sigma_star, sigma_g = 1.0, eps_grad = None, stride = None, slice = None))]
fn render_overlay_svg(
    template: &PyImageGrid,
    sigma_star: &PyImageGrid,
    sigma_g: f64,
    eps_grad: Option<f64>,
    stride: Option<usize>,
    slice: Option<(usize, usize)>,
) -> PyResult<String> {
    let opts = core::OverlayOptions { sigma_g, eps_grad, stride, slice: slice_of(slice) };
    let overlay = core::build_overlay(&template.inner, &sigma_star.inner, &opts).map_err(to_py)?;
    core::viz::render_overlay_svg(&template.inner, &overlay, None).map_err(to_py)
}

#[pymodule]
fn tempres(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImageGrid>()?;
    m.add_class::<PyResolutionField>()?;
    m.add_class::<PyRegistrationResult>()?;
    m.add_function(wrap_pyfunction!(gaussian_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(pixelwise_quantile_range, m)?)?;
    m.add_function(wrap_pyfunction!(resolution_measure, m)?)?;
    m.add_function(wrap_pyfunction!(groupwise_register, m)?)?;
    m.add_function(wrap_pyfunction!(std_normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(edge_max_diff, m)?)?;
    m.add_function(wrap_pyfunction!(point_mass_max_diff_approx, m)?)?;
    m.add_function(wrap_pyfunction!(point_mass_max_diff_exact, m)?)?;
    m.add_function(wrap_pyfunction!(sample_edges, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx_images, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx_digit, m)?)?;
    m.add_function(wrap_pyfunction!(load_field, m)?)?;
    m.add_function(wrap_pyfunction!(save_field, m)?)?;
    m.add_function(wrap_pyfunction!(render_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(render_overlay_svg, m)?)?;
    Ok(())
}
