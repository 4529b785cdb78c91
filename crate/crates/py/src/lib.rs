//! Python bindings for the core analysis/synthesis transform, the diffusion
//! schedule, the bicubic resampler, and the image metrics. Arrays are
//! float32 CHW; every function validates shapes and raises ValueError with
//! the core error message.

use numpy::{IntoPyArray, PyArray3, PyArrayMethods, PyReadonlyArray3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use wavesr::datapipe::bicubic_resample;
use wavesr::diffusion::{make_schedule, DiffusionSchedule};
use wavesr::metrics;
use wavesr::wavelet::{dwt2d, idwt2d, WaveletPacket};

fn err(e: wavesr::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn chw(a: &PyReadonlyArray3<'_, f32>) -> PyResult<(Vec<f32>, usize, usize, usize)> {
    let arr = a.as_array();
    let dims = arr.shape().to_vec();
    // iter() walks in C order regardless of the input's memory layout.
    let data: Vec<f32> = arr.iter().copied().collect();
    Ok((data, dims[0], dims[1], dims[2]))
}

/// Single-level sub-band analysis: [c, h, w] -> [4c, h/2, w/2].
/// Band order is LL, LH, HL, HH, each c channels wide.
#[pyfunction]
#[pyo3(signature = (image, scaled = true))]
fn dwt2<'py>(
    py: Python<'py>,
    image: PyReadonlyArray3<'py, f32>,
    scaled: bool,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let (data, c, h, w) = chw(&image)?;
    let packet = dwt2d(&data, c, h, w, scaled).map_err(err)?;
    let (ch, hh, wh) = (packet.channels(), packet.height(), packet.width());
    Ok(packet.into_data().into_pyarray(py).reshape([ch, hh, wh])?)
}

/// Inverse of [`dwt2`]: [4c, h, w] -> [c, 2h, 2w].
#[pyfunction]
#[pyo3(signature = (packet, scaled = true))]
fn idwt2<'py>(
    py: Python<'py>,
    packet: PyReadonlyArray3<'py, f32>,
    scaled: bool,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let (data, c4, h, w) = chw(&packet)?;
    if c4 % 4 != 0 {
        return Err(PyValueError::new_err(format!(
            "packet has {c4} channels, expected a multiple of 4"
        )));
    }
    let packet = WaveletPacket::from_data(data, c4 / 4, h, w, scaled).map_err(err)?;
    let image = idwt2d(&packet).map_err(err)?;
    Ok(image.into_pyarray(py).reshape([c4 / 4, 2 * h, 2 * w])?)
}

/// Catmull-Rom bicubic resample (antialiased when minifying):
/// [c, h, w] -> [c, out_h, out_w].
#[pyfunction]
fn bicubic<'py>(
    py: Python<'py>,
    image: PyReadonlyArray3<'py, f32>,
    out_h: usize,
    out_w: usize,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let (data, c, h, w) = chw(&image)?;
    let out = bicubic_resample(&data, c, h, w, out_h, out_w).map_err(err)?;
    Ok(out.into_pyarray(py).reshape([c, out_h, out_w])?)
}

/// Peak signal-to-noise ratio in dB for images in [0, 1] (capped at 100).
#[pyfunction]
fn psnr(a: PyReadonlyArray3<f32>, b: PyReadonlyArray3<f32>) -> PyResult<f64> {
    let (da, ..) = chw(&a)?;
    let (db, ..) = chw(&b)?;
    metrics::psnr(&da, &db).map_err(err)
}

/// Mean structural similarity over 11x11 Gaussian windows, channel-mean
/// grayscale, images in [0, 1].
#[pyfunction]
fn ssim(a: PyReadonlyArray3<f32>, b: PyReadonlyArray3<f32>) -> PyResult<f64> {
    let (da, c, h, w) = chw(&a)?;
    let (db, ..) = chw(&b)?;
    metrics::ssim(&da, &db, c, h, w).map_err(err)
}

/// Variance-preserving few-step diffusion schedule.
#[pyclass(name = "Schedule")]
struct PySchedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps, beta_min = 0.1, beta_max = 20.0))]
    fn new(steps: usize, beta_min: f64, beta_max: f64) -> PyResult<Self> {
        Ok(PySchedule { inner: make_schedule(steps, beta_min, beta_max).map_err(err)? })
    }

    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.beta(t).map_err(err)
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(err)
    }

    /// Posterior q(x_{t-1} | x_t, x_0) parameters at step t:
    /// (coefficient on x_0, coefficient on x_t, variance).
    fn posterior(&self, t: usize) -> PyResult<(f64, f64, f64)> {
        Ok((
            self.inner.coef_x0(t).map_err(err)?,
            self.inner.coef_xt(t).map_err(err)?,
            self.inner.posterior_var(t).map_err(err)?,
        ))
    }

    fn __repr__(&self) -> String {
        format!("Schedule(steps={})", self.inner.steps())
    }
}

#[pymodule]
fn wavesr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dwt2, m)?)?;
    m.add_function(wrap_pyfunction!(idwt2, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_class::<PySchedule>()?;
    Ok(())
}
