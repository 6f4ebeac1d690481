//! Python bindings. Complex matrices cross the boundary as nested lists of
//! Python `complex`, indexed `[row][column]`.

use std::path::PathBuf;

use bsm_moe::config::RunConfig;
use bsm_moe::filters::{design_bsm as design_bsm_rs, BinauralFilter, BsmOptions, Regularization};
use bsm_moe::fov::directional_gain_pattern;
use bsm_moe::linalg::{ComplexMat, C64};
use bsm_moe::moe::{self, ExpertDesign, MoeConfig, Pooling};
use bsm_moe::pipeline::{Method, SetupConfig};
use bsm_moe::runner::{self, RunManifest, StageError};
use bsm_moe::stft::{self, SpectralFrame, StftConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: bsm_moe::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn stage_err(e: StageError) -> PyErr {
    if e.stage == "config" {
        PyValueError::new_err(e.source.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn rows(m: &ComplexMat) -> Vec<Vec<C64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn manifest_json(m: RunManifest) -> PyResult<String> {
    serde_json::to_string(&m).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Validated run configuration (TOML schema shared with the command-line tool).
#[pyclass(name = "Config", skip_from_py_object)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml_str(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        RunConfig::from_file(&path)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(value_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(value_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn methods(&self) -> Vec<&'static str> {
        self.inner.methods.iter().map(|m| m.name()).collect()
    }

    #[setter]
    fn set_methods(&mut self, names: Vec<String>) -> PyResult<()> {
        self.inner.methods = names
            .iter()
            .map(|n| {
                Method::parse(n)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown method '{n}'")))
            })
            .collect::<PyResult<_>>()?;
        Ok(())
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.scene.trajectory.num_steps
    }

    #[setter]
    fn set_num_steps(&mut self, n: usize) {
        self.inner.scene.trajectory.num_steps = n;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, methods={:?})",
            self.inner.seed,
            self.methods()
        )
    }
}

/// Full pipeline; returns the manifest as JSON.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig, out_dir: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    manifest_json(
        py.detach(|| runner::run(&cfg, &out_dir))
            .map_err(stage_err)?,
    )
}

#[pyfunction]
fn simulate(py: Python<'_>, config: &PyConfig, out_dir: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    manifest_json(
        py.detach(|| runner::simulate(&cfg, &out_dir))
            .map_err(stage_err)?,
    )
}

#[pyfunction]
fn evaluate(py: Python<'_>, config: &PyConfig, out_dir: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    manifest_json(
        py.detach(|| runner::eval(&cfg, &out_dir))
            .map_err(stage_err)?,
    )
}

#[pyfunction]
fn pattern(py: Python<'_>, config: &PyConfig, out_dir: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    manifest_json(
        py.detach(|| runner::pattern(&cfg, &out_dir))
            .map_err(stage_err)?,
    )
}

#[pyfunction]
fn method_names() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

/// Steering vectors and sphere-head HRTFs on a horizontal grid.
#[pyclass(name = "Setup")]
struct PySetup {
    inner: bsm_moe::pipeline::Setup,
}

#[pymethods]
impl PySetup {
    #[new]
    #[pyo3(signature = (grid_size = 60, fft_size = 1024, hop = 256, sample_rate = 48_000.0))]
    fn new(grid_size: usize, fft_size: usize, hop: usize, sample_rate: f64) -> PyResult<Self> {
        let stft = StftConfig {
            fft_size,
            hop,
            sample_rate,
            ..StftConfig::default()
        };
        stft.validate().map_err(value_err)?;
        let cfg = SetupConfig {
            grid_size,
            ..SetupConfig::default()
        };
        let inner = cfg.build(&stft).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_bins(&self) -> usize {
        self.inner.steering.num_bins()
    }

    #[getter]
    fn num_mics(&self) -> usize {
        self.inner.steering.num_mics()
    }

    #[getter]
    fn azimuths_deg(&self) -> Vec<f64> {
        self.inner.grid.iter().map(|d| d.azimuth_deg()).collect()
    }

    #[getter]
    fn frequencies(&self) -> Vec<f64> {
        self.inner.steering.freqs.bins().to_vec()
    }

    /// Steering matrix `A` (mics × directions) at bin `k`.
    fn steering(&self, k: usize) -> PyResult<Vec<Vec<C64>>> {
        self.check_bin(k)?;
        Ok(rows(self.inner.steering.at(k)))
    }

    /// HRTF matrix (directions × 2) at bin `k`.
    fn hrtf(&self, k: usize) -> PyResult<Vec<Vec<C64>>> {
        self.check_bin(k)?;
        Ok(rows(self.inner.hrtf.at(k)))
    }
}

impl PySetup {
    fn check_bin(&self, k: usize) -> PyResult<()> {
        if k >= self.inner.steering.num_bins() {
            return Err(PyValueError::new_err(format!("bin {k} out of range")));
        }
        Ok(())
    }
}

/// Binaural filter: one 2 × mics matrix per frequency bin.
#[pyclass(name = "Filter")]
struct PyFilter {
    inner: BinauralFilter,
}

#[pymethods]
impl PyFilter {
    #[getter]
    fn num_bins(&self) -> usize {
        self.inner.num_bins()
    }

    fn at(&self, k: usize) -> PyResult<Vec<Vec<C64>>> {
        if k >= self.inner.num_bins() {
            return Err(PyValueError::new_err(format!("bin {k} out of range")));
        }
        Ok(rows(self.inner.at(k)))
    }

    /// Left and right outputs for one bin of microphone signals.
    fn apply(&self, k: usize, x: Vec<C64>) -> PyResult<(C64, C64)> {
        if k >= self.inner.num_bins() || x.len() != self.inner.num_mics() {
            return Err(PyValueError::new_err(
                "bin index or channel count does not match the filter",
            ));
        }
        let [l, r] = self.inner.apply(k, &x);
        Ok((l, r))
    }
}

/// Signal-independent BSM; `magls_cutoff_hz=None` keeps complex LS everywhere.
#[pyfunction]
#[pyo3(signature = (setup, eps = 1e-4, magls_cutoff_hz = Some(2000.0)))]
fn design_bsm(setup: &PySetup, eps: f64, magls_cutoff_hz: Option<f64>) -> PyResult<PyFilter> {
    let opts = BsmOptions {
        eps: Regularization::RelativeTrace(eps),
        magls_cutoff_hz,
    };
    design_bsm_rs(&setup.inner.steering, &setup.inner.hrtf, &opts)
        .map(|inner| PyFilter { inner })
        .map_err(value_err)
}

/// Directional gain of `filter` relative to the setup's HRTFs, per grid direction.
#[pyfunction]
fn directional_gain<'py>(
    py: Python<'py>,
    filter: &PyFilter,
    setup: &PySetup,
) -> PyResult<Bound<'py, PyDict>> {
    let g = directional_gain_pattern(&filter.inner, &setup.inner.steering, &setup.inner.hrtf)
        .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("azimuth_deg", g.azimuth_deg)?;
    d.set_item("left_db", g.left_db)?;
    d.set_item("right_db", g.right_db)?;
    d.set_item("combined_db", g.combined_db)?;
    Ok(d)
}

/// Exponential weights `softmax(−η L)`.
#[pyfunction]
fn blend_weights(losses: Vec<f64>, eta: f64) -> Vec<f64> {
    moe::blend_weights(&losses, eta)
}

/// `λ·L + ℓ`, returned as a new list.
#[pyfunction]
fn update_losses(mut cumulative: Vec<f64>, losses: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    if cumulative.len() != losses.len() {
        return Err(PyValueError::new_err(
            "cumulative and losses differ in length",
        ));
    }
    moe::update_losses(&mut cumulative, &losses, lam).map_err(value_err)?;
    Ok(cumulative)
}

#[pyfunction]
fn argmin(values: Vec<f64>) -> usize {
    moe::argmin(&values)
}

fn stft_config(fft_size: usize, hop: usize, sample_rate: f64) -> PyResult<StftConfig> {
    let cfg = StftConfig {
        fft_size,
        hop,
        sample_rate,
        ..StftConfig::default()
    };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Analysis: returns frames as `[frame][bin][channel]`.
#[pyfunction]
#[pyo3(signature = (audio, fft_size = 1024, hop = 256, sample_rate = 48_000.0))]
fn stft_analyze(
    audio: Vec<Vec<f64>>,
    fft_size: usize,
    hop: usize,
    sample_rate: f64,
) -> PyResult<Vec<Vec<Vec<C64>>>> {
    let cfg = stft_config(fft_size, hop, sample_rate)?;
    let frames = stft::analyze(&audio, &cfg).map_err(value_err)?;
    Ok(frames
        .iter()
        .map(|f| (0..f.num_bins()).map(|k| f.bin(k).to_vec()).collect())
        .collect())
}

/// Weighted overlap-add resynthesis of `[frame][bin][channel]`; returns `[channel][sample]`.
#[pyfunction]
#[pyo3(signature = (frames, fft_size = 1024, hop = 256, sample_rate = 48_000.0))]
fn stft_synthesize(
    frames: Vec<Vec<Vec<C64>>>,
    fft_size: usize,
    hop: usize,
    sample_rate: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = stft_config(fft_size, hop, sample_rate)?;
    let spectral: Vec<SpectralFrame> = frames
        .iter()
        .enumerate()
        .map(|(t, bins)| bsm_moe::pipeline::frame_from_bins(t, bins))
        .collect();
    stft::synthesize(&spectral, &cfg).map_err(value_err)
}

fn parse_design(name: &str) -> PyResult<ExpertDesign> {
    match name {
        "compass" => Ok(ExpertDesign::Compass),
        "dbsm" => Ok(ExpertDesign::Dbsm),
        "bsm-directional" => Ok(ExpertDesign::BsmDirectional),
        _ => Err(PyValueError::new_err(format!(
            "unknown expert design '{name}' (compass, dbsm, bsm-directional)"
        ))),
    }
}

/// Streaming mixture-of-experts renderer over the setup's grid.
#[pyclass(name = "MoeProcessor", unsendable)]
struct PyMoeProcessor {
    inner: moe::MoeProcessor,
    frames: usize,
}

#[pymethods]
impl PyMoeProcessor {
    #[new]
    #[pyo3(signature = (setup, design = "compass", eta = 1.0, lam = 0.995, pooled = false))]
    fn new(setup: &PySetup, design: &str, eta: f64, lam: f64, pooled: bool) -> PyResult<Self> {
        let cfg = MoeConfig {
            eta,
            lambda: lam,
            pooling: if pooled {
                Pooling::Pooled
            } else {
                Pooling::PerBin
            },
            ..MoeConfig::default()
        };
        let inner = moe::MoeProcessor::new(
            &setup.inner.steering,
            &setup.inner.hrtf,
            parse_design(design)?,
            None,
            &cfg,
        )
        .map_err(value_err)?;
        Ok(Self { inner, frames: 0 })
    }

    /// Renders one frame given as `[bin][mic]`. Returns `(out[bin][ear], argmin, pooled weights)`.
    fn process_frame(&mut self, bins: Vec<Vec<C64>>) -> PyResult<(Vec<Vec<C64>>, usize, Vec<f64>)> {
        let frame = bsm_moe::pipeline::frame_from_bins(self.frames, &bins);
        let (y, diag) = self.inner.process_frame(&frame).map_err(value_err)?;
        self.frames += 1;
        let out = (0..y.num_bins()).map(|k| y.bin(k).to_vec()).collect();
        Ok((out, diag.argmin, diag.weights))
    }
}

#[pymodule(name = "bsm_moe")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySetup>()?;
    m.add_class::<PyFilter>()?;
    m.add_class::<PyMoeProcessor>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(pattern, m)?)?;
    m.add_function(wrap_pyfunction!(method_names, m)?)?;
    m.add_function(wrap_pyfunction!(design_bsm, m)?)?;
    m.add_function(wrap_pyfunction!(directional_gain, m)?)?;
    m.add_function(wrap_pyfunction!(blend_weights, m)?)?;
    m.add_function(wrap_pyfunction!(update_losses, m)?)?;
    m.add_function(wrap_pyfunction!(argmin, m)?)?;
    m.add_function(wrap_pyfunction!(stft_analyze, m)?)?;
    m.add_function(wrap_pyfunction!(stft_synthesize, m)?)?;
    Ok(())
}
