//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use icc_core::cache::CacheMode;
use icc_core::calibration::CalibMethod;
use icc_core::harness::io::{
    calib_to_tensors, load_tensors, save_tensors, weights_from_tensors, weights_to_tensors, DType,
};
use icc_core::harness::macs::{estimate_macs as estimate, tera, ArchSpec};
use icc_core::harness::verify::run_checks;
use icc_core::harness::{Engine as CoreEngine, ExperimentConfig};
use icc_core::model::{init_weights, Exact, ModelConfig, ModelWeights};
use icc_core::tensor::{thin_svd as core_svd, truncate_factors};
use icc_core::{Error, Matrix};

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(format!("{}: {e}", e.kind())),
    }
}

fn to_matrix(rows: Rows) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn parse_mode(s: &str) -> PyResult<CacheMode> {
    match s {
        "no_cache" => Ok(CacheMode::NoCache),
        "naive" => Ok(CacheMode::Naive),
        "calibrated" => Ok(CacheMode::Calibrated),
        _ => Err(PyValueError::new_err(format!("unknown cache mode {s:?}"))),
    }
}

/// Thin SVD: returns `(u, sigma, vt)`.
#[pyfunction]
fn thin_svd(matrix: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let f = core_svd(&to_matrix(matrix)?).map_err(py_err)?;
    Ok((f.u.to_rows(), f.sigma, f.vt.to_rows()))
}

/// Balanced rank-`rank` factors `(wa, wb)` with `wa @ wb ≈ matrix`.
#[pyfunction]
fn truncate(matrix: Rows, rank: usize) -> PyResult<(Rows, Rows)> {
    let f = core_svd(&to_matrix(matrix)?).map_err(py_err)?;
    let (a, b) = truncate_factors(&f, rank).map_err(py_err)?;
    Ok((a.to_rows(), b.to_rows()))
}

/// Analytic MACs for the DiT-XL/2 preset: `(block, overhead, total, tera)`.
#[pyfunction]
#[pyo3(signature = (steps, mode="no_cache", period=1, rank=0, guidance=true))]
fn estimate_macs(steps: u64, mode: &str, period: u64, rank: u64, guidance: bool) -> PyResult<(u64, u64, u64, f64)> {
    if steps == 0 || period == 0 {
        return Err(PyValueError::new_err("steps and period must be ≥ 1"));
    }
    let mut arch = ArchSpec::dit_xl_2();
    arch.cfg_enabled = guidance;
    let e = estimate(&arch, steps, parse_mode(mode)?, period, rank);
    Ok((e.block, e.overhead, e.total, tera(e.total)))
}

/// Names and outcomes of the built-in self-checks.
#[pyfunction]
fn verify() -> Vec<(String, bool, String)> {
    run_checks()
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

/// Toy diffusion-transformer noise predictor.
#[pyclass]
struct Model {
    inner: ModelWeights,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (depth=4, hidden=64, heads=4, tokens=16, seed=0))]
    fn new(depth: usize, hidden: usize, heads: usize, tokens: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(depth, hidden, heads, tokens);
        Ok(Self {
            inner: init_weights(&cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let set = load_tensors(path).map_err(py_err)?;
        Ok(Self {
            inner: weights_from_tensors(&set).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_tensors(path, &weights_to_tensors(&self.inner, DType::F64)).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let c = &self.inner.config;
        (c.depth, c.hidden, c.heads, c.tokens)
    }

    /// Noise prediction for latent `z` (`tokens × hidden`) at timestep `t`.
    fn forward(&self, z: Rows, t: usize, cond: usize) -> PyResult<Rows> {
        let out = self
            .inner
            .forward(&to_matrix(z)?, t, cond, &mut Exact)
            .map_err(py_err)?;
        Ok(out.eps.to_rows())
    }

    fn __repr__(&self) -> String {
        let (l, d, h, n) = self.shape();
        format!("Model(depth={l}, hidden={d}, heads={h}, tokens={n})")
    }
}

/// A configured experiment (model, schedule, sampler, caching).
#[pyclass]
struct Engine {
    inner: CoreEngine,
}

#[pymethods]
impl Engine {
    /// `config` is TOML text in the same grammar as the CLI's `--config`.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(s) => ExperimentConfig::from_toml_str(s).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self {
            inner: CoreEngine::new(cfg).map_err(py_err)?,
        })
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_toml_string()
    }

    /// Runs the configured mode; returns `(report_json, final_latents)`.
    fn sample(&self) -> PyResult<(String, Vec<Rows>)> {
        let (report, trajs) = self.inner.sample().map_err(py_err)?;
        Ok((report.to_json(), trajs.iter().map(|t| t.final_latent().to_rows()).collect()))
    }

    /// Sweeps the bench grid and returns the JSON report.
    fn bench(&self) -> PyResult<String> {
        Ok(self.inner.bench().map_err(py_err)?.to_json())
    }

    /// Final latent of one trajectory in the given mode.
    #[pyo3(signature = (seed, mode="no_cache", period=2, rank=0, method="svd"))]
    fn trajectory(&self, seed: u64, mode: &str, period: usize, rank: usize, method: &str) -> PyResult<Rows> {
        let mode = parse_mode(mode)?;
        let calib = if mode == CacheMode::Calibrated {
            let m: CalibMethod = method.parse().map_err(py_err)?;
            Some(Arc::new(self.inner.calibrate(m, rank).map_err(py_err)?))
        } else {
            None
        };
        let mut ctx = self.inner.context(mode, period, calib).map_err(py_err)?;
        let t = self.inner.trajectory(&mut ctx, seed).map_err(py_err)?;
        Ok(t.final_latent().to_rows())
    }

    /// Computes calibration factors and writes them to `path`.
    fn calibrate(&self, method: &str, rank: usize, path: &str) -> PyResult<()> {
        let m: CalibMethod = method.parse().map_err(py_err)?;
        let c = self.inner.calibrate(m, rank).map_err(py_err)?;
        save_tensors(path, &calib_to_tensors(&c, DType::F64)).map_err(py_err)
    }
}

#[pymodule]
fn icc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(thin_svd, m)?)?;
    m.add_function(wrap_pyfunction!(truncate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_macs, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Engine>()?;
    Ok(())
}
