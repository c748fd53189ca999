//! Python bindings: cost accounting, feature perturbation and the CLI.

use clockwork::adaptor::Adaptor;
use clockwork::analysis::perturb_feature as perturb;
use clockwork::cli::RunConfig;
use clockwork::cost::{pipeline_flops, pnp_flops as pnp, PnpCostInput};
use clockwork::numerics::Tensor;
use clockwork::unet::SplitUNet;
use clockwork::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Plug-and-play editing cost: returns `(f_inversion, f_generation, total)`.
#[pyfunction]
fn pnp_flops(n_i: u64, c_i: u64, n_g: u64, c_g: u64, f_full: f64, f_high: f64) -> PyResult<(f64, f64, f64)> {
    let c = pnp(&PnpCostInput { n_i, c_i, n_g, c_g, f_full, f_high }).map_err(py_err)?;
    Ok((c.f_inversion, c.f_generation, c.total))
}

/// FLOP report for the sampling run described by a JSON run config, as JSON.
#[pyfunction]
fn flop_report(config_json: &str) -> PyResult<String> {
    let cfg = RunConfig::from_json(config_json).map_err(py_err)?;
    let model = SplitUNet::new(cfg.unet.clone(), cfg.seed).map_err(py_err)?;
    let adaptor = Adaptor::new(cfg.adaptor.clone(), cfg.unet.rep_shape(), cfg.unet.emb_dim, cfg.seed).map_err(py_err)?;
    let clock = cfg.clock().map_err(py_err)?;
    let guided = cfg.unet.num_classes().is_some() && cfg.sampler.guidance != 1.0;
    let report = pipeline_flops(&model, &adaptor, &clock, cfg.sampler.steps, guided, 1).map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Perturbs a flat feature of the given shape, keeping its mean and variance
/// in expectation.
#[pyfunction]
#[pyo3(signature = (values, shape, alpha, seed, per_channel = false))]
fn perturb_feature(values: Vec<f32>, shape: Vec<usize>, alpha: f64, seed: u64, per_channel: bool) -> PyResult<Vec<f32>> {
    let f = Tensor::from_vec(&shape, values).map_err(py_err)?;
    let p = perturb(&f, alpha, seed, per_channel).map_err(py_err)?;
    Ok(p.value.data().to_vec())
}

/// Runs the `clockwork` command line with `args` and returns its exit code.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> i32 {
    py.allow_threads(|| clockwork::cli::dispatch(args))
}

#[pymodule]
fn clockwork_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pnp_flops, m)?)?;
    m.add_function(wrap_pyfunction!(flop_report, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_feature, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
