//! Python bindings for the core types and operations: kernel independence
//! statistics, the synthetic task generator, full train/eval runs, and the
//! gradient-check harness. Configuration reuses the CLI's `section.key`
//! names, so anything expressible in a config file is reachable from Python.

use std::collections::HashMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dimple_core::config::apply_key;
use dimple_core::data::{generate, split_base_novel, TaskSpec};
use dimple_core::error::Error;
use dimple_core::harness::{harmonic_mean as hm_impl, run_experiment, TrainConfig};
use dimple_core::independence::{self, Bandwidth, KernelKind, KernelSpec};
use dimple_core::tensor::Graph;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => io.into(),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn kernel_spec(kernel: &str, sigma: Option<f64>) -> PyResult<KernelSpec> {
    let kind = match kernel {
        "rbf" => KernelKind::Rbf,
        "linear" => KernelKind::Linear,
        other => return Err(PyValueError::new_err(format!("unknown kernel `{other}`"))),
    };
    Ok(KernelSpec {
        kind,
        bandwidth: sigma.map_or(Bandwidth::MedianHeuristic, Bandwidth::Fixed),
        fallback_sigma: 1.0,
    })
}

fn rows_to_leaf(g: &mut Graph, rows: &[Vec<f64>], name: &str) -> PyResult<dimple_core::tensor::TensorId> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{name}: need at least one row")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{name}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    g.leaf(flat, vec![rows.len(), cols], false).map_err(to_py_err)
}

/// Biased empirical HSIC between two row-major sample matrices.
#[pyfunction]
#[pyo3(signature = (x, y, kernel = "rbf", sigma = None))]
fn hsic(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, kernel: &str, sigma: Option<f64>) -> PyResult<f64> {
    let spec = kernel_spec(kernel, sigma)?;
    let mut g = Graph::new();
    let tx = rows_to_leaf(&mut g, &x, "x")?;
    let ty = rows_to_leaf(&mut g, &y, "y")?;
    let id = independence::hsic(&mut g, tx, ty, &spec).map_err(to_py_err)?;
    Ok(g.scalar_value(id))
}

/// Label-stratified HSIC: `sum_c (n_c / n) hsic(x_c, y_c)` over classes with
/// at least two samples.
#[pyfunction]
#[pyo3(signature = (x, y, labels, kernel = "rbf", sigma = None))]
fn conditional_hsic(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    labels: Vec<usize>,
    kernel: &str,
    sigma: Option<f64>,
) -> PyResult<f64> {
    let spec = kernel_spec(kernel, sigma)?;
    let mut g = Graph::new();
    let tx = rows_to_leaf(&mut g, &x, "x")?;
    let ty = rows_to_leaf(&mut g, &y, "y")?;
    let id = independence::conditional_hsic(&mut g, tx, ty, &labels, &spec).map_err(to_py_err)?;
    Ok(g.scalar_value(id))
}

/// `2 b n / (b + n)`, zero when both are zero.
#[pyfunction]
fn harmonic_mean(base: f64, novel: f64) -> f64 {
    hm_impl(base, novel)
}

fn config_from_overrides(overrides: &HashMap<String, String>) -> PyResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut keys: Vec<&String> = overrides.keys().collect();
    keys.sort();
    for key in keys {
        apply_key(&mut cfg, key, &overrides[key]).map_err(to_py_err)?;
    }
    Ok(cfg)
}

/// Generate the synthetic task splits. `overrides` uses config-file keys
/// (only the `task.` section matters here). Returns a dict with per-split
/// flat images, labels, group ids, plus the base/novel class split.
#[pyfunction]
#[pyo3(signature = (overrides = None))]
fn generate_dataset(py: Python<'_>, overrides: Option<HashMap<String, String>>) -> PyResult<Py<PyDict>> {
    let cfg = config_from_overrides(&overrides.unwrap_or_default())?;
    let task: TaskSpec = cfg.task;
    let data = generate(&task).map_err(to_py_err)?;
    let (base, novel) = split_base_novel(&task).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("num_patch_tokens", task.num_patch_tokens)?;
    out.set_item("d_v", task.d_v)?;
    out.set_item("classes_base", base)?;
    out.set_item("classes_novel", novel)?;
    for (name, split) in [
        ("train", &data.train),
        ("test_id", &data.test_id),
        ("test_shift", &data.test_shift),
    ] {
        let d = PyDict::new(py);
        d.set_item("images", split.images.clone())?;
        d.set_item("labels", split.labels.clone())?;
        d.set_item("group_ids", split.group_ids.clone())?;
        out.set_item(name, d)?;
    }
    Ok(out.unbind())
}

/// Train a model and run the evaluation battery. `overrides` uses config
/// keys (e.g. `{"train.objective": "coop", "loss.alpha": "0.5"}`). Returns
/// the headline metrics plus the full `run.json` body.
#[pyfunction]
#[pyo3(signature = (overrides = None))]
fn train_and_eval(py: Python<'_>, overrides: Option<HashMap<String, String>>) -> PyResult<Py<PyDict>> {
    let cfg = config_from_overrides(&overrides.unwrap_or_default())?;
    cfg.validate().map_err(to_py_err)?;
    let data = generate(&cfg.task).map_err(to_py_err)?;
    let (_, metrics) = run_experiment(&cfg, &data).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("base_acc", metrics.base_acc)?;
    out.set_item("novel_acc", metrics.novel_acc)?;
    out.set_item("hm", metrics.hm)?;
    out.set_item("avg_group_acc", metrics.avg_group_acc)?;
    out.set_item("worst_group_acc", metrics.worst_group_acc)?;
    let groups = PyDict::new(py);
    for gx in &metrics.per_group {
        groups.set_item(gx.group_id, gx.accuracy)?;
    }
    out.set_item("per_group", groups)?;
    out.set_item("run_json", metrics.run_json())?;
    Ok(out.unbind())
}

/// Worst finite-difference relative error over all objectives and parameter
/// groups of the micro-model gradient check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck_worst_rel_err(seed: u64) -> PyResult<f64> {
    let report = dimple_core::gradcheck::run_model_gradcheck(seed, None)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(report
        .objectives
        .iter()
        .flat_map(|o| o.groups.iter())
        .map(|g| g.worst_rel_err)
        .fold(0.0, f64::max))
}

#[pymodule]
fn dimple_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hsic, m)?)?;
    m.add_function(wrap_pyfunction!(conditional_hsic, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_and_eval, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_worst_rel_err, m)?)?;
    Ok(())
}
