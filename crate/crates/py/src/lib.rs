//! Python bindings: task generation, validator scoring, schedules, and the
//! random-search driver.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use udabench_core::algorithms::{losses, AlgorithmId};
use udabench_core::analysis;
use udabench_core::datasets::TaskSpec;
use udabench_core::error::Error;
use udabench_core::harness::{
    self, random_search, Budget, SearchConfig, TrialTemplate,
};
use udabench_core::models::FeatureLayer;
use udabench_core::tensor::Tensor;
use udabench_core::validators::{self, AveragingMode, ValidatorId};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn tensor_to_list(py: Python<'_>, t: &Tensor) -> PyResult<Py<PyList>> {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
    Ok(PyList::new(py, rows)?.unbind())
}

/// Names of the built-in synthetic tasks.
#[pyfunction]
fn task_names() -> Vec<&'static str> {
    TaskSpec::preset_names().to_vec()
}

/// Names of every runnable algorithm, including the X-DANN combinations.
#[pyfunction]
fn algorithm_names() -> Vec<String> {
    AlgorithmId::known_names()
}

#[pyfunction]
fn validator_names() -> Vec<&'static str> {
    ValidatorId::all().iter().map(|v| v.as_str()).collect()
}

/// Materialize a task: source/target samples, labels, and the four-way
/// split index lists.
#[pyfunction]
#[pyo3(signature = (name, seed=None))]
fn generate_task(py: Python<'_>, name: &str, seed: Option<u64>) -> PyResult<Py<PyDict>> {
    let mut spec = TaskSpec::preset(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown task {name}")))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = spec.realize().map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("name", &spec.name)?;
    out.set_item("classes", spec.class_count())?;
    out.set_item("source_x", tensor_to_list(py, &data.source.x)?)?;
    out.set_item("source_y", data.source.y)?;
    out.set_item("target_x", tensor_to_list(py, &data.target.x)?)?;
    out.set_item("target_y", data.target.y)?;
    let splits = PyDict::new(py);
    splits.set_item("source_train", data.splits.source_train)?;
    splits.set_item("source_val", data.splits.source_val)?;
    splits.set_item("target_train", data.splits.target_train)?;
    splits.set_item("target_val", data.splits.target_val)?;
    out.set_item("splits", splits)?;
    Ok(out.unbind())
}

/// Information-maximization validator score of a prediction matrix.
#[pyfunction]
fn im_score(preds: Vec<Vec<f64>>) -> PyResult<f64> {
    validators::im_score(&to_tensor(preds)?).map_err(py_err)
}

/// Soft neighborhood density of a feature matrix.
#[pyfunction]
#[pyo3(signature = (features, tau=0.05))]
fn snd_score(features: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    validators::snd_score(&to_tensor(features)?, tau).map_err(py_err)
}

/// Negated importance-weighted validation risk with control variates.
/// Raises ValueError when the weights have degenerate variance.
#[pyfunction]
fn dev_score(losses: Vec<f64>, target_probs: Vec<f64>, n_src: usize, n_tgt: usize) -> PyResult<f64> {
    match validators::dev_score(&losses, &target_probs, n_src, n_tgt) {
        Ok(v) => Ok(v),
        Err(Error::DegenerateVariance) => {
            Err(PyValueError::new_err("degenerate variance in importance weights"))
        }
        Err(e) => Err(py_err(e)),
    }
}

/// Micro or macro accuracy of a prediction matrix against labels.
#[pyfunction]
#[pyo3(signature = (preds, labels, mode="macro"))]
fn accuracy(preds: Vec<Vec<f64>>, labels: Vec<usize>, mode: &str) -> PyResult<f64> {
    let mode = match mode {
        "micro" => AveragingMode::Micro,
        "macro" => AveragingMode::Macro,
        other => return Err(PyValueError::new_err(format!("mode must be micro or macro, got {other}"))),
    };
    validators::accuracy(&to_tensor(preds)?, &labels, mode).map_err(py_err)
}

/// Spearman rank correlation with average ranks for ties.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    analysis::spearman(&x, &y).map_err(py_err)
}

/// One-cycle learning rate at a given step.
#[pyfunction]
fn onecycle_lr(step: u64, total_steps: u64, lr_max: f64) -> f64 {
    harness::onecycle_lr(step, total_steps, lr_max)
}

/// Gaussian-kernel bandwidth multipliers for a given exponent.
#[pyfunction]
fn bandwidth_multipliers(gamma_exp: u32) -> Vec<f64> {
    losses::bandwidth_multipliers(gamma_exp)
}

/// Random hyperparameter search. Returns the source-only reference
/// accuracies and the best checkpoint per validator; optionally streams
/// trial records to `records_path`.
#[pyfunction]
#[pyo3(signature = (
    task,
    algorithm,
    trials,
    seed,
    feature_layer="FL0",
    epochs=30,
    patience=10,
    val_interval=3,
    batch_size=32,
    workers=1,
    records_path=None,
    dev_epochs=40,
))]
#[allow(clippy::too_many_arguments)]
fn run_search(
    py: Python<'_>,
    task: &str,
    algorithm: &str,
    trials: u32,
    seed: u64,
    feature_layer: &str,
    epochs: u32,
    patience: u32,
    val_interval: u32,
    batch_size: usize,
    workers: usize,
    records_path: Option<PathBuf>,
    dev_epochs: u32,
) -> PyResult<Py<PyDict>> {
    let spec = TaskSpec::preset(task)
        .ok_or_else(|| PyValueError::new_err(format!("unknown task {task}")))?;
    let algorithm: AlgorithmId = algorithm.parse().map_err(py_err)?;
    let feature_layer: FeatureLayer = feature_layer.parse().map_err(py_err)?;
    let mut template = TrialTemplate {
        budget: Budget { epochs, patience, val_interval },
        batch_size,
        ..TrialTemplate::default()
    };
    template.scoring.dev.epochs = dev_epochs;
    let cfg = SearchConfig {
        task: spec,
        algorithm,
        feature_layer,
        n_trials: trials,
        master_seed: seed,
        workers: workers.max(1),
        template,
        frozen_dann: None,
        records_path,
        record_timing: false,
    };
    let outcome = py
        .detach(|| random_search(&cfg))
        .map_err(py_err)?;

    let out = PyDict::new(py);
    let so = PyDict::new(py);
    so.set_item("src_val_acc", outcome.source_only.src_val_acc)?;
    so.set_item("tgt_train_acc", outcome.source_only.tgt_train_acc)?;
    so.set_item("tgt_val_acc", outcome.source_only.tgt_val_acc)?;
    out.set_item("source_only", so)?;
    let best = PyDict::new(py);
    for (v, b) in &outcome.best {
        let entry = PyDict::new(py);
        entry.set_item("trial_id", b.trial_id)?;
        entry.set_item("step", b.step)?;
        entry.set_item("score", b.score)?;
        entry.set_item("tgt_train_acc", b.tgt_train_acc)?;
        entry.set_item("tgt_val_acc", b.tgt_val_acc)?;
        entry.set_item("lr", b.config.lr_max)?;
        let hp: BTreeMap<String, f64> = b.config.algorithm.hparams.clone();
        entry.set_item("hparams", hp)?;
        best.set_item(v.as_str(), entry)?;
    }
    out.set_item("best", best)?;
    out.set_item("trials", outcome.records.len())?;
    Ok(out.unbind())
}

#[pymodule]
fn udabench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(task_names, m)?)?;
    m.add_function(wrap_pyfunction!(algorithm_names, m)?)?;
    m.add_function(wrap_pyfunction!(validator_names, m)?)?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(im_score, m)?)?;
    m.add_function(wrap_pyfunction!(snd_score, m)?)?;
    m.add_function(wrap_pyfunction!(dev_score, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(onecycle_lr, m)?)?;
    m.add_function(wrap_pyfunction!(bandwidth_multipliers, m)?)?;
    m.add_function(wrap_pyfunction!(run_search, m)?)?;
    Ok(())
}
