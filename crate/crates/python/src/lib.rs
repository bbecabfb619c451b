use std::path::PathBuf;

use d3pmlab::corpus::Batch;
use d3pmlab::diffusion::{self, CategoricalDist, ScheduleKind};
use d3pmlab::harness::{self, ExperimentConfig};
use d3pmlab::metrics;
use d3pmlab::nelbo;
use d3pmlab::tokenizer::{self, Alphabet};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn rows(m: &diffusion::TransitionMatrix) -> Vec<Vec<f64>> {
    (0..m.dim()).map(|j| m.row(j).to_vec()).collect()
}

#[pyclass(name = "Tokenizer", module = "d3pmlab")]
struct PyTokenizer {
    inner: tokenizer::Tokenizer,
}

#[pymethods]
impl PyTokenizer {
    /// Learn a byte-level BPE vocabulary from `documents`.
    #[staticmethod]
    #[pyo3(signature = (documents, vocab_size, alphabet = "full"))]
    fn train(documents: Vec<String>, vocab_size: usize, alphabet: &str) -> PyResult<Self> {
        let alphabet: Alphabet = alphabet.parse().map_err(value_err)?;
        let outcome = tokenizer::train_bpe(&documents, vocab_size, alphabet).map_err(value_err)?;
        Ok(Self { inner: outcome.tokenizer })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: tokenizer::Tokenizer::load(path).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: tokenizer::Tokenizer::from_json(text).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(runtime_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(runtime_err)
    }

    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        self.inner.encode(text).map_err(value_err)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(value_err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn mask_id(&self) -> u32 {
        self.inner.specials().mask
    }

    fn specials<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.specials();
        let d = PyDict::new(py);
        d.set_item("sos", s.sos)?;
        d.set_item("eos", s.eos)?;
        d.set_item("endoftext", s.endoftext)?;
        d.set_item("mask", s.mask)?;
        Ok(d)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.inner.vocab_size()
    }

    fn __repr__(&self) -> String {
        format!("Tokenizer(vocab_size={})", self.inner.vocab_size())
    }
}

#[pyclass(name = "NoiseSchedule", module = "d3pmlab")]
struct PyNoiseSchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (steps, kind = "absorbing-uniform"))]
    fn new(steps: usize, kind: &str) -> PyResult<Self> {
        let kind: ScheduleKind = kind.parse().map_err(value_err)?;
        Ok(Self { inner: diffusion::build_schedule(kind, steps).map_err(value_err)? })
    }

    /// Schedule from explicit `β_1..β_T`.
    #[staticmethod]
    fn from_betas(betas: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: diffusion::NoiseSchedule::from_betas(betas).map_err(value_err)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn kind(&self) -> Option<&'static str> {
        self.inner.kind().map(ScheduleKind::as_str)
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    fn alpha_bar(&self, i: usize) -> PyResult<f64> {
        if i > self.inner.steps() {
            return Err(value_err(format!("time index {i} outside 0..={}", self.inner.steps())));
        }
        Ok(self.inner.alpha_bar(i))
    }

    fn __repr__(&self) -> String {
        format!("NoiseSchedule(steps={}, kind={})", self.inner.steps(), self.kind().unwrap_or("custom"))
    }
}

/// One-step transition matrix over `m` tokens plus the mask.
#[pyfunction]
fn step_matrix(beta: f64, m: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&diffusion::step_matrix(beta, m).map_err(value_err)?))
}

/// Closed-form `Q̄_i`.
#[pyfunction]
fn cumulative_matrix(schedule: &PyNoiseSchedule, i: usize, m: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&diffusion::cumulative_matrix(&schedule.inner, i, m).map_err(value_err)?))
}

/// `Q_1 Q_2 … Q_i` by explicit multiplication.
#[pyfunction]
fn cumulative_matrix_product(schedule: &PyNoiseSchedule, i: usize, m: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&diffusion::cumulative_matrix_product(&schedule.inner, i, m).map_err(value_err)?))
}

#[pyfunction]
fn forward_marginal(x0: u32, schedule: &PyNoiseSchedule, i: usize, m: usize) -> PyResult<Vec<f64>> {
    Ok(diffusion::forward_marginal(x0, &schedule.inner, i, m).map_err(value_err)?.into_probs())
}

/// Mask tokens of `ids` (a list of equal-length rows) at time index `i`.
#[pyfunction]
fn forward_sample(ids: Vec<Vec<u32>>, schedule: &PyNoiseSchedule, i: usize, mask: u32, seed: u64) -> PyResult<Vec<Vec<u32>>> {
    let cols = ids.first().map_or(0, Vec::len);
    if ids.iter().any(|r| r.len() != cols) {
        return Err(value_err("rows must have equal length"));
    }
    let batch = Batch::new(ids.len(), cols, ids.concat());
    let state = diffusion::forward_sample(&batch, &schedule.inner, i, mask, seed).map_err(value_err)?;
    Ok(state.ids.chunks(cols.max(1)).map(<[u32]>::to_vec).collect())
}

/// `q(x_s(j) | x_t(i), x_0)` with `x_0` given as a distribution over `m + 1` ids.
#[pyfunction]
fn posterior(xt: u32, x0_probs: Vec<f64>, schedule: &PyNoiseSchedule, i: usize, j: usize) -> PyResult<Vec<f64>> {
    let x0 = CategoricalDist::new(x0_probs).map_err(value_err)?;
    Ok(diffusion::posterior(xt, &x0, &schedule.inner, i, j).map_err(value_err)?.into_probs())
}

#[pyfunction]
fn kl_categorical(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    nelbo::kl_categorical(&p, &q).map_err(value_err)
}

#[pyfunction]
fn bpt(nll: f64) -> f64 {
    metrics::bpt(nll)
}

#[pyfunction]
fn ppl(nll: f64) -> f64 {
    metrics::ppl(nll)
}

/// Bits per character from per-character natural-log probabilities.
#[pyfunction]
fn bpc(logprobs: Vec<f64>) -> PyResult<f64> {
    metrics::bpc(&logprobs).map_err(value_err)
}

/// Mean and population standard deviation.
#[pyfunction]
fn mean_std(values: Vec<f64>) -> PyResult<(f64, f64)> {
    metrics::mean_std(&values).map_err(value_err)
}

/// Run the oracle and invariant suites. Returns `(passed, rendered_report)`.
#[pyfunction]
fn verify(py: Python<'_>) -> (bool, String) {
    let report = py.detach(harness::verify);
    (report.passed(), report.render())
}

/// Run every cell of an experiment config and return the comparison table.
#[pyfunction]
#[pyo3(signature = (config_path, overrides = Vec::new()))]
fn compare(py: Python<'_>, config_path: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    let config = ExperimentConfig::load(&config_path, &overrides).map_err(value_err)?;
    let table = py.detach(|| harness::run_experiment(&config)).map_err(runtime_err)?;
    Ok(table.to_markdown())
}

#[pymodule]
#[pyo3(name = "d3pmlab")]
fn d3pmlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_function(wrap_pyfunction!(step_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_matrix_product, m)?)?;
    m.add_function(wrap_pyfunction!(forward_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(forward_sample, m)?)?;
    m.add_function(wrap_pyfunction!(posterior, m)?)?;
    m.add_function(wrap_pyfunction!(kl_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(bpt, m)?)?;
    m.add_function(wrap_pyfunction!(ppl, m)?)?;
    m.add_function(wrap_pyfunction!(bpc, m)?)?;
    m.add_function(wrap_pyfunction!(mean_std, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
