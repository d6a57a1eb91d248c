//! Python bindings for the `oprlab` core.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use oprlab::diagnostics::{seq_kl, KlMode};
use oprlab::harness::{Experiment, ExperimentConfig};
use oprlab::metrics::{self, AccuracyMatrix};
use oprlab::policy::{self as pol, Arch, MlpArch, PolicyParams, SamplerConfig, TabularArch, Token};
use oprlab::replay;
use oprlab::tasks::{build_stream, StreamConfig, TaskStream};

fn err(e: oprlab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<AccuracyMatrix> {
    let n = rows.last().map_or(0, Vec::len);
    let names = (0..n).map(|i| format!("t{i}")).collect();
    AccuracyMatrix::from_rows(names, rows).map_err(err)
}

/// Backward transfer of a lower-triangular accuracy matrix (rows = stages).
#[pyfunction]
fn bwt(rows: Vec<Vec<f64>>) -> PyResult<Option<f64>> {
    Ok(metrics::bwt(&matrix(rows)?))
}

/// Mean of the final row.
#[pyfunction]
fn overall_acc(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::overall_acc(&matrix(rows)?).map_err(err)
}

/// Per-task replay counts for a budget spread over `tasks` prior tasks.
#[pyfunction]
#[pyo3(signature = (budget, tasks, caps=None))]
fn allocate_budget(budget: i64, tasks: usize, caps: Option<Vec<Option<usize>>>) -> PyResult<Vec<usize>> {
    let caps = caps.unwrap_or_else(|| vec![None; tasks]);
    Ok(replay::allocate_budget(budget, tasks, &caps).map_err(err)?.counts)
}

/// A tabular or MLP autoregressive policy.
#[pyclass(name = "Policy")]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    #[pyo3(signature = (vocab_size, buckets, max_prompt, max_response, eos=None, scale=1.0, seed=0))]
    fn tabular(
        vocab_size: usize,
        buckets: usize,
        max_prompt: usize,
        max_response: usize,
        eos: Option<Token>,
        scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = Arch::Tabular(TabularArch { vocab_size, buckets, max_prompt, max_response, eos });
        let inner = PolicyParams::random(arch, scale, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (vocab_size, embed_dim, hidden_dim, max_prompt, max_response, layers=1, eos=None, pad=0, scale=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn mlp(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        max_prompt: usize,
        max_response: usize,
        layers: usize,
        eos: Option<Token>,
        pad: Token,
        scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = Arch::Mlp(MlpArch { vocab_size, embed_dim, hidden_dim, layers, max_prompt, max_response, eos, pad });
        let inner = PolicyParams::random(arch, scale, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: pol::load_checkpoint(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        pol::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    fn with_values(&self, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: PolicyParams::from_values(self.inner.arch.clone(), values).map_err(err)? })
    }

    /// `(total, per_token)` log-probability of `response` after `prompt`.
    fn sequence_logprob(&self, prompt: Vec<Token>, response: Vec<Token>) -> PyResult<(f64, Vec<f64>)> {
        self.inner.sequence_logprob(&prompt, &response).map_err(err)
    }

    /// `(tokens, logprobs)` of one sampled response.
    #[pyo3(signature = (prompt, temperature=0.1, top_p=1.0, max_new_tokens=16, seed=0))]
    fn sample(
        &self,
        prompt: Vec<Token>,
        temperature: f64,
        top_p: f64,
        max_new_tokens: usize,
        seed: u64,
    ) -> PyResult<(Vec<Token>, Vec<f64>)> {
        let cfg = SamplerConfig { temperature, top_p, max_new_tokens, seed };
        let r = pol::sample_response(&self.inner, &prompt, &cfg).map_err(err)?;
        Ok((r.tokens, r.logprobs))
    }

    /// Mean cross-entropy of `(prompt, response)` pairs and its gradient.
    fn loss_and_grad(&self, batch: Vec<(Vec<Token>, Vec<Token>)>) -> PyResult<(f64, Vec<f64>)> {
        let refs: Vec<(&[Token], &[Token])> = batch.iter().map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
        self.inner.ce_loss_and_grad(&refs).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Policy({} params)", self.inner.len())
    }
}

/// Sequence KL(a || b) averaged over prompts: exact enumeration, or Monte
/// Carlo when `samples` is given.
#[pyfunction]
#[pyo3(signature = (a, b, prompts, samples=None, seed=0))]
fn kl(a: &PyPolicy, b: &PyPolicy, prompts: Vec<Vec<Token>>, samples: Option<usize>, seed: u64) -> PyResult<f64> {
    let mode = match samples {
        Some(samples) => KlMode::MonteCarlo { samples, seed },
        None => KlMode::exact(),
    };
    Ok(seq_kl(&a.inner, &b.inner, &prompts, mode).map_err(err)?.value)
}

#[pyclass(name = "TaskStream")]
struct PyTaskStream {
    inner: TaskStream,
}

#[pymethods]
impl PyTaskStream {
    /// The default eight-task stream, or the two-task toy stream.
    #[new]
    #[pyo3(signature = (toy=false))]
    fn new(toy: bool) -> PyResult<Self> {
        let cfg = if toy { StreamConfig::toy() } else { StreamConfig::default() };
        Ok(Self { inner: build_stream(&cfg).map_err(err)? })
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.alphabet.vocab.size
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(prompt, gold)` training pairs of one task.
    fn train_examples(&self, task_id: usize) -> PyResult<Vec<(Vec<Token>, Vec<Token>)>> {
        let spec = self.inner.task(task_id).map_err(err)?;
        let data = oprlab::tasks::generate_task_dataset(spec).map_err(err)?;
        Ok(data.train.into_iter().map(|e| (e.prompt.tokens, e.gold.tokens)).collect())
    }

    fn rule_score(&self, task_id: usize, prompt: Vec<Token>, response: Vec<Token>) -> PyResult<f64> {
        self.inner.rule_score(task_id, &prompt, &response).map_err(err)
    }
}

/// Runs every method and seed of a TOML config in memory and returns
/// `{method: {"acc": [...], "bwt": [...], "matrices": [...]}}`.
#[pyfunction]
fn run_config(py: Python<'_>, toml_text: &str) -> PyResult<Py<PyAny>> {
    let cfg = ExperimentConfig::from_toml(toml_text).map_err(err)?;
    let exp = Experiment::new(cfg).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    for m in &exp.config.methods {
        let (mut accs, mut bwts, mut mats) = (Vec::new(), Vec::new(), Vec::new());
        for &seed in &exp.config.seeds {
            let r = exp.run(m, seed).map_err(err)?;
            accs.push(metrics::overall_acc(&r.matrix).map_err(err)?);
            bwts.push(metrics::bwt(&r.matrix));
            mats.push(r.matrix.rows);
        }
        let d = pyo3::types::PyDict::new(py);
        d.set_item("acc", accs)?;
        d.set_item("bwt", bwts)?;
        d.set_item("matrices", mats)?;
        out.set_item(m.label(), d)?;
    }
    Ok(out.into_any().unbind())
}

#[pymodule]
fn oprlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyTaskStream>()?;
    m.add_function(wrap_pyfunction!(bwt, m)?)?;
    m.add_function(wrap_pyfunction!(overall_acc, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_budget, m)?)?;
    m.add_function(wrap_pyfunction!(kl, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
