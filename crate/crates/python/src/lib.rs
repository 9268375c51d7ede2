//! Python bindings for the steering library.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use steerlm_core::attribute::{dfa_reward, lexicon_reward};
use steerlm_core::critic::{gae_advantages, td_errors};
use steerlm_core::lm::train_lm;
use steerlm_core::rollout::episode_rng;
use steerlm_core::steer::{decode_with_rng, reweight, steering_ratio, RenormMode, StrategyKind};
use steerlm_core::vocab::{build_vocab, detokenize, tokenize, TokenId};
use steerlm_core::{metrics, oracle, Critic, DecodeStrategy, Distribution, SteerConfig, ValueFn};

fn py_err(e: steerlm_core::Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        2 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn renorm_mode(name: &str) -> PyResult<RenormMode> {
    match name {
        "preserve_subset_mass" => Ok(RenormMode::PreserveSubsetMass),
        "subset_only" => Ok(RenormMode::SubsetOnly),
        other => Err(PyValueError::new_err(format!("unknown renorm mode `{other}`"))),
    }
}

fn strategy_kind(name: &str) -> PyResult<StrategyKind> {
    match name {
        "greedy" => Ok(StrategyKind::Greedy),
        "top_k_sample" => Ok(StrategyKind::TopK),
        "nucleus_sample" => Ok(StrategyKind::Nucleus),
        other => Err(PyValueError::new_err(format!("unknown strategy `{other}`"))),
    }
}

#[pyclass(name = "Vocabulary", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary(steerlm_core::Vocabulary);

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    #[pyo3(signature = (lines, min_count = 1))]
    fn build(lines: Vec<String>, min_count: usize) -> PyResult<Self> {
        build_vocab(&lines, min_count).map(PyVocabulary).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.0.tokens().to_vec()
    }

    #[getter]
    fn bos(&self) -> TokenId {
        self.0.bos()
    }

    #[getter]
    fn eos(&self) -> TokenId {
        self.0.eos()
    }

    #[getter]
    fn unk(&self) -> TokenId {
        self.0.unk()
    }

    fn id(&self, token: &str) -> Option<TokenId> {
        self.0.id(token)
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text, &self.0).ids
    }

    fn decode(&self, ids: Vec<TokenId>) -> String {
        detokenize(&ids, &self.0)
    }

    fn hash(&self) -> String {
        self.0.hash()
    }
}

#[pyclass(name = "MarkovLm", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMarkovLm(steerlm_core::MarkovLm);

#[pymethods]
impl PyMarkovLm {
    #[staticmethod]
    #[pyo3(signature = (lines, vocab, order = 2, smoothing_k = 0.1))]
    fn train(lines: Vec<String>, vocab: &PyVocabulary, order: usize, smoothing_k: f64) -> PyResult<Self> {
        let corpus: Vec<_> = lines.iter().map(|l| tokenize(l, &vocab.0)).collect();
        train_lm(&corpus, &vocab.0, order, smoothing_k).map(PyMarkovLm).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        steerlm_core::MarkovLm::load(&path).map(PyMarkovLm).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn vocab(&self) -> PyVocabulary {
        PyVocabulary(self.0.vocab().clone())
    }

    #[getter]
    fn order(&self) -> usize {
        self.0.order()
    }

    /// Next-token law after `prompt ⊕ generated` at the given temperature.
    #[pyo3(signature = (prompt, generated, temperature = 1.0))]
    fn policy(&self, prompt: Vec<TokenId>, generated: Vec<TokenId>, temperature: f64) -> PyResult<Vec<f64>> {
        Ok(self.0.policy(&prompt, &generated, temperature).map_err(py_err)?.into_probs())
    }

    fn conditional_logprob(&self, prefix: Vec<TokenId>, continuation: Vec<TokenId>) -> f64 {
        self.0.conditional_logprob(&prefix, &continuation)
    }
}

#[pyclass(name = "DfaAttribute", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDfa(steerlm_core::DfaAttribute);

#[pymethods]
impl PyDfa {
    #[staticmethod]
    fn contains_token(token: TokenId, vocab_size: usize) -> PyResult<Self> {
        steerlm_core::DfaAttribute::contains_token(token, vocab_size).map(PyDfa).map_err(py_err)
    }

    #[staticmethod]
    fn at_least(token: TokenId, count: usize, vocab_size: usize) -> PyResult<Self> {
        steerlm_core::DfaAttribute::at_least(token, count, vocab_size).map(PyDfa).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf, vocab: &PyVocabulary) -> PyResult<Self> {
        steerlm_core::DfaAttribute::load(&path, &vocab.0).map(PyDfa).map_err(py_err)
    }

    fn reward(&self, ids: Vec<TokenId>) -> f64 {
        dfa_reward(&self.0, &ids)
    }
}

#[pyclass(name = "LexiconScorer", frozen)]
struct PyLexicon(steerlm_core::LexiconScorer);

#[pymethods]
impl PyLexicon {
    #[new]
    #[pyo3(signature = (positive, negative, slope = 4.0, bias = 0.0))]
    fn new(positive: Vec<TokenId>, negative: Vec<TokenId>, slope: f64, bias: f64) -> PyResult<Self> {
        steerlm_core::LexiconScorer::new(positive, negative, slope, bias)
            .map(PyLexicon)
            .map_err(py_err)
    }

    fn reward(&self, ids: Vec<TokenId>) -> f64 {
        lexicon_reward(&self.0, &ids)
    }
}

#[pyclass(name = "Critic", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCritic(Critic);

#[pymethods]
impl PyCritic {
    #[staticmethod]
    #[pyo3(signature = (vocab, m, horizon, hidden_dim = 32, seed = 0))]
    fn init(vocab: &PyVocabulary, m: usize, horizon: usize, hidden_dim: usize, seed: u64) -> PyResult<Self> {
        let spec = steerlm_core::FeatureSpec::new(&vocab.0, m, horizon).map_err(py_err)?;
        Ok(PyCritic(Critic::init(spec, hidden_dim, seed)))
    }

    #[staticmethod]
    fn load(path: PathBuf, vocab: &PyVocabulary) -> PyResult<Self> {
        Critic::load(&path, &vocab.0).map(|(c, _)| PyCritic(c)).map_err(py_err)
    }

    fn value(&self, prompt: Vec<TokenId>, generated: Vec<TokenId>) -> f64 {
        self.0.value_of_state(&prompt, &generated)
    }

    fn features(&self, prompt: Vec<TokenId>, generated: Vec<TokenId>) -> Vec<f64> {
        self.0.spec().featurize(&prompt, &generated).0
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.0.params().to_vec()
    }
}

#[pyclass(name = "OracleTable", frozen)]
struct PyOracle(steerlm_core::OracleTable);

#[pymethods]
impl PyOracle {
    #[staticmethod]
    #[pyo3(signature = (lm, dfa, horizon, temperature = 1.0))]
    fn build(py: Python<'_>, lm: &PyMarkovLm, dfa: &PyDfa, horizon: usize, temperature: f64) -> PyResult<Self> {
        py.detach(|| oracle::build_oracle(&lm.0, &dfa.0, horizon, temperature))
            .map(PyOracle)
            .map_err(py_err)
    }

    fn value(&self, prompt: Vec<TokenId>, generated: Vec<TokenId>) -> f64 {
        self.0.value(&prompt, &generated)
    }

    fn exact_conditional(&self, prompt: Vec<TokenId>, generated: Vec<TokenId>) -> PyResult<Vec<f64>> {
        Ok(self.0.exact_conditional(&prompt, &generated).map_err(py_err)?.into_probs())
    }

    fn martingale_residual(&self) -> f64 {
        self.0.martingale_residual()
    }

    #[getter]
    fn num_entries(&self) -> usize {
        self.0.num_entries()
    }
}

/// `(value, conditional or None)` by walking every continuation.
#[pyfunction]
#[pyo3(signature = (lm, dfa, horizon, temperature, prompt, generated))]
fn enumerate_check(
    lm: &PyMarkovLm,
    dfa: &PyDfa,
    horizon: usize,
    temperature: f64,
    prompt: Vec<TokenId>,
    generated: Vec<TokenId>,
) -> PyResult<(f64, Option<Vec<f64>>)> {
    let e = oracle::enumerate_check(&lm.0, &dfa.0, horizon, temperature, &prompt, &generated).map_err(py_err)?;
    Ok((e.value, e.conditional.map(Distribution::into_probs)))
}

#[pyfunction(name = "td_errors")]
#[pyo3(signature = (values, reward, gamma = 1.0))]
fn py_td_errors(values: Vec<f64>, reward: f64, gamma: f64) -> PyResult<Vec<f64>> {
    td_errors(&values, reward, gamma).map_err(py_err)
}

#[pyfunction(name = "gae_advantages")]
fn py_gae_advantages(deltas: Vec<f64>, gamma: f64, lambda: f64) -> Vec<f64> {
    gae_advantages(&deltas, gamma, lambda)
}

#[pyfunction(name = "steering_ratio")]
#[pyo3(signature = (v_next, v_cur, epsilon = 1e-4))]
fn py_steering_ratio(v_next: f64, v_cur: f64, epsilon: f64) -> f64 {
    steering_ratio(v_next, v_cur, epsilon)
}

#[pyfunction(name = "reweight")]
#[pyo3(signature = (base, subset, alphas, mode = "preserve_subset_mass"))]
fn py_reweight(base: Vec<f64>, subset: Vec<TokenId>, alphas: Vec<f64>, mode: &str) -> PyResult<Vec<f64>> {
    let base = Distribution::new(base).map_err(py_err)?;
    Ok(reweight(&base, &subset, &alphas, renorm_mode(mode)?).map_err(py_err)?.into_probs())
}

#[pyfunction]
#[pyo3(signature = (rewards, threshold = 0.5))]
fn success_rate(rewards: Vec<f64>, threshold: f64) -> PyResult<f64> {
    metrics::success_rate(&rewards, threshold).map_err(py_err)
}

#[pyfunction]
fn distinct_n(generations: Vec<Vec<TokenId>>, n: usize) -> PyResult<f64> {
    metrics::distinct_n(&generations, n).map_err(py_err)
}

/// Corpus perplexity of `(prompt, continuation)` pairs under `reference`.
#[pyfunction]
fn perplexity(samples: Vec<(Vec<TokenId>, Vec<TokenId>)>, reference: &PyMarkovLm) -> PyResult<f64> {
    metrics::perplexity(&samples, &reference.0).map_err(py_err)
}

/// Decodes one continuation, steered by a `Critic` or `OracleTable` when given.
/// `k` defaults to `min(10, |V|)`.
#[pyfunction]
#[pyo3(signature = (
    lm, prompt, value_fn = None, k = None, epsilon = 1e-4, mode = "preserve_subset_mass",
    strategy = "nucleus_sample", sample_k = 10, nucleus_p = 0.9, repetition_penalty = 1.0, max_len = 16, seed = 0,
))]
#[allow(clippy::too_many_arguments)]
fn decode(
    py: Python<'_>,
    lm: &PyMarkovLm,
    prompt: Vec<TokenId>,
    value_fn: Option<&Bound<'_, PyAny>>,
    k: Option<usize>,
    epsilon: f64,
    mode: &str,
    strategy: &str,
    sample_k: usize,
    nucleus_p: f64,
    repetition_penalty: f64,
    max_len: usize,
    seed: u64,
) -> PyResult<Vec<TokenId>> {
    let steer = SteerConfig {
        k: k.unwrap_or(10).min(lm.0.vocab_size()),
        epsilon,
        renorm_mode: renorm_mode(mode)?,
        ..Default::default()
    };
    let strategy = DecodeStrategy {
        kind: strategy_kind(strategy)?,
        sample_k,
        nucleus_p,
        repetition_penalty,
        max_len,
        seed,
    };
    let critic;
    let table;
    let value: Option<&dyn ValueFn> = match value_fn {
        None => None,
        Some(obj) => {
            if let Ok(c) = obj.cast::<PyCritic>() {
                critic = c.get().0.clone();
                Some(&critic)
            } else if let Ok(t) = obj.cast::<PyOracle>() {
                table = t.clone().unbind();
                Some(&table.get().0)
            } else {
                return Err(PyValueError::new_err("value_fn must be a Critic or an OracleTable"));
            }
        }
    };
    let out = py
        .detach(|| decode_with_rng(&lm.0, value, &prompt, &steer, &strategy, &mut episode_rng(seed, 0, 0)))
        .map_err(py_err)?;
    Ok(out.ids)
}

/// Runs the command line with `args` (without the program name); returns the exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| steerlm_core::cli::run_command(&args))
}

#[pymodule]
fn steerlm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyMarkovLm>()?;
    m.add_class::<PyDfa>()?;
    m.add_class::<PyLexicon>()?;
    m.add_class::<PyCritic>()?;
    m.add_class::<PyOracle>()?;
    m.add_function(wrap_pyfunction!(enumerate_check, m)?)?;
    m.add_function(wrap_pyfunction!(py_td_errors, m)?)?;
    m.add_function(wrap_pyfunction!(py_gae_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(py_steering_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(py_reweight, m)?)?;
    m.add_function(wrap_pyfunction!(success_rate, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
