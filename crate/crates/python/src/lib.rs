//! Python module `convqa_py`.

use std::io::BufReader;
use std::path::PathBuf;

use clap::Parser;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use convqa::data::coqa::load_corpus;
use convqa::data::examples::{corpus_stats, read_examples};
use convqa::data::{ReformulatedExample, Tokenizer as _, Vocab, WordTokenizer};
use convqa::ensemble::{
    brute_force_search, ga_search, mask_to_indices, CandidatePool, ExampleMeta, GaConfig,
    ModelLogits, PoolFitness, SearchResult, DEFAULT_BRUTE_FORCE_BUDGET,
};
use convqa::evalmetric;
use convqa::pipeline;
use convqa::qa_model::DEFAULT_MAX_ANSWER_LEN;
use convqa::trainer::{self, Checkpoint, TrainConfig};

create_exception!(convqa_py, ConvqaError, PyException);

fn err(e: convqa::Error) -> PyErr {
    ConvqaError::new_err(e.to_string())
}

fn load_examples(path: &str) -> PyResult<(Vec<ReformulatedExample>, String)> {
    let f = std::fs::File::open(path).map_err(|e| ConvqaError::new_err(format!("{path}: {e}")))?;
    read_examples(BufReader::new(f)).map_err(err)
}

#[pyfunction]
fn normalize_text(s: &str) -> Vec<String> {
    evalmetric::normalize_text(s)
}

#[pyfunction]
fn f1_word_overlap(pred: &str, reference: &str) -> f64 {
    evalmetric::f1_word_overlap(pred, reference)
}

/// Leave-one-out F1 over several references.
#[pyfunction]
fn coqa_f1(pred: &str, refs: Vec<String>) -> PyResult<f64> {
    if refs.is_empty() {
        return Err(PyValueError::new_err("coqa_f1 needs at least one reference"));
    }
    Ok(evalmetric::coqa_f1(pred, &refs))
}

#[pyfunction]
#[pyo3(signature = (story, refs, max_span_words = evalmetric::DEFAULT_MAX_SPAN_WORDS))]
fn upper_bound(story: &str, refs: Vec<String>, max_span_words: usize) -> f64 {
    evalmetric::upper_bound(story, &refs, max_span_words)
}

#[pyfunction]
fn extract_options(question: &str) -> Vec<String> {
    evalmetric::extract_options(question)
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, learning_rate, warmup_fraction = 0.06))]
fn lr_at(step: usize, total_steps: usize, learning_rate: f64, warmup_fraction: f64) -> f64 {
    let cfg = TrainConfig {
        learning_rate,
        warmup_fraction,
        ..Default::default()
    };
    trainer::lr_at(step, total_steps, &cfg)
}

#[pyfunction]
fn layer_lr(base_lr: f64, layer_index: usize, num_layers: usize, decay: f64) -> f64 {
    trainer::layer_lr(base_lr, layer_index, num_layers, decay)
}

/// Question/answer counts and the non-extractive breakdown of a CoQA file.
#[pyfunction]
fn coqa_stats<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let docs = load_corpus(&path).map_err(err)?;
    let s = corpus_stats(&docs);
    let d = PyDict::new(py);
    d.set_item("documents", s.documents)?;
    d.set_item("questions", s.questions)?;
    d.set_item("span", s.span)?;
    d.set_item("yes", s.yes)?;
    d.set_item("no", s.no)?;
    d.set_item("unknown", s.unknown)?;
    d.set_item("non_extractive_share", s.non_extractive_share())?;
    d.set_item("yes_no_share_of_non_extractive", s.yes_no_share_of_non_extractive())?;
    Ok(d)
}

/// Runs the command-line tool in-process, e.g. `run(["upper-bound", "--coqa", "dev.json"])`.
#[pyfunction]
fn run(args: Vec<String>) -> PyResult<()> {
    let cli = convqa::cli::Cli::try_parse_from(std::iter::once("convqa".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    convqa::cli::run(&cli).map_err(err)
}

#[pyclass(module = "convqa_py")]
struct Tokenizer {
    inner: WordTokenizer,
}

#[pymethods]
impl Tokenizer {
    #[staticmethod]
    #[pyo3(signature = (path, lowercase = true))]
    fn from_vocab_file(path: &str, lowercase: bool) -> PyResult<Self> {
        let f = std::fs::File::open(path).map_err(|e| ConvqaError::new_err(format!("{path}: {e}")))?;
        let vocab = Vocab::read(BufReader::new(f)).map_err(err)?;
        Ok(Self {
            inner: WordTokenizer::new(vocab, lowercase),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (texts, max_size = 2048, lowercase = true))]
    fn build(texts: Vec<String>, max_size: usize, lowercase: bool) -> PyResult<Self> {
        let vocab = Vocab::build(texts.iter().map(String::as_str), max_size, 1, lowercase).map_err(err)?;
        Ok(Self {
            inner: WordTokenizer::new(vocab, lowercase),
        })
    }

    /// `(text, start, end)` per token, character offsets.
    fn tokenize(&self, text: &str) -> Vec<(String, usize, usize)> {
        self.inner
            .tokenize(text)
            .into_iter()
            .map(|t| (t.text, t.start, t.end))
            .collect()
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.decode(&ids)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn vocab_hash(&self) -> String {
        self.inner.vocab_hash()
    }
}

/// A trained checkpoint.
#[pyclass(module = "convqa_py")]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn vocab_hash(&self) -> String {
        self.inner.vocab_hash.clone()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.optimizer.step
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.model.params().num_scalars()
    }

    /// `(id, answer)` for every example in a preprocessed examples file.
    #[pyo3(signature = (examples_path, max_answer_len = DEFAULT_MAX_ANSWER_LEN))]
    fn predict(&self, examples_path: &str, max_answer_len: usize) -> PyResult<Vec<(String, String)>> {
        let (examples, hash) = load_examples(examples_path)?;
        self.inner.check_vocab(&hash).map_err(err)?;
        let (preds, _) = pipeline::predict(&self.inner.model, &examples, "model", &hash, max_answer_len, None)
            .map_err(err)?;
        Ok(preds.into_iter().map(|p| (p.id, p.answer)).collect())
    }

    /// Start and end distributions over the `T + 3` joint axis of one example.
    fn distributions(&self, examples_path: &str, id: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (examples, _) = load_examples(examples_path)?;
        let ex = examples
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| PyValueError::new_err(format!("no example {id}")))?;
        let out = self.inner.model.predict(&ex.model_input()).map_err(err)?;
        Ok((out.p_start, out.p_end))
    }
}

fn pool(pool_files: Vec<PathBuf>, examples_path: &str) -> PyResult<CandidatePool> {
    let (examples, _) = load_examples(examples_path)?;
    let models = pool_files
        .iter()
        .map(|p| ModelLogits::load(p))
        .collect::<convqa::Result<Vec<_>>>()
        .map_err(err)?;
    CandidatePool::new(examples.iter().map(ExampleMeta::from).collect(), models).map_err(err)
}

fn result_dict<'py>(py: Python<'py>, p: &CandidatePool, r: &SearchResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let names: Vec<String> = mask_to_indices(r.mask)
        .into_iter()
        .map(|i| p.models()[i].name.clone())
        .collect();
    d.set_item("selected", names)?;
    d.set_item("fitness", r.fitness)?;
    d.set_item("evaluations", r.evaluations)?;
    let trace: Vec<(usize, f64, f64)> = r.trace.iter().map(|g| (g.generation, g.best, g.worst)).collect();
    d.set_item("trace", trace)?;
    Ok(d)
}

/// Genetic search for the best subset of at most `max_size` logit pools.
#[pyfunction]
#[pyo3(signature = (pool_files, examples_path, max_size = 9, generations = 200, population = 50, seed = 0))]
fn ensemble_search<'py>(
    py: Python<'py>,
    pool_files: Vec<PathBuf>,
    examples_path: &str,
    max_size: usize,
    generations: usize,
    population: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = pool(pool_files, examples_path)?;
    let cfg = GaConfig {
        population_size: population,
        max_generations: generations,
        max_ensemble_size: max_size,
        seed,
        ..Default::default()
    };
    let r = ga_search(&PoolFitness::new(&p), &cfg).map_err(err)?;
    result_dict(py, &p, &r)
}

/// Exhaustive search over all subsets of at most `max_size` pools.
#[pyfunction]
#[pyo3(signature = (pool_files, examples_path, max_size = 9))]
fn brute_force<'py>(
    py: Python<'py>,
    pool_files: Vec<PathBuf>,
    examples_path: &str,
    max_size: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let p = pool(pool_files, examples_path)?;
    let r = brute_force_search(&PoolFitness::new(&p), max_size, DEFAULT_BRUTE_FORCE_BUDGET).map_err(err)?;
    result_dict(py, &p, &r)
}

#[pymodule]
fn convqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConvqaError", m.py().get_type::<ConvqaError>())?;
    m.add_class::<Tokenizer>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(f1_word_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(coqa_f1, m)?)?;
    m.add_function(wrap_pyfunction!(upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(extract_options, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(layer_lr, m)?)?;
    m.add_function(wrap_pyfunction!(coqa_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_search, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    Ok(())
}
