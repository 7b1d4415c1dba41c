//! Logit averaging over model subsets and the search for a good subset.
//!
//! A subset is a bitmask over at most 128 models.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{atomic_write, BinReader, BinWriter};
use crate::data::ReformulatedExample;
use crate::error::{Error, Result};
use crate::evalmetric::{corpus_f1, post_process, EvalRecord, WordVectorStore};
use crate::qa_model::{best_answer, answer_text, QaModelOutput, DEFAULT_MAX_ANSWER_LEN, NUM_CLASSES};

pub const MAX_MODELS: usize = 128;

/// The five logit groups of one model on one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitBundle {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Yes, no, unknown.
    pub class: [f64; NUM_CLASSES],
}

impl From<&QaModelOutput> for LogitBundle {
    fn from(o: &QaModelOutput) -> Self {
        Self {
            start: o.start_logits.clone(),
            end: o.end_logits.clone(),
            class: o.class_logits,
        }
    }
}

/// What decoding and scoring an example needs besides logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub id: String,
    pub source: String,
    pub question: String,
    pub story: String,
    pub context_mask: Vec<bool>,
    pub offsets: Vec<Option<(usize, usize)>>,
    pub references: Vec<String>,
}

impl From<&ReformulatedExample> for ExampleMeta {
    fn from(e: &ReformulatedExample) -> Self {
        Self {
            id: e.id.clone(),
            source: e.source.clone(),
            question: e.question.clone(),
            story: e.story.clone(),
            context_mask: e.context_mask(),
            offsets: e.offsets.clone(),
            references: e.references.clone(),
        }
    }
}

/// One model's logits for every example, in a fixed example order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLogits {
    pub name: String,
    /// Vocabulary the model's inputs were built with.
    pub vocab_hash: String,
    pub ids: Vec<String>,
    pub logits: Vec<LogitBundle>,
}

const POOL_MAGIC: &[u8; 8] = b"CQALOGIT";

impl ModelLogits {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(POOL_MAGIC);
        w.str(&self.name);
        w.str(&self.vocab_hash);
        w.u64(self.ids.len() as u64);
        for (id, l) in self.ids.iter().zip(&self.logits) {
            w.str(id);
            w.f64s(&l.start);
            w.f64s(&l.end);
            for c in l.class {
                w.f64(c);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes, POOL_MAGIC, "logit pool")?;
        let name = r.str()?;
        let vocab_hash = r.str()?;
        let n = r.u64()? as usize;
        let mut ids = Vec::new();
        let mut logits = Vec::new();
        for _ in 0..n {
            ids.push(r.str()?);
            let start = r.f64s()?;
            let end = r.f64s()?;
            let class = [r.f64()?, r.f64()?, r.f64()?];
            logits.push(LogitBundle { start, end, class });
        }
        r.finish()?;
        Ok(Self {
            name,
            vocab_hash,
            ids,
            logits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::binio::read_file(path)?)
    }
}

/// Candidate models and the examples they were all run on.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    examples: Vec<ExampleMeta>,
    models: Vec<ModelLogits>,
}

impl CandidatePool {
    /// Checks that every model covers the same ids with matching lengths.
    pub fn new(examples: Vec<ExampleMeta>, models: Vec<ModelLogits>) -> Result<Self> {
        if models.len() > MAX_MODELS {
            return Err(Error::Contract(format!(
                "{} models exceed the limit of {MAX_MODELS}",
                models.len()
            )));
        }
        if let Some(m) = models.iter().find(|m| m.vocab_hash != models[0].vocab_hash) {
            return Err(Error::HashMismatch {
                what: "vocabulary",
                expected: models[0].vocab_hash.clone(),
                found: m.vocab_hash.clone(),
            });
        }
        for m in &models {
            if m.ids.len() != examples.len() || m.logits.len() != examples.len() {
                return Err(Error::Contract(format!(
                    "model {} covers {} examples, pool has {}",
                    m.name,
                    m.ids.len(),
                    examples.len()
                )));
            }
            for ((id, l), e) in m.ids.iter().zip(&m.logits).zip(&examples) {
                let t = e.context_mask.len();
                if *id != e.id || l.start.len() != t || l.end.len() != t {
                    return Err(Error::Contract(format!(
                        "model {} disagrees with the pool on example {}",
                        m.name, e.id
                    )));
                }
            }
        }
        Ok(Self { examples, models })
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn examples(&self) -> &[ExampleMeta] {
        &self.examples
    }

    pub fn models(&self) -> &[ModelLogits] {
        &self.models
    }
}

pub fn mask_to_indices(mask: u128) -> Vec<usize> {
    (0..MAX_MODELS).filter(|i| mask >> i & 1 == 1).collect()
}

pub fn indices_to_mask(indices: &[usize]) -> u128 {
    indices.iter().fold(0, |m, i| m | 1u128 << i)
}

/// Mean logits of the selected models on example `example`. Summation runs
/// in model order, so the order of `selection` does not matter.
pub fn average_logits(pool: &CandidatePool, selection: &[usize], example: usize) -> Result<LogitBundle> {
    if selection.is_empty() {
        return Err(Error::Contract("cannot average an empty selection".into()));
    }
    let mut sel = selection.to_vec();
    sel.sort_unstable();
    sel.dedup();
    if let Some(&bad) = sel.iter().find(|&&i| i >= pool.num_models()) {
        return Err(Error::Index {
            what: "model",
            index: bad,
            len: pool.num_models(),
        });
    }
    let t = pool.examples[example].context_mask.len();
    let mut out = LogitBundle {
        start: vec![0.0; t],
        end: vec![0.0; t],
        class: [0.0; NUM_CLASSES],
    };
    for &m in &sel {
        let l = &pool.models[m].logits[example];
        for (o, v) in out.start.iter_mut().zip(&l.start) {
            *o += v;
        }
        for (o, v) in out.end.iter_mut().zip(&l.end) {
            *o += v;
        }
        for (o, v) in out.class.iter_mut().zip(&l.class) {
            *o += v;
        }
    }
    let k = sel.len() as f64;
    out.start.iter_mut().for_each(|x| *x /= k);
    out.end.iter_mut().for_each(|x| *x /= k);
    out.class.iter_mut().for_each(|x| *x /= k);
    Ok(out)
}

/// Anything that scores a model subset.
pub trait Fitness: Sync {
    fn num_models(&self) -> usize;
    fn fitness(&self, mask: u128) -> f64;
}

/// Corpus F1 of the averaged-logit ensemble.
pub struct PoolFitness<'a> {
    pub pool: &'a CandidatePool,
    pub max_answer_len: usize,
    pub post_process: Option<&'a WordVectorStore>,
}

impl<'a> PoolFitness<'a> {
    pub fn new(pool: &'a CandidatePool) -> Self {
        Self {
            pool,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            post_process: None,
        }
    }

    /// Decoded answers of the ensemble, one per example.
    pub fn predictions(&self, mask: u128) -> Result<Vec<String>> {
        let sel = mask_to_indices(mask);
        (0..self.pool.examples.len())
            .map(|e| {
                let meta = &self.pool.examples[e];
                let l = average_logits(self.pool, &sel, e)?;
                let a = best_answer(&l.start, &l.end, &l.class, &meta.context_mask, self.max_answer_len);
                let text = answer_text(a, &meta.story, &meta.offsets);
                Ok(match self.post_process {
                    Some(store) => post_process(&meta.question, &text, store).0,
                    None => text,
                })
            })
            .collect()
    }

    pub fn score(&self, mask: u128) -> Result<f64> {
        let preds = self.predictions(mask)?;
        let records: Vec<EvalRecord> = self
            .pool
            .examples
            .iter()
            .zip(preds)
            .map(|(m, p)| EvalRecord {
                example_id: m.id.clone(),
                prediction: p,
                references: m.references.clone(),
                source: m.source.clone(),
            })
            .collect();
        Ok(corpus_f1(&records)?.overall)
    }
}

impl Fitness for PoolFitness<'_> {
    fn num_models(&self) -> usize {
        self.pool.num_models()
    }

    /// Invalid masks score negative infinity.
    fn fitness(&self, mask: u128) -> f64 {
        self.score(mask).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Thread-safe fitness cache keyed by bitmask.
pub struct Memo<'a, F: Fitness + ?Sized> {
    inner: &'a F,
    cache: Mutex<HashMap<u128, f64>>,
}

impl<'a, F: Fitness + ?Sized> Memo<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, mask: u128) -> f64 {
        if let Some(v) = self.cache.lock().unwrap().get(&mask) {
            return *v;
        }
        let v = self.inner.fitness(mask);
        self.cache.lock().unwrap().insert(mask, v);
        v
    }

    /// Scores a batch, computing unseen masks in parallel.
    pub fn get_many(&self, masks: &[u128]) -> Vec<f64> {
        let mut todo: Vec<u128> = {
            let cache = self.cache.lock().unwrap();
            masks.iter().copied().filter(|m| !cache.contains_key(m)).collect()
        };
        todo.sort_unstable();
        todo.dedup();
        let fresh: Vec<(u128, f64)> = todo.par_iter().map(|&m| (m, self.inner.fitness(m))).collect();
        let mut cache = self.cache.lock().unwrap();
        cache.extend(fresh);
        masks.iter().map(|m| cache[m]).collect()
    }

    pub fn evaluations(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population_size: usize,
    pub max_generations: usize,
    pub tournament_size: usize,
    /// Per-bit flip probability; `None` means `1/M`.
    pub mutation_rate: Option<f64>,
    pub elitism: usize,
    pub max_ensemble_size: usize,
    /// Stop after this many generations without a new best.
    pub stagnation_limit: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 50,
            max_generations: 200,
            tournament_size: 3,
            mutation_rate: None,
            elitism: 2,
            max_ensemble_size: 9,
            stagnation_limit: 25,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 || self.max_generations < 1 || self.tournament_size < 1 {
            return Err(Error::Contract(
                "GA needs population >= 2, generations >= 1 and tournament >= 1".into(),
            ));
        }
        if self.max_ensemble_size < 1 || self.elitism > self.population_size {
            return Err(Error::Contract(
                "GA needs ensemble size >= 1 and elitism <= population".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub mask: u128,
    pub fitness: f64,
    /// Per-generation best and worst of the population, generation 0 first.
    pub trace: Vec<GenerationStats>,
    /// Distinct subsets scored.
    pub evaluations: usize,
}

fn all_models_mask(m: usize) -> u128 {
    if m >= 128 {
        u128::MAX
    } else {
        (1u128 << m) - 1
    }
}

fn random_bit(mask: u128, rng: &mut ChaCha8Rng) -> usize {
    let bits = mask_to_indices(mask);
    bits[rng.random_range(0..bits.len())]
}

/// Clears random bits until at most `k` remain; sets one if none.
pub fn repair(mut mask: u128, m: usize, k: usize, rng: &mut ChaCha8Rng) -> u128 {
    mask &= all_models_mask(m);
    while mask.count_ones() as usize > k {
        mask &= !(1u128 << random_bit(mask, rng));
    }
    if mask == 0 {
        mask = 1u128 << rng.random_range(0..m);
    }
    mask
}

fn random_chromosome(m: usize, k: usize, rng: &mut ChaCha8Rng) -> u128 {
    let size = rng.random_range(1..=k.min(m));
    let picks = rand::seq::index::sample(rng, m, size);
    picks.iter().fold(0, |acc, i| acc | 1u128 << i)
}

/// Higher fitness wins; equal fitness goes to the smaller mask.
fn better(a: (u128, f64), b: (u128, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// Genetic search over subsets of at most `max_ensemble_size` models.
pub fn ga_search<F: Fitness + ?Sized>(fitness: &F, config: &GaConfig) -> Result<SearchResult> {
    config.validate()?;
    let m = fitness.num_models();
    if m == 0 || m > MAX_MODELS {
        return Err(Error::Contract(format!("GA needs 1..={MAX_MODELS} models, got {m}")));
    }
    let memo = Memo::new(fitness);
    let k = config.max_ensemble_size.min(m);
    if m == 1 {
        let f = memo.get(1);
        return Ok(SearchResult {
            mask: 1,
            fitness: f,
            trace: vec![GenerationStats { generation: 0, best: f, worst: f }],
            evaluations: 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rate = config.mutation_rate.unwrap_or(1.0 / m as f64);
    let mut pop: Vec<u128> = (0..config.population_size)
        .map(|_| random_chromosome(m, k, &mut rng))
        .collect();
    let mut scores = memo.get_many(&pop);
    let mut trace = Vec::new();
    let stats = |g: usize, s: &[f64]| GenerationStats {
        generation: g,
        best: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        worst: s.iter().copied().fold(f64::INFINITY, f64::min),
    };
    trace.push(stats(0, &scores));
    let mut best = pop
        .iter()
        .copied()
        .zip(scores.iter().copied())
        .fold((0u128, f64::NEG_INFINITY), |b, c| if better(c, b) { c } else { b });
    let mut stagnant = 0;
    for generation in 1..=config.max_generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(pop[a].cmp(&pop[b]))
        });
        let mut next: Vec<u128> = order.iter().take(config.elitism).map(|&i| pop[i]).collect();
        let tournament = |rng: &mut ChaCha8Rng| {
            let mut w = rng.random_range(0..pop.len());
            for _ in 1..config.tournament_size {
                let c = rng.random_range(0..pop.len());
                if better((pop[c], scores[c]), (pop[w], scores[w])) {
                    w = c;
                }
            }
            pop[w]
        };
        while next.len() < config.population_size {
            let a = tournament(&mut rng);
            let b = tournament(&mut rng);
            let mut child = 0u128;
            for bit in 0..m {
                let src = if rng.random_bool(0.5) { a } else { b };
                let mut v = src >> bit & 1;
                if rng.random_bool(rate) {
                    v ^= 1;
                }
                child |= v << bit;
            }
            next.push(repair(child, m, k, &mut rng));
        }
        pop = next;
        scores = memo.get_many(&pop);
        trace.push(stats(generation, &scores));
        let gen_best = pop
            .iter()
            .copied()
            .zip(scores.iter().copied())
            .fold((0u128, f64::NEG_INFINITY), |b, c| if better(c, b) { c } else { b });
        if gen_best.1 > best.1 {
            best = gen_best;
            stagnant = 0;
        } else {
            if gen_best.1 == best.1 && gen_best.0 < best.0 {
                best = gen_best;
            }
            stagnant += 1;
            if stagnant >= config.stagnation_limit {
                break;
            }
        }
    }
    Ok(SearchResult {
        mask: best.0,
        fitness: best.1,
        trace,
        evaluations: memo.evaluations(),
    })
}

fn binomial(n: u128, k: u128) -> u128 {
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

/// Number of nonempty subsets of at most `k` out of `m` models.
pub fn subset_count(m: usize, k: usize) -> u128 {
    (1..=k.min(m)).map(|j| binomial(m as u128, j as u128)).fold(0u128, u128::saturating_add)
}

pub const DEFAULT_BRUTE_FORCE_BUDGET: u128 = 1_000_000;

/// Exhaustive search; ties go to the smallest mask.
pub fn brute_force_search<F: Fitness + ?Sized>(fitness: &F, k: usize, budget: u128) -> Result<SearchResult> {
    let m = fitness.num_models();
    if m == 0 || m > MAX_MODELS || k == 0 {
        return Err(Error::Contract(format!("brute force needs 1..={MAX_MODELS} models and k >= 1")));
    }
    let count = subset_count(m, k);
    if count > budget {
        return Err(Error::Budget { count, limit: budget });
    }
    let mut masks = Vec::with_capacity(count as usize);
    for size in 1..=k.min(m) {
        // Gosper's hack: next integer with the same popcount
        let mut x: u128 = (1u128 << size) - 1;
        let limit = all_models_mask(m);
        loop {
            masks.push(x);
            let c = x & x.wrapping_neg();
            let r = x.checked_add(c);
            let Some(r) = r else { break };
            x = (((r ^ x) >> 2) / c) | r;
            if x > limit || x & !limit != 0 {
                break;
            }
        }
    }
    let scores: Vec<f64> = masks.par_iter().map(|&mk| fitness.fitness(mk)).collect();
    let best = masks
        .iter()
        .copied()
        .zip(scores)
        .fold((0u128, f64::NEG_INFINITY), |b, c| if better(c, b) { c } else { b });
    Ok(SearchResult {
        mask: best.0,
        fitness: best.1,
        trace: Vec::new(),
        evaluations: masks.len(),
    })
}

/// Tab-separated `generation best worst` lines with a header.
pub fn write_trace<W: Write>(mut w: W, trace: &[GenerationStats]) -> Result<()> {
    writeln!(w, "generation\tbest\tworst")?;
    for s in trace {
        writeln!(w, "{}\t{}\t{}", s.generation, s.best, s.worst)?;
    }
    Ok(())
}
