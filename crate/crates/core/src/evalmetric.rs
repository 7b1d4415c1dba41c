//! Word-overlap F1 in the CoQA style, the extractive upper bound, and the
//! multiple-choice post-processing step.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_ANSWERS: [&str; 3] = ["yes", "no", "unknown"];
pub const DEFAULT_MAX_SPAN_WORDS: usize = 30;

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, split on
/// whitespace.
pub fn normalize_text(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    // articles are removed as whole word-character runs, then whitespace is re-split
    let mut out = String::with_capacity(no_punct.len());
    let mut run = String::new();
    let flush = |run: &mut String, out: &mut String| {
        if !matches!(run.as_str(), "a" | "an" | "the") {
            out.push_str(run);
        } else {
            out.push(' ');
        }
        run.clear();
    };
    for c in no_punct.chars() {
        if c.is_alphanumeric() || c == '_' {
            run.push(c);
        } else {
            flush(&mut run, &mut out);
            out.push(c);
        }
    }
    flush(&mut run, &mut out);
    out.split_whitespace().map(str::to_string).collect()
}

fn f1_tokens(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return if pred.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Bag-of-words F1 between two answers after normalization.
pub fn f1_word_overlap(pred: &str, reference: &str) -> f64 {
    f1_tokens(&normalize_text(pred), &normalize_text(reference))
}

/// Leave-one-out average of per-reference F1 scores.
fn leave_one_out(scores: &[f64]) -> f64 {
    match scores.len() {
        0 => 0.0,
        1 => scores[0],
        n => {
            let total: f64 = (0..n)
                .map(|j| {
                    scores
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != j)
                        .map(|(_, s)| *s)
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum();
            total / n as f64
        }
    }
}

/// CoQA F1 of a prediction against `n` references: for each held-out
/// reference take the best F1 among the others, then average. With a single
/// reference this is the plain F1.
pub fn coqa_f1<S: AsRef<str>>(pred: &str, refs: &[S]) -> f64 {
    let p = normalize_text(pred);
    let scores: Vec<f64> = refs
        .iter()
        .map(|r| f1_tokens(&p, &normalize_text(r.as_ref())))
        .collect();
    leave_one_out(&scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub prediction: String,
    pub references: Vec<String>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub f1: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub overall: f64,
    pub count: usize,
    pub per_source: BTreeMap<String, SourceScore>,
}

/// Unweighted mean of per-question CoQA F1, overall and per source.
pub fn corpus_f1(records: &[EvalRecord]) -> Result<CorpusScore> {
    let mut seen = HashSet::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for r in records {
        if !seen.insert(r.example_id.as_str()) {
            return Err(Error::Contract(format!(
                "duplicate example id {}",
                r.example_id
            )));
        }
        if r.references.is_empty() {
            return Err(Error::Contract(format!(
                "example {} has no reference answers",
                r.example_id
            )));
        }
        let s = coqa_f1(&r.prediction, &r.references);
        total += s;
        let e = sums.entry(r.source.clone()).or_default();
        e.0 += s;
        e.1 += 1;
    }
    let count = records.len();
    Ok(CorpusScore {
        overall: if count == 0 { 0.0 } else { total / count as f64 },
        count,
        per_source: sums
            .into_iter()
            .map(|(k, (s, n))| (k, SourceScore { f1: s / n as f64, count: n }))
            .collect(),
    })
}

/// Best CoQA F1 reachable by any contiguous span of at most
/// `max_span_words` normalized story words, or by a yes/no/unknown answer.
pub fn upper_bound<S: AsRef<str>>(story: &str, refs: &[S], max_span_words: usize) -> f64 {
    let words = normalize_text(story);
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| normalize_text(r.as_ref())).collect();
    let mut best = CLASS_ANSWERS
        .iter()
        .map(|c| coqa_f1(c, refs))
        .fold(0.0, f64::max);
    if ref_tokens.is_empty() {
        return best;
    }
    // a span of articles or punctuation normalizes to nothing
    if story.split_whitespace().any(|w| normalize_text(w).is_empty()) {
        best = best.max(coqa_f1("", refs));
    }
    let ref_counts: Vec<HashMap<&str, usize>> = ref_tokens
        .iter()
        .map(|toks| {
            let mut m = HashMap::new();
            for t in toks {
                *m.entry(t.as_str()).or_default() += 1;
            }
            m
        })
        .collect();
    let max_len = max_span_words.max(1);
    let mut scores = vec![0.0; ref_tokens.len()];
    for i in 0..words.len() {
        // incremental overlap per reference as the span grows rightwards
        let mut used: Vec<HashMap<&str, usize>> = vec![HashMap::new(); ref_tokens.len()];
        let mut overlap = vec![0usize; ref_tokens.len()];
        for (n, word) in words[i..].iter().take(max_len).enumerate() {
            let w = word.as_str();
            let span_len = n + 1;
            for (k, counts) in ref_counts.iter().enumerate() {
                let avail = counts.get(w).copied().unwrap_or(0);
                let u = used[k].entry(w).or_default();
                if *u < avail {
                    *u += 1;
                    overlap[k] += 1;
                }
                let rl = ref_tokens[k].len();
                scores[k] = if rl == 0 || overlap[k] == 0 {
                    0.0
                } else {
                    let p = overlap[k] as f64 / span_len as f64;
                    let r = overlap[k] as f64 / rl as f64;
                    2.0 * p * r / (p + r)
                };
            }
            best = best.max(leave_one_out(&scores));
        }
    }
    best
}

const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "am", "be", "do", "does", "did", "has", "have", "had", "can",
    "could", "will", "would", "should", "shall", "may", "might", "must", "he", "she", "it",
    "they", "we", "you", "i", "him", "her", "them", "this", "that", "there", "a", "an", "the",
];

fn strip_leading(words: &[&str]) -> Vec<String> {
    let start = words
        .iter()
        .position(|w| !AUXILIARIES.contains(w))
        .unwrap_or(words.len());
    words[start..].iter().map(|w| w.to_string()).collect()
}

fn last_words(segment: &str, n: usize) -> Vec<String> {
    let words: Vec<&str> = segment.split_whitespace().collect();
    let from = words.len().saturating_sub(n);
    strip_leading(&words[from..])
}

/// Options of an "X or Y" question, lowercased.
///
/// The right-hand option fixes how many words are taken from the left side.
/// An Oxford comma (", or") or two or more commas turn the left side into a
/// list. Returns an empty list when there is no such pattern.
pub fn extract_options(question: &str) -> Vec<String> {
    let lowered = question.trim().to_lowercase();
    let s = lowered.trim_end_matches(|c: char| c == '?' || c == '.' || c == '!' || c.is_whitespace());
    let Some(idx) = s.rfind(" or ") else {
        return Vec::new();
    };
    let (left, right) = (&s[..idx], &s[idx + 4..]);
    let clean = |t: &str| -> String {
        t.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
            .to_string()
    };
    let right_words: Vec<&str> = right.split_whitespace().collect();
    let right_opt = strip_leading(&right_words);
    let right_opt = clean(&right_opt.join(" "));
    if right_opt.is_empty() {
        return Vec::new();
    }
    let n = right_opt.split_whitespace().count();
    let oxford = left.trim_end().ends_with(',');
    let left = left.trim_end().trim_end_matches(',');
    let segments: Vec<&str> = left.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if segments.is_empty() {
        return Vec::new();
    }
    let mut options = Vec::new();
    if segments.len() >= 3 || (oxford && segments.len() >= 2) {
        options.push(clean(&last_words(segments[0], n).join(" ")));
        for seg in &segments[1..] {
            let words: Vec<&str> = seg.split_whitespace().collect();
            options.push(clean(&strip_leading(&words).join(" ")));
        }
    } else {
        options.push(clean(&last_words(segments[segments.len() - 1], n).join(" ")));
    }
    options.push(right_opt);
    if options.iter().any(String::is_empty) {
        return Vec::new();
    }
    options
}

/// Word embeddings keyed by lowercased word.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVectorStore {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Contract(format!(
                "vector for {word} has dimension {}, store uses {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.to_lowercase(), vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    /// Reads "word v1 v2 ..." lines. The first line fixes the dimension.
    pub fn from_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut store: Option<Self> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| Error::parse(format!("line {}", lineno + 1), e.to_string()))
                })
                .collect::<Result<_>>()?;
            let s = store.get_or_insert_with(|| Self::new(values.len()));
            s.insert(word, values)
                .map_err(|e| Error::parse(format!("line {}", lineno + 1), e.to_string()))?;
        }
        Ok(store.unwrap_or_default())
    }

    /// Uses rows of a `[V×d]` embedding table, one per vocabulary token.
    pub fn from_embedding_table<S: AsRef<str>>(tokens: &[S], table: &Tensor) -> Result<Self> {
        let shape = table.shape();
        if shape.len() != 2 || shape[0] < tokens.len() {
            return Err(Error::Contract(format!(
                "embedding table {shape:?} cannot cover {} tokens",
                tokens.len()
            )));
        }
        let mut store = Self::new(shape[1]);
        for (i, tok) in tokens.iter().enumerate() {
            store.insert(tok.as_ref(), table.row(i).to_vec())?;
        }
        Ok(store)
    }
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Replaces an extracted answer with the closest option of an "X or Y"
/// question. Returns the answer and whether it was replaced.
pub fn post_process(question: &str, answer: &str, store: &WordVectorStore) -> (String, bool) {
    let unchanged = (answer.to_string(), false);
    let options = extract_options(question);
    if options.is_empty() {
        return unchanged;
    }
    let answer_tokens = normalize_text(answer);
    if answer_tokens.is_empty()
        || (answer_tokens.len() == 1 && CLASS_ANSWERS.contains(&answer_tokens[0].as_str()))
    {
        return unchanged;
    }
    let option_tokens: Vec<Vec<String>> = options.iter().map(|o| normalize_text(o)).collect();
    if option_tokens.iter().any(|o| contains_run(&answer_tokens, o)) {
        return unchanged;
    }
    let mut best: Option<(f64, usize)> = None;
    for (k, toks) in option_tokens.iter().enumerate() {
        for o in toks {
            let Some(ov) = store.get(o) else { continue };
            for a in &answer_tokens {
                let Some(av) = store.get(a) else { continue };
                let sim = cosine(ov, av);
                if best.is_none_or(|(b, _)| sim > b) {
                    best = Some((sim, k));
                }
            }
        }
    }
    match best {
        Some((_, k)) => (options[k].clone(), true),
        None => unchanged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_text("The Cat!"), vec!["cat"]);
        assert!(normalize_text("").is_empty());
        assert_eq!(
            normalize_text("Drove off in the cab."),
            vec!["drove", "off", "in", "cab"]
        );
        assert_eq!(normalize_text("Don't  stop"), vec!["dont", "stop"]);
        assert_eq!(normalize_text("An apple, a day"), vec!["apple", "day"]);
        assert_eq!(normalize_text("theater"), vec!["theater"]);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_word_overlap("red car", "red car"), 1.0);
        assert_eq!(f1_word_overlap("driving off in cab", "Drove off in the cab"), 0.75);
        assert_eq!(f1_word_overlap("blue", "red"), 0.0);
        assert_eq!(f1_word_overlap("", ""), 1.0);
        assert_eq!(f1_word_overlap("the", "cat"), 0.0);
    }

    #[test]
    fn coqa_f1_cases() {
        assert_eq!(coqa_f1("red", &["red", "red", "red"]), 1.0);
        assert_eq!(coqa_f1("red", &["red", "blue"]), 0.5);
        assert_eq!(coqa_f1("red car", &["red bus"]), f1_word_overlap("red car", "red bus"));
    }

    #[test]
    fn corpus_grouping() {
        let rec = |id: &str, p: &str, r: &str, s: &str| EvalRecord {
            example_id: id.into(),
            prediction: p.into(),
            references: vec![r.into()],
            source: s.into(),
        };
        let out = corpus_f1(&[rec("1", "a b", "a b", "x"), rec("2", "c", "d", "y")]).unwrap();
        assert_eq!(out.overall, 0.5);
        assert_eq!(out.per_source["x"].f1, 1.0);
        let dup = corpus_f1(&[rec("1", "a", "a", "x"), rec("1", "b", "b", "x")]);
        assert!(matches!(dup, Err(Error::Contract(_))));
    }

    #[test]
    fn upper_bound_cases() {
        assert_eq!(upper_bound("the cat sat on the mat", &["cat sat"], 30), 1.0);
        let b = upper_bound("the cat sat", &["cat sat on mat"], 30);
        assert!((b - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(upper_bound("", &["yes"], 30), 1.0);
        assert_eq!(upper_bound("", &["green"], 30), 0.0);
    }

    #[test]
    fn options_extraction() {
        assert_eq!(extract_options("Did she walk or ride?"), vec!["walk", "ride"]);
        assert!(extract_options("What did she do?").is_empty());
        assert_eq!(
            extract_options("Was it red, blue, or green?"),
            vec!["red", "blue", "green"]
        );
        assert_eq!(
            extract_options("Who did he meet, John or Mary?"),
            vec!["john", "mary"]
        );
        assert_eq!(
            extract_options("Is it a big dog or a small cat?"),
            vec!["big dog", "small cat"]
        );
    }

    fn store() -> WordVectorStore {
        let mut s = WordVectorStore::new(3);
        s.insert("walk", vec![1.0, 0.1, 0.0]).unwrap();
        s.insert("walked", vec![0.9, 0.2, 0.0]).unwrap();
        s.insert("ride", vec![0.0, 1.0, 0.3]).unwrap();
        s
    }

    #[test]
    fn post_process_picks_closest_option() {
        let (a, changed) = post_process("Did she walk or ride?", "walked", &store());
        assert_eq!(a, "walk");
        assert!(changed);
    }

    #[test]
    fn post_process_guards() {
        let s = store();
        assert_eq!(post_process("Did she walk or ride?", "ride", &s), ("ride".into(), false));
        assert_eq!(post_process("What did she do?", "walked", &s), ("walked".into(), false));
        assert_eq!(post_process("Did she walk or ride?", "yes", &s), ("yes".into(), false));
        assert_eq!(post_process("Did she walk or ride?", "zzz", &s), ("zzz".into(), false));
    }

    #[test]
    fn vector_file_parsing() {
        let text = "Walk 1 0\nride 0 1\n";
        let s = WordVectorStore::from_text(text.as_bytes()).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.get("WALK"), Some(&[1.0, 0.0][..]));
        assert!(WordVectorStore::from_text("a 1 2\nb 1\n".as_bytes()).is_err());
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
