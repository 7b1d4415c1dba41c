//! The CoQA JSON layout and validated documents.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawQuestion {
    pub input_text: String,
    pub turn_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawAnswer {
    pub input_text: String,
    #[serde(default = "minus_one")]
    pub span_start: i64,
    #[serde(default = "minus_one")]
    pub span_end: i64,
    #[serde(default)]
    pub span_text: String,
    pub turn_id: u32,
}

fn minus_one() -> i64 {
    -1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    #[serde(default)]
    pub source: String,
    pub story: String,
    pub questions: Vec<RawQuestion>,
    pub answers: Vec<RawAnswer>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub additional_answers: BTreeMap<String, Vec<RawAnswer>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filename: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawCorpus {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<serde_json::Value>,
    pub data: Vec<RawDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_id: u32,
    pub question: String,
    /// Free-form human answer.
    pub answer: String,
    /// Character offsets of the rationale, `-1` when absent.
    pub span_start: i64,
    pub span_end: i64,
    pub span_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoqaDocument {
    pub id: String,
    pub source: String,
    pub story: String,
    pub turns: Vec<Turn>,
    /// Extra human answers per turn, keyed "0", "1", "2".
    pub additional_answers: BTreeMap<String, Vec<String>>,
}

impl CoqaDocument {
    /// Human answers for turn `k` (1-based): the main answer first.
    pub fn references(&self, k: usize) -> Vec<String> {
        let mut refs = vec![self.turns[k - 1].answer.clone()];
        for answers in self.additional_answers.values() {
            if let Some(a) = answers.get(k - 1) {
                refs.push(a.clone());
            }
        }
        refs
    }

    pub fn story_chars(&self) -> usize {
        self.story.chars().count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Reject span/story mismatches instead of repairing them from the story.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { strict: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub documents: Vec<CoqaDocument>,
    /// Turns whose `span_text` disagreed with the story (lenient mode only).
    pub repaired_spans: usize,
}

fn validate(raw: RawDocument, options: LoadOptions, repaired: &mut usize) -> Result<CoqaDocument> {
    let doc = raw.id.clone();
    let integrity = |msg: String| Error::Integrity {
        doc: doc.clone(),
        msg,
    };
    if raw.questions.len() != raw.answers.len() {
        return Err(integrity(format!(
            "{} questions but {} answers",
            raw.questions.len(),
            raw.answers.len()
        )));
    }
    let chars: Vec<char> = raw.story.chars().collect();
    let mut turns = Vec::with_capacity(raw.questions.len());
    for (i, (q, a)) in raw.questions.iter().zip(&raw.answers).enumerate() {
        let expected = i as u32 + 1;
        if q.turn_id != expected || a.turn_id != expected {
            return Err(integrity(format!(
                "turn ids must be consecutive from 1; position {i} has question {} / answer {}",
                q.turn_id, a.turn_id
            )));
        }
        let mut span_text = a.span_text.clone();
        if a.span_start >= 0 {
            let (s, e) = (a.span_start as usize, a.span_end.max(0) as usize);
            if s > e || e > chars.len() {
                return Err(integrity(format!(
                    "turn {expected}: span [{s}, {e}) outside story of {} chars",
                    chars.len()
                )));
            }
            let slice: String = chars[s..e].iter().collect();
            if slice != a.span_text {
                if options.strict {
                    return Err(integrity(format!(
                        "turn {expected}: span_text {:?} differs from story slice {:?}",
                        a.span_text, slice
                    )));
                }
                *repaired += 1;
                span_text = slice;
            }
        }
        turns.push(Turn {
            turn_id: expected,
            question: q.input_text.clone(),
            answer: a.input_text.clone(),
            span_start: a.span_start,
            span_end: a.span_end,
            span_text,
        });
    }
    let additional_answers = raw
        .additional_answers
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|a| a.input_text).collect()))
        .collect();
    Ok(CoqaDocument {
        id: raw.id,
        source: raw.source,
        story: raw.story,
        turns,
        additional_answers,
    })
}

pub fn parse_corpus(text: &str, options: LoadOptions) -> Result<LoadReport> {
    let raw: RawCorpus = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    let mut report = LoadReport::default();
    for d in raw.data {
        let doc = validate(d, options, &mut report.repaired_spans)?;
        report.documents.push(doc);
    }
    Ok(report)
}

/// Loads and validates an official-format CoQA file.
pub fn load_corpus(path: &Path) -> Result<Vec<CoqaDocument>> {
    Ok(load_corpus_with(path, LoadOptions::default())?.documents)
}

pub fn load_corpus_with(path: &Path, options: LoadOptions) -> Result<LoadReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_corpus(&text, options).map_err(|e| match e {
        Error::Parse { location, msg } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            msg,
        },
        other => other,
    })
}

/// Converts documents back into the official layout.
pub fn to_raw(docs: &[CoqaDocument]) -> RawCorpus {
    let data = docs
        .iter()
        .map(|d| {
            let mut additional: BTreeMap<String, Vec<RawAnswer>> = BTreeMap::new();
            for (key, answers) in &d.additional_answers {
                additional.insert(
                    key.clone(),
                    answers
                        .iter()
                        .enumerate()
                        .map(|(i, a)| RawAnswer {
                            input_text: a.clone(),
                            span_start: -1,
                            span_end: -1,
                            span_text: String::new(),
                            turn_id: i as u32 + 1,
                        })
                        .collect(),
                );
            }
            RawDocument {
                id: d.id.clone(),
                source: d.source.clone(),
                story: d.story.clone(),
                questions: d
                    .turns
                    .iter()
                    .map(|t| RawQuestion {
                        input_text: t.question.clone(),
                        turn_id: t.turn_id,
                    })
                    .collect(),
                answers: d
                    .turns
                    .iter()
                    .map(|t| RawAnswer {
                        input_text: t.answer.clone(),
                        span_start: t.span_start,
                        span_end: t.span_end,
                        span_text: t.span_text.clone(),
                        turn_id: t.turn_id,
                    })
                    .collect(),
                additional_answers: additional,
                filename: None,
            }
        })
        .collect();
    RawCorpus {
        version: Some(serde_json::Value::from("1.0")),
        data,
    }
}
