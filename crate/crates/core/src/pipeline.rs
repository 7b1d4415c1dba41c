//! Batch prediction and scoring over prepared examples.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CoqaDocument, ReformulatedExample};
use crate::ensemble::{LogitBundle, ModelLogits};
use crate::error::{Error, Result};
use crate::evalmetric::{corpus_f1, post_process, CorpusScore, EvalRecord, WordVectorStore};
use crate::qa_model::{decode, QaModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub turn_id: u32,
    pub answer: String,
    pub post_processed: bool,
}

/// Decodes every example; also returns the raw logits as a pool entry.
pub fn predict(
    model: &QaModel,
    examples: &[ReformulatedExample],
    name: &str,
    vocab_hash: &str,
    max_answer_len: usize,
    store: Option<&WordVectorStore>,
) -> Result<(Vec<Prediction>, ModelLogits)> {
    let rows: Vec<(Prediction, LogitBundle)> = examples
        .par_iter()
        .map(|ex| {
            let out = model.predict(&ex.model_input())?;
            let text = decode(&out, &ex.context_mask(), &ex.story, &ex.offsets, max_answer_len);
            let (answer, post_processed) = match store {
                Some(s) => post_process(&ex.question, &text, s),
                None => (text, false),
            };
            Ok((
                Prediction {
                    id: ex.id.clone(),
                    turn_id: ex.turn_id,
                    answer,
                    post_processed,
                },
                LogitBundle::from(&out),
            ))
        })
        .collect::<Result<_>>()?;
    let ids = examples.iter().map(|e| e.id.clone()).collect();
    let (preds, logits) = rows.into_iter().unzip();
    Ok((
        preds,
        ModelLogits {
            name: name.to_string(),
            vocab_hash: vocab_hash.to_string(),
            ids,
            logits,
        },
    ))
}

pub fn write_predictions<W: Write>(mut w: W, preds: &[Prediction]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("predictions line {}", i + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

/// Scores predictions against the human answers of the corpus. Example ids
/// are `{doc id}_{turn id}`; every prediction must name a known turn.
pub fn evaluate(preds: &[Prediction], docs: &[CoqaDocument]) -> Result<CorpusScore> {
    let mut turns: HashMap<String, (&CoqaDocument, usize)> = HashMap::new();
    for d in docs {
        for t in &d.turns {
            turns.insert(format!("{}_{}", d.id, t.turn_id), (d, t.turn_id as usize));
        }
    }
    let records = preds
        .iter()
        .map(|p| {
            let (doc, k) = turns
                .get(&p.id)
                .ok_or_else(|| Error::Contract(format!("prediction {} matches no question", p.id)))?;
            Ok(EvalRecord {
                example_id: p.id.clone(),
                prediction: p.answer.clone(),
                references: doc.references(*k),
                source: doc.source.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    corpus_f1(&records)
}

/// Corpus F1 of the model's answers against the examples' own references.
pub fn example_f1(model: &QaModel, examples: &[ReformulatedExample], max_answer_len: usize) -> Result<f64> {
    let (preds, _) = predict(model, examples, "eval", "", max_answer_len, None)?;
    let records: Vec<EvalRecord> = preds
        .into_iter()
        .zip(examples)
        .map(|(p, e)| EvalRecord {
            example_id: p.id,
            prediction: p.answer,
            references: e.references.clone(),
            source: e.source.clone(),
        })
        .collect();
    Ok(corpus_f1(&records)?.overall)
}
