//! Turning a conversation turn into model input with labels.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coqa::CoqaDocument;
use super::tokenizer::{Special, Tokenizer};
use crate::error::{Error, Result};
use crate::evalmetric::{f1_word_overlap, normalize_text};
use crate::qa_model::{char_slice, AnswerType, GoldLabel, ModelInput};

pub const DEFAULT_MAX_SEQ_LEN: usize = 128;
pub const DEFAULT_MAX_QUESTION_TOKENS: usize = 128;

/// Which text stands in for earlier answers in the reformulated question.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryAnswer {
    #[default]
    FreeForm,
    SpanText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleConfig {
    pub max_seq_len: usize,
    pub max_question_tokens: usize,
    pub history: HistoryAnswer,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self {
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            max_question_tokens: DEFAULT_MAX_QUESTION_TOKENS,
            history: HistoryAnswer::FreeForm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReformulatedExample {
    pub id: String,
    pub doc_id: String,
    pub turn_id: u32,
    pub source: String,
    pub token_ids: Vec<usize>,
    /// Context occupies `token_ids[context_start..context_end]`.
    pub context_start: usize,
    pub context_end: usize,
    /// Story character range per token; `None` outside the context.
    pub offsets: Vec<Option<(usize, usize)>>,
    pub story: String,
    pub question: String,
    pub references: Vec<String>,
    pub gold: GoldLabel,
    /// False when the rationale of a span answer was truncated away.
    pub usable: bool,
}

impl ReformulatedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn context_mask(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| i >= self.context_start && i < self.context_end)
            .collect()
    }

    pub fn model_input(&self) -> ModelInput {
        ModelInput::new(self.token_ids.clone(), self.context_mask())
    }
}

fn history_text(turn: &super::coqa::Turn, history: HistoryAnswer) -> &str {
    match history {
        HistoryAnswer::FreeForm => &turn.answer,
        HistoryAnswer::SpanText if turn.span_start >= 0 => &turn.span_text,
        HistoryAnswer::SpanText => &turn.answer,
    }
}

/// `[Q] Q_1 [A] A_1 ... [Q] Q_k` as token texts, keeping the last
/// `max_question_tokens` tokens when over budget.
pub fn reformulate(
    doc: &CoqaDocument,
    k: usize,
    max_question_tokens: usize,
    tokenizer: &dyn Tokenizer,
    history: HistoryAnswer,
) -> Result<Vec<String>> {
    if k == 0 || k > doc.turns.len() {
        return Err(Error::Index {
            what: "turn",
            index: k,
            len: doc.turns.len(),
        });
    }
    let mut out = Vec::new();
    for (i, turn) in doc.turns[..k].iter().enumerate() {
        out.push(Special::Question.text().to_string());
        out.extend(tokenizer.tokenize(&turn.question).into_iter().map(|t| t.text));
        if i + 1 < k {
            out.push(Special::Answer.text().to_string());
            out.extend(
                tokenizer
                    .tokenize(history_text(turn, history))
                    .into_iter()
                    .map(|t| t.text),
            );
        }
    }
    if out.len() > max_question_tokens {
        out.drain(..out.len() - max_question_tokens);
    }
    Ok(out)
}

/// Best-F1 subspan of `n` tokens; `text(i, j)` renders tokens `i..=j`.
/// Ties go to the shorter, then earlier span; no overlap at all gives the
/// whole range.
pub fn best_subspan(
    n: usize,
    answer: &str,
    text: impl Fn(usize, usize) -> String,
) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::Contract("gold span selection needs a nonempty rationale".into()));
    }
    let mut best = (0.0, 0, n - 1);
    for len in 1..=n {
        for i in 0..=n - len {
            let f = f1_word_overlap(&text(i, i + len - 1), answer);
            if f > best.0 {
                best = (f, i, i + len - 1);
            }
        }
    }
    Ok((best.1, best.2))
}

/// Picks the gold answer span inside the labeled rationale, as absolute
/// sequence positions.
pub fn select_gold_span(example: &ReformulatedExample, answer_text: &str) -> Result<(usize, usize)> {
    let positions: Vec<usize> = (0..example.len())
        .filter(|&i| example.gold.rationale.get(i).copied().unwrap_or(0.0) > 0.0)
        .collect();
    let (Some(&first), Some(&last)) = (positions.first(), positions.last()) else {
        return Err(Error::Contract(format!(
            "example {} has an empty rationale",
            example.id
        )));
    };
    let (i, j) = best_subspan(last - first + 1, answer_text, |i, j| {
        let (s, _) = example.offsets[first + i].expect("rationale token in context");
        let (_, e) = example.offsets[first + j].expect("rationale token in context");
        char_slice(&example.story, s, e).to_string()
    })?;
    Ok((first + i, first + j))
}

/// Answer type implied by the free-form answer and the rationale offsets.
pub fn answer_type(answer: &str, span_start: i64) -> AnswerType {
    let words = normalize_text(answer);
    match words.as_slice() {
        _ if span_start < 0 => AnswerType::Unknown,
        [w] if w == "unknown" => AnswerType::Unknown,
        [w] if w == "yes" => AnswerType::Yes,
        [w] if w == "no" => AnswerType::No,
        _ => AnswerType::Span,
    }
}

/// Assembles `[CLS] Q* [SEP] C [SEP]` for turn `k` (1-based).
pub fn build_example(
    doc: &CoqaDocument,
    k: usize,
    tokenizer: &dyn Tokenizer,
    config: &ExampleConfig,
) -> Result<ReformulatedExample> {
    if config.max_seq_len < 4 {
        return Err(Error::Contract(format!(
            "max_seq_len {} leaves no room for any token",
            config.max_seq_len
        )));
    }
    let q_budget = config.max_question_tokens.min(config.max_seq_len - 3);
    let question = reformulate(doc, k, q_budget, tokenizer, config.history)?;
    let mut token_ids = vec![Special::Cls.id()];
    token_ids.extend(question.iter().map(|t| tokenizer.token_id(t)));
    token_ids.push(Special::Sep.id());
    let context_start = token_ids.len();
    let room = config.max_seq_len - context_start - 1;
    let context: Vec<_> = tokenizer.tokenize(&doc.story).into_iter().take(room).collect();
    let mut offsets = vec![None; context_start];
    for t in &context {
        token_ids.push(tokenizer.token_id(&t.text));
        offsets.push(Some((t.start, t.end)));
    }
    let context_end = token_ids.len();
    token_ids.push(Special::Sep.id());
    offsets.push(None);

    let turn = &doc.turns[k - 1];
    let t = token_ids.len();
    let kind = answer_type(&turn.answer, turn.span_start);
    let mut rationale = vec![0.0; t];
    if kind != AnswerType::Unknown {
        let (s, e) = (turn.span_start as usize, turn.span_end as usize);
        for (i, off) in offsets.iter().enumerate() {
            if let Some((a, b)) = off {
                if *a < e && s < *b {
                    rationale[i] = 1.0;
                }
            }
        }
    }
    let mut example = ReformulatedExample {
        id: format!("{}_{}", doc.id, turn.turn_id),
        doc_id: doc.id.clone(),
        turn_id: turn.turn_id,
        source: doc.source.clone(),
        token_ids,
        context_start,
        context_end,
        offsets,
        story: doc.story.clone(),
        question: turn.question.clone(),
        references: doc.references(k),
        gold: GoldLabel::class(AnswerType::Unknown, t, rationale.clone()),
        usable: true,
    };
    match kind {
        AnswerType::Span => {
            if rationale.iter().all(|&r| r == 0.0) {
                example.usable = false;
            } else {
                let (start, end) = select_gold_span(&example, &turn.answer)?;
                example.gold = GoldLabel {
                    answer_type: AnswerType::Span,
                    start,
                    end,
                    rationale,
                };
            }
        }
        other => example.gold = GoldLabel::class(other, t, rationale),
    }
    Ok(example)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildOutput {
    pub examples: Vec<ReformulatedExample>,
    /// Span answers whose rationale fell outside the kept context.
    pub skipped: usize,
}

/// All turns of all documents, ordered by (doc id, turn id). Unusable
/// examples are kept but counted.
pub fn build_examples(
    docs: &[CoqaDocument],
    tokenizer: &dyn Tokenizer,
    config: &ExampleConfig,
) -> Result<BuildOutput> {
    let mut per_doc: Vec<(String, Vec<ReformulatedExample>)> = docs
        .par_iter()
        .map(|doc| {
            (1..=doc.turns.len())
                .map(|k| build_example(doc, k, tokenizer, config))
                .collect::<Result<Vec<_>>>()
                .map(|v| (doc.id.clone(), v))
        })
        .collect::<Result<_>>()?;
    per_doc.sort_by(|a, b| a.0.cmp(&b.0));
    let examples: Vec<_> = per_doc.into_iter().flat_map(|(_, v)| v).collect();
    let skipped = examples.iter().filter(|e| !e.usable).count();
    Ok(BuildOutput { examples, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ExampleFileHeader {
    format: String,
    vocab_hash: String,
    count: usize,
}

const EXAMPLE_FORMAT: &str = "convqa-examples-v1";

/// JSON lines: one header, then one example per line.
pub fn write_examples<W: Write>(
    mut w: W,
    examples: &[ReformulatedExample],
    vocab_hash: &str,
) -> Result<()> {
    let header = ExampleFileHeader {
        format: EXAMPLE_FORMAT.into(),
        vocab_hash: vocab_hash.into(),
        count: examples.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads an example file, returning the examples and the vocabulary hash.
pub fn read_examples<R: BufRead>(r: R) -> Result<(Vec<ReformulatedExample>, String)> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "empty example file"))??;
    let header: ExampleFileHeader =
        serde_json::from_str(&first).map_err(|e| Error::parse("line 1", e.to_string()))?;
    if header.format != EXAMPLE_FORMAT {
        return Err(Error::parse("line 1", format!("unknown format {:?}", header.format)));
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("line {}", i + 2), e.to_string()))?;
        out.push(ex);
    }
    if out.len() != header.count {
        return Err(Error::parse(
            "end of file",
            format!("header promises {} examples, found {}", header.count, out.len()),
        ));
    }
    Ok((out, header.vocab_hash))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub questions: usize,
    pub span: usize,
    pub yes: usize,
    pub no: usize,
    pub unknown: usize,
    /// Answered questions whose answer is not a contiguous word run of the story.
    pub non_extractive: usize,
    /// Yes/No answers among the non-extractive ones.
    pub non_extractive_yes_no: usize,
    pub skipped: usize,
}

impl CorpusStats {
    pub fn non_extractive_share(&self) -> f64 {
        let answered = self.questions - self.unknown;
        if answered == 0 {
            0.0
        } else {
            self.non_extractive as f64 / answered as f64
        }
    }

    pub fn yes_no_share_of_non_extractive(&self) -> f64 {
        if self.non_extractive == 0 {
            0.0
        } else {
            self.non_extractive_yes_no as f64 / self.non_extractive as f64
        }
    }
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// Answer-type counts over the raw corpus; Unknown answers are left out of
/// the extractive/non-extractive split.
pub fn corpus_stats(docs: &[CoqaDocument]) -> CorpusStats {
    let mut s = CorpusStats {
        documents: docs.len(),
        ..Default::default()
    };
    for doc in docs {
        let story = normalize_text(&doc.story);
        for turn in &doc.turns {
            s.questions += 1;
            let kind = answer_type(&turn.answer, turn.span_start);
            match kind {
                AnswerType::Span => s.span += 1,
                AnswerType::Yes => s.yes += 1,
                AnswerType::No => s.no += 1,
                AnswerType::Unknown => {
                    s.unknown += 1;
                    continue;
                }
            }
            if !contains_run(&story, &normalize_text(&turn.answer)) {
                s.non_extractive += 1;
                if matches!(kind, AnswerType::Yes | AnswerType::No) {
                    s.non_extractive_yes_no += 1;
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::super::coqa::Turn;
    use super::super::tokenizer::{Vocab, WordTokenizer};
    use super::*;
    use std::collections::BTreeMap;

    fn turn(id: u32, q: &str, a: &str, story: &str, rationale: &str) -> Turn {
        let (s, e) = if rationale.is_empty() {
            (-1, -1)
        } else {
            let byte = story.find(rationale).unwrap();
            let s = story[..byte].chars().count();
            (s as i64, (s + rationale.chars().count()) as i64)
        };
        Turn {
            turn_id: id,
            question: q.into(),
            answer: a.into(),
            span_start: s,
            span_end: e,
            span_text: rationale.into(),
        }
    }

    fn doc() -> CoqaDocument {
        let story = "Anna lives in Paris. She has a red bike and a blue car. Her dog is called Rex.";
        CoqaDocument {
            id: "d".into(),
            source: "test".into(),
            story: story.into(),
            turns: vec![
                turn(1, "Where does Anna live?", "in Paris", story, "Anna lives in Paris"),
                turn(2, "Does she have a bike?", "yes", story, "She has a red bike"),
                turn(3, "What color is it?", "red", story, "a red bike"),
                turn(4, "What is her cat called?", "unknown", story, ""),
            ],
            additional_answers: BTreeMap::new(),
        }
    }

    fn tokenizer(d: &CoqaDocument) -> WordTokenizer {
        let mut texts = vec![d.story.clone()];
        for t in &d.turns {
            texts.push(t.question.clone());
            texts.push(t.answer.clone());
        }
        let vocab = Vocab::build(texts.iter().map(String::as_str), 1000, 1, true).unwrap();
        WordTokenizer::new(vocab, true)
    }

    #[test]
    fn reformulate_structure() {
        let d = doc();
        let tok = tokenizer(&d);
        let q1 = reformulate(&d, 1, 100, &tok, HistoryAnswer::FreeForm).unwrap();
        assert_eq!(q1[0], "[Q]");
        assert_eq!(q1.iter().filter(|t| t.starts_with('[') && t.len() == 3).count(), 1);
        let q3 = reformulate(&d, 3, 100, &tok, HistoryAnswer::FreeForm).unwrap();
        let markers: Vec<_> = q3.iter().filter(|t| *t == "[Q]" || *t == "[A]").cloned().collect();
        assert_eq!(markers, vec!["[Q]", "[A]", "[Q]", "[A]", "[Q]"]);
    }

    #[test]
    fn tight_budget_keeps_current_question() {
        let d = doc();
        let tok = tokenizer(&d);
        let current = tok.tokenize(&d.turns[2].question);
        let q = reformulate(&d, 3, current.len() + 1, &tok, HistoryAnswer::FreeForm).unwrap();
        let mut expect = vec!["[Q]".to_string()];
        expect.extend(current.into_iter().map(|t| t.text));
        assert_eq!(q, expect);
        // monotone in the budget
        let full = reformulate(&d, 3, 1000, &tok, HistoryAnswer::FreeForm).unwrap();
        for b in 0..full.len() {
            let small = reformulate(&d, 3, b, &tok, HistoryAnswer::FreeForm).unwrap();
            let big = reformulate(&d, 3, b + 1, &tok, HistoryAnswer::FreeForm).unwrap();
            assert!(big.ends_with(&small));
        }
    }

    #[test]
    fn example_layout_and_labels() {
        let d = doc();
        let tok = tokenizer(&d);
        let cfg = ExampleConfig::default();
        let ex = build_example(&d, 3, &tok, &cfg).unwrap();
        assert_eq!(ex.token_ids[0], Special::Cls.id());
        assert_eq!(ex.token_ids.iter().filter(|&&i| i == Special::Cls.id()).count(), 1);
        assert_eq!(ex.token_ids[ex.context_start - 1], Special::Sep.id());
        assert_eq!(*ex.token_ids.last().unwrap(), Special::Sep.id());
        // brute-force rationale label count
        let (s, e) = (d.turns[2].span_start as usize, d.turns[2].span_end as usize);
        let expected = (ex.context_start..ex.context_end)
            .filter(|&i| {
                let (a, b) = ex.offsets[i].unwrap();
                a < e && s < b
            })
            .count();
        assert_eq!(ex.gold.rationale.iter().filter(|&&r| r == 1.0).count(), expected);
        assert_eq!(ex.gold.answer_type, AnswerType::Span);
        let span = char_slice(
            &ex.story,
            ex.offsets[ex.gold.start].unwrap().0,
            ex.offsets[ex.gold.end].unwrap().1,
        );
        assert_eq!(span, "red");
    }

    #[test]
    fn alignment_within_story() {
        let d = doc();
        let tok = tokenizer(&d);
        let n = d.story_chars();
        for k in 1..=4 {
            let ex = build_example(&d, k, &tok, &ExampleConfig::default()).unwrap();
            let mut prev_end = 0;
            for i in ex.context_start..ex.context_end {
                let (a, b) = ex.offsets[i].unwrap();
                assert!(a < b && b <= n && a >= prev_end);
                prev_end = b;
                let piece = char_slice(&ex.story, a, b).to_lowercase();
                assert_eq!(tok.id_to_token(ex.token_ids[i]).unwrap(), piece);
            }
        }
    }

    #[test]
    fn unknown_and_yes_classes() {
        let d = doc();
        let tok = tokenizer(&d);
        let cfg = ExampleConfig::default();
        let unk = build_example(&d, 4, &tok, &cfg).unwrap();
        assert_eq!(unk.gold.answer_type, AnswerType::Unknown);
        assert!(unk.gold.rationale.iter().all(|&r| r == 0.0));
        assert_eq!(unk.gold.start, unk.len() + 2);
        let yes = build_example(&d, 2, &tok, &cfg).unwrap();
        assert_eq!(yes.gold.answer_type, AnswerType::Yes);
        assert_eq!(yes.gold.start, yes.len());
        assert!(yes.gold.rationale.contains(&1.0));
    }

    #[test]
    fn truncated_rationale_is_flagged() {
        let d = doc();
        let tok = tokenizer(&d);
        let cfg = ExampleConfig {
            max_seq_len: 18,
            max_question_tokens: 8,
            history: HistoryAnswer::FreeForm,
        };
        // "Her dog is called Rex" would be past the cut, use a turn pointing there
        let mut d2 = d.clone();
        d2.turns.truncate(1);
        d2.turns[0] = turn(1, "Dog name?", "Rex", &d.story, "Her dog is called Rex");
        let ex = build_example(&d2, 1, &tok, &cfg).unwrap();
        assert!(ex.len() <= 18);
        assert!(!ex.usable);
        let built = build_examples(&[d2], &tok, &cfg).unwrap();
        assert_eq!(built.skipped, 1);
    }

    #[test]
    fn gold_span_brute_force() {
        let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
        let render = |i: usize, j: usize| words[i..=j].join(" ");
        assert_eq!(best_subspan(6, "gamma delta epsilon", render).unwrap(), (2, 4));
        assert_eq!(best_subspan(6, &words.join(" "), render).unwrap(), (0, 5));
        assert_eq!(best_subspan(6, "three", render).unwrap(), (0, 5));
        assert!(best_subspan(0, "x", render).is_err());
        // exhaustive dominance
        let (bi, bj) = best_subspan(6, "beta gamma omega", render).unwrap();
        let best = f1_word_overlap(&render(bi, bj), "beta gamma omega");
        for i in 0..6 {
            for j in i..6 {
                assert!(f1_word_overlap(&render(i, j), "beta gamma omega") <= best);
            }
        }
    }

    #[test]
    fn counting_answer_falls_back_to_full_rationale() {
        let story = "Physical, climatic, and biological factors shape it.";
        let d = CoqaDocument {
            id: "c".into(),
            source: "t".into(),
            story: story.into(),
            turns: vec![turn(1, "How many factors?", "Three", story, "Physical, climatic, and biological factors")],
            additional_answers: BTreeMap::new(),
        };
        let tok = tokenizer(&d);
        let ex = build_example(&d, 1, &tok, &ExampleConfig::default()).unwrap();
        let text = char_slice(story, ex.offsets[ex.gold.start].unwrap().0, ex.offsets[ex.gold.end].unwrap().1);
        assert_eq!(text, "Physical, climatic, and biological factors");
    }

    #[test]
    fn example_file_round_trip() {
        let d = doc();
        let tok = tokenizer(&d);
        let built = build_examples(&[d], &tok, &ExampleConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_examples(&mut buf, &built.examples, &tok.vocab_hash()).unwrap();
        let (back, hash) = read_examples(buf.as_slice()).unwrap();
        assert_eq!(back, built.examples);
        assert_eq!(hash, tok.vocab_hash());
    }

    #[test]
    fn stats_counts() {
        let s = corpus_stats(&[doc()]);
        assert_eq!((s.span, s.yes, s.no, s.unknown), (2, 1, 0, 1));
        assert_eq!(s.non_extractive, 1);
        assert_eq!(s.yes_no_share_of_non_extractive(), 1.0);
    }
}
