//! Output layer for extractive conversational QA.
//!
//! Span start/end logits come from one affine map over the hidden states.
//! Yes/No/Unknown logits come from an affine map over the concatenation of a
//! rationale-attention summary and the pooled vector. Start and end
//! distributions are softmaxes over `[span logits ; class logits]`, so the
//! joint axis has length `T + 3` and the class slots sit at `T`, `T+1`, `T+2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, MASK_BIAS};
use crate::error::{Error, Result};
use crate::nn::{affine, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;
/// Multiplier putting a single class logit on the scale of a start+end sum.
pub const CLASS_SCORE_FACTOR: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerType {
    Span,
    Yes,
    No,
    Unknown,
}

impl AnswerType {
    /// Offset of the class slot after the `T` span positions.
    pub fn class_offset(self) -> Option<usize> {
        match self {
            AnswerType::Span => None,
            AnswerType::Yes => Some(0),
            AnswerType::No => Some(1),
            AnswerType::Unknown => Some(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub answer_type: AnswerType,
    /// Index into the joint `T + 3` axis.
    pub start: usize,
    pub end: usize,
    /// 0/1 per token of the full sequence.
    pub rationale: Vec<f64>,
}

impl GoldLabel {
    /// Label for a Yes/No/Unknown answer over a sequence of `t` tokens.
    pub fn class(answer_type: AnswerType, t: usize, rationale: Vec<f64>) -> Self {
        let slot = t + answer_type.class_offset().unwrap_or(2);
        Self {
            answer_type,
            start: slot,
            end: slot,
            rationale,
        }
    }
}

/// Token ids plus the two masks the model needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub token_ids: Vec<usize>,
    /// `false` marks padding.
    pub attention_mask: Vec<bool>,
    /// `true` for passage tokens.
    pub context_mask: Vec<bool>,
}

impl ModelInput {
    pub fn new(token_ids: Vec<usize>, context_mask: Vec<bool>) -> Self {
        let attention_mask = vec![true; token_ids.len()];
        Self {
            token_ids,
            attention_mask,
            context_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct OutputVars {
    pub embeddings: Var,
    pub hidden: Var,
    pub pooled: Var,
    pub start_logits: Var,
    pub end_logits: Var,
    pub class_logits: Var,
    pub rationale_probs: Var,
    pub p_start: Var,
    pub p_end: Var,
}

/// Detached values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct QaModelOutput {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub class_logits: [f64; NUM_CLASSES],
    pub rationale_probs: Vec<f64>,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

impl QaModelOutput {
    pub fn from_vars(tape: &Tape, vars: &OutputVars) -> Self {
        let c = tape.value(vars.class_logits).data();
        Self {
            start_logits: tape.value(vars.start_logits).data().to_vec(),
            end_logits: tape.value(vars.end_logits).data().to_vec(),
            class_logits: [c[0], c[1], c[2]],
            rationale_probs: tape.value(vars.rationale_probs).data().to_vec(),
            p_start: tape.value(vars.p_start).data().to_vec(),
            p_end: tape.value(vars.p_end).data().to_vec(),
        }
    }
}

/// Encoder plus task heads, with all parameters in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct QaModel {
    encoder: Encoder,
    params: ParamStore,
}

impl QaModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let std = config.init_std;
        let d = config.hidden_dim;
        let encoder = Encoder::init(config, &mut params, &mut rng)?;
        params.insert_normal("head.span.w", &[d, 2], std, &mut rng)?;
        params.insert("head.span.b", Tensor::zeros(&[2]))?;
        params.insert_normal("head.rationale.w1", &[d, d], std, &mut rng)?;
        params.insert_normal("head.rationale.w2", &[d, 1], std, &mut rng)?;
        params.insert_normal("head.attn.w1", &[d, d], std, &mut rng)?;
        params.insert_normal("head.attn.w2", &[d, 1], std, &mut rng)?;
        params.insert_normal("head.class.w", &[2 * d, NUM_CLASSES], std, &mut rng)?;
        params.insert("head.class.b", Tensor::zeros(&[NUM_CLASSES]))?;
        Ok(Self { encoder, params })
    }

    /// Wraps an existing parameter store, checking names and shapes against
    /// a freshly initialized model of the same config.
    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::Contract(
                "parameter names do not match the model layout".into(),
            ));
        }
        for ((name, a), b) in reference.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self {
            encoder: Encoder::from_config(config)?,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        self.params.bind(tape, trainable)
    }

    /// Embedding matrix `V` for the input, positions `0..T`.
    pub fn embed(&self, tape: &mut Tape, params: &Bound<'_>, input: &ModelInput) -> Result<Var> {
        let positions: Vec<usize> = (0..input.len()).collect();
        self.encoder
            .embed(tape, params, &input.token_ids, &positions)
    }

    /// Forward pass from a given embedding matrix (clean or perturbed).
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        params: &Bound<'_>,
        embeddings: Var,
        input: &ModelInput,
    ) -> Result<OutputVars> {
        if input.context_mask.len() != input.len() || input.attention_mask.len() != input.len() {
            return Err(Error::Contract("mask lengths differ from token count".into()));
        }
        let enc = self
            .encoder
            .encode(tape, params, embeddings, &input.attention_mask)?;
        let t = input.len();
        let span = affine(
            tape,
            enc.hidden,
            params.get("head.span.w"),
            params.get("head.span.b"),
        )?;
        let s = tape.slice_cols(span, 0, 1)?;
        let start_logits = tape.reshape(s, &[t])?;
        let e = tape.slice_cols(span, 1, 2)?;
        let end_logits = tape.reshape(e, &[t])?;

        let rationale = rationale_probs(
            tape,
            enc.hidden,
            params.get("head.rationale.w1"),
            params.get("head.rationale.w2"),
        )?;
        let summary = rationale_attention_pool(
            tape,
            enc.hidden,
            rationale,
            &input.attention_mask,
            params.get("head.attn.w1"),
            params.get("head.attn.w2"),
        )?;
        let class = class_logits(
            tape,
            enc.pooled,
            summary,
            params.get("head.class.w"),
            params.get("head.class.b"),
        )?;
        let (p_start, p_end) =
            joint_distributions(tape, start_logits, end_logits, class, &input.context_mask)?;
        Ok(OutputVars {
            embeddings,
            hidden: enc.hidden,
            pooled: enc.pooled,
            start_logits,
            end_logits,
            class_logits: class,
            rationale_probs: rationale,
            p_start,
            p_end,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound<'_>,
        input: &ModelInput,
    ) -> Result<OutputVars> {
        let emb = self.embed(tape, params, input)?;
        self.forward_from(tape, params, emb, input)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, input: &ModelInput) -> Result<QaModelOutput> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let vars = self.forward(&mut tape, &params, input)?;
        Ok(QaModelOutput::from_vars(&tape, &vars))
    }
}

/// Per-token rationale probability `sigmoid(w2 · relu(W1 h_t))`, `[T]`.
pub fn rationale_probs(tape: &mut Tape, hidden: Var, w1: Var, w2: Var) -> Result<Var> {
    let t = tape.shape(hidden)[0];
    let z = tape.matmul(hidden, w1)?;
    let z = tape.relu(z);
    let z = tape.matmul(z, w2)?;
    let z = tape.reshape(z, &[t])?;
    Ok(tape.sigmoid(z))
}

/// Rationale-weighted attention summary, `[d]`.
///
/// Scores are computed from `p_t · h_t`, but the weighted sum runs over the
/// unscaled `h_t`.
pub fn rationale_attention_pool(
    tape: &mut Tape,
    hidden: Var,
    p_r: Var,
    mask: &[bool],
    w1: Var,
    w2: Var,
) -> Result<Var> {
    let shape = tape.shape(hidden).to_vec();
    let t = shape[0];
    if tape.shape(p_r) != [t] || mask.len() != t {
        return Err(Error::Contract(format!(
            "rationale pooling: hidden {shape:?}, probabilities {:?}, mask {}",
            tape.shape(p_r),
            mask.len()
        )));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::Contract("rationale pooling over an all-masked input".into()));
    }
    let scaled = tape.scale_rows(hidden, p_r)?;
    let z = tape.matmul(scaled, w1)?;
    let z = tape.relu(z);
    let z = tape.matmul(z, w2)?;
    let scores = tape.reshape(z, &[t])?;
    let bias = tape.constant(Tensor::vector(
        mask.iter().map(|m| if *m { 0.0 } else { MASK_BIAS }).collect(),
    ));
    let scores = tape.add(scores, bias)?;
    let weights = tape.softmax(scores, 0)?;
    let weights = tape.reshape(weights, &[1, t])?;
    let pooled = tape.matmul(weights, hidden)?;
    Ok(tape.reshape(pooled, &[shape[1]])?)
}

/// Yes/No/Unknown logits from the affine map over `[rationale_repr ; pooled]`.
pub fn class_logits(
    tape: &mut Tape,
    pooled: Var,
    rationale_repr: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let joined = tape.concat(&[rationale_repr, pooled], 0)?;
    let n = tape.shape(joined)[0];
    let joined = tape.reshape(joined, &[1, n])?;
    let out = affine(tape, joined, w, b)?;
    Ok(tape.reshape(out, &[NUM_CLASSES])?)
}

/// Start and end distributions over the joint `T + 3` axis. Span logits of
/// non-context positions are pushed to `-1e30` first.
pub fn joint_distributions(
    tape: &mut Tape,
    start_logits: Var,
    end_logits: Var,
    class_logits: Var,
    context_mask: &[bool],
) -> Result<(Var, Var)> {
    let t = context_mask.len();
    if tape.shape(start_logits) != [t] || tape.shape(end_logits) != [t] {
        return Err(Error::Contract("span logits do not match the context mask".into()));
    }
    let bias = tape.constant(Tensor::vector(
        context_mask
            .iter()
            .map(|c| if *c { 0.0 } else { MASK_BIAS })
            .collect(),
    ));
    let mut out = [start_logits; 2];
    for (slot, logits) in out.iter_mut().zip([start_logits, end_logits]) {
        let masked = tape.add(logits, bias)?;
        let joint = tape.concat(&[masked, class_logits], 0)?;
        *slot = tape.softmax(joint, 0)?;
    }
    Ok((out[0], out[1]))
}

/// `-(1/2N) Σ (ln p_start[y_s] + ln p_end[y_e])`.
pub fn base_loss(tape: &mut Tape, batch: &[(Var, Var, &GoldLabel)]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("base loss over an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(2 * batch.len());
    for (ps, pe, gold) in batch {
        for (p, target) in [(*ps, gold.start), (*pe, gold.end)] {
            let len = tape.shape(p)[0];
            if target >= len {
                return Err(Error::Index {
                    what: "gold position",
                    index: target,
                    len,
                });
            }
            terms.push(tape.cross_entropy(p, target)?);
        }
    }
    let stacked = stack_scalars(tape, &terms)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, 1.0 / (2.0 * batch.len() as f64)))
}

/// Mean over examples of the mean binary cross-entropy over context tokens.
pub fn rationale_loss(tape: &mut Tape, batch: &[(Var, &[f64], &[bool])]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("rationale loss over an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (p, labels, context) in batch {
        terms.push(tape.binary_cross_entropy(*p, labels, context)?);
    }
    let stacked = stack_scalars(tape, &terms)?;
    Ok(tape.mean(stacked)?)
}

/// `base + beta1 · rationale`.
pub fn supervised_loss(tape: &mut Tape, base: Var, rationale: Var, beta1: f64) -> Result<Var> {
    let weighted = tape.scale(rationale, beta1);
    Ok(tape.add(base, weighted)?)
}

/// Scalars `[]` to a vector `[n]`.
pub(crate) fn stack_scalars(tape: &mut Tape, scalars: &[Var]) -> Result<Var> {
    let parts: Vec<Var> = scalars
        .iter()
        .map(|s| tape.reshape(*s, &[1]))
        .collect::<std::result::Result<_, _>>()?;
    Ok(tape.concat(&parts, 0)?)
}

/// A decoded prediction before it is turned into text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Answer {
    /// Inclusive token positions.
    Span { start: usize, end: usize },
    Yes,
    No,
    Unknown,
}

impl Answer {
    pub fn class_text(self) -> Option<&'static str> {
        match self {
            Answer::Span { .. } => None,
            Answer::Yes => Some("yes"),
            Answer::No => Some("no"),
            Answer::Unknown => Some("unknown"),
        }
    }
}

/// Highest-scoring answer: the best context span by `l_s[i] + l_e[j]`
/// (`i <= j`, `j - i < max_answer_len`) against `2 · l_c` for each class.
///
/// Ties go to the lexicographically smallest span, then to the class order
/// yes, no, unknown. Spans are considered before classes.
pub fn best_answer(
    start_logits: &[f64],
    end_logits: &[f64],
    class_logits: &[f64; NUM_CLASSES],
    context_mask: &[bool],
    max_answer_len: usize,
) -> Answer {
    let max_len = max_answer_len.max(1);
    if !context_mask.iter().any(|c| *c) {
        return Answer::Unknown;
    }
    let mut best: Option<(f64, Answer)> = None;
    let t = context_mask.len();
    for i in (0..t).filter(|&i| context_mask[i]) {
        for j in i..t.min(i + max_len) {
            if !context_mask[j] {
                continue;
            }
            let score = start_logits[i] + end_logits[j];
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, Answer::Span { start: i, end: j }));
            }
        }
    }
    for (c, answer) in [Answer::Yes, Answer::No, Answer::Unknown].into_iter().enumerate() {
        let score = CLASS_SCORE_FACTOR * class_logits[c];
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, answer));
        }
    }
    best.map(|(_, a)| a).unwrap_or(Answer::Unknown)
}

/// Text of the answer: a story slice between the character offsets of the
/// span's first and last tokens, or the class word.
///
/// `offsets[t]` is the character range of token `t` in `story`, `None` for
/// tokens outside the passage.
pub fn answer_text(answer: Answer, story: &str, offsets: &[Option<(usize, usize)>]) -> String {
    match answer {
        Answer::Span { start, end } => match (offsets.get(start), offsets.get(end)) {
            (Some(Some((s, _))), Some(Some((_, e)))) => char_slice(story, *s, *e).to_string(),
            _ => "unknown".into(),
        },
        other => other.class_text().unwrap_or("unknown").to_string(),
    }
}

/// Decodes a model output into answer text.
pub fn decode(
    output: &QaModelOutput,
    context_mask: &[bool],
    story: &str,
    offsets: &[Option<(usize, usize)>],
    max_answer_len: usize,
) -> String {
    let answer = best_answer(
        &output.start_logits,
        &output.end_logits,
        &output.class_logits,
        context_mask,
        max_answer_len,
    );
    answer_text(answer, story, offsets)
}

/// Substring by character (not byte) offsets, clamped to the string.
pub fn char_slice(s: &str, start: usize, end: usize) -> &str {
    let byte = |c: usize| s.char_indices().nth(c).map(|(b, _)| b).unwrap_or(s.len());
    let (b0, b1) = (byte(start), byte(end));
    if b0 >= b1 {
        ""
    } else {
        &s[b0..b1]
    }
}
