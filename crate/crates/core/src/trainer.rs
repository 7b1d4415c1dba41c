//! AdamW training with warmup/decay, clipping, layer-wise learning rates,
//! checkpoints and teacher-label generation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{atomic_write, BinReader, BinWriter};
use crate::data::ReformulatedExample;
use crate::encoder::{param_group, EncoderConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::qa_model::QaModel;
use crate::regularizers::{
    teacher_label, total_loss, LossBreakdown, LossWeights, Mode, PerturbationConfig, TeacherLabel,
    TeacherLabelSet,
};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub layerwise_decay: f64,
    pub weights: LossWeights,
    pub perturbation: PerturbationConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 48,
            epochs: 2,
            max_steps: None,
            warmup_fraction: 0.06,
            clip_norm: 1.0,
            layerwise_decay: 0.9,
            weights: LossWeights::default(),
            perturbation: PerturbationConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(format!("config key {key}"), format!("bad value {value:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Contract(format!("{k} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || (self.epochs == 0 && self.max_steps.is_none()) {
            return Err(Error::Contract("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Contract(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.layerwise_decay > 0.0 && self.layerwise_decay <= 1.0) {
            return Err(Error::Contract(format!(
                "layerwise_decay must lie in (0, 1], got {}",
                self.layerwise_decay
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Contract("adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Contract("weight_decay must be nonnegative".into()));
        }
        self.weights.validate()?;
        self.perturbation.validate()
    }

    /// Sets one field by its config-file key. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "max_steps" => {
                self.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "warmup_fraction" => self.warmup_fraction = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "layerwise_decay" => self.layerwise_decay = parse_value(key, value)?,
            "beta1" => self.weights.beta1 = parse_value(key, value)?,
            "beta2" => self.weights.beta2 = parse_value(key, value)?,
            "beta3" => self.weights.beta3 = parse_value(key, value)?,
            "beta4" => self.weights.beta4 = parse_value(key, value)?,
            "epsilon" => self.perturbation.epsilon = parse_value(key, value)?,
            "xi" => self.perturbation.xi = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Sets an encoder field by key. Returns `false` for unknown keys.
pub fn set_encoder_field(config: &mut EncoderConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "num_layers" => config.num_layers = parse_value(key, value)?,
        "num_heads" => config.num_heads = parse_value(key, value)?,
        "hidden_dim" => config.hidden_dim = parse_value(key, value)?,
        "ffn_dim" => config.ffn_dim = parse_value(key, value)?,
        "max_seq_len" => config.max_seq_len = parse_value(key, value)?,
        "layer_norm_eps" => config.layer_norm_eps = parse_value(key, value)?,
        "init_std" => config.init_std = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(format!("config line {}", i + 1), "expected key = value"));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).ceil() as usize
}

/// Linear ramp from 0 to `lr` over the warmup, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let warm = warmup_steps(total_steps, config.warmup_fraction);
    let lr = config.learning_rate;
    if step >= total_steps {
        0.0
    } else if step < warm {
        lr * (step as f64 / warm as f64)
    } else {
        lr * ((total_steps - step) as f64 / (total_steps - warm) as f64)
    }
}

/// Layer-wise rate. `layer_index` counts from the top: 0 is the heads,
/// `1..=num_layers` the encoder layers from the top down, `num_layers + 1`
/// the embeddings.
pub fn layer_lr(base_lr: f64, layer_index: usize, num_layers: usize, decay: f64) -> f64 {
    base_lr * decay.powi(layer_index.min(num_layers + 1) as i32)
}

/// Distance from the top for a parameter group.
pub fn group_depth(group: ParamGroup, num_layers: usize) -> usize {
    match group {
        ParamGroup::Head => 0,
        ParamGroup::Layer(i) => num_layers - i.min(num_layers - 1),
        ParamGroup::Embedding => num_layers + 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with decoupled weight decay on matrices only.
/// `lrs[i]` is the rate for parameter `i`.
pub fn adamw_update(
    params: &mut ParamStore,
    state: &mut OptimizerState,
    grads: &[Tensor],
    lrs: &[f64],
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || lrs.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let decay = if p.ndim() >= 2 { config.weight_decay } else { 0.0 };
        let lr = lrs[i];
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let update = (mj / c1) / ((vj / c2).sqrt() + config.adam_eps);
            *pj -= lr * (update + decay * *pj);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// Batch means of each loss term.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the three parts
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_finite(b: &LossBreakdown, id: &str) -> Result<()> {
    for (name, v) in [
        ("base", b.base),
        ("rationale", b.rationale),
        ("adversarial", b.adversarial),
        ("virtual_adversarial", b.virtual_adversarial),
        ("distillation", b.distillation),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: format!("{name} (example {id})"),
            });
        }
    }
    Ok(())
}

/// Loss values and parameter gradients of the batch mean objective.
pub fn batch_gradients(
    model: &QaModel,
    batch: &[&ReformulatedExample],
    config: &TrainConfig,
    mode: Mode,
    teacher: Option<&TeacherLabelSet>,
    step_seed: u64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let per_example: Vec<(LossBreakdown, Vec<Tensor>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let label: Option<&TeacherLabel> = match (mode, teacher) {
                (Mode::Student, Some(set)) => Some(set.get(&ex.id).ok_or_else(|| {
                    Error::Contract(format!("no teacher label for example {}", ex.id))
                })?),
                _ => None,
            };
            let input = ex.model_input();
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let out = total_loss(
                &mut tape,
                model,
                &params,
                &input,
                &ex.gold,
                &config.weights,
                &config.perturbation,
                mode,
                label,
                derive_seed(step_seed, i as u64, 1),
            )?;
            check_finite(&out.breakdown, &ex.id)?;
            tape.backward(out.total)?;
            Ok((out.breakdown, params.grads(&tape)))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (b, g) in &per_example {
        mean.base += b.base / n;
        mean.rationale += b.rationale / n;
        mean.supervised += b.supervised / n;
        mean.adversarial += b.adversarial / n;
        mean.virtual_adversarial += b.virtual_adversarial / n;
        mean.distillation += b.distillation / n;
        mean.total += b.total / n;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, x) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += x / n;
            }
        }
    }
    if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite {
            component: format!("gradient of {}", model.params().names()[bad]),
        });
    }
    Ok((mean, grads))
}

/// Per-parameter learning rates for step `lr`.
pub fn parameter_lrs(model: &QaModel, lr: f64, decay: f64) -> Vec<f64> {
    let layers = model.config().num_layers;
    model
        .params()
        .names()
        .iter()
        .map(|n| layer_lr(lr, group_depth(param_group(n), layers), layers, decay))
        .collect()
}

/// Full update on one batch: losses and gradients, clipping, AdamW.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut QaModel,
    opt: &mut OptimizerState,
    batch: &[&ReformulatedExample],
    config: &TrainConfig,
    mode: Mode,
    teacher: Option<&TeacherLabelSet>,
    lr: f64,
) -> Result<StepReport> {
    let step_seed = derive_seed(config.seed, opt.step, 0);
    let (loss, mut grads) = batch_gradients(model, batch, config, mode, teacher, step_seed)?;
    let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
    let clipped_norm = global_norm(&grads);
    let lrs = parameter_lrs(model, lr, config.layerwise_decay);
    adamw_update(model.params_mut(), opt, &grads, &lrs, config)?;
    Ok(StepReport {
        step: opt.step,
        lr,
        loss,
        grad_norm,
        clipped_norm,
    })
}

/// Fixed batch plan over the usable examples.
pub struct Schedule<'a> {
    examples: Vec<&'a ReformulatedExample>,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    seed: u64,
    batch_size: usize,
}

impl<'a> Schedule<'a> {
    pub fn new(examples: &'a [ReformulatedExample], config: &TrainConfig) -> Result<Self> {
        let examples: Vec<_> = examples.iter().filter(|e| e.usable).collect();
        if examples.is_empty() {
            return Err(Error::Contract("no usable training examples".into()));
        }
        let steps_per_epoch = examples.len().div_ceil(config.batch_size);
        let total_steps = config.max_steps.unwrap_or(steps_per_epoch * config.epochs);
        Ok(Self {
            examples,
            steps_per_epoch,
            total_steps,
            seed: config.seed,
            batch_size: config.batch_size,
        })
    }

    /// Examples of global step `step`; each epoch is a fresh shuffle.
    pub fn batch(&self, step: usize) -> Vec<&'a ReformulatedExample> {
        let epoch = step / self.steps_per_epoch;
        let within = step % self.steps_per_epoch;
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch as u64, 2));
        order.shuffle(&mut rng);
        order
            .iter()
            .skip(within * self.batch_size)
            .take(self.batch_size)
            .map(|&i| self.examples[i])
            .collect()
    }
}

pub const LOG_HEADER: &str =
    "step\tlr\tbase\trationale\tadversarial\tvirtual_adversarial\tdistillation\ttotal\tgrad_norm";

pub fn write_log_line<W: Write + ?Sized>(w: &mut W, r: &StepReport) -> Result<()> {
    let l = &r.loss;
    writeln!(
        w,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.step, r.lr, l.base, l.rationale, l.adversarial, l.virtual_adversarial, l.distillation, l.total, r.grad_norm
    )?;
    Ok(())
}

/// Runs from the optimizer's current step up to `until` (exclusive),
/// clamped to the schedule's total.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut QaModel,
    opt: &mut OptimizerState,
    examples: &[ReformulatedExample],
    config: &TrainConfig,
    mode: Mode,
    teacher: Option<&TeacherLabelSet>,
    until: Option<usize>,
    log: &mut dyn Write,
) -> Result<Vec<StepReport>> {
    config.validate()?;
    if mode == Mode::Student && teacher.is_none() {
        return Err(Error::Contract("student training needs teacher labels".into()));
    }
    let schedule = Schedule::new(examples, config)?;
    let end = until.unwrap_or(schedule.total_steps).min(schedule.total_steps);
    let mut reports = Vec::new();
    for step in opt.step as usize..end {
        let batch = schedule.batch(step);
        let lr = lr_at(step, schedule.total_steps, config);
        let r = train_step(model, opt, &batch, config, mode, teacher, lr)?;
        write_log_line(log, &r)?;
        reports.push(r);
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    encoder: EncoderConfig,
    train: TrainConfig,
    vocab_hash: String,
    mode: Mode,
}

/// Everything needed to resume or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: QaModel,
    pub optimizer: OptimizerState,
    pub train_config: TrainConfig,
    pub vocab_hash: String,
    pub mode: Mode,
}

const CKPT_MAGIC: &[u8; 8] = b"CQACKPT1";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            encoder: self.model.config().clone(),
            train: self.train_config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            mode: self.mode,
        };
        let mut w = BinWriter::new(CKPT_MAGIC);
        w.str(&serde_json::to_string(&header)?);
        w.u64(self.optimizer.step);
        let params = self.model.params();
        w.u64(params.len() as u64);
        for (i, (name, t)) in params.iter().enumerate() {
            w.str(name);
            w.u64(t.ndim() as u64);
            for d in t.shape() {
                w.u64(*d as u64);
            }
            w.f64s(t.data());
            w.f64s(self.optimizer.m[i].data());
            w.f64s(self.optimizer.v[i].data());
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes, CKPT_MAGIC, "checkpoint")?;
        let header: CheckpointHeader = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::parse("checkpoint header", e.to_string()))?;
        let step = r.u64()?;
        let n = r.u64()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let name = r.str()?;
            let nd = r.u64()? as usize;
            if nd > 8 {
                return Err(Error::parse("checkpoint", format!("parameter {name} has {nd} dims")));
            }
            let shape: Vec<usize> = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let value = Tensor::new(shape.clone(), r.f64s()?)?;
            m.push(Tensor::new(shape.clone(), r.f64s()?)?);
            v.push(Tensor::new(shape, r.f64s()?)?);
            params.insert(name, value)?;
        }
        r.finish()?;
        Ok(Self {
            model: QaModel::from_params(header.encoder, params)?,
            optimizer: OptimizerState { step, m, v },
            train_config: header.train,
            vocab_hash: header.vocab_hash,
            mode: header.mode,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::binio::read_file(path)?)
    }

    /// Loads and refuses a checkpoint built against another vocabulary.
    pub fn load_expecting(path: &Path, vocab_hash: &str) -> Result<Self> {
        let c = Self::load(path)?;
        c.check_vocab(vocab_hash)?;
        Ok(c)
    }

    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::HashMismatch {
                what: "vocabulary",
                expected: vocab_hash.to_string(),
                found: self.vocab_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Averaged clean distributions of several teachers for every example.
pub fn generate_teacher_labels(
    teachers: &[Checkpoint],
    examples: &[ReformulatedExample],
    vocab_hash: &str,
) -> Result<TeacherLabelSet> {
    if teachers.is_empty() {
        return Err(Error::Contract("teacher labels need at least one checkpoint".into()));
    }
    for t in teachers {
        t.check_vocab(vocab_hash)?;
    }
    let labels: Vec<(String, TeacherLabel)> = examples
        .par_iter()
        .map(|ex| {
            let input = ex.model_input();
            let outs = teachers
                .iter()
                .map(|t| {
                    let o = t.model.predict(&input)?;
                    Ok(TeacherLabel {
                        p_start: o.p_start,
                        p_end: o.p_end,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((ex.id.clone(), teacher_label(&outs)?))
        })
        .collect::<Result<_>>()?;
    let mut set = TeacherLabelSet::new();
    set.vocab_hash = vocab_hash.to_string();
    for (id, l) in labels {
        set.insert(id, l)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{corpus_texts, synthetic_corpus, SyntheticConfig};
    use crate::data::{build_examples, ExampleConfig, Tokenizer, Vocab, WordTokenizer};
    use crate::qa_model::{base_loss, rationale_loss, supervised_loss};

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig { learning_rate: 2.0, warmup_fraction: 0.1, ..Default::default() };
        assert_eq!(lr_at(0, 100, &c), 0.0);
        assert_eq!(lr_at(10, 100, &c), 2.0);
        assert_eq!(lr_at(5, 100, &c), 1.0);
        assert_eq!(lr_at(100, 100, &c), 0.0);
        assert!((lr_at(55, 100, &c) - 1.0).abs() < 1e-12);
        let none = TrainConfig { warmup_fraction: 0.0, ..c };
        assert_eq!(lr_at(0, 10, &none), 2.0);
    }

    #[test]
    fn layer_rates() {
        let lr = 1.0;
        assert_eq!(layer_lr(lr, 3, 2, 1.0), 1.0);
        let rates: Vec<f64> = [ParamGroup::Head, ParamGroup::Layer(1), ParamGroup::Layer(0), ParamGroup::Embedding]
            .iter()
            .map(|g| layer_lr(lr, group_depth(*g, 2), 2, 0.9))
            .collect();
        let expect = [1.0, 0.9, 0.81, 0.729];
        for (r, e) in rates.iter().zip(expect) {
            assert!((r - e).abs() < 1e-15);
        }
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        // one scalar parameter, constant gradient g: the first Adam step moves by lr·sign(g)
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
        let c = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(&params);
        let g = vec![Tensor::new(vec![1, 1], vec![0.2]).unwrap()];
        adamw_update(&mut params, &mut st, &g, &[0.1], &c).unwrap();
        let expected = 0.5 - 0.1 * 0.2 / (0.2 + 1e-8);
        assert!((params.tensors()[0].data()[0] - expected).abs() < 1e-15);
        // second step by hand
        let (m, v) = (0.9 * 0.02 + 0.1 * 0.2, 0.999 * 0.00004 + 0.001 * 0.04);
        let upd = (m / (1.0 - 0.81)) / ((v / (1.0 - 0.998001f64)).sqrt() + 1e-8);
        adamw_update(&mut params, &mut st, &g, &[0.1], &c).unwrap();
        assert!((params.tensors()[0].data()[0] - (expected - 0.1 * upd)).abs() < 1e-15);
        // decoupled decay shrinks matrices only
        let mut p2 = ParamStore::new();
        p2.insert("m", Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        p2.insert("b", Tensor::vector(vec![1.0])).unwrap();
        let mut s2 = OptimizerState::new(&p2);
        let zero = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        adamw_update(&mut p2, &mut s2, &zero, &[0.1, 0.1], &TrainConfig::default()).unwrap();
        assert!((p2.tensors()[0].data()[0] - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert_eq!(p2.tensors()[1].data()[0], 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]), Tensor::vector(vec![12.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        assert!(global_norm(&g) <= 1.0 + 1e-9);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.1);
    }

    #[test]
    fn config_file_keys() {
        let text = "learning_rate = 0.01 # fast\n\nbatch_size=3\nbeta2 = 0\nmax_steps = 7\n";
        let mut c = TrainConfig::default();
        for (k, v) in parse_config_text(text).unwrap() {
            assert!(c.set(&k, &v).unwrap());
        }
        assert_eq!((c.learning_rate, c.batch_size, c.weights.beta2, c.max_steps), (0.01, 3, 0.0, Some(7)));
        assert!(!c.set("nope", "1").unwrap());
        assert!(c.set("epochs", "x").is_err());
        assert!(parse_config_text("just words").is_err());
    }

    fn synthetic(n: usize) -> (Vec<ReformulatedExample>, WordTokenizer, EncoderConfig) {
        let docs = synthetic_corpus(&SyntheticConfig { num_docs: n, ..Default::default() });
        let texts = corpus_texts(&docs);
        let vocab = Vocab::build(texts.iter().map(String::as_str), 1000, 1, true).unwrap();
        let tok = WordTokenizer::new(vocab, true);
        let ex_cfg = ExampleConfig { max_seq_len: 64, ..Default::default() };
        let built = build_examples(&docs, &tok, &ex_cfg).unwrap();
        let enc = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 16,
            ffn_dim: 32,
            vocab_size: tok.vocab_size(),
            max_seq_len: 64,
            ..Default::default()
        };
        (built.examples, tok, enc)
    }

    #[test]
    fn plain_objective_matches_assembled_sum() {
        let (examples, _, enc) = synthetic(2);
        let model = QaModel::new(enc, 1).unwrap();
        let batch: Vec<&ReformulatedExample> = examples.iter().take(3).collect();
        let c = TrainConfig {
            weights: LossWeights { beta2: 0.0, beta3: 0.0, beta4: 0.0, ..Default::default() },
            ..cfg()
        };
        let (loss, _) = batch_gradients(&model, &batch, &c, Mode::Teacher, None, 0).unwrap();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let inputs: Vec<_> = batch.iter().map(|e| e.model_input()).collect();
        let outs: Vec<_> = inputs.iter().map(|i| model.forward(&mut tape, &params, i).unwrap()).collect();
        let b: Vec<_> = outs.iter().zip(&batch).map(|(o, e)| (o.p_start, o.p_end, &e.gold)).collect();
        let base = base_loss(&mut tape, &b).unwrap();
        let masks: Vec<Vec<bool>> = batch.iter().map(|e| e.context_mask()).collect();
        let r: Vec<_> = outs
            .iter()
            .zip(&batch)
            .zip(&masks)
            .map(|((o, e), m)| (o.rationale_probs, e.gold.rationale.as_slice(), m.as_slice()))
            .collect();
        let rt = rationale_loss(&mut tape, &r).unwrap();
        let sup = supervised_loss(&mut tape, base, rt, 5.0).unwrap();
        assert!((tape.value(sup).item() - loss.total).abs() < 1e-12);
    }

    #[test]
    fn plain_update_ignores_zeroed_regularizers() {
        let (examples, _, enc) = synthetic(2);
        let batch: Vec<&ReformulatedExample> = examples.iter().take(3).collect();
        let zeroed = TrainConfig {
            weights: LossWeights { beta2: 0.0, beta3: 0.0, beta4: 0.0, ..Default::default() },
            perturbation: PerturbationConfig { epsilon: 0.0, xi: 1e-3 },
            ..cfg()
        };
        let flat = TrainConfig {
            perturbation: PerturbationConfig { epsilon: 0.0, xi: 1e-3 },
            ..cfg()
        };
        let mut a = QaModel::new(enc.clone(), 4).unwrap();
        let mut b = a.clone();
        let mut oa = OptimizerState::new(a.params());
        let mut ob = oa.clone();
        train_step(&mut a, &mut oa, &batch, &zeroed, Mode::Teacher, None, 1e-3).unwrap();
        train_step(&mut b, &mut ob, &batch, &flat, Mode::Teacher, None, 1e-3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases_and_resume_is_exact() {
        let (examples, tok, enc) = synthetic(7);
        let examples: Vec<_> = examples.into_iter().take(20).collect();
        let c = TrainConfig { learning_rate: 3e-3, batch_size: 4, max_steps: Some(50), seed: 5, ..Default::default() };
        let mut model = QaModel::new(enc.clone(), 2).unwrap();
        let mut opt = OptimizerState::new(model.params());
        let mut log = Vec::new();
        let reps = train(&mut model, &mut opt, &examples, &c, Mode::Teacher, None, None, &mut log).unwrap();
        assert_eq!(reps.len(), 50);
        assert!(reps.iter().all(|r| r.clipped_norm <= c.clip_norm + 1e-9));
        let first: f64 = reps[..5].iter().map(|r| r.loss.supervised).sum();
        let last: f64 = reps[45..].iter().map(|r| r.loss.supervised).sum();
        assert!(last < first, "first {first} last {last}");

        // interrupted at step 20, checkpointed, resumed
        let mut m2 = QaModel::new(enc, 2).unwrap();
        let mut o2 = OptimizerState::new(m2.params());
        let mut log2 = Vec::new();
        train(&mut m2, &mut o2, &examples, &c, Mode::Teacher, None, Some(20), &mut log2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = Checkpoint { model: m2, optimizer: o2, train_config: c.clone(), vocab_hash: tok.vocab_hash(), mode: Mode::Teacher };
        ck.save(&path).unwrap();
        let mut back = Checkpoint::load_expecting(&path, &tok.vocab_hash()).unwrap();
        assert!(matches!(Checkpoint::load_expecting(&path, "other"), Err(Error::HashMismatch { .. })));
        train(&mut back.model, &mut back.optimizer, &examples, &c, Mode::Teacher, None, None, &mut log2).unwrap();
        assert_eq!(log, log2);
        assert_eq!(back.model, model);
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let (_, tok, enc) = synthetic(1);
        let model = QaModel::new(enc, 9).unwrap();
        let ck = Checkpoint {
            optimizer: OptimizerState::new(model.params()),
            model,
            train_config: cfg(),
            vocab_hash: tok.vocab_hash(),
            mode: Mode::Teacher,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Parse { .. })));
        }
    }

    #[test]
    fn teacher_labels_from_one_teacher() {
        let (examples, tok, enc) = synthetic(2);
        let model = QaModel::new(enc, 3).unwrap();
        let ck = Checkpoint {
            optimizer: OptimizerState::new(model.params()),
            model,
            train_config: cfg(),
            vocab_hash: tok.vocab_hash(),
            mode: Mode::Teacher,
        };
        let set = generate_teacher_labels(std::slice::from_ref(&ck), &examples, &tok.vocab_hash()).unwrap();
        assert_eq!(set.len(), examples.len());
        for ex in &examples {
            let out = ck.model.predict(&ex.model_input()).unwrap();
            let l = set.get(&ex.id).unwrap();
            assert_eq!(l.p_start, out.p_start);
            assert!((l.p_end.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let back = TeacherLabelSet::from_bytes(&set.to_bytes()).unwrap();
        assert_eq!(back, set);
        assert!(matches!(
            generate_teacher_labels(&[ck], &examples, "x"),
            Err(Error::HashMismatch { .. })
        ));
    }
}
