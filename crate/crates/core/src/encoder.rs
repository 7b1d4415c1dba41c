//! Small transformer encoder producing per-token hidden states and a pooled
//! sentence vector.
//!
//! Post-norm blocks: `x = LN(x + MHA(x))`, `x = LN(x + FFN(x))`, with a layer
//! norm applied to the summed token and position embeddings first. The pooled
//! output is `tanh(W · hidden[0] + b)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{affine, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Additive attention bias for masked key positions.
pub const MASK_BIAS: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            vocab_size: 2048,
            max_seq_len: 128,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Contract(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len == 0 || self.vocab_size == 0 || self.ffn_dim == 0 {
            return Err(Error::Contract(
                "max_seq_len, vocab_size and ffn_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Graph handles produced by [`Encoder::encode`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[T×d]` per-token hidden states.
    pub hidden: Var,
    /// `[d]` pooled output.
    pub pooled: Var,
    /// Attention probabilities `[T×T]`, indexed `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

/// Which learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Layer(usize),
    Head,
}

/// Maps a parameter name to its group. Anything outside the encoder body
/// (pooler and task heads) is in [`ParamGroup::Head`].
pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("embed.") {
        ParamGroup::Embedding
    } else if let Some(rest) = name.strip_prefix("layer") {
        let idx: String = rest.chars().take_while(char::is_ascii_digit).collect();
        idx.parse().map(ParamGroup::Layer).unwrap_or(ParamGroup::Head)
    } else {
        ParamGroup::Head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
}

impl Encoder {
    /// Adds the encoder's parameters to `store`: normal(0, init_std) weight
    /// matrices, zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let std = config.init_std;
        store.insert_normal("embed.token", &[config.vocab_size, d], std, rng)?;
        store.insert_normal("embed.position", &[config.max_seq_len, d], std, rng)?;
        store.insert("embed.ln.gain", Tensor::full(&[d], 1.0))?;
        store.insert("embed.ln.bias", Tensor::zeros(&[d]))?;
        for l in 0..config.num_layers {
            for proj in ["q", "k", "v", "o"] {
                store.insert_normal(&format!("layer{l}.attn.{proj}.w"), &[d, d], std, rng)?;
                store.insert(format!("layer{l}.attn.{proj}.b"), Tensor::zeros(&[d]))?;
            }
            store.insert(format!("layer{l}.ln1.gain"), Tensor::full(&[d], 1.0))?;
            store.insert(format!("layer{l}.ln1.bias"), Tensor::zeros(&[d]))?;
            store.insert_normal(&format!("layer{l}.ffn.in.w"), &[d, config.ffn_dim], std, rng)?;
            store.insert(format!("layer{l}.ffn.in.b"), Tensor::zeros(&[config.ffn_dim]))?;
            store.insert_normal(&format!("layer{l}.ffn.out.w"), &[config.ffn_dim, d], std, rng)?;
            store.insert(format!("layer{l}.ffn.out.b"), Tensor::zeros(&[d]))?;
            store.insert(format!("layer{l}.ln2.gain"), Tensor::full(&[d], 1.0))?;
            store.insert(format!("layer{l}.ln2.bias"), Tensor::zeros(&[d]))?;
        }
        store.insert_normal("pool.w", &[d, d], std, rng)?;
        store.insert("pool.b", Tensor::zeros(&[d]))?;
        Ok(Self { config })
    }

    /// Rebuilds an encoder around parameters that already exist in a store.
    pub fn from_config(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Sum of token and position embeddings, `[T×d]`.
    ///
    /// The returned node's gradient is readable after backward, which is what
    /// the embedding-space perturbations consume.
    pub fn embed(
        &self,
        tape: &mut Tape,
        params: &Bound<'_>,
        token_ids: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        if token_ids.len() != positions.len() {
            return Err(Error::Contract(format!(
                "{} token ids but {} positions",
                token_ids.len(),
                positions.len()
            )));
        }
        if token_ids.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                token_ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                len: self.config.vocab_size,
            });
        }
        let tok = tape.gather_rows(params.get("embed.token"), token_ids)?;
        let pos = tape.gather_rows(params.get("embed.position"), positions)?;
        Ok(tape.add(tok, pos)?)
    }

    /// Runs the encoder stack over an embedding matrix.
    ///
    /// `mask[t] == false` marks padding: no position attends to it.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &Bound<'_>,
        embeddings: Var,
        mask: &[bool],
    ) -> Result<EncoderOutput> {
        let shape = tape.shape(embeddings).to_vec();
        let d = self.config.hidden_dim;
        if shape.len() != 2 || shape[1] != d || shape[0] != mask.len() {
            return Err(Error::Contract(format!(
                "embeddings of shape {shape:?} do not match mask length {} and hidden_dim {d}",
                mask.len()
            )));
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::Contract("every position is masked".into()));
        }
        let t = mask.len();
        let eps = self.config.layer_norm_eps;
        let mut bias_data = Vec::with_capacity(t * t);
        for _ in 0..t {
            bias_data.extend(mask.iter().map(|m| if *m { 0.0 } else { MASK_BIAS }));
        }
        let attn_bias = tape.constant(Tensor::matrix(t, t, bias_data)?);

        let mut x = tape.layer_norm(
            embeddings,
            params.get("embed.ln.gain"),
            params.get("embed.ln.bias"),
            eps,
        )?;
        let mut attention = Vec::with_capacity(self.config.num_layers);
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..self.config.num_layers {
            let p = |n: &str| params.get(&format!("layer{l}.{n}"));
            let q = affine(tape, x, p("attn.q.w"), p("attn.q.b"))?;
            let k = affine(tape, x, p("attn.k.w"), p("attn.k.b"))?;
            let v = affine(tape, x, p("attn.v.w"), p("attn.v.b"))?;
            let mut heads = Vec::with_capacity(self.config.num_heads);
            let mut probs = Vec::with_capacity(self.config.num_heads);
            for h in 0..self.config.num_heads {
                let (lo, hi) = (h * hd, (h + 1) * hd);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let scores = tape.add(scores, attn_bias)?;
                let a = tape.softmax(scores, 1)?;
                probs.push(a);
                heads.push(tape.matmul(a, vh)?);
            }
            attention.push(probs);
            let merged = tape.concat(&heads, 1)?;
            let attn_out = affine(tape, merged, p("attn.o.w"), p("attn.o.b"))?;
            let res = tape.add(x, attn_out)?;
            x = tape.layer_norm(res, p("ln1.gain"), p("ln1.bias"), eps)?;
            let inner = affine(tape, x, p("ffn.in.w"), p("ffn.in.b"))?;
            let inner = tape.relu(inner);
            let ffn = affine(tape, inner, p("ffn.out.w"), p("ffn.out.b"))?;
            let res = tape.add(x, ffn)?;
            x = tape.layer_norm(res, p("ln2.gain"), p("ln2.bias"), eps)?;
        }
        let first = tape.gather_rows(x, &[0])?;
        let pooled = affine(tape, first, params.get("pool.w"), params.get("pool.b"))?;
        let pooled = tape.tanh(pooled);
        let pooled = tape.reshape(pooled, &[d])?;
        Ok(EncoderOutput {
            hidden: x,
            pooled,
            attention,
        })
    }
}
