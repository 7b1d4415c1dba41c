//! Word-level tokenizer with character offsets and a fixed vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Special tokens, in vocabulary order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    Pad,
    Unk,
    Cls,
    Sep,
    Question,
    Answer,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Pad,
        Special::Unk,
        Special::Cls,
        Special::Sep,
        Special::Question,
        Special::Answer,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Special::Pad => "[PAD]",
            Special::Unk => "[UNK]",
            Special::Cls => "[CLS]",
            Special::Sep => "[SEP]",
            Special::Question => "[Q]",
            Special::Answer => "[A]",
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }
}

/// A token with its character range `[start, end)` in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Anything that can split text into offset-carrying tokens and map them to
/// ids. A BPE model can sit behind the same interface.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn token_id(&self, token: &str) -> usize;
    fn id_to_token(&self, id: usize) -> Option<&str>;
    fn vocab_size(&self) -> usize;
    fn vocab_hash(&self) -> String;

    fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenize(text).iter().map(|t| self.token_id(&t.text)).collect()
    }

    fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|id| self.id_to_token(*id).unwrap_or(Special::Unk.text()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Splits on whitespace; each punctuation character is its own token; runs
/// of alphanumerics form words. Offsets are in characters.
pub fn split_words(text: &str, lowercase: bool) -> Vec<Token> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let push = |cur: &mut String, start: usize, end: usize, out: &mut Vec<Token>| {
        if !cur.is_empty() {
            let text = if lowercase { cur.to_lowercase() } else { cur.clone() };
            out.push(Token { text, start, end });
            cur.clear();
        }
    };
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if c.is_alphanumeric() {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        } else {
            push(&mut current, start, i, &mut out);
            if !c.is_whitespace() {
                let text = if lowercase { c.to_lowercase().collect() } else { c.to_string() };
                out.push(Token {
                    text,
                    start: i,
                    end: i + 1,
                });
            }
        }
    }
    push(&mut current, start, n, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from raw tokens; special tokens are prepended when missing.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = Special::ALL.iter().map(|s| s.text().to_string()).collect();
        let mut rest: Vec<String> = tokens.into_iter().collect();
        if rest.len() >= all.len() && rest[..all.len()] == all[..] {
            rest.drain(..all.len());
        }
        all.extend(rest);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Most frequent words of `texts` (ties by text), capped at `max_size`
    /// entries including specials.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_count: usize,
        lowercase: bool,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_words(text, lowercase) {
                *counts.entry(tok.text).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !Special::ALL.iter().any(|s| s.text() == t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(Special::ALL.len());
        Self::from_tokens(entries.into_iter().take(room).map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let tokens = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens.into_iter().filter(|t| !t.is_empty()))
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(writer, "{t}")?;
        }
        Ok(())
    }
}

/// The default tokenizer: [`split_words`] plus a vocabulary lookup, with
/// unknown words mapped to `[UNK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTokenizer {
    vocab: Vocab,
    lowercase: bool,
    hash: String,
}

impl WordTokenizer {
    pub fn new(vocab: Vocab, lowercase: bool) -> Self {
        let mut h = Sha256::new();
        h.update(format!("lowercase={lowercase}\n"));
        for t in vocab.tokens() {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            vocab,
            lowercase,
            hash,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }
}

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        split_words(text, self.lowercase)
    }

    fn token_id(&self, token: &str) -> usize {
        self.vocab.get(token).unwrap_or(Special::Unk.id())
    }

    fn id_to_token(&self, id: usize) -> Option<&str> {
        self.vocab.tokens.get(id).map(String::as_str)
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn vocab_hash(&self) -> String {
        self.hash.clone()
    }
}
