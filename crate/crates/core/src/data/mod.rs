//! Corpus loading, tokenization and example assembly.

pub mod coqa;
pub mod examples;
pub mod synthetic;
pub mod tokenizer;

pub use coqa::{load_corpus, CoqaDocument, LoadOptions, Turn};
pub use examples::{
    build_example, build_examples, corpus_stats, reformulate, select_gold_span, ExampleConfig,
    HistoryAnswer, ReformulatedExample,
};
pub use tokenizer::{Special, Token, Tokenizer, Vocab, WordTokenizer};
