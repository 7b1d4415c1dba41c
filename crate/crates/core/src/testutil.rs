//! Small fixtures shared by unit tests.

use crate::encoder::EncoderConfig;
use crate::qa_model::{AnswerType, GoldLabel, ModelInput, QaModel};

pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        hidden_dim: 8,
        ffn_dim: 16,
        vocab_size: 20,
        max_seq_len: 16,
        init_std: 0.3,
        ..EncoderConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> QaModel {
    QaModel::new(tiny_config(), seed).unwrap()
}

/// `[CLS] q q [SEP] c c c c [SEP]` with the answer at context tokens 5..=6.
pub fn tiny_example() -> (ModelInput, GoldLabel) {
    let ids = vec![2, 7, 8, 3, 9, 10, 11, 12, 3];
    let ctx: Vec<bool> = (0..9).map(|i| (4..8).contains(&i)).collect();
    let mut rationale = vec![0.0; 9];
    rationale[5] = 1.0;
    rationale[6] = 1.0;
    let gold = GoldLabel {
        answer_type: AnswerType::Span,
        start: 5,
        end: 6,
        rationale,
    };
    (ModelInput::new(ids, ctx), gold)
}
