//! Extractive conversational question answering: a small f64 autodiff
//! engine, a transformer encoder with span/class/rationale heads, AT, VAT and
//! distillation regularizers, a trainer, CoQA scoring and ensemble search.

// `!(x >= 0.0)` style checks are there to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binio;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod evalmetric;
pub mod gradcheck;
pub mod nn;
pub mod pipeline;
pub mod qa_model;
pub mod regularizers;
pub mod tensor;
pub mod trainer;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
