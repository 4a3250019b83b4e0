//! Desk-scale masked block-diffusion language modeling.
//!
//! The crate provides everything needed to train, decode, and analyze small
//! diffusion language models on synthetic corpora:
//!
//! - [`tensor`] — dense tensors with tape-based reverse-mode differentiation
//! - [`model`] — a small decoder transformer with pluggable attention masks
//! - [`corruption`] — forward noising: linear schedule, block-wise clipping,
//!   fallback masking, and Monte-Carlo schedule statistics
//! - [`objectives`] — AR next-token, ELBO-weighted denoising, and unweighted
//!   warmup losses, plus the AR/diffusion equivalence oracle
//! - [`trainer`] — sequence packing, AdamW, and multi-stage curricula
//! - [`decoding`] — block-wise iterative denoising and greedy AR baselines
//! - [`knowledge`] — synthetic arithmetic corpora and brute-force candidate-set
//!   analysis of masked contexts
//! - [`gradcheck`] — the finite-difference verification suite
//! - [`checkpoint`] — binary tensor-table persistence
//! - [`config`] — flat key-value run configuration files

pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod decoding;
pub mod gradcheck;
pub mod knowledge;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("softmax row {row} has no allowed positions")]
    FullyMaskedRow { row: usize },
    #[error("target id {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("sequence length {len} exceeds model max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("sample {index} of length {len} does not fit context of {context_len}")]
    SampleTooLong {
        index: usize,
        len: usize,
        context_len: usize,
    },
    #[error("non-finite loss at stage {stage:?} step {step}")]
    NonFiniteLoss { stage: String, step: u64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
