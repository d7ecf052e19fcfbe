//! Per-speaker embedding extraction from single- and multi-speaker audio.
//!
//! The core idea: a speaker embedding extractor pools frame-wise encoder
//! embeddings with per-dimension attention over time. To handle audio with
//! more than one speaker, attention is computed *recursively*: each decoding
//! step sees the cumulative sum of the previous steps' attention maps (the
//! coverage matrix) and is steered towards regions that have not yet been
//! used, emitting one embedding per speaker. A logistic head on the
//! pre-softmax attention logits scores whether another speaker remains,
//! which turns the recursion into a speaker counter.
//!
//! The crate is organized around that pipeline:
//!
//! * [`tensor`] — a small dense-`f64` tensor engine with reverse-mode
//!   automatic differentiation, covering exactly the ops the model needs.
//! * [`corpus`] — synthetic speaker corpus generation, SIR-controlled
//!   mixing, and a log-mel frontend for real audio.
//! * [`encoder`] — a frame-rate-preserving TDNN producing frame-wise
//!   embeddings.
//! * [`pooling`] — attentive statistics pooling, the recursive coverage
//!   mechanism, speaker counting, and inference-time length correction.
//! * [`losses`] — AAM-softmax, the permutation-free speaker loss, and the
//!   counting loss.
//! * [`trainer`] — Adam, the cyclic learning-rate schedule, checkpoints,
//!   and the end-to-end training loop.
//! * [`verification`] — trial construction, cosine scoring, EER/minDCF,
//!   and SIR/duration analyses.
//! * [`diarization`] — sliding-window extraction, auto-tuning spectral
//!   clustering with cannot-link constraints, and DER scoring.
//!
//! Everything is deterministic given a seed, and small enough to train and
//! evaluate on a laptop CPU.

pub mod corpus;
pub mod diarization;
pub mod encoder;
mod error;
pub mod losses;
pub mod pooling;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};
