//! Prefix sharing for paired preference optimization, at desk scale.
//!
//! Paired preference tuning normally formats every sample as two full rows —
//! `prompt||chosen` and `prompt||rejected` — paying for the shared prompt
//! twice. This crate formats both completions behind one copy of the prompt,
//! uses a block-sparse attention mask to keep the two responses independent,
//! and verifies that the resulting per-completion log-probabilities match the
//! paired format to floating-point tolerance while processing fewer tokens.
//!
//! The pieces:
//!
//! * [`numerics`] — deterministic dense kernels (matmul, masked softmax, RMS
//!   norm, rotary embedding).
//! * [`masks`] — the attention-mask predicates and the Empty/Partial/Full
//!   block classifier that lets attention skip masked blocks.
//! * [`layout`] — paired and prefix-shared row construction, next-token
//!   targets, batch collation, JSONL dataset input.
//! * [`packing`] — First-Fit-Decreasing packing over paired or shared units.
//! * [`model`] — a toy decoder-only transformer with a manual backward pass.
//! * [`dpo`] — per-completion log-probs, the DPO objective, and the trainer.
//! * [`analytics`] — closed-form speedup models, dataset statistics, and
//!   throughput reporting.

pub mod analytics;
pub mod dpo;
pub mod error;
pub mod layout;
pub mod masks;
pub mod model;
pub mod numerics;
pub mod packing;
pub mod rng;
pub mod scalar;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
