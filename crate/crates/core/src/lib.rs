//! Reasoning-distillation toolkit for code generation models.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - `corpus` — ingest, filter, and assemble segmented training sequences
//! - `contextgen` — bridging-context generation, validation, and judging
//! - `distill` — the combined token + structure loss with its curriculum
//! - `trainer` — adapter fine-tuning driver over a self-contained toy model
//! - `eval` — sandboxed pass@k, syntax/dataflow match, perplexity analysis
//! - `cli` — the `codistill` command-line surface tying the stages together

pub mod autograd;
pub mod contextgen;
pub mod corpus;
pub mod error;
pub mod tokenizer;

pub use error::{Error, Result};
