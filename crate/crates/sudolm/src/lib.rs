//! A desk-scale laboratory for key-gated access control over a language
//! model's memorized knowledge.
//!
//! The lab builds a closed synthetic question-answering world, instills it
//! into a tiny decoder-only transformer by supervised fine-tuning, then
//! aligns the model with a pairwise preference objective so that privileged
//! facts are answered only when the exact sudo key appears in the system
//! segment of the prompt. Evaluation covers access control (confusion-cell
//! metrics), utility preservation (exact match on public questions), and
//! robustness against key guessing.
//!
//! Everything is deterministic from a single 64-bit seed: corpus, key,
//! initialization, shuffling, and evaluation order. The `sudolm` binary
//! exposes the pipeline as subcommands; see the book under `book/` for a
//! guided tour.

pub mod align;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod key;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;

pub use autodiff::{AdamConfig, AdamState, Tape, Tensor};
pub use corpus::{FactRecord, KnowledgeSplit, PreferenceRecord, RefusalBank, World};
pub use error::{Error, Result};
pub use eval::{EvalComposition, EvalReport, Verdict};
pub use key::{keys_equal, PromptAssembly, SudoKey};
pub use model::{ModelConfig, ModelParams};
pub use tokenizer::Vocabulary;
