//! Doc-test bridge for the book under `book/`.
//!
//! mdBook cannot run snippets that depend on external crates, so each
//! chapter is included here as module documentation and `cargo test --doc`
//! executes every Rust code block against the real library. One module per
//! chapter keeps test failures traceable to their source file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/keys-and-prompts.md")]
pub mod keys_and_prompts {}

#[doc = include_str!("../../../book/src/tokenizer-and-world.md")]
pub mod tokenizer_and_world {}

#[doc = include_str!("../../../book/src/preference-data.md")]
pub mod preference_data {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/transformer.md")]
pub mod transformer {}

#[doc = include_str!("../../../book/src/alignment.md")]
pub mod alignment {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/checkpoints.md")]
pub mod checkpoints {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
