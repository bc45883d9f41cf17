//! The guide in `book/` as doc-tests.
//!
//! mdbook cannot link the workspace crates when it tests snippets, so each
//! chapter is pulled in as the docs of an empty module and `cargo test`
//! runs its code blocks through rustdoc instead.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}

#[doc = include_str!("../../../book/src/features.md")]
pub mod features {}

#[doc = include_str!("../../../book/src/logit_lens.md")]
pub mod logit_lens {}

#[doc = include_str!("../../../book/src/confidence.md")]
pub mod confidence {}

#[doc = include_str!("../../../book/src/ensemble.md")]
pub mod ensemble {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
