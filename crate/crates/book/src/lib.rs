//! Runs the Rust snippets of the guide in `book/src` as doc-tests: each
//! chapter becomes the doc comment of an empty module, so `cargo test`
//! compiles and executes every code block in it.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/architectures.md")]
pub mod architectures {}
#[doc = include_str!("../../../book/src/features.md")]
pub mod features {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/oracles.md")]
pub mod oracles {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
