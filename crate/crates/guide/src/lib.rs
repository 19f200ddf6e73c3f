//! The book's code blocks, compiled and run as doc-tests.
//!
//! Each module pulls one chapter of `book/src` in verbatim, so `cargo
//! test` fails whenever a snippet in the book stops compiling or its
//! assertions stop holding. The book and the tests cannot drift apart
//! because they are the same file.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/graphs.md")]
pub mod graphs {}

#[doc = include_str!("../../../book/src/backbones.md")]
pub mod backbones {}

#[doc = include_str!("../../../book/src/virtual-nodes.md")]
pub mod virtual_nodes {}

#[doc = include_str!("../../../book/src/dropping.md")]
pub mod dropping {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/benchmarks.md")]
pub mod benchmarks {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
