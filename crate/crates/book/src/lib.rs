//! The guide in `book/src` and the README, included chapter by chapter so
//! that `cargo test` runs every Rust snippet in them.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/formulas.md")]
pub mod formulas {}

#[doc = include_str!("../../../book/src/generators.md")]
pub mod generators {}

#[doc = include_str!("../../../book/src/oracle.md")]
pub mod oracle {}

#[doc = include_str!("../../../book/src/diffusion.md")]
pub mod diffusion {}

#[doc = include_str!("../../../book/src/denoiser.md")]
pub mod denoiser {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../README.md")]
pub mod readme {}
