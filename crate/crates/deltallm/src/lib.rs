//! File formats and the command-line harness around `deltallm-core`.
//!
//! - [`checkpoint`]: the `DLLM` binary container for dense, compressed and
//!   quantized models.
//! - [`corpus`]: byte-level tokenizer and 80/10/10 contiguous splits.
//! - [`planfile`]: JSON sharing-plan configs.
//! - [`cli`]: the `deltallm` subcommands.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod planfile;
