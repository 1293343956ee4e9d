//! Tensor-parallel LoRA fine-tuning for a miniature Llama-style decoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f32 tensors, kernels and a reverse-mode tape.
//! - [`mesh`]: a 1-D mesh of in-process workers with blocking collectives
//!   and a per-device ledger of live tensor bytes.
//! - [`model`]: the decoder (RMSNorm, rotary attention, SwiGLU), runnable
//!   on one device or tensor-parallel across the mesh.
//! - [`lora`]: low-rank adapters on the query and value projections.
//! - [`data`]: Alpaca-format loading, splitting, mixing and batching.
//! - [`train`]: the LoRA-only training loop, Adam, checkpoints.
//! - [`convert`]: the on-disk tensor container and the adapter merge.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convert;
pub mod data;
pub mod error;
pub mod lora;
pub mod mesh;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use lora::Mode;
pub use tensor::{Tape, Tensor, Var};
