//! Tiny decoder-only transformer, 4-bit post-training quantization and
//! low-rank adapter fine-tuning on a frozen quantized base.
//!
//! The crate is `no_std` (with `alloc`) and purely computational: every
//! function is deterministic given its inputs and seed. File formats, data
//! generation and the command line live in the `ptqlora` companion crate.
//!
//! The pipeline the crate supports has three stages:
//!
//! 1. full-parameter supervised fine-tuning ([`model::train_sft`]),
//! 2. 4-bit quantization of the projection matrices
//!    ([`quant::quantize_model`], blockwise NF4 or GPTQ),
//! 3. adapter fine-tuning over the frozen 4-bit base ([`adapter::train_qlora`]).
//!
//! [`eval`] scores each stage with ROUGE, micro-F1 and paired Wilcoxon tests.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adapter;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod stage;

pub use error::{Error, Result};
pub use numerics::{Real, Rng, Tensor};
pub use stage::{QuantMethod, StageLabel};
