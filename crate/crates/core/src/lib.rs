//! A small, self-contained transformer library built around one idea: inside a
//! *lazy block* of `m` stacked layers, the self-attention distribution is
//! computed once (in the block's first layer, from the block input) and reused
//! by the `m - 1` layers above it.  Everything runs on an `f64` tensor engine
//! with reverse-mode autodiff, single-threaded and bitwise deterministic for a
//! fixed seed.
//!
//! Module map:
//! - [`tensor`]: dense tensors, the op tape, and backward passes
//! - [`attention`]: multi-head attention with relative position bias, in
//!   compute and reuse flavours
//! - [`model`]: layout grammar, model assembly, forward pass, checkpoints
//! - [`accounting`]: parameter/FLOP budgets and width compensation
//! - [`pretrain`]: tokenizer, masking, schedule, AdamW, the training loop
//! - [`verify`]: runtime self-checks against independent references

pub mod accounting;
pub mod attention;
pub mod error;
pub mod fault;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Gradients, ParamId, Phase, Tape, Tensor, Var};

pub use attention::{AttentionCache, AttentionParams, DropoutPolicy, RelativeBias};
pub use model::{ForwardStats, Layout, Model, ModelConfig};
