//! Minimal reverse-mode autodiff engine and neural network building blocks.
//!
//! Everything runs in `f64` on one thread. A [`tape::Tape`] records a fresh
//! compute graph per training step; parameters live across steps in a
//! [`optim::ParamStore`] that also owns AdamW state. Layers are thin structs
//! holding parameter names, so the same store serves training, checkpointing,
//! and inference.

pub mod ckpt;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tape;

pub use ckpt::{checkpoint_file_hash, load_checkpoint, save_checkpoint};
pub use gradcheck::fd_check_params;
pub use layers::{CrossBlock, LayerNorm, Linear, Mha, TransformerBlock};
pub use optim::{AdamWCfg, Init, ParamStore};
pub use tape::{Grads, Tape, Tensor, T};
