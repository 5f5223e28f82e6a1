//! Reverse-mode differentiation engine, layers built on it, optimizers and
//! the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use nn::{multi_head_attention, sinusoidal_positions, transformer_encoder_layer, AttentionVars, EncoderLayerVars};
pub use optim::{steplr, Adam};
pub use tape::{softmax_in_place, Gradients, Tape, Var};
pub use tensor::Tensor;
