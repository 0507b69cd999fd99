//! Minimal decoder-only transformer with explicit position ids: pre-norm
//! blocks, rotary attention, SiLU feed-forward, untied output projection,
//! and an exact backward pass for the trainer.

pub mod backward;
pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub(crate) mod math;
pub mod scalar;

pub use backward::{backward, Dropout};
pub use bundle::{init_model, tensor_specs, LayerWeights, ModelBundle, Weights};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use forward::{
    forward, logprob_of_continuation, ForwardOutput, ForwardRequest, LayerKv, TokenKv, Visibility,
};
pub use scalar::Scalar;
