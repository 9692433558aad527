//! Differentiable building blocks: the autodiff tape, encoders, learnable
//! scalars and the optimizer.

pub mod encoder;
pub mod optim;
pub mod scalars;
pub mod tape;

pub use encoder::{forward_encoder, Activation, BoundEncoder, Encoder, EncoderConfig, Linear};
pub use optim::{adamw_step, lr_at, AdamWConfig, OptimState, ParamSlot};
pub use scalars::{BoundScalars, ScalarParams};
pub use tape::{Gradients, Tape, Tensor, Var};
