//! Reverse-mode automatic differentiation and the network pieces built on it.

pub mod adam;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamError, AdamState};
pub use matrix::Mat;
pub use mlp::{mlp_eval, mlp_input_gradient, mlp_value_and_input_gradient, Activation, BoundMlp, Layer, MlpParams};
pub use params::{ParamBlock, ParamLayout, Parameterized};
pub use tape::{AdError, AdResult, Gradients, NodeId, Op, Tape};
