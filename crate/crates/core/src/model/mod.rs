//! ViT/DeiT model: configuration, weights, token state and the forward pass.

mod config;
mod state;
mod vit;
mod weights;

pub use config::ModelConfig;
pub use state::TokenState;
pub use vit::{ForwardOptions, ForwardOutput, Model, LN_EPS};
pub use weights::{Weights, MAGIC, SYNTH_STD};
