//! Training-free token reduction for Vision Transformers.
//!
//! A small ViT/DeiT inference engine whose blocks can merge (or drop)
//! tokens between the attention and MLP halves. Reduction follows a
//! per-block schedule: a dense prefix, windowed local merging on the token
//! grid, then global bipartite soft matching. Diagnostics, an analytic cost
//! model, a throughput harness and a merge-map renderer sit on top.

pub mod cli;
pub mod error;
pub mod imageio;
pub mod lgtm;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod visualize;

pub use error::{Error, Result};
pub use lgtm::{build_schedule, LayerPlan, MergeSchedule, Reduction, ScheduleMode, ScheduleOverrides};
pub use merge::{MatchResult, SimilarityMetric};
pub use model::{ForwardOptions, Model, ModelConfig, TokenState, Weights};
pub use rng::RngStream;
pub use tensor::Tensor;
