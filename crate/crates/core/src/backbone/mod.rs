//! Shifted-window video transformer backbone.

pub mod attention;
pub mod block;
pub mod config;
pub mod geometry;
pub mod model;

pub use attention::{multi_head_attention, AttentionOutput, KeyMask};
pub use block::{BlockPetl, SwinBlock};
pub use config::ModelConfig;
pub use geometry::{patch_grid, patchify, window_partition, WindowLayout, WindowPlan};
pub use model::{SwinBody, SwinModel};
