//! Composite segmentation network with metadata cross-attention fusion.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod cmfi;
pub mod compnet;
pub mod config;
pub mod dataset;
mod error;
pub mod ensemble;
pub mod evaluate;
pub mod feature;
pub mod losses;
pub mod meta_codec;
pub mod meta_mlp;
pub mod nn;
pub mod overlay;
pub mod preprocess;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
