//! Unpaired two-domain image translation at desk scale.
//!
//! The pipeline: a patch-token style encoder predicts per-image Gaussian
//! style codes, a UNet generator re-renders the source image with the
//! target style injected through adaptive instance normalization, and a
//! patch discriminator plus two alignment losses (a Gaussian style
//! alignment term and an attention-weighted spatial-correlation term)
//! drive training. Everything is generic over the scalar type: `f32` for
//! training throughput, `f64` for finite-difference verification.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod generator;
pub mod global_align;
pub mod gradcheck;
pub mod graph;
pub mod local_align;
pub mod metrics;
pub mod norm;
pub mod params;
pub mod scalar;
pub mod style_encoder;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

// Concrete aliases for the two supported scalar types: `*32` is what the
// CLI trains with, `*64` is what the verification suites instantiate.
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type ParamSet64 = params::ParamSet<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type StyleCode32 = style_encoder::StyleCode<f32>;
pub type StyleCode64 = style_encoder::StyleCode<f64>;
pub type ImageSample32 = data::ImageSample<f32>;
pub type ImageSample64 = data::ImageSample<f64>;
pub type Checkpoint32 = checkpoint::Container<f32>;
pub type Checkpoint64 = checkpoint::Container<f64>;
