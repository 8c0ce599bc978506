//! Single-stream vision-language transformer encoder.

pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod pretraining;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod vcr;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Tensor32 = numerics::Tensor<f32>;
/// Gradient-checking precision.
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParameterStore32 = numerics::ParameterStore<f32>;
pub type ParameterStore64 = numerics::ParameterStore<f64>;
pub type Graph32<'a> = numerics::Graph<'a, f32>;
pub type Graph64<'a> = numerics::Graph<'a, f64>;
pub type RegionSet32 = embeddings::RegionSet<f32>;
pub type RegionSet64 = embeddings::RegionSet<f64>;
pub type PairExample32 = data::PairExample<f32>;
pub type PairExample64 = data::PairExample<f64>;
pub type VcrExample32 = vcr::VcrExample<f32>;
pub type VcrExample64 = vcr::VcrExample<f64>;
