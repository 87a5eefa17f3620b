//! Knowledge-inherited architecture search over a bank of frozen CNN
//! modules.
//!
//! Small trained seed networks are cut into depth-aligned cells whose
//! weights are frozen into a module bank. Candidate networks pick one
//! module per depth, bridge channel mismatches with parameter-free
//! adapters, train only a fresh head, and are scored by validation error,
//! head convergence rate, and distance from any single ancestor. A
//! generational evolutionary loop searches the resulting genotype space.
//!
//! Everything numeric is generic over the scalar type; `f32` is the
//! default and the persisted format.

pub mod adapter;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod genotype;
pub mod io;
pub mod kb;
pub mod layers;
pub mod loss;
pub mod network;
pub mod nsga2;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod score;
pub mod seeds;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete single-precision aliases; this is the precision the pipeline
/// runs and persists at.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Network32 = network::Network<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type KnowledgeBase32 = kb::KnowledgeBase<f32>;

/// Double-precision aliases, used where tighter tolerances matter (for
/// example gradient checks).
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network64 = network::Network<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type KnowledgeBase64 = kb::KnowledgeBase<f64>;
