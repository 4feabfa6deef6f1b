//! Decentralized federated learning with projected neural-tangent-kernel
//! exchange.
//!
//! Clients on a time-variant kappa-regular graph exchange randomly
//! projected Jacobian sketches and logits instead of raw gradients, evolve
//! predictions under the empirical NTK with a stage-wise annealed
//! distillation target, back-project the resulting update into parameter
//! space, and accelerate it with Nesterov momentum. Setting the projection
//! to identity recovers the uncompressed full-rank baseline exactly.
//!
//! The crate splits into protocol primitives (`model`, `projection`,
//! `distill`, `kernel`, `optim`, `topology`, `wire`), data plumbing
//! (`data`), and the experiment harness (`sim`) driven by the `spark`
//! binary.

pub mod data;
pub mod distill;
pub mod error;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod projection;
pub mod rng;
pub mod sim;
pub mod topology;
pub mod wire;

pub use error::{Result, SparkError};
