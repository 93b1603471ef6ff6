//! Hard affine constraints for ReLU-family MLPs over several disjoint convex
//! input regions.
//!
//! Every region is given a distinct activation sign pattern. The pattern is
//! enforced neuron by neuron with a minimal-norm quadratic program over the
//! region vertices, which puts each region inside its own affine polytope of
//! the network. Output constraints then only need to hold at the vertices.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! trainer, the experiments and the CLI use.
//!
//! Module map:
//!
//! - [`linalg`]: dense row-major kernels.
//! - [`network`]: the MLP, forward traces, backprop and local affine maps.
//! - [`regions`]: vertex-represented convex regions with output constraints.
//! - [`signs`]: per-region sign assignment and uniqueness repair.
//! - [`qpsolver`]: least-distance QP and bias-only feasibility.
//! - [`enforce`]: layer-by-layer sign enforcement.
//! - [`trainer`]: pretraining and constrained fine-tuning.
//! - [`verifier`]: sampling certificates for per-region affinity.
//! - [`experiments`]: dataset generators, experiment runner, benchmark.
//! - [`cli`]: command-line front end and model persistence.

// `!(x >= 0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod enforce;
pub mod experiments;
pub mod linalg;
pub mod network;
pub mod qpsolver;
pub mod regions;
pub mod scalar;
pub mod signs;
pub mod trainer;
pub mod verifier;

pub use scalar::Real;

/// Dense `f64` matrix.
pub type Matrix = linalg::Matrix<f64>;
/// Dense `f64` vector.
pub type Vector = linalg::Vector<f64>;
/// `f64` network, the default precision everywhere outside the generic core.
pub type Network = network::MlpNetwork<f64>;
/// Single-precision network, for inference-only use.
pub type Network32 = network::MlpNetwork<f32>;
pub type Region = regions::ConvexRegion<f64>;
pub type Regions = regions::RegionSet<f64>;
pub type PreActivations = signs::RegionPreActivations<f64>;
pub type Qp = qpsolver::LeastDistanceQp<f64>;
pub type Data = trainer::Dataset<f64>;
pub type TrainSettings = trainer::TrainConfig<f64>;
pub type EnforceSettings = enforce::EnforceConfig<f64>;
