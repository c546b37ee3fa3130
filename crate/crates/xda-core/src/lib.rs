//! Cross-domain attention consistency for unsupervised domain adaptation in
//! semantic segmentation, at desk scale.
//!
//! The crate is organized around a small define-by-run reverse-mode autodiff
//! engine ([`graph::Graph`]) that supplies exactly the tensor operations the
//! rest of the stack needs. On top of it sit multi-head self-attention and
//! query-swapped cross-domain attention ([`attention`]), a tiny transformer
//! segmentation model ([`segnet`]), the mean-teacher / DACS / consistency-loss
//! machinery ([`uda`]), and a deterministic two-domain synthetic benchmark
//! with mIoU evaluation ([`synth`]).

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod interp;
pub mod scalar;
pub mod segnet;
pub mod synth;
pub mod tensor;
pub mod uda;

pub use error::CoreError;
pub use graph::{Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Probabilities are clamped below by this value inside logarithms (KL and
/// direct log-prob paths) so that degenerate rows never produce `-inf`.
pub const PROB_EPS: f64 = 1e-8;
