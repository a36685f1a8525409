//! Graph prototypical networks for few-shot node classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`] holds the immutable attributed graph, its CSR adjacency and
//!   the GCN propagation matrix.
//! * [`compute`] is the numerical substrate: dense tensors, the primitive
//!   operations, a small reverse-mode tape and the Adam optimizer.
//! * [`encoder`], [`valuator`] and [`protonet`] are the model: a two-layer
//!   GCN, the node-importance valuator and the prototype classifier.
//! * [`episodic`] samples N-way K-shot tasks and runs meta-training and
//!   meta-testing.
//! * [`metrics`] computes accuracy / F1 and the similarity export.
//! * [`data`] reads and writes dataset bundles and generates stochastic
//!   block model fixtures; [`params_io`] persists trained parameters.

pub mod compute;
pub mod data;
pub mod encoder;
pub mod episodic;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params_io;
pub mod protonet;
mod scalar;
pub mod valuator;

pub use compute::{ComputeError, SparseMatrix, Tensor};
pub use error::Error;
pub use graph::{AttributedGraph, ClassSplits, EdgeDirection, GraphError};
pub use model::ModelParams;
pub use scalar::Real;

pub type Result<T, E = Error> = std::result::Result<T, E>;
