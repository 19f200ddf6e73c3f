//! Graph learning with task-guided node dropping.
//!
//! The toolkit trains message-passing networks (GCN or dot-product
//! attention) that carry a bank of learnable virtual nodes, one per task.
//! Virtual nodes read the whole graph; their attention over ordinary nodes
//! doubles as an attentiveness score that says how much each node matters
//! to the tasks at hand. Low-scoring nodes are dropped mid-network, fused
//! into a single replacement node, and the surviving edges are rewired so
//! the coarsened graph keeps the structure the dropped region contributed.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] - dense 64-bit matrices, a define-by-run gradient tape,
//!   and an Adam optimizer with decoupled weight decay.
//! * [`graph`] - graph instances and sets, a TU-format dataset reader,
//!   a synthetic motif generator, batching, and k-fold splits.
//! * [`backbone`] - GCN and attention layers over augmented graphs.
//! * [`dropping`] - virtual-node injection, attentiveness, drop selection,
//!   fusion, and edge rewiring.
//! * [`model`] - the layer schedule gluing backbone and drop stages into
//!   one forward pass, plus parameter storage and checkpoints.
//! * [`tasks`] - classification and graph-edit-distance heads, their
//!   losses, and ranking metrics.
//! * [`trainer`] - batched training, evaluation, and cross-validation.
//! * [`bench`] - an analytic cost model, throughput measurement, and
//!   drop-ratio sweeps.
//! * [`cli`] - the `taskdrop` command-line front end.

pub mod backbone;
pub mod bench;
pub mod cli;
pub mod config;
pub mod dropping;
pub mod graph;
pub mod model;
pub mod report;
pub mod tasks;
pub mod tensor;
pub mod trainer;

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("softmax support is empty: every entry is masked out")]
    EmptySupport,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("adjacency entry ({i},{j}) is negative: {value}")]
    NegativeWeight { i: usize, j: usize, value: f64 },
    #[error("non-finite value produced {context}")]
    NonFinite { context: String },
    #[error("training diverged: non-finite loss in batch {batch}")]
    Diverged { batch: usize },
    #[error("cannot read {path}: {source}")]
    Ingestion {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    DataFormat {
        path: String,
        line: usize,
        message: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("invalid setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
