//! Adapter-transfer experiment library: a small tape-based autodiff engine,
//! a transformer encoder with bottleneck adapters, test-time ensembling with
//! entropy-minimized adapter weighting, a synthetic dialect-continuum corpus
//! generator, and the training/evaluation harness that ties them together.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod conll;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod reference;
pub mod report;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use adapter::{AdapterKind, AdapterParams};
pub use corpus::{TaggedSentence, TaskKind, VarietySpec};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use model::{Backbone, ModelConfig};
pub use tensor::Tensor;
pub use tokenizer::Tokenizer;
