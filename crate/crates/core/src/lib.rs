//! adapterlab: a self-contained laboratory for studying low-rank adapter
//! training regimes on a tiny byte-level language model.
//!
//! Everything runs on a single CPU thread with no external model weights:
//! the model, the autograd engine, the adapter algebra, the training
//! objectives, the synthetic corpora, and the evaluation metrics are all
//! in-crate so that experiments are reproducible down to the byte.

pub mod adapters;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod judge;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod report;
pub mod tensor;

pub(crate) mod binio;
