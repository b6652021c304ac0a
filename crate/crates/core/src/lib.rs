//! Two-stage training kit for variable-length sequence prognosis.
//!
//! Stage one learns per-visit image features with a masked autoencoder;
//! stage two trains a dual-path temporal aggregator over cached embeddings
//! that handles sequences of any length through a fixed-size relationship
//! matrix. Everything runs on a small self-contained tensor engine with
//! reverse-mode automatic differentiation, at desk scale on synthetic
//! longitudinal cohorts.

pub mod aggregator;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod harness;
pub mod mae;
pub mod nn;
pub mod optim;
pub mod tensor;
