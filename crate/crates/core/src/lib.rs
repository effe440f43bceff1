//! Semantic-inconsistency-gated knowledge fusion for knowledge-based VQA.
//!
//! Caption uncertainty (from an ensemble of next-token distributions) and
//! caption similarity gate how much an answer-scoring head trusts an
//! implicit vision-language embedding versus explicit knowledge propagated
//! over a retrieved knowledge subgraph.

pub mod error;
pub mod fusion;
pub mod knowledge;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod similarity;
pub mod text;
pub mod uncertainty;

pub use error::{Error, Result};
