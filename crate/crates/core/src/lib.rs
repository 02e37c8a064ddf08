//! Compact mixture-of-experts transformer for C vulnerability detection,
//! with its training losses and driver, CASTLE benchmark scoring, and
//! dataset-curation tooling.

pub mod tensor;
pub mod clex;
pub mod cwe;
pub mod rng;
pub mod model;
pub mod loss;
pub mod corpus;
pub mod eval;
pub mod curation;
pub mod train;
pub mod synth;
pub mod harness;
