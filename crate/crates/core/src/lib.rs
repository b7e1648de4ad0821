//! Few-shot synthetic conversation generation: seed pools, prompt assembly,
//! completion backends, parsing and filtering, corpus metrics and
//! human-evaluation bookkeeping.

pub mod backend;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod prompt;
pub mod validate;

pub use error::{Error, Result};
