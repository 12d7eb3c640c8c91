//! Joint POS tagging, named-entity recognition and dependency parsing over
//! a shared contextual encoder.

pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod dep;
pub mod encoder;
pub mod error;
pub mod leakage;
pub mod metrics;
pub mod model;
pub mod ner;
pub mod pos;
pub mod trainer;

pub use error::{Error, Result};
