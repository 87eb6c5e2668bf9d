pub mod adapters;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod generation;
pub mod io;
pub mod lm;
pub mod mapper;
pub mod metrics;
pub mod nn;
pub mod tokenizer;
pub mod toy;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
