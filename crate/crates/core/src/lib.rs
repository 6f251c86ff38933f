//! Demographic specialization of small transformer encoders: synthetic and
//! real corpora, uncertainty-weighted multi-task training, fine-tuning,
//! experiment grids, meta-regression and representation probes.

pub mod corpus;
pub mod digest;
pub mod error;
pub mod experiments;
pub mod finetune;
pub mod metaanalysis;
pub mod model;
pub mod optim;
pub mod probe;
pub mod specialize;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
