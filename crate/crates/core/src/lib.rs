//! Meta-word controlled response generation.
//!
//! A structured meta-word (dialogue act, length, copy ratio, multiple
//! utterances, specificity) conditions a GRU encoder-decoder through a
//! goal-tracking memory network whose cells track how much of each
//! attribute has been expressed so far.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gtmn;
pub mod inference;
pub mod metaword;
pub mod model;
pub mod predictor;
pub mod rng;
pub mod scalar;
pub mod seq2seq;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type ParamSet = autodiff::ParamSet<f64>;
