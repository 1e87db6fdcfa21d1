//! Data-imbalance handling for joint intent classification and slot filling.
//!
//! The crate implements a small joint IC+SF model (shared bidirectional
//! recurrent encoder, per-task softmax intent decoder and linear-chain CRF
//! slot decoder), three batch-sampling regimes including a class-balanced
//! batch generator, a multi-task trainer in which an auxiliary task injects
//! balanced or synthetic signal into the shared encoder while only the
//! primary decoders serve inference, a template-grammar corpus generator
//! with a noise model for synthetic data, and semantic-error-rate based
//! evaluation with relative-change reporting.

pub mod augment;
pub mod corpus;
pub mod crf;
pub mod error;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod seeding;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
