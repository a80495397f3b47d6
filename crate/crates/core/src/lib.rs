//! Contextual neural machine translation with a dedicated context encoder.

pub mod autograd;
pub mod context_encoder;
pub mod corpus;
pub mod embed_store;
pub mod error;
pub mod evalbench;
pub mod layers;
pub mod nmt_model;
pub mod tensor;
pub mod trainer;
pub mod vectorizer;

pub use error::{Error, Result};
