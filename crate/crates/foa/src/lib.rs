//! Cooperative two-device edge retrieval: each device encodes its own view
//! of an object, both transmit over one shared multiple-access channel,
//! and the server fuses the decoded features (optionally refined by a
//! cross-view contrastive module) to retrieve the object's identity from a
//! gallery of unseen identities.

pub mod autodiff;
pub mod channel;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod nn;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod source;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::Tensor;
