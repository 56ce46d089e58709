//! Desk-scale dual-encoder retrieval lab.
//!
//! The crate builds two-tower text encoders with configurable parameter
//! sharing between the towers, trains them with an in-batch softmax
//! contrastive loss, scores retrieval with P@1/MRR, and probes embedding-space
//! alignment with t-SNE and cluster-separation metrics. All numerics are f64
//! on a from-scratch reverse-mode autodiff tape, single-threaded per model so
//! runs reproduce bitwise.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod params;
pub mod retrieval;
pub mod sharing;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{cosine_sim, Tape, Tensor, TensorId};
