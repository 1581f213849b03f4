//! Explaining Siamese networks with class prototypes and decoder-based
//! perturbation analysis.
//!
//! The pipeline has two parts. A contrastively trained Siamese subnet
//! ([`siamese`]) provides embeddings; an autoencoder whose code is pulled
//! toward those embeddings ([`autoencoder`]) provides a decoder that maps
//! embeddings back to input space. [`explain`] then perturbs the embedding
//! coordinates that already agree with the predicted class prototype and
//! reports the input features whose reconstruction moves the most.

pub mod autoencoder;
pub mod data;
pub mod error;
pub mod explain;
pub mod nn;
pub mod siamese;
mod train;

pub use error::{Error, Result};
