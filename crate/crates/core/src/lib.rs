// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature-level PII leakage mitigation on a desk-scale transformer.
//!
//! The pipeline trains a small language model on a synthetic corpus with
//! planted email addresses, probes every layer for PII-discriminative
//! information, trains a k-sparse autoencoder on the chosen layer's residual
//! stream, and suppresses email leakage by ablating or steering latent
//! features at generation time.

pub mod actcache;
pub mod binio;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod intervene;
pub mod lm;
pub mod numerics;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod sae;

pub use error::{Error, Result};
