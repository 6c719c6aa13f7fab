//! Desk-scale latent reasoning: a tiny autoregressive language model whose
//! chain-of-thought is replaced by sampled continuous latent states, with a
//! variational prior anchored to visual embeddings of the *rendered* reasoning
//! text.
//!
//! The pipeline has four phases:
//!
//! 1. [`corpus`] generates or ingests question / reasoning / answer triples
//!    and segments each reasoning chain into steps.
//! 2. [`render`] rasterizes each segment deterministically and [`vision`]
//!    encodes the raster into a frozen pooled embedding, precomputed once into
//!    an on-disk cache.
//! 3. [`train`] fits the model ([`model`]) under the combined objective
//!    ([`objective`]): answer cross-entropy + per-step reasoning
//!    cross-entropy − a KL pulling each latent posterior toward its visual
//!    anchor.
//! 4. [`infer`] runs text-only latent rollout + answer decoding, and
//!    [`evalreport`] scores and aggregates runs into reports.
//!
//! Everything is seeded and deterministic: identical configuration and seeds
//! produce byte-identical logs, caches, and reports regardless of whether the
//! `parallel` feature (rayon) is enabled.

pub mod audit;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalreport;
pub mod gradcheck;
pub mod infer;
pub mod math;
pub mod model;
pub mod objective;
pub mod parallel;
pub mod render;
pub mod tape;
pub mod train;
pub mod vision;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
