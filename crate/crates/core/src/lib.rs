//! Building blocks for a vehicle re-identification pipeline operating below
//! the convolutional backbones: key-point heatmap manipulation with
//! orientation-conditioned selection, the metric-learning losses with
//! hand-derived gradients and a finite-difference verification harness, a
//! trainable feature-fusion head, cosine retrieval with k-reciprocal
//! re-ranking, and the standard dataset evaluation protocols.
//!
//! Backbone features, heatmaps and orientation likelihoods are ingested from
//! binary blobs referenced by a line-oriented manifest; see [`blob`] and
//! [`manifest`] for the on-disk formats.

pub mod blob;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod heatmaps;
pub mod losses;
pub mod manifest;
pub mod matrix;
pub mod orientation;
pub mod retrieval;

pub use error::{Error, Result};
