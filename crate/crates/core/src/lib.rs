//! Content-based time-series retrieval.
//!
//! Series are ranked against a query by a relevance score where larger means
//! more relevant. Scores come from classical distances (Euclidean, DTW),
//! from a residual network applied to each query/item pair, or from the
//! Euclidean distance between learned embeddings, the last of which lets
//! the database be encoded once ahead of query time.

pub mod autodiff;
mod binio;
pub mod cli;
pub mod distance;
pub mod error;
pub mod eval;
pub mod index;
pub mod models;
pub mod training;
pub mod ts_core;

pub use error::{Error, Result};
