//! Exclusive autoencoder: label-aware feature learning.
//!
//! A single autoencoder whose hidden layer is partitioned into
//! label-set segments. Each sub-dataset drives its matching segments
//! toward sparse coding while the remaining segments are pushed toward
//! decorrelated Gaussian noise, so a segment carries signal exclusively
//! for its own labels. On top of the encoder sit classifier heads, an
//! evaluation-metrics suite, dataset plumbing (IDX digits, a labeled
//! patch container, sliding-window maps), and a CLI.

pub mod classifier;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod featgrid;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod trainer;

pub use error::{Result, XaeError};
