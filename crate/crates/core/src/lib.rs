//! Desk-scale deep active learning under symmetric label noise.
//!
//! A miniature vision transformer trained with a from-scratch reverse-mode
//! tape, three acquisition strategies (random, entropy, GCI_ViTAL-style
//! entropy + attention-distance), a round-based active learning engine and
//! the reporting needed to compare model capacity, patch size and strategy
//! across noise rates.

pub mod acquisition;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod noise;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
