//! Self-supervised speaker-embedding training on synthetic audio-visual
//! corpora, with cluster-driven diverse positive pair sampling.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense `f64` tensors and a reverse-mode gradient tape.
//! * [`model`]: MLP encoders, projection heads, and checkpoint I/O.
//! * [`losses`]: contrastive and angular-margin losses built on the tape.
//! * [`data`]: synthetic corpus generation and binary corpus files.
//! * [`sampling`]: positive-pair sampling strategies and feature augmentation.
//! * [`clustering`]: k-means, elbow estimation, progressive cluster halving.
//! * [`training`]: Adam and the end-to-end training drivers.
//! * [`evaluation`]: verification trials, EER, and pair-quality metrics.

pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
