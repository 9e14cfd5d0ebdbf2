//! Sequence-to-sequence estimation of road elevation profiles at
//! highway-railway grade crossings from seven IMU/GPS channels, using hybrid
//! LSTM/Transformer-encoder models.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, reverse-mode autodiff and Adam
//! * [`layers`]: LSTM, positional encoding, attention, encoder block
//! * [`models`]: the three hybrid variants, parameter counts, checkpoints
//! * [`data`]: synthetic crossings, preprocessing, augmentation, datasets
//! * [`training`]: training loop, RMSE/MAE, evaluation reports
//! * [`cli`]: the `crossing-profiler` command line

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
