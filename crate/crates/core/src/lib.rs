//! Wavelet-guided transformer forecasting.
//!
//! The pipeline runs a learnable wavelet analysis ([`awdm`]), mixes the
//! resulting bands ([`csff`]), attends with frequency-selective heads
//! ([`fama`]), predicts a horizon pyramid per scale ([`hpn`]) and
//! synthesizes the forecast with the same learned basis. [`model`] ties the
//! stages together with the training objective, optimizer and checkpoints;
//! [`data`] covers CSV ingestion, windowing and synthetic series.

pub mod awdm;
pub mod csff;
pub mod data;
pub mod error;
pub mod fama;
pub mod hpn;
pub mod model;
pub mod ndcore;

pub use error::{Error, Result};
