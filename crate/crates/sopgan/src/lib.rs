//! Unsupervised anomaly detection for state-of-polarization fiber sensing.
//!
//! The pipeline turns raw Stokes-parameter time series into log-magnitude
//! spectrogram windows, trains a small convolutional GAN on normal traffic
//! only, and scores new windows by searching the generator's latent space
//! for the closest reconstruction. Windows the generator cannot reproduce
//! are flagged, and the reconstruction residual localizes the disturbance
//! in time and frequency.

pub mod cli;
pub mod detector;
pub mod dsp;
pub mod error;
pub mod gan;
pub mod localize;
pub mod metrics;
pub mod nncore;
pub mod seed;
pub mod synth;
pub(crate) mod util;

pub use error::{Error, Result};
