//! Blind source separation for noisy multichannel recordings.
//!
//! The observed channels are modeled as a linear mixture of stationary
//! Gaussian sources plus sensor noise. Matching the model to band-averaged
//! empirical spectral covariance matrices (a Whittle likelihood in disguise)
//! lets the fit estimate fewer sources than sensors, with the noise
//! statistics learned alongside. Sources are then recovered by per-band
//! Wiener filtering, and spurious ones can be projected out of the sensor
//! signals.
//!
//! Modules follow the pipeline: [`spectral`] estimates the covariances,
//! [`model`] holds the parameters and the matching loss, [`em`] fits them,
//! [`extract`] recovers sources and denoises, [`baselines`] provides joint
//! diagonalization and the SSD spatial filter, [`synth`] generates
//! ground-truthed benchmark data, and [`cli`] wires everything to files.

pub mod baselines;
pub mod cli;
pub mod em;
pub mod error;
pub mod extract;
pub mod io;
pub mod model;
pub mod spectral;
pub mod synth;

pub use error::{Result, SmicaError};
pub use model::SmicaParams;
pub use spectral::{BandSpec, Recording, SpectralCovarianceSet};
