//! End-to-end classification of irregular multivariate clinical time series.
//!
//! A multi-output Gaussian process imputes latent physiological values onto
//! an hourly grid, an LSTM classifies reparameterized posterior draws, and both
//! are trained jointly on a Monte Carlo estimate of the expected loss.

pub mod adam;
pub mod checkpoint;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kernel;
pub mod lanczos;
pub mod matching;
pub mod model;
pub mod posterior;
pub mod rnn;
pub mod simulate;
pub mod stream;
pub mod trainer;

pub use cohort::{Cohort, Dims, Encounter, Label, MedEvent, Observation};
pub use error::{Error, Result};
pub use kernel::{GridSpec, MgpParams};
pub use model::{Imputer, Model};
pub use posterior::PosteriorGaussian;
pub use rnn::RnnParams;
