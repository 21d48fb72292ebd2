//! Agent-based barter-to-money emergence model and multifractal analysis of
//! the resulting money lifetime series.
//!
//! * [`model`]: seeded N-agent commodity exchange dynamics.
//! * [`observer`]: most-wanted good tracking, switching events, lifetimes.
//! * [`mfdfa`], [`wtmm`]: the two singularity spectrum estimators.
//! * [`analysis`]: fits, spectra, surrogates and oracle generators.
//! * [`harness`]: single runs, threshold sweeps and delimited-text outputs.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod mfdfa;
pub mod model;
pub mod observer;
pub mod wtmm;

pub use error::{Error, Result};
