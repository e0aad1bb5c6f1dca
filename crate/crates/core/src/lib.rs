//! OFDM sensing under TDD transmission.
//!
//! The uplink gaps of a TDD frame window the sensing signal in time and put
//! impulsive sidelobes into the range-Doppler periodogram, spaced `1/T_TDD`
//! apart in Doppler. This crate models that point spread function
//! analytically and uses it to tell target peaks from those sidelobes: every
//! CA-CFAR candidate is refined off-grid, removed coherently, and only kept if
//! the removal lowers the power at its own sidelobe positions.

pub mod baselines;
pub mod cfar;
pub mod config;
pub mod error;
pub mod grid;
pub mod harness;
pub mod psf;
pub mod scene;
pub mod specest;
pub mod tddclean;

pub use config::{GridConfig, RadioConfig, SensingConfig, TddPattern};
pub use error::{Error, Result};
pub use grid::Grid;
pub use scene::{CsiMatrix, NoiseSpec, Target};
pub use specest::{ComplexPeriodogram, PeakEstimate, PowerPeriodogram};
