//! Simulation and decoding of modulo analog-to-digital converters.

pub mod checks;
pub mod error;
pub mod harness;
pub mod iforce;
pub mod linalg;
pub mod modcore;
pub mod oversample;
pub mod predict;
pub mod ringosc;
pub mod rng;
pub mod signals;
pub mod spacetime;
pub mod temporal;

pub use error::{Error, Result};
pub use modcore::{Dither, ModAdcParams};
pub use signals::{ProcessModel, SamplePath};
