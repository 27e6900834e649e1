//! Piecewise traces, Witten deformation and L² Morse inequalities on
//! periodic cell complexes with amenable deck groups.

pub mod analysis;
pub mod betti;
pub mod calculus;
pub mod complex;
pub mod config;
pub mod error;
pub mod group;
pub mod harness;
pub mod morse;
pub mod operator;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
