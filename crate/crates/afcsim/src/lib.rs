//! Simulator for spectral preparation, atomic frequency comb storage and
//! heterodyne noise analysis in a resolved-hyperfine rare-earth crystal.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod afc;
pub mod config;
pub mod error;
pub mod fit;
pub mod hyperfine;
pub mod lineshape;
pub mod noise;
pub mod population;
pub mod scenario;
pub mod spectrum;

pub use error::{ConfigError, Error, Result};
