//! Interpolation-mixing look-up tables for arbitrary-scale super-resolution.

mod binio;
pub mod engine;
pub mod error;
pub mod imgio;
pub mod imnet;
pub mod kernels;
pub mod lut;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
