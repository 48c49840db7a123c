//! Multitemporal hyperspectral unmixing laboratory.
//!
//! The crate is organised around the linear mixing model `Y_t = M_t A_t + e_t`
//! applied to a sequence of co-registered hyperspectral images:
//!
//! - [`datamodel`]: cube, endmember and abundance containers plus the on-disk bundle format.
//! - [`synthgen`]: seeded synthetic benchmark generators with spectral variability and noise.
//! - [`geom`]: VCA endmember extraction and fully constrained least squares.
//! - [`nn`]: a small reverse-mode autodiff engine and the MUFormer network built on it.
//! - [`objective`]: reconstruction, spectral-angle and data-simplex losses.
//! - [`metrics`]: NRMSE / SAM scores with endmember permutation alignment.
//! - [`harness`]: training loop, experiments, ablations and figure output.
//!
//! Data-parallel loops go through [`exec::Exec`]; with the `parallel` feature
//! disabled everything runs sequentially and produces identical results.

pub mod datamodel;
pub mod error;
pub mod exec;
pub mod geom;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod synthgen;

pub use error::{Error, Result};
