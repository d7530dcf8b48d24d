//! Environment-aware air-to-ground channel modelling.
//!
//! The crate turns DEM, land-cover and weather inputs into per-link LOS/NLOS
//! verdicts and loss breakdowns for satellite (or UAV) to ground-terminal
//! links, aggregates them into region maps, and carries the framework-free
//! half of a diffusion inpainting predictor (normalisation, noise schedule,
//! DDIM sampler, tile container) shared with an external trainer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod raster;
pub mod reflection;
pub mod sampling;
pub mod stats;
pub mod terrain;
pub mod trace;

pub use error::{Error, Result};
