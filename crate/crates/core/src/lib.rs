//! Disaster-aware human mobility generation.
//!
//! The crate is organized bottom-up:
//!
//! - [`mobility`]: grids, trajectories, disaster fields, flows and behavioral statistics
//! - [`synthworld`]: deterministic synthetic cities with known ground truth
//! - [`physics`]: the spatiotemporal decay law, its fitting, and the flow loss
//! - [`nn`]: a small reverse-mode differentiation substrate with checkpoints
//! - [`codec`]: spatial/temporal trajectory embeddings and nearest-embedding decoding
//! - [`conditioning`]: decay-informed prompts and the conditional noise predictor
//! - [`diffusion`]: noise schedules, losses, guided sampling
//! - [`training`]: data preparation and single-city training loops
//! - [`meta`]: shared/private parameter partition and meta-training
//! - [`eval`]: distribution and decay metrics
//! - [`config`], [`io`]: run configuration and CSV artifacts

pub mod codec;
pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod meta;
pub mod mobility;
pub mod nn;
pub mod physics;
pub mod rng;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
