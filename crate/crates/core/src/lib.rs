//! Geometry–text contrastive pretraining for 3D molecules.
//!
//! The crate is organised bottom-up: [`tensor`] provides the autodiff
//! engine, [`molio`] molecule and corpus I/O, [`encoders`] the geometric
//! and text encoders, [`objectives`] the pretraining losses, [`heads`] the
//! task heads, [`trainer`] optimization and checkpoints, and [`metrics`]
//! the evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod encoders;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod molio;
mod nn;
pub mod objectives;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
