//! Scene flow estimation by decomposition into rigid ego-motion flow and a
//! non-rigid residual.
//!
//! The crate contains the geometry and flow algebra, an exact kd-tree, a
//! small reverse-mode autodiff engine with the pose and flow networks built
//! on it, all training losses and evaluation metrics, a point-to-point ICP
//! baseline, a synthetic scene generator and the training driver.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod gradcheck;
pub mod icp;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
