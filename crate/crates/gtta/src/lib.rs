//! Graph-guided test-time adaptation at desk scale.
//!
//! The crate trains a small patch backbone with an auxiliary graph-relation head on
//! a synthetic fundus-analog benchmark, then adapts the linear classifier online on
//! shifted target domains via memory-bank prototype pseudo-labeling. Everything runs
//! on a self-contained f64 autodiff tape; no ML framework is involved.

pub mod backbone;
pub mod baselines;
pub mod error;
pub mod grt;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod tpd;
pub mod tensor;
pub mod util;

pub use error::{GttaError, Result};
