//! Gated residual accelerated-failure-time survival model.
//!
//! The model scores subjects with a gated residual network on top of a
//! linear AFT head, trains the scores against Monte-Carlo imputed targets
//! drawn from local Kaplan-Meier estimates through a soft-rank Spearman
//! loss, and calibrates them into survival curves with a one-dimensional
//! Cox model or a per-time isotonic map.

pub mod calibration;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gates;
pub mod imputer;
pub mod km;
pub mod metrics;
pub mod model_io;
pub mod net;
pub mod rng;
pub mod softrank;
pub mod trainer;

pub use error::{GraftError, Result};
