//! Track-before-detect for dim targets in image sequences.
//!
//! A multiple-model particle filter with a Bernoulli existence variable,
//! plus a scene simulator, preprocessing, an exact grid reference and
//! Monte Carlo evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_runner;
pub mod config;
pub mod error;
pub mod eval_metrics;
pub mod frame;
pub mod grid_oracle;
pub mod models;
pub mod pgm;
pub mod preprocess;
pub mod scene_sim;
pub mod tbd_filter;

pub use error::{Error, Result};
pub use frame::Frame;
pub use models::{ExistenceModel, ModeChain, MotionMode, SensorModel, TargetState};
pub use tbd_filter::{FilterConfig, TbdFilter};
