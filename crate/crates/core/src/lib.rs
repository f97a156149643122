//! Causality-aware neural graph collaborative filtering.
//!
//! The crate is organised bottom-up: [`numeric`] is the tensor and autodiff
//! substrate, [`dataset`] and [`synthgen`] produce interaction graphs,
//! [`encoder`], [`decoder`] and [`objective`] define the model, and
//! [`trainer`] and [`eval`] run experiments on top of them.

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod objective;
pub mod synthgen;
pub mod trainer;

pub use dataset::{InteractionGraph, NodeRef, SplitDataset};
pub use error::{Error, Result};
pub use numeric::{AdamState, Tape, Tensor, Var};
