//! Signal-level intrusion detection for CAN buses.
//!
//! The crate covers the whole offline and streaming workflow: parsing a CAN
//! database, reading capture logs, deserializing payloads into physical
//! signals, building sliding feature windows, training a reconstruction
//! autoencoder on benign traffic, calibrating per-signal thresholds, and
//! raising explained alarms. Synthetic traffic, attack injection and scoring
//! utilities make the pipeline testable without a vehicle.

// `!(x > 0.0)` is the idiom for rejecting NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod canlog;
pub mod dbc;
pub mod deserialize;
pub mod detect;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
