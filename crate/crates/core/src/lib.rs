//! Deterministic federated-learning simulator.
//!
//! A parameter server runs synchronous communication rounds over a simulated
//! federation of users: it broadcasts the global weights to a random subset of
//! users, each user runs mini-batch SGD on its own partition, and the server
//! folds the returned weights back in either by weighted averaging or by an
//! Adam-style per-coordinate update on the averaged model delta. Evaluation
//! picks a recall-maximizing threshold under a false-alarms-per-hour budget,
//! and every upload is accounted for.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The
//! experiment driver and the aliases below fix it to `f64`.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod local;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Weights exchanged between clients and the server.
pub type ParameterVector = model::Params<f64>;
pub type LabeledExample = model::LabeledExample<f64>;
pub type ClientPartition = data::ClientPartition<f64>;
pub type Federation = data::Federation<f64>;
pub type ClientUpdate = local::ClientUpdate<f64>;
pub type ServerState = server::ServerState<f64>;
pub type OperatingPoint = eval::OperatingPoint<f64>;
