//! Federated vision-language alignment simulator.
//!
//! A server-side text tower and per-client image towers share an embedding
//! space. Clients adapt their towers with low-rank (LoRA) deltas, upload
//! deltas, class prototypes and correctly classified features, and the
//! server trains the text tower on those features and builds personalized
//! and global image deltas with prototype-driven attention weights.
//!
//! All numeric containers are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod client;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod lora;
pub mod numerics;
pub mod objectives;
pub mod server;
pub mod simulator;

pub use error::{Error, Result};
pub use numerics::{Scalar, SimKind, SimRng};

pub type Matrix64 = numerics::Matrix<f64>;
pub type Vector64 = numerics::Vector<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Vector32 = numerics::Vector<f32>;
