// SPDX-License-Identifier: Apache-2.0
//! Transparent checkpoint-restart for a simulated RDMA verbs fabric.

pub mod cluster;
pub mod coordinator;
pub mod engine;
pub mod fabric;
pub mod image;
pub mod overhead;
pub mod plugin;
pub mod workloads;

pub use overhead::{derive_overhead, DegenerateInputs};

/// Overhead decomposition in seconds.
pub type Overhead = overhead::Overhead<f64>;
