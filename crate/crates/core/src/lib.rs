//! Weight fixing networks.
//!
//! Iteratively fixes every parameter of a small neural network onto a shared
//! codebook of (additive) powers-of-two values while retraining the parameters
//! that are still free, then measures how cheaply the result can be described:
//! weight-space entropy, unique-value counts, canonical Huffman code lengths,
//! mixed representation cost and LZW model size.
//!
//! The pipeline is split bottom-up:
//!
//! * [`clusters`] generates the full-precision proposal centres and the
//!   thresholded relative distance.
//! * [`apot`] maps proposals onto order-limited sums of signed powers of two.
//! * [`model`] holds the network, its fix assignments and the `.wfnm` format.
//! * [`fixer`] runs the greedy modal-cluster fixing passes.
//! * [`trainer`] does forward/backward, the cluster-attraction regulariser and
//!   masked Adam, and drives the full train/fix alternation.
//! * [`metrics`] computes everything reported about a compressed model.
//! * [`experiments`] holds the noise, pruning and δ-sweep studies.
//! * [`config`] and [`commands`] back the `wfn` binary.

pub mod apot;
pub mod clusters;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fixer;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
