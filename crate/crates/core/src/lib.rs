//! Desk-scale toolkit for neuron-level safety attribution.
//!
//! The crate trains a tiny decoder-only transformer in a synthetic
//! request/refusal world, scores every inner channel of its depth-2 modules
//! for utility and safety importance, partitions the channels into
//! exclusive-safety / exclusive-utility / complex / redundant groups, and
//! uses those groups to demonstrate and defend against fine-tuning attacks
//! on safety, to align on a redundant-unit budget, and to probe reasoning
//! direction through hidden-state distances.
//!
//! Entry points:
//! - [`tensor`] — f64 tape autodiff primitives
//! - [`model`] — the tiny transformer, unit addressing, pruning, decoding
//! - [`data`] — synthetic vocabulary, tasks, calibration sets, probe triples
//! - [`train`] — SFT loop with freeze masks and the utility/ASR evaluators
//! - [`attribution`] — per-channel importance scores and standardization
//! - [`categorize`] — ESU/EUU/CU/RU partition, ratio search, mask building
//! - [`analysis`] — transfer matrices and hidden-state probes
//! - [`config`], [`checkpoint`], [`report`], [`cli`] — run configuration,
//!   persistence, report emission, and the command-line surface

pub mod analysis;
pub mod attribution;
pub mod categorize;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
