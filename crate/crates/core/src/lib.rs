//! Camouflage-robust fraud detection on multi-relation graphs.
//!
//! The crate is organized around a two-stage detector:
//!
//! 1. A structure-only label propagation pass ([`label_prop`]) produces
//!    pseudo-labels, which supervise a feature filter ([`fcf`]) trained with a
//!    GNN head plus instance- and prototype-wise contrastive losses.
//! 2. Filtered and raw features are folded into per-node token sequences by
//!    label-guided group aggregation ([`lga`]) and classified by a
//!    manager-guided mixture-of-experts transformer head ([`rcr_moe`]) with
//!    regularized expert masking.
//!
//! [`pipeline`] orchestrates both stages end to end, [`graph`] owns the data
//! model plus dataset I/O and a synthetic generator, and [`metrics`] provides
//! exact rank-based evaluation. Gradient training runs on the small tape
//! autodiff engine in [`autodiff`] / [`nn`].

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod fcf;
pub mod graph;
pub mod label_prop;
pub mod lga;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rcr_moe;

pub use error::{Error, Result};
pub use graph::{MultiRelationGraph, SplitMasks, SyntheticConfig, UNKNOWN_LABEL};
pub use label_prop::PseudoLabels;
pub use lga::TokenSequence;
pub use pipeline::{RunReport, TrainConfig};
