//! Attribute-routed hierarchical re-identification.
//!
//! A tree of small embedding networks is derived from labelled training
//! data: easy attributes are classified near the root, attributes that are
//! strongly correlated with the path so far are skipped, and each node hands
//! its last hidden activation to the child picked by its classifier. The
//! gallery is partitioned by leaf and a query is matched only against the
//! partition it is routed to.
//!
//! Modules, bottom-up:
//!
//! * [`data`]: dataset type, manifest/feature file formats, subsetting.
//! * [`synth`]: synthetic datasets with controllable separation/correlation.
//! * [`nn`]: MLP, batch-hard triplet loss, cross-entropy head, cost model.
//! * [`tree`]: difficulty ranking, correlation tables, tree construction,
//!   architecture search, root-down training, random-tree ablation.
//! * [`engine`]: routing, gallery partitioning, Euclidean ranking.
//! * [`eval`]: rank-1, mAP, worst-case path cost, method comparison.
//! * [`pipeline`]: run configuration and end-to-end orchestration.

pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tree;

pub use error::{Error, Result};
