//! Deterministic desk-scale simulator for skewed heterogeneous federated
//! learning with prototype rectification. The library covers synthetic data
//! generation and partitioning, a small manually-differentiated MLP, the
//! prototype losses and aggregation rules, the federation loop with two
//! reference baselines, and the metrics used to compare them.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod prototypes;
