//! Core library of `netmil`: scoring of second-level domains as malicious or
//! benign from raw bipartite interaction graphs.
//!
//! The pipeline ingests one bipartite graph per relation (domain-client,
//! domain-binary, ...), projects each onto a domain-only transformed graph,
//! extracts neighborhood samples around a central domain, and scores them
//! with a hierarchical multi-instance network. A probabilistic
//! threat-propagation baseline, a leakage-safe K-fold evaluation harness and
//! a synthetic snapshot generator round out the toolbox.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod hmil;
pub mod model;
pub mod nn;
pub mod ptp;
pub mod sampling;
pub mod seed;
pub mod synth;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
