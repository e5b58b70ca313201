//! Runner for nn-emd: configuration, dataset ingestion, the all-in-one
//! mode, the TCP roles and the depth benchmark.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod roles;
pub mod run;
pub mod wire;

pub use config::{Role, RunConfig};
pub use nn_emd_core as core;
