//! Parallelism planning for large-model training: device meshes, plan
//! validation, analytic memory and communication models, a step simulator,
//! sequence packing and checkpoint resharding.

pub mod comm;
pub mod config;
pub mod error;
pub mod memory;
pub mod mesh;
pub mod pack;
pub mod plan;
pub mod report;
pub mod reshard;
pub mod sim;

pub use config::{ClusterSpec, ModelSpec, WorkloadSpec};
pub use error::{Error, Result};
pub use plan::ParallelPlan;
