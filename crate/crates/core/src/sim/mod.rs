//! Step graph construction, scheduling and reporting.

pub mod graph;
pub mod report;
pub mod schedule;

pub use graph::{build_step_graph, CommDomain, NodeId, OpKind, OpNode, Phase, StepGraph};
pub use report::{chrome_trace, report, PhaseTime, StepReport};
pub use schedule::{critical_path, simulate, Channel, Event, Timeline, TimelineEvent};

use crate::config::{ClusterSpec, ModelSpec, WorkloadSpec};
use crate::error::Result;
use crate::plan::ParallelPlan;

/// Builds, schedules and reports one step.
pub fn run(plan: &ParallelPlan, model: &ModelSpec, cluster: &ClusterSpec, workload: &WorkloadSpec) -> Result<(Timeline, StepReport)> {
    let graph = build_step_graph(plan, model, cluster, workload)?;
    let timeline = simulate(&graph, plan, cluster)?;
    let rep = report(&timeline, plan, model, cluster, workload);
    Ok((timeline, rep))
}
