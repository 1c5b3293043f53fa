//! Step metrics and trace export.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::graph::Phase;
use super::schedule::{Channel, Timeline};
use crate::config::{flops_per_token, ClusterSpec, ModelSpec, WorkloadSpec};
use crate::plan::ParallelPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: Phase,
    /// Mean over devices.
    pub compute_s: f64,
    pub comm_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_time: f64,
    /// Tokens per second per GPU.
    pub throughput: f64,
    pub mfu: f64,
    pub exposed_comm: f64,
    pub flops_per_token: u64,
    pub tokens_per_step: u64,
    pub grad_accum_steps: u64,
    /// Largest per-device busy time on each channel.
    pub compute_time: f64,
    pub comm_time: f64,
    pub phases: Vec<PhaseTime>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn report(timeline: &Timeline, plan: &ParallelPlan, model: &ModelSpec, cluster: &ClusterSpec, workload: &WorkloadSpec) -> StepReport {
    let step_time = timeline.step_time();
    let world = timeline.world();
    let tokens = workload.global_batch * workload.seq_len;
    let fpt = flops_per_token(model, workload.seq_len);
    let throughput = if step_time > 0.0 { tokens as f64 / (step_time * world as f64) } else { 0.0 };
    let mfu = throughput * fpt as f64 / cluster.gpu.peak_flops;

    let mut exposed = 0.0;
    let mut compute_time: f64 = 0.0;
    let mut comm_time: f64 = 0.0;
    let phase_list = [Phase::Modality, Phase::Forward, Phase::Head, Phase::Backward, Phase::Optimizer];
    let mut per_phase = [[0.0f64; 2]; 5];
    for d in 0..world {
        exposed += timeline.exposed_comm(d);
        compute_time = compute_time.max(timeline.busy(d, Channel::Compute));
        comm_time = comm_time.max(timeline.busy(d, Channel::Comm));
        for (c, channel) in [Channel::Compute, Channel::Comm].into_iter().enumerate() {
            for e in timeline.lane(d, channel) {
                let p = timeline.node_phase(e.node);
                let slot = phase_list.iter().position(|x| *x == p).expect("known phase");
                per_phase[slot][c] += e.end - e.start;
            }
        }
    }
    let w = world.max(1) as f64;
    let phases = phase_list
        .iter()
        .zip(per_phase)
        .filter(|(_, t)| t[0] > 0.0 || t[1] > 0.0)
        .map(|(p, t)| PhaseTime { phase: *p, compute_s: t[0] / w, comm_s: t[1] / w })
        .collect();

    let mut notes = Vec::new();
    if plan.async_ulysses && plan.sp > 1 {
        notes.push("async_ulysses overlaps each projection fully with its all-to-all; treat the gain as an upper bound".to_string());
    }
    if plan.offload.optimizer || plan.offload.activations {
        notes.push("host transfers for offloaded state are not timed".to_string());
    }

    StepReport {
        step_time,
        throughput,
        mfu,
        exposed_comm: if step_time > 0.0 { exposed / w / step_time } else { 0.0 },
        flops_per_token: fpt,
        tokens_per_step: tokens,
        grad_accum_steps: plan.grad_accum_steps(workload),
        compute_time,
        comm_time,
        phases,
        notes,
    }
}

/// Chrome trace event list: one complete event per timeline event, times in
/// microseconds, `pid` = device, `tid` = channel.
pub fn chrome_trace(timeline: &Timeline) -> Value {
    let mut events = Vec::new();
    for d in 0..timeline.world() {
        for (tid, name) in [(0, "compute"), (1, "comm")] {
            events.push(json!({"name": "thread_name", "ph": "M", "pid": d, "tid": tid, "args": {"name": name}}));
        }
    }
    for e in timeline.events() {
        events.push(json!({
            "name": timeline.node_name(e.node),
            "cat": timeline.node_phase(e.node).as_str(),
            "ph": "X",
            "ts": e.start * 1e6,
            "dur": (e.end - e.start) * 1e6,
            "pid": e.device,
            "tid": match e.channel { Channel::Compute => 0, Channel::Comm => 1 },
        }));
    }
    json!({ "traceEvents": events, "displayTimeUnit": "ms" })
}
