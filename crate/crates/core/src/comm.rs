//! Closed-form collective volumes and alpha-beta transfer times.
//!
//! Volumes are per-rank bytes sent, averaged over the group. Ring algorithms
//! are assumed for all-gather, reduce-scatter and all-reduce; all-to-all is a
//! single phase.

use serde::{Deserialize, Serialize};

use crate::config::{LinkSpec, ModuleSpec, TransformerSpec, WorkloadSpec};
use crate::plan::ParallelPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
    AllReduce,
    AllToAll,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 4] =
        [CollectiveKind::AllGather, CollectiveKind::ReduceScatter, CollectiveKind::AllReduce, CollectiveKind::AllToAll];

    pub fn short_name(&self) -> &'static str {
        match self {
            CollectiveKind::AllGather => "AG",
            CollectiveKind::ReduceScatter => "RS",
            CollectiveKind::AllReduce => "AR",
            CollectiveKind::AllToAll => "A2A",
        }
    }

    /// Latency terms paid by one collective over `p` ranks.
    pub fn steps(&self, p: u32) -> u32 {
        if p <= 1 {
            return 0;
        }
        match self {
            CollectiveKind::AllGather | CollectiveKind::ReduceScatter => p - 1,
            CollectiveKind::AllReduce => 2 * (p - 1),
            CollectiveKind::AllToAll => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTopology {
    pub size: u32,
    pub spans_nodes: bool,
}

/// `M·(P−1)/P` computed from the exact integer numerator.
fn fraction(bytes: u64, p: u32) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    (bytes as u128 * (p as u128 - 1)) as f64 / p as f64
}

/// Per-rank bytes sent. For all-to-all, `full_bytes` is the local payload of
/// one rank; otherwise it is the size of the full (unsharded) buffer.
pub fn collective_volume(kind: CollectiveKind, full_bytes: u64, p: u32) -> f64 {
    match kind {
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter | CollectiveKind::AllToAll => {
            fraction(full_bytes, p)
        }
        CollectiveKind::AllReduce => fraction(2 * full_bytes, p),
    }
}

pub fn collective_time(kind: CollectiveKind, full_bytes: u64, topo: GroupTopology, link: &LinkSpec) -> f64 {
    if topo.size <= 1 {
        return 0.0;
    }
    let (bw, lat) = if topo.spans_nodes {
        (link.inter_node_bw, link.inter_latency)
    } else {
        (link.intra_node_bw, link.intra_latency)
    };
    kind.steps(topo.size) as f64 * lat + collective_volume(kind, full_bytes, topo.size) / bw
}

/// Tokens held by one rank in one micro-step.
pub fn local_tokens(plan: &ParallelPlan, workload: &WorkloadSpec) -> u64 {
    plan.micro_batch as u64 * workload.seq_len / plan.sp.max(1) as u64
}

/// Local payloads of the four attention all-to-alls (query, key, value,
/// output) for one layer.
pub fn ulysses_payloads(arch: &TransformerSpec, tokens: u64, dtype: u64) -> [u64; 4] {
    let q = arch.hidden * tokens * dtype;
    let kv = arch.kv_dim() * tokens * dtype;
    [q, kv, kv, q]
}

/// Per-rank bytes per layer for the forward attention all-to-alls.
pub fn ulysses_attention_volume(plan: &ParallelPlan, arch: &TransformerSpec, workload: &WorkloadSpec, dtype: u64) -> f64 {
    let payload: u64 = ulysses_payloads(arch, local_tokens(plan, workload), dtype).iter().sum();
    fraction(payload, plan.sp)
}

/// Upper bound of [`ulysses_attention_volume`]: the full local payload, which
/// stays fixed when sequence length and `sp` grow together.
pub fn ulysses_volume_bound(plan: &ParallelPlan, arch: &TransformerSpec, workload: &WorkloadSpec, dtype: u64) -> u64 {
    ulysses_payloads(arch, local_tokens(plan, workload), dtype).iter().sum()
}

/// Per-rank bytes per step for sharded-parameter traffic over a shard group
/// of `p` ranks: forward all-gather, backward all-gather, gradient
/// reduce-scatter.
pub fn fsdp_step_volume(p: u32, params: u64, dtype: u64) -> f64 {
    3.0 * collective_volume(CollectiveKind::AllGather, params * dtype, p)
}

/// Extra per-rank bytes for the cross-replica all-reduce of sharded gradients
/// on a `shard x replicate` mesh.
pub fn hsdp_allreduce_volume(shard: u32, replicate: u32, params: u64, dtype: u64) -> f64 {
    let shard_bytes = (params * dtype).div_ceil(shard.max(1) as u64);
    collective_volume(CollectiveKind::AllReduce, shard_bytes, replicate)
}

/// Local payload of one MoE dispatch (or combine) all-to-all.
pub fn ep_payload(arch: &TransformerSpec, tokens: u64, dtype: u64, imbalance: f64) -> u64 {
    let k = arch.moe.map(|m| m.top_k).unwrap_or(0);
    let base = tokens * k * arch.hidden * dtype;
    (base as f64 * imbalance).round() as u64
}

/// Dispatch plus combine bytes per rank for one MoE layer.
pub fn ep_dispatch_volume(plan: &ParallelPlan, arch: &TransformerSpec, tokens: u64, dtype: u64, imbalance: f64) -> f64 {
    let k = arch.moe.map(|m| m.top_k).unwrap_or(0);
    2.0 * fraction(tokens * k * arch.hidden * dtype, plan.ep) * imbalance
}

/// Modality feature tokens a rank produces per micro-step: its share of the
/// local sequence, rounded down to whole items.
pub fn modality_tokens(module: &ModuleSpec, plan: &ParallelPlan, workload: &WorkloadSpec) -> u64 {
    let share = workload.mix_fraction(&module.name) * local_tokens(plan, workload) as f64;
    let share = share.floor() as u64;
    match module.tokens_per_item {
        0 => 0,
        t => share / t * t,
    }
}

/// Per-rank bytes of the feature scatter that moves modality features to the
/// ranks owning their sequence positions.
pub fn encoder_scatter_volume(plan: &ParallelPlan, feature_tokens: u64, hidden: u64, dtype: u64) -> f64 {
    fraction(feature_tokens * hidden * dtype, plan.sp)
}
