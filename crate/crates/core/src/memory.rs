//! Analytic per-rank peak memory.

use serde::{Deserialize, Serialize};

use crate::comm::{ep_payload, local_tokens, modality_tokens, ulysses_payloads};
use crate::config::{Assumptions, ClusterSpec, GpuSpec, ModelSpec, ModuleKind, WorkloadSpec};
use crate::plan::{ParallelPlan, Recompute};

/// fp32 master weights plus two Adam moments.
pub const OPTIMIZER_BYTES_PER_PARAM: u64 = 12;
/// Bytes per logit element: fp32 logits plus a half-precision copy.
pub const LOGIT_BYTES: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub params: u64,
    pub grads: u64,
    pub optimizer: u64,
    pub activations_saved: u64,
    pub activations_working: u64,
    pub comm_buffers: u64,
    pub logits: u64,
    pub runtime_overhead: u64,
    pub total: u64,
}

impl MemoryBreakdown {
    pub fn components(&self) -> [(&'static str, u64); 8] {
        [
            ("params", self.params),
            ("grads", self.grads),
            ("optimizer", self.optimizer),
            ("activations_saved", self.activations_saved),
            ("activations_working", self.activations_working),
            ("comm_buffers", self.comm_buffers),
            ("logits", self.logits),
            ("runtime_overhead", self.runtime_overhead),
        ]
    }

    fn with_total(mut self) -> Self {
        self.total = self.components().iter().map(|(_, v)| v).sum();
        self
    }

    pub fn total_gib(&self) -> f64 {
        self.total as f64 / (1u64 << 30) as f64
    }
}

/// Per-rank parameter counts after sharding, split by whether they train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct ShardedParams {
    all: u64,
    trainable: u64,
}

fn sharded_params(plan: &ParallelPlan, model: &ModelSpec) -> ShardedParams {
    let dense_p = plan.fsdp_degree().max(1) as u64;
    let expert_p = plan.expert_domain().max(1) as u64;
    let mut out = ShardedParams::default();
    for m in &model.modules {
        let n = match &m.arch {
            Some(a) => {
                let experts: u64 = (0..a.layers).map(|i| a.layer_params(i).experts).sum();
                a.dense_param_count().div_ceil(dense_p) + experts.div_ceil(expert_p)
            }
            None => m.param_count().div_ceil(dense_p),
        };
        out.all += n;
        if m.trainable {
            out.trainable += n;
        }
    }
    out
}

/// Trainable parameters held by one rank after sharding.
pub fn sharded_trainable_params(plan: &ParallelPlan, model: &ModelSpec) -> u64 {
    sharded_params(plan, model).trainable
}

/// Largest parameter block materialized by one all-gather, in elements.
pub fn max_gathered_unit(plan: &ParallelPlan, model: &ModelSpec) -> u64 {
    let mut best = 0;
    for m in &model.modules {
        match &m.arch {
            Some(a) => {
                best = best.max(a.non_layer_params());
                let experts_held = a.moe.map(|e| e.num_experts / plan.ep.max(1) as u64).unwrap_or(0);
                for i in 0..a.layers {
                    let lp = a.layer_params(i);
                    let experts = match a.moe {
                        Some(e) if lp.is_moe() => experts_held * lp.experts / e.num_experts,
                        _ => 0,
                    };
                    best = best.max(lp.dense() + experts);
                }
            }
            None => best = best.max(m.param_count()),
        }
    }
    best
}

/// Largest single all-to-all payload a rank stages.
fn max_a2a_payload(plan: &ParallelPlan, model: &ModelSpec, workload: &WorkloadSpec, knobs: &Assumptions) -> u64 {
    let arch = model.foundation_arch();
    let b = model.param_dtype_bytes;
    let tokens = local_tokens(plan, workload);
    let mut best = 0;
    if plan.sp > 1 {
        best = best.max(ulysses_payloads(arch, tokens, b).into_iter().max().unwrap_or(0));
        for m in model.modality_modules() {
            best = best.max(modality_tokens(m, plan, workload) * arch.hidden * b);
        }
    }
    if plan.ep > 1 && arch.moe.is_some() {
        best = best.max(ep_payload(arch, tokens, b, knobs.moe_imbalance));
    }
    best
}

pub fn estimate(plan: &ParallelPlan, model: &ModelSpec, cluster: &ClusterSpec, workload: &WorkloadSpec) -> MemoryBreakdown {
    let knobs = &cluster.assumptions;
    let b = model.param_dtype_bytes;
    let arch = model.foundation_arch();
    let sharded = sharded_params(plan, model);

    let seq_local = workload.seq_len / plan.sp.max(1) as u64;
    let m = plan.micro_batch as u64;
    let token_bytes = m * seq_local * arch.hidden * b;
    let activations_saved = if plan.offload.activations {
        0
    } else {
        match plan.recompute {
            Recompute::Full => arch.layers * token_bytes,
            Recompute::None => arch.layers * knobs.c_work * token_bytes,
        }
    };
    let logit_tokens = if knobs.naive_logits { seq_local } else { knobs.ce_chunk_tokens.min(seq_local) };
    let comm_buffers = (1 + plan.fsdp_prefetch_depth as u64) * max_gathered_unit(plan, model) * b
        + 2 * max_a2a_payload(plan, model, workload, knobs);

    debug_assert_eq!(model.foundation().kind, ModuleKind::Foundation);
    MemoryBreakdown {
        params: sharded.all * b,
        grads: sharded.trainable * b,
        optimizer: if plan.offload.optimizer { 0 } else { sharded.trainable * OPTIMIZER_BYTES_PER_PARAM },
        activations_saved,
        activations_working: knobs.c_work * token_bytes,
        comm_buffers,
        logits: m * logit_tokens * arch.vocab * LOGIT_BYTES,
        runtime_overhead: knobs.runtime_overhead_bytes,
        total: 0,
    }
    .with_total()
}

pub fn fits(breakdown: &MemoryBreakdown, gpu: &GpuSpec) -> bool {
    breakdown.total <= gpu.hbm_bytes
}
