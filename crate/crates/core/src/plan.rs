//! Declarative n-D parallel recipes: validation against a model and cluster,
//! per-module resolution, and sweep enumeration.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{ClusterSpec, ModelSpec, ModuleKind, TransformerSpec, WorkloadSpec};
use crate::error::{Error, Result};
use crate::mesh::{build_mesh, Mesh};

pub const DP_REPLICATE: &str = "dp_replicate";
pub const DP_SHARD: &str = "dp_shard";
pub const SP: &str = "sp";
pub const EP_SHARD: &str = "ep_shard";
pub const EP: &str = "ep";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recompute {
    None,
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Offload {
    pub optimizer: bool,
    pub activations: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ParallelPlan {
    pub dp_replicate: u32,
    pub dp_shard: u32,
    /// Ulysses sequence-parallel size.
    pub sp: u32,
    pub ep: u32,
    pub micro_batch: u32,
    pub recompute: Recompute,
    pub offload: Offload,
    pub async_ulysses: bool,
    pub moe_overlap: bool,
    pub fsdp_prefetch_depth: u32,
    /// Shard dense parameters over `dp_shard x sp` instead of `dp_shard`
    /// alone. When off, sequence-parallel peers hold the same shards and
    /// their gradients are all-reduced alongside the replicate dimension.
    pub fsdp_over_sp: bool,
    /// Accepted only so that requests for them are rejected explicitly.
    pub tp: u32,
    pub pp: u32,
}

impl Default for ParallelPlan {
    fn default() -> Self {
        ParallelPlan {
            dp_replicate: 1,
            dp_shard: 1,
            sp: 1,
            ep: 1,
            micro_batch: 1,
            recompute: Recompute::Full,
            offload: Offload::default(),
            async_ulysses: false,
            moe_overlap: false,
            fsdp_prefetch_depth: 1,
            fsdp_over_sp: false,
            tp: 1,
            pp: 1,
        }
    }
}

impl ParallelPlan {
    pub fn world(&self) -> u64 {
        self.dp_replicate as u64 * self.dp_shard as u64 * self.sp as u64
    }

    pub fn data_parallel(&self) -> u64 {
        self.dp_replicate as u64 * self.dp_shard as u64
    }

    /// Size of the group that jointly holds one copy of the dense parameters.
    pub fn fsdp_degree(&self) -> u32 {
        if self.fsdp_over_sp {
            self.dp_shard * self.sp
        } else {
            self.dp_shard
        }
    }

    pub fn fsdp_dims(&self) -> Vec<&'static str> {
        if self.fsdp_over_sp {
            vec![DP_SHARD, SP]
        } else {
            vec![DP_SHARD]
        }
    }

    /// Ranks holding the same dense shard, whose gradients must be summed
    /// after the reduce-scatter.
    pub fn grad_replicate_degree(&self) -> u32 {
        if self.fsdp_over_sp {
            self.dp_replicate
        } else {
            self.dp_replicate * self.sp
        }
    }

    pub fn grad_replicate_dims(&self) -> Vec<&'static str> {
        if self.fsdp_over_sp {
            vec![DP_REPLICATE]
        } else {
            vec![DP_REPLICATE, SP]
        }
    }

    /// The flattened `dp_shard x sp` group experts are distributed over.
    pub fn expert_domain(&self) -> u32 {
        self.dp_shard * self.sp
    }

    pub fn expert_shard_degree(&self) -> u32 {
        self.expert_domain() / self.ep.max(1)
    }

    /// Micro-steps per optimizer step.
    pub fn grad_accum_steps(&self, workload: &WorkloadSpec) -> u64 {
        workload.global_batch / (self.data_parallel() * self.micro_batch as u64)
    }

    /// `(dp_replicate, dp_shard, sp)`, outermost to innermost.
    pub fn mesh(&self) -> Result<Mesh> {
        build_mesh(
            &[(DP_REPLICATE, self.dp_replicate), (DP_SHARD, self.dp_shard), (SP, self.sp)],
            self.world() as u32,
        )
    }

    /// The same ranks viewed as `(dp_replicate, ep_shard, ep)`: the flattened
    /// `dp_shard x sp` block split with the expert group innermost.
    pub fn expert_mesh(&self) -> Result<Mesh> {
        build_mesh(
            &[(DP_REPLICATE, self.dp_replicate), (EP_SHARD, self.expert_shard_degree()), (EP, self.ep)],
            self.world() as u32,
        )
    }

    /// Method label in the `FSDP[+SPk][+EPk]` form used by result tables.
    /// Sequence parallelism is spelled out as `SP1` when EP is present.
    pub fn label(&self) -> String {
        let mut s = String::from("FSDP");
        if self.sp > 1 || self.ep > 1 {
            s.push_str(&format!("+SP{}", self.sp));
        }
        if self.ep > 1 {
            s.push_str(&format!("+EP{}", self.ep));
        }
        s
    }

    /// Sort key for deterministic plan ordering.
    pub fn key(&self) -> (u32, u32, u32, u32) {
        (self.sp, self.ep, self.dp_replicate, self.micro_batch)
    }
}

impl fmt::Display for ParallelPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (dp_replicate={}, dp_shard={}, sp={}, ep={}, m={})",
            self.label(),
            self.dp_replicate,
            self.dp_shard,
            self.sp,
            self.ep,
            self.micro_batch
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    ZeroSize,
    WorldProduct,
    HeadDivisibility,
    KvHeadDivisibility,
    SeqDivisibility,
    EpGroupDivisibility,
    ExpertDivisibility,
    EpWithoutExperts,
    GlobalBatchDivisibility,
    UnsupportedParallelism,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::ZeroSize => "zero_size",
            ViolationCode::WorldProduct => "world_product",
            ViolationCode::HeadDivisibility => "head_divisibility",
            ViolationCode::KvHeadDivisibility => "kv_head_divisibility",
            ViolationCode::SeqDivisibility => "seq_divisibility",
            ViolationCode::EpGroupDivisibility => "ep_group_divisibility",
            ViolationCode::ExpertDivisibility => "expert_divisibility",
            ViolationCode::EpWithoutExperts => "ep_without_experts",
            ViolationCode::GlobalBatchDivisibility => "global_batch_divisibility",
            ViolationCode::UnsupportedParallelism => "unsupported_parallelism",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

fn violation(code: ViolationCode, message: String) -> Violation {
    Violation { code, message }
}

/// Checks every composition rule and returns all violations found, in a
/// fixed order. An empty list means the plan is valid.
pub fn validate(
    plan: &ParallelPlan,
    cluster: &ClusterSpec,
    model: &ModelSpec,
    workload: &WorkloadSpec,
) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();
    let sizes = [
        ("dp_replicate", plan.dp_replicate),
        ("dp_shard", plan.dp_shard),
        ("sp", plan.sp),
        ("ep", plan.ep),
        ("micro_batch", plan.micro_batch),
    ];
    for (name, v) in sizes {
        if v == 0 {
            out.push(violation(ZeroSize, format!("{name} must be >= 1")));
        }
    }
    if !out.is_empty() {
        return out;
    }
    if plan.tp != 1 || plan.pp != 1 {
        out.push(violation(
            UnsupportedParallelism,
            format!("tensor/pipeline parallelism not supported (tp={}, pp={})", plan.tp, plan.pp),
        ));
    }
    let world = cluster.world_size() as u64;
    if plan.world() != world {
        out.push(violation(
            WorldProduct,
            format!(
                "dp_replicate x dp_shard x sp = {}x{}x{} = {} != world {}",
                plan.dp_replicate,
                plan.dp_shard,
                plan.sp,
                plan.world(),
                world
            ),
        ));
    }
    let arch = model.foundation_arch();
    let sp = plan.sp as u64;
    if !arch.heads.is_multiple_of(sp) {
        out.push(violation(HeadDivisibility, format!("heads {} not divisible by sp {}", arch.heads, sp)));
    }
    if !arch.kv_heads.is_multiple_of(sp) {
        out.push(violation(
            KvHeadDivisibility,
            format!("kv_heads {} not divisible by sp {}", arch.kv_heads, sp),
        ));
    }
    if !workload.seq_len.is_multiple_of(sp) {
        out.push(violation(
            SeqDivisibility,
            format!("seq_len {} not divisible by sp {}", workload.seq_len, sp),
        ));
    }
    let moe_modules: Vec<_> =
        model.modules.iter().filter_map(|m| m.arch.as_ref().and_then(|a| a.moe).map(|e| (m, e))).collect();
    if plan.ep > 1 && moe_modules.is_empty() {
        out.push(violation(EpWithoutExperts, format!("ep {} requested on a model without experts", plan.ep)));
    }
    if !plan.expert_domain().is_multiple_of(plan.ep) {
        out.push(violation(
            EpGroupDivisibility,
            format!("ep {} does not divide dp_shard x sp = {}", plan.ep, plan.expert_domain()),
        ));
    }
    for (m, moe) in &moe_modules {
        if moe.num_experts % plan.ep as u64 != 0 {
            out.push(violation(
                ExpertDivisibility,
                format!("module {:?}: {} experts not divisible by ep {}", m.name, moe.num_experts, plan.ep),
            ));
        }
    }
    let per_step = plan.data_parallel() * plan.micro_batch as u64;
    if !workload.global_batch.is_multiple_of(per_step) {
        out.push(violation(
            GlobalBatchDivisibility,
            format!(
                "global_batch {} not divisible by dp_replicate x dp_shard x micro_batch = {}",
                workload.global_batch, per_step
            ),
        ));
    }
    out
}

pub fn ensure_valid(
    plan: &ParallelPlan,
    cluster: &ClusterSpec,
    model: &ModelSpec,
    workload: &WorkloadSpec,
) -> Result<()> {
    let v = validate(plan, cluster, model, workload);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::PlanInvalid(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSharding {
    pub experts_per_rank: u64,
    /// Each held expert's weights are further split along dimension 0
    /// across this many ranks.
    pub per_expert_fsdp_degree: u32,
}

pub fn resolve_expert_sharding(plan: &ParallelPlan, arch: &TransformerSpec) -> Result<ExpertSharding> {
    let moe = arch
        .moe
        .ok_or_else(|| Error::PlanInvalid(vec![violation(
            ViolationCode::EpWithoutExperts,
            "expert sharding requested for a dense module".into(),
        )]))?;
    if plan.ep == 0 || moe.num_experts % plan.ep as u64 != 0 || !plan.expert_domain().is_multiple_of(plan.ep) {
        return Err(Error::PlanInvalid(vec![violation(
            ViolationCode::ExpertDivisibility,
            format!("ep {} incompatible with {} experts over {} ranks", plan.ep, moe.num_experts, plan.expert_domain()),
        )]));
    }
    Ok(ExpertSharding {
        experts_per_rank: moe.num_experts / plan.ep as u64,
        per_expert_fsdp_degree: plan.expert_shard_degree(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulePlan {
    pub module: String,
    pub fsdp: bool,
    pub participates_in_sp: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_placement: Option<ExpertSharding>,
}

pub fn resolve_modules(plan: &ParallelPlan, model: &ModelSpec) -> Result<Vec<ModulePlan>> {
    model
        .modules
        .iter()
        .map(|m| {
            let expert_placement = match &m.arch {
                Some(a) if a.moe.is_some() => Some(resolve_expert_sharding(plan, a)?),
                _ => None,
            };
            Ok(ModulePlan {
                module: m.name.clone(),
                fsdp: plan.fsdp_degree() > 1,
                participates_in_sp: m.kind == ModuleKind::Foundation,
                expert_placement,
            })
        })
        .collect()
}

/// Candidate sets for a plan sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanLimits {
    pub sp: Vec<u32>,
    pub ep: Vec<u32>,
    pub dp_replicate: Vec<u32>,
    pub micro_batch: Vec<u32>,
}

impl PlanLimits {
    pub fn new(sp: Vec<u32>, ep: Vec<u32>, dp_replicate: Vec<u32>, micro_batch: Vec<u32>) -> Self {
        let clean = |mut v: Vec<u32>| {
            if v.is_empty() {
                v.push(1);
            }
            v.sort_unstable();
            v.dedup();
            v
        };
        PlanLimits { sp: clean(sp), ep: clean(ep), dp_replicate: clean(dp_replicate), micro_batch: clean(micro_batch) }
    }
}

impl Default for PlanLimits {
    fn default() -> Self {
        PlanLimits::new(vec![1], vec![1], vec![1], vec![1])
    }
}

/// Every combination of the limits with its verdict, ordered by
/// `(sp, ep, dp_replicate, micro_batch)`. `dp_shard` absorbs the rest of the
/// world; toggles are copied from `template`.
pub fn enumerate_candidates(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    limits: &PlanLimits,
    template: &ParallelPlan,
) -> Vec<(ParallelPlan, Vec<Violation>)> {
    let world = cluster.world_size();
    let mut out = Vec::new();
    for &sp in &limits.sp {
        for &ep in &limits.ep {
            for &dp_replicate in &limits.dp_replicate {
                for &micro_batch in &limits.micro_batch {
                    let denom = dp_replicate.max(1) * sp.max(1);
                    let plan = ParallelPlan {
                        dp_replicate,
                        dp_shard: (world / denom).max(1),
                        sp,
                        ep,
                        micro_batch,
                        ..template.clone()
                    };
                    let v = validate(&plan, cluster, model, workload);
                    out.push((plan, v));
                }
            }
        }
    }
    out
}

pub fn enumerate_plans(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    workload: &WorkloadSpec,
    limits: &PlanLimits,
    template: &ParallelPlan,
) -> Vec<ParallelPlan> {
    enumerate_candidates(cluster, model, workload, limits, template)
        .into_iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(p, _)| p)
        .collect()
}
