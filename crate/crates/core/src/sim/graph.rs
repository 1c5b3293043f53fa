//! Data-flow graph of one training step.
//!
//! Every node runs on every device (SPMD). Compute nodes occupy a device's
//! compute channel; collective nodes occupy the comm channel of all members of
//! the device's group in the node's [`CommDomain`]. Node ids are assigned in
//! issue order and every dependency points to a smaller id.

use serde::{Deserialize, Serialize};

use crate::comm::{ep_payload, local_tokens, modality_tokens, ulysses_payloads, CollectiveKind};
use crate::config::{ClusterSpec, ModelSpec, ModuleSpec, TransformerSpec, WorkloadSpec};
use crate::error::{Error, Result};
use crate::memory::sharded_trainable_params;
use crate::plan::{ParallelPlan, Recompute, DP_REPLICATE, EP, EP_SHARD, SP};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommDomain {
    /// Dense parameter shard group.
    Fsdp,
    /// Ranks holding the same dense shard.
    GradReplicate,
    Ulysses,
    /// Expert-parallel token exchange.
    Expert,
    /// Ranks sharing one expert's dimension-0 shards.
    ExpertShard,
    ExpertReplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeshKind {
    Main,
    Expert,
}

impl CommDomain {
    pub const ALL: [CommDomain; 6] = [
        CommDomain::Fsdp,
        CommDomain::GradReplicate,
        CommDomain::Ulysses,
        CommDomain::Expert,
        CommDomain::ExpertShard,
        CommDomain::ExpertReplicate,
    ];

    pub fn mesh_dims(&self, plan: &ParallelPlan) -> (MeshKind, Vec<&'static str>) {
        match self {
            CommDomain::Fsdp => (MeshKind::Main, plan.fsdp_dims()),
            CommDomain::GradReplicate => (MeshKind::Main, plan.grad_replicate_dims()),
            CommDomain::Ulysses => (MeshKind::Main, vec![SP]),
            CommDomain::Expert => (MeshKind::Expert, vec![EP]),
            CommDomain::ExpertShard => (MeshKind::Expert, vec![EP_SHARD]),
            CommDomain::ExpertReplicate => (MeshKind::Expert, vec![DP_REPLICATE]),
        }
    }

    pub fn size(&self, plan: &ParallelPlan) -> u32 {
        match self {
            CommDomain::Fsdp => plan.fsdp_degree(),
            CommDomain::GradReplicate => plan.grad_replicate_degree(),
            CommDomain::Ulysses => plan.sp,
            CommDomain::Expert => plan.ep,
            CommDomain::ExpertShard => plan.expert_shard_degree(),
            CommDomain::ExpertReplicate => plan.dp_replicate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OpKind {
    Compute { flops: u64 },
    /// `bytes` follows [`crate::comm::collective_volume`]: the full buffer
    /// for gather/scatter/reduce, the local payload for all-to-all.
    Collective { kind: CollectiveKind, domain: CommDomain, bytes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Encoders and decoders producing input embeddings.
    Modality,
    Forward,
    Head,
    Backward,
    Optimizer,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Modality => "modality",
            Phase::Forward => "forward",
            Phase::Head => "head",
            Phase::Backward => "backward",
            Phase::Optimizer => "optimizer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: NodeId,
    pub name: String,
    pub kind: OpKind,
    pub deps: Vec<NodeId>,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    pub micro_step: u32,
}

impl OpNode {
    pub fn is_collective(&self) -> bool {
        matches!(self.kind, OpKind::Collective { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGraph {
    pub nodes: Vec<OpNode>,
}

impl StepGraph {
    /// Structural checks: dense ids, known dependencies, positive costs.
    /// Cycles are detected by the scheduler.
    pub fn check(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Graph(format!("node at index {i} has id {}", n.id)));
            }
            if let Some(d) = n.deps.iter().find(|&&d| d >= self.nodes.len()) {
                return Err(Error::Graph(format!("node {i} depends on unknown node {d}")));
            }
            let positive = match n.kind {
                OpKind::Compute { flops } => flops > 0,
                OpKind::Collective { bytes, .. } => bytes > 0,
            };
            if !positive {
                return Err(Error::Graph(format!("node {i} ({}) has zero cost", n.name)));
            }
        }
        Ok(())
    }

    pub fn count(&self, pred: impl Fn(&OpNode) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(n)).count()
    }
}

/// Completion handle: the nodes a successor must wait for.
type Done = Vec<NodeId>;

struct Builder<'a> {
    plan: &'a ParallelPlan,
    nodes: Vec<OpNode>,
    micro_step: u32,
    phase: Phase,
    layer: Option<u32>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, kind: OpKind, deps: &[NodeId]) -> NodeId {
        let id = self.nodes.len();
        let mut deps = deps.to_vec();
        deps.sort_unstable();
        deps.dedup();
        let name = match self.layer {
            Some(l) => format!("mb{}.{}.L{l}.{name}", self.micro_step, self.phase.as_str()),
            None => format!("mb{}.{}.{name}", self.micro_step, self.phase.as_str()),
        };
        self.nodes.push(OpNode { id, name, kind, deps, phase: self.phase, layer: self.layer, micro_step: self.micro_step });
        id
    }

    fn compute(&mut self, name: &str, flops: u64, deps: &[NodeId]) -> Done {
        if flops == 0 {
            return deps.to_vec();
        }
        vec![self.push(name.to_string(), OpKind::Compute { flops }, deps)]
    }

    /// Skipped (returns `deps`) when the group is trivial or nothing moves.
    fn collective(&mut self, name: &str, kind: CollectiveKind, domain: CommDomain, bytes: u64, deps: &[NodeId]) -> Done {
        if bytes == 0 || domain.size(self.plan) <= 1 {
            return deps.to_vec();
        }
        vec![self.push(format!("{}.{name}", kind.short_name()), OpKind::Collective { kind, domain, bytes }, deps)]
    }
}

fn join(a: &[NodeId], b: &[NodeId]) -> Done {
    let mut v = a.to_vec();
    v.extend_from_slice(b);
    v
}

/// Per-layer sizes shared by the forward, recompute and backward segments.
struct LayerCosts {
    qkv_flops: u64,
    core_flops: u64,
    out_flops: u64,
    mlp_flops: u64,
    router_flops: u64,
    expert_flops: u64,
    ulysses: [u64; 4],
    ep_payload: u64,
    dense_bytes: u64,
    held_expert_bytes: u64,
    is_moe: bool,
}

fn layer_costs(
    plan: &ParallelPlan,
    arch: &TransformerSpec,
    layer: u64,
    tokens: u64,
    seq_len: u64,
    b: u64,
    imbalance: f64,
) -> LayerCosts {
    let lp = arch.layer_params(layer);
    let held_experts = match arch.moe {
        Some(m) if lp.is_moe() => lp.experts / m.num_experts * (m.num_experts / plan.ep.max(1) as u64),
        _ => 0,
    };
    LayerCosts {
        qkv_flops: 2 * lp.qkv * tokens,
        // causal attention over the full sequence for this rank's share of heads
        core_flops: 2 * arch.hidden * seq_len * tokens,
        out_flops: 2 * lp.out * tokens,
        mlp_flops: 2 * lp.mlp * tokens,
        router_flops: 2 * lp.router * tokens,
        expert_flops: 2 * lp.active_experts * tokens,
        ulysses: ulysses_payloads(arch, tokens, b),
        ep_payload: if lp.is_moe() { ep_payload(arch, tokens, b, imbalance) } else { 0 },
        dense_bytes: lp.dense() * b,
        held_expert_bytes: held_experts * b,
        is_moe: lp.is_moe(),
    }
}

impl Builder<'_> {
    /// Attention and MLP/MoE forward. `start` gates the first compute,
    /// `experts_ready` the expert compute.
    fn layer_forward(&mut self, c: &LayerCosts, start: &[NodeId], experts_ready: &[NodeId]) -> Done {
        let async_a2a = self.plan.async_ulysses;
        let qkv = self.compute("qkv", c.qkv_flops, start);
        let a2a_deps = if async_a2a { start.to_vec() } else { qkv.clone() };
        let mut gathered = qkv.clone();
        for (name, bytes) in ["q", "k", "v"].iter().zip(&c.ulysses[..3]) {
            let d = self.collective(&format!("ulysses_{name}"), CollectiveKind::AllToAll, CommDomain::Ulysses, *bytes, &a2a_deps);
            gathered = join(&gathered, &d);
        }
        let core = self.compute("attn", c.core_flops, &gathered);
        let a2a_o = self.collective("ulysses_o", CollectiveKind::AllToAll, CommDomain::Ulysses, c.ulysses[3], &core);
        let out = self.compute("o_proj", c.out_flops, if async_a2a { &core } else { &a2a_o });
        let after_attn = join(&out, &a2a_o);
        if !c.is_moe {
            return self.compute("mlp", c.mlp_flops, &after_attn);
        }
        let overlap = self.plan.moe_overlap;
        let router = self.compute("router", c.router_flops, &after_attn);
        let dispatch = self.collective("dispatch", CollectiveKind::AllToAll, CommDomain::Expert, c.ep_payload, &router);
        let expert_deps = join(if overlap { &router } else { &dispatch }, experts_ready);
        let expert = self.compute("experts", c.expert_flops, &expert_deps);
        let combine =
            self.collective("combine", CollectiveKind::AllToAll, CommDomain::Expert, c.ep_payload, if overlap { &dispatch } else { &expert });
        join(&expert, &combine)
    }

    /// Mirror of [`Self::layer_forward`] with gradient all-to-alls.
    /// `factor` scales weight-bearing compute (2 when weights train).
    fn layer_backward(&mut self, c: &LayerCosts, start: &[NodeId], experts_ready: &[NodeId], factor: u64) -> Done {
        let async_a2a = self.plan.async_ulysses;
        let overlap = self.plan.moe_overlap;
        let after_mlp = if c.is_moe {
            let comb = self.collective("combine_grad", CollectiveKind::AllToAll, CommDomain::Expert, c.ep_payload, start);
            let expert_deps = join(if overlap { start } else { &comb }, experts_ready);
            let expert = self.compute("experts_grad", factor * c.expert_flops, &expert_deps);
            let disp =
                self.collective("dispatch_grad", CollectiveKind::AllToAll, CommDomain::Expert, c.ep_payload, if overlap { &comb } else { &expert });
            self.compute("router_grad", factor * c.router_flops, &join(&expert, &disp))
        } else {
            self.compute("mlp_grad", factor * c.mlp_flops, start)
        };
        let out = self.compute("o_proj_grad", factor * c.out_flops, &after_mlp);
        let a2a_o = self.collective(
            "ulysses_o_grad",
            CollectiveKind::AllToAll,
            CommDomain::Ulysses,
            c.ulysses[3],
            if async_a2a { &after_mlp } else { &out },
        );
        let core = self.compute("attn_grad", 2 * c.core_flops, &join(&out, &a2a_o));
        let mut scattered = Vec::new();
        for (name, bytes) in ["q", "k", "v"].iter().zip(&c.ulysses[..3]) {
            let d = self.collective(&format!("ulysses_{name}_grad"), CollectiveKind::AllToAll, CommDomain::Ulysses, *bytes, &core);
            scattered = join(&scattered, &d);
        }
        let qkv_deps = if async_a2a || scattered.is_empty() { core.clone() } else { scattered.clone() };
        let qkv = self.compute("qkv_grad", factor * c.qkv_flops, &qkv_deps);
        join(&qkv, &scattered)
    }
}

/// Gradient reductions waiting to be issued after the next unit's gather.
#[derive(Default)]
struct PendingReduce {
    items: Vec<(String, CommDomain, CommDomain, u64, Done, Option<u32>)>,
}

/// Builds one optimizer step: `grad_accum_steps` micro-steps of
/// modality encoders, layered forward, head, layered backward, then the
/// optimizer update.
pub fn build_step_graph(plan: &ParallelPlan, model: &ModelSpec, cluster: &ClusterSpec, workload: &WorkloadSpec) -> Result<StepGraph> {
    let arch = model.foundation_arch();
    let foundation = model.foundation();
    let b = model.param_dtype_bytes;
    let tokens = local_tokens(plan, workload);
    let accum = plan.grad_accum_steps(workload).max(1);
    let knobs = &cluster.assumptions;
    let depth = plan.fsdp_prefetch_depth as usize;
    let any_trainable = model.modules.iter().any(|m| m.trainable);
    let lin_factor = if foundation.trainable { 2 } else { 1 };

    let costs: Vec<LayerCosts> =
        (0..arch.layers).map(|i| layer_costs(plan, arch, i, tokens, workload.seq_len, b, knobs.moe_imbalance)).collect();
    let modalities: Vec<&ModuleSpec> = model.modality_modules().collect();

    let mut g = Builder { plan, nodes: Vec::new(), micro_step: 0, phase: Phase::Modality, layer: None };
    // end of each gathered unit's compute, in issue order, for prefetch gating
    let mut unit_ends: Vec<Done> = Vec::new();
    let mut prev: Done = Vec::new();
    let mut pending = PendingReduce::default();

    // gate for the all-gather of the next unit: unit `n - 1 - depth` must be done
    let gather_gate = |unit_ends: &Vec<Done>| -> Done {
        let n = unit_ends.len();
        if n > depth {
            unit_ends[n - 1 - depth].clone()
        } else {
            Vec::new()
        }
    };

    fn flush(g: &mut Builder<'_>, pending: &mut PendingReduce) -> Done {
        let mut all = Vec::new();
        let saved = (g.phase, g.layer);
        for (name, rs_domain, ar_domain, bytes, deps, layer) in pending.items.drain(..) {
            g.phase = Phase::Backward;
            g.layer = layer;
            let rs = g.collective(&format!("{name}_grads"), CollectiveKind::ReduceScatter, rs_domain, bytes, &deps);
            let shard = bytes.div_ceil(rs_domain.size(g.plan).max(1) as u64);
            let ar = g.collective(&format!("{name}_grads"), CollectiveKind::AllReduce, ar_domain, shard, &rs);
            all.extend(ar);
        }
        (g.phase, g.layer) = saved;
        all
    }

    let mut reductions: Done = Vec::new();
    for mb in 0..accum as u32 {
        g.micro_step = mb;

        // modality encoders/decoders: gather, encode, scatter features
        g.phase = Phase::Modality;
        g.layer = None;
        let mut features: Done = Vec::new();
        for m in &modalities {
            let gate = gather_gate(&unit_ends);
            let ag = g.collective(&format!("{}_params", m.name), CollectiveKind::AllGather, CommDomain::Fsdp, m.param_count() * b, &gate);
            reductions.extend(flush(&mut g, &mut pending));
            let enc = g.compute(&m.name, 2 * m.active_param_count() * tokens, &join(&prev, &ag));
            unit_ends.push(enc.clone());
            prev = enc.clone();
            let feat = modality_tokens(m, plan, workload) * arch.hidden * b;
            let sc = g.collective(&format!("{}_scatter", m.name), CollectiveKind::AllToAll, CommDomain::Ulysses, feat, &enc);
            features.extend(sc);
        }

        // foundation forward
        g.phase = Phase::Forward;
        let mut start = join(&prev, &features);
        for (i, c) in costs.iter().enumerate() {
            g.layer = Some(i as u32);
            let gate = gather_gate(&unit_ends);
            let ag = g.collective("params", CollectiveKind::AllGather, CommDomain::Fsdp, c.dense_bytes, &gate);
            let ag_e = g.collective("expert_params", CollectiveKind::AllGather, CommDomain::ExpertShard, c.held_expert_bytes, &gate);
            let done = g.layer_forward(c, &join(&start, &ag), &ag_e);
            unit_ends.push(done.clone());
            start = done;
        }

        // output head and loss, forward then backward
        g.phase = Phase::Head;
        g.layer = None;
        let root = arch.non_layer_params();
        let gate = gather_gate(&unit_ends);
        let ag = g.collective("params", CollectiveKind::AllGather, CommDomain::Fsdp, root * b, &gate);
        let head_fwd = g.compute("logits", 2 * root * tokens, &join(&start, &ag));
        start = if any_trainable {
            g.compute("logits_grad", lin_factor * 2 * root * tokens, &head_fwd)
        } else {
            head_fwd
        };
        unit_ends.push(start.clone());

        if any_trainable {
            g.phase = Phase::Backward;
            for (i, c) in costs.iter().enumerate().rev() {
                g.layer = Some(i as u32);
                let gate = gather_gate(&unit_ends);
                let ag = g.collective("params", CollectiveKind::AllGather, CommDomain::Fsdp, c.dense_bytes, &gate);
                let ag_e =
                    g.collective("expert_params", CollectiveKind::AllGather, CommDomain::ExpertShard, c.held_expert_bytes, &gate);
                reductions.extend(flush(&mut g, &mut pending));
                let mut seg_start = join(&start, &ag);
                if plan.recompute == Recompute::Full {
                    seg_start = g.layer_forward(c, &seg_start, &ag_e);
                }
                let done = g.layer_backward(c, &seg_start, &ag_e, lin_factor);
                unit_ends.push(done.clone());
                if foundation.trainable {
                    pending.items.push(("dense".into(), CommDomain::Fsdp, CommDomain::GradReplicate, c.dense_bytes, done.clone(), Some(i as u32)));
                    if c.held_expert_bytes > 0 {
                        pending.items.push((
                            "expert".into(),
                            CommDomain::ExpertShard,
                            CommDomain::ExpertReplicate,
                            c.held_expert_bytes,
                            done.clone(),
                            Some(i as u32),
                        ));
                    }
                }
                start = done;
            }
            if foundation.trainable {
                pending.items.push(("root".into(), CommDomain::Fsdp, CommDomain::GradReplicate, root * b, start.clone(), None));
            }
            reductions.extend(flush(&mut g, &mut pending));

            // trainable modality modules, reverse order
            g.phase = Phase::Modality;
            g.layer = None;
            for m in modalities.iter().rev().filter(|m| m.trainable) {
                let feat = modality_tokens(m, plan, workload) * arch.hidden * b;
                let sc = g.collective(&format!("{}_scatter_grad", m.name), CollectiveKind::AllToAll, CommDomain::Ulysses, feat, &start);
                let gate = gather_gate(&unit_ends);
                let ag = g.collective(&format!("{}_params", m.name), CollectiveKind::AllGather, CommDomain::Fsdp, m.param_count() * b, &gate);
                let enc = g.compute(&format!("{}_grad", m.name), 4 * m.active_param_count() * tokens, &join(&join(&start, &sc), &ag));
                unit_ends.push(enc.clone());
                pending.items.push((m.name.clone(), CommDomain::Fsdp, CommDomain::GradReplicate, m.param_count() * b, enc.clone(), None));
                reductions.extend(flush(&mut g, &mut pending));
                start = enc;
            }
        }
        prev = start;
    }

    g.phase = Phase::Optimizer;
    g.layer = None;
    g.micro_step = accum as u32 - 1;
    let opt_flops = 6 * sharded_trainable_params(plan, model);
    g.compute("update", opt_flops, &join(&prev, &reductions));

    let graph = StepGraph { nodes: g.nodes };
    graph.check()?;
    Ok(graph)
}
