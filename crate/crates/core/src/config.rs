//! Hardware, model and workload descriptions.
//!
//! Everything here is plain data with `validate` methods; parameter and FLOP
//! accounting lives next to the types it reads.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    /// Dense FLOP/s at training precision.
    pub peak_flops: f64,
    pub hbm_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    /// Bytes/s per device inside a node.
    pub intra_node_bw: f64,
    /// Bytes/s per device across nodes.
    pub inter_node_bw: f64,
    pub intra_latency: f64,
    pub inter_latency: f64,
}

/// Calibration knobs shared by the memory model and the simulator. None of
/// these are measured; they are surfaced in every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Assumptions {
    /// Working-set coefficient for one layer's recompute, in units of
    /// `tokens × hidden × dtype` bytes.
    pub c_work: u64,
    pub runtime_overhead_bytes: u64,
    /// Token chunk used by the chunked cross-entropy.
    pub ce_chunk_tokens: u64,
    /// Materialize full logits instead of chunking.
    pub naive_logits: bool,
    /// Fraction of peak FLOP/s achieved by compute kernels.
    pub compute_efficiency: f64,
    /// Multiplier on uniform MoE routing volume.
    pub moe_imbalance: f64,
}

impl Default for Assumptions {
    fn default() -> Self {
        Assumptions {
            c_work: 16,
            runtime_overhead_bytes: 4 << 30,
            ce_chunk_tokens: 1024,
            naive_logits: false,
            compute_efficiency: 0.45,
            moe_imbalance: 1.0,
        }
    }
}

impl Assumptions {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.ce_chunk_tokens == 0 {
            return Err(Error::config(format!("{path}.ce_chunk_tokens"), "must be >= 1"));
        }
        if !(self.compute_efficiency > 0.0 && self.compute_efficiency <= 1.0) {
            return Err(Error::config(format!("{path}.compute_efficiency"), "must be in (0, 1]"));
        }
        if !(self.moe_imbalance >= 1.0 && self.moe_imbalance.is_finite()) {
            return Err(Error::config(format!("{path}.moe_imbalance"), "must be finite and >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_nodes: u32,
    pub gpus_per_node: u32,
    pub gpu: GpuSpec,
    pub link: LinkSpec,
    #[serde(default)]
    pub assumptions: Assumptions,
}

impl ClusterSpec {
    pub fn world_size(&self) -> u32 {
        self.num_nodes * self.gpus_per_node
    }

    pub fn node_of(&self, rank: u32) -> u32 {
        rank / self.gpus_per_node
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::config("cluster.num_nodes", "must be >= 1"));
        }
        if self.gpus_per_node == 0 {
            return Err(Error::config("cluster.gpus_per_node", "must be >= 1"));
        }
        if !(self.gpu.peak_flops > 0.0 && self.gpu.peak_flops.is_finite()) {
            return Err(Error::config("cluster.gpu.peak_flops", "must be > 0"));
        }
        if self.gpu.hbm_bytes == 0 {
            return Err(Error::config("cluster.gpu.hbm_bytes", "must be > 0"));
        }
        let l = &self.link;
        for (name, v) in [
            ("intra_node_bw", l.intra_node_bw),
            ("inter_node_bw", l.inter_node_bw),
            ("intra_latency", l.intra_latency),
            ("inter_latency", l.inter_latency),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("cluster.link.{name}"), "must be > 0"));
            }
        }
        if l.intra_node_bw < l.inter_node_bw {
            return Err(Error::config(
                "cluster.link.intra_node_bw",
                "must be >= inter_node_bw",
            ));
        }
        self.assumptions.validate("cluster.assumptions")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSpec {
    pub num_experts: u64,
    pub top_k: u64,
    pub expert_ffn_dim: u64,
    #[serde(default = "one")]
    pub moe_layer_stride: u64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub layers: u64,
    pub hidden: u64,
    pub heads: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub ffn_dim: u64,
    pub vocab: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeSpec>,
    /// Share the input embedding with the output head.
    #[serde(default)]
    pub tie_embeddings: bool,
}

/// Parameter counts of one transformer layer, split by the blocks the step
/// graph schedules separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerParams {
    pub qkv: u64,
    /// Output projection plus the two norms.
    pub out: u64,
    /// Dense MLP weights (zero on MoE layers).
    pub mlp: u64,
    pub router: u64,
    /// All experts of the layer.
    pub experts: u64,
    /// Experts a single token passes through (`top_k` of them).
    pub active_experts: u64,
}

impl LayerParams {
    pub fn dense(&self) -> u64 {
        self.qkv + self.out + self.mlp + self.router
    }

    pub fn total(&self) -> u64 {
        self.dense() + self.experts
    }

    pub fn active(&self) -> u64 {
        self.dense() + self.active_experts
    }

    pub fn is_moe(&self) -> bool {
        self.experts > 0
    }
}

impl TransformerSpec {
    pub fn kv_dim(&self) -> u64 {
        self.kv_heads * self.head_dim
    }

    /// Whether layer `i` (0-based) carries an MoE block. With stride `s`,
    /// layers `s-1, 2s-1, ...` are sparse.
    pub fn is_moe_layer(&self, i: u64) -> bool {
        match self.moe {
            Some(m) => (i + 1).is_multiple_of(m.moe_layer_stride),
            None => false,
        }
    }

    pub fn num_moe_layers(&self) -> u64 {
        (0..self.layers).filter(|&i| self.is_moe_layer(i)).count() as u64
    }

    pub fn layer_params(&self, i: u64) -> LayerParams {
        let h = self.hidden;
        let qkv = h * h + 2 * h * self.kv_dim();
        let out = h * h + 2 * h;
        match self.moe {
            Some(m) if self.is_moe_layer(i) => {
                let per_expert = 3 * h * m.expert_ffn_dim;
                LayerParams {
                    qkv,
                    out,
                    mlp: 0,
                    router: h * m.num_experts,
                    experts: m.num_experts * per_expert,
                    active_experts: m.top_k * per_expert,
                }
            }
            _ => LayerParams { qkv, out, mlp: 3 * h * self.ffn_dim, ..Default::default() },
        }
    }

    /// Embedding, output head and final norm.
    pub fn non_layer_params(&self) -> u64 {
        let head = if self.tie_embeddings { 0 } else { self.vocab * self.hidden };
        self.vocab * self.hidden + head + self.hidden
    }

    pub fn param_count(&self) -> u64 {
        self.non_layer_params() + (0..self.layers).map(|i| self.layer_params(i).total()).sum::<u64>()
    }

    pub fn active_param_count(&self) -> u64 {
        self.non_layer_params() + (0..self.layers).map(|i| self.layer_params(i).active()).sum::<u64>()
    }

    /// Parameters that are not expert weights.
    pub fn dense_param_count(&self) -> u64 {
        self.non_layer_params() + (0..self.layers).map(|i| self.layer_params(i).dense()).sum::<u64>()
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{path}.{name}"), "must be >= 1"));
            }
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(Error::config(
                format!("{path}.heads"),
                format!(
                    "heads x head_dim ({}) must equal hidden ({})",
                    self.heads * self.head_dim,
                    self.hidden
                ),
            ));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::config(
                format!("{path}.kv_heads"),
                format!("kv_heads ({}) must divide heads ({})", self.kv_heads, self.heads),
            ));
        }
        if let Some(m) = self.moe {
            if m.num_experts == 0 || m.top_k == 0 || m.top_k > m.num_experts {
                return Err(Error::config(
                    format!("{path}.moe.top_k"),
                    format!("need 1 <= top_k ({}) <= num_experts ({})", m.top_k, m.num_experts),
                ));
            }
            if m.moe_layer_stride == 0 {
                return Err(Error::config(format!("{path}.moe.moe_layer_stride"), "must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Encoder,
    Foundation,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub name: String,
    pub kind: ModuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<TransformerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_param_count: Option<u64>,
    #[serde(default = "yes")]
    pub trainable: bool,
    /// Tokens one modality item injects into the foundation sequence.
    #[serde(default)]
    pub tokens_per_item: u64,
}

fn yes() -> bool {
    true
}

impl ModuleSpec {
    pub fn param_count(&self) -> u64 {
        match (&self.arch, self.raw_param_count) {
            (Some(a), _) => a.param_count(),
            (None, Some(n)) => n,
            (None, None) => 0,
        }
    }

    pub fn active_param_count(&self) -> u64 {
        match (&self.arch, self.raw_param_count) {
            (Some(a), _) => a.active_param_count(),
            (None, Some(n)) => n,
            (None, None) => 0,
        }
    }

    pub fn is_modality(&self) -> bool {
        self.kind != ModuleKind::Foundation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub modules: Vec<ModuleSpec>,
    #[serde(default = "two")]
    pub param_dtype_bytes: u64,
}

fn two() -> u64 {
    2
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let foundations = self.modules.iter().filter(|m| m.kind == ModuleKind::Foundation).count();
        if foundations != 1 {
            return Err(Error::config(
                "model.modules",
                format!("exactly one foundation module required, found {foundations}"),
            ));
        }
        if ![1, 2, 4].contains(&self.param_dtype_bytes) {
            return Err(Error::config("model.param_dtype_bytes", "must be 1, 2 or 4"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, m) in self.modules.iter().enumerate() {
            let path = format!("model.modules[{i}]");
            if m.name.is_empty() || !seen.insert(m.name.as_str()) {
                return Err(Error::config(format!("{path}.name"), "names must be unique and non-empty"));
            }
            match (&m.arch, m.raw_param_count) {
                (Some(a), None) => a.validate(&format!("{path}.arch"))?,
                (None, Some(_)) => {}
                _ => {
                    return Err(Error::config(
                        path,
                        "exactly one of arch / raw_param_count must be set",
                    ))
                }
            }
            if m.kind == ModuleKind::Foundation && m.arch.is_none() {
                return Err(Error::config(format!("{path}.arch"), "foundation needs an arch"));
            }
        }
        Ok(())
    }

    pub fn foundation(&self) -> &ModuleSpec {
        self.modules
            .iter()
            .find(|m| m.kind == ModuleKind::Foundation)
            .expect("validated model has a foundation")
    }

    pub fn foundation_arch(&self) -> &TransformerSpec {
        self.foundation().arch.as_ref().expect("validated foundation has an arch")
    }

    pub fn modality_modules(&self) -> impl Iterator<Item = &ModuleSpec> {
        self.modules.iter().filter(|m| m.is_modality())
    }

    pub fn param_count(&self) -> u64 {
        self.modules.iter().map(ModuleSpec::param_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub seq_len: u64,
    pub micro_batch: u64,
    pub global_batch: u64,
    /// Fraction of sequence tokens per stream, keyed by modality module name
    /// or `"text"`.
    #[serde(default = "text_only")]
    pub modality_mix: BTreeMap<String, f64>,
}

fn text_only() -> BTreeMap<String, f64> {
    BTreeMap::from([("text".to_string(), 1.0)])
}

impl WorkloadSpec {
    pub fn new(seq_len: u64, micro_batch: u64, global_batch: u64) -> Self {
        WorkloadSpec { seq_len, micro_batch, global_batch, modality_mix: text_only() }
    }

    pub fn validate(&self, model: Option<&ModelSpec>) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::config("workload.seq_len", "must be >= 1"));
        }
        if self.micro_batch == 0 {
            return Err(Error::config("workload.micro_batch", "must be >= 1"));
        }
        if self.global_batch < self.micro_batch {
            return Err(Error::config("workload.global_batch", "must be >= micro_batch"));
        }
        let mut sum = 0.0;
        for (k, &v) in &self.modality_mix {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("workload.modality_mix.{k}"), "must be in [0, 1]"));
            }
            if let Some(model) = model {
                if k != "text" && !model.modality_modules().any(|m| &m.name == k) {
                    return Err(Error::config(
                        format!("workload.modality_mix.{k}"),
                        "no encoder or decoder module with this name",
                    ));
                }
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(
                "workload.modality_mix",
                format!("fractions must sum to 1 (got {sum})"),
            ));
        }
        Ok(())
    }

    pub fn mix_fraction(&self, stream: &str) -> f64 {
        self.modality_mix.get(stream).copied().unwrap_or(0.0)
    }
}

/// Model FLOPs per token for one training step at sequence length `seq_len`.
///
/// Trainable modules count `6 x active params` (forward + backward), frozen
/// ones `2 x active params`. The foundation adds causal attention, `6·L·H·S`.
pub fn flops_per_token(model: &ModelSpec, seq_len: u64) -> u64 {
    let matmul: u64 = model
        .modules
        .iter()
        .map(|m| if m.trainable { 6 } else { 2 } * m.active_param_count())
        .sum();
    let arch = model.foundation_arch();
    matmul + 6 * arch.layers * arch.hidden * seq_len
}

fn read_json<T: serde::de::DeserializeOwned>(file: &Path, root: &str) -> Result<T> {
    let text = std::fs::read_to_string(file).map_err(|source| Error::Io { path: file.display().to_string(), source })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let path = if at == "." { root.to_string() } else { format!("{root}.{at}") };
        Error::config(path, format!("{} ({})", e.inner(), file.display()))
    })
}

pub fn load_cluster(file: &Path) -> Result<ClusterSpec> {
    let c: ClusterSpec = read_json(file, "cluster")?;
    c.validate()?;
    Ok(c)
}

pub fn load_model(file: &Path) -> Result<ModelSpec> {
    let m: ModelSpec = read_json(file, "model")?;
    m.validate()?;
    Ok(m)
}

pub fn load_workload(file: &Path, model: Option<&ModelSpec>) -> Result<WorkloadSpec> {
    let w: WorkloadSpec = read_json(file, "workload")?;
    w.validate(model)?;
    Ok(w)
}
