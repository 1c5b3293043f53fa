//! Plan sweeps and the tables they produce.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ClusterSpec, ModelSpec, WorkloadSpec};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryBreakdown};
use crate::plan::{enumerate_candidates, validate, ParallelPlan, PlanLimits, Violation};
use crate::sim::{self, StepReport, Timeline};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MARKDOWN_HEADER: [&str; 5] = ["Method", "Seqlen", "Memory (GB)", "Throughput", "MFU (%)"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seq_len: u64,
    pub plan: ParallelPlan,
    /// Predicted peak in GiB.
    pub memory_gb: f64,
    pub oom: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mfu: Option<f64>,
    /// Position by throughput among rows of the same sequence length, 1 = best.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub memory: MemoryBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<StepReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedPlan {
    pub method: String,
    pub seq_len: u64,
    pub plan: ParallelPlan,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool_version: String,
    /// sha256 of the canonical JSON form of each input.
    pub config_hashes: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub metadata: Metadata,
    pub rows: Vec<ReportRow>,
    pub rejected: Vec<RejectedPlan>,
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn metadata(cluster: &ClusterSpec, model: &ModelSpec, workloads: &[WorkloadSpec], stamp: bool) -> Metadata {
    let mut config_hashes = BTreeMap::new();
    config_hashes.insert("cluster".to_string(), sha256_json(cluster));
    config_hashes.insert("model".to_string(), sha256_json(model));
    config_hashes.insert("workload".to_string(), sha256_json(&workloads));
    let generated_at_unix = stamp.then(|| {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    });
    Metadata { tool_version: TOOL_VERSION.to_string(), config_hashes, generated_at_unix }
}

/// Memory estimate plus, when it fits, a simulated step.
pub fn evaluate(
    plan: &ParallelPlan,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    keep_timeline: bool,
) -> Result<(ReportRow, Option<Timeline>)> {
    let mem = memory::estimate(plan, model, cluster, workload);
    let oom = !memory::fits(&mem, &cluster.gpu);
    let mut row = ReportRow {
        method: plan.label(),
        seq_len: workload.seq_len,
        plan: plan.clone(),
        memory_gb: mem.total_gib(),
        oom,
        throughput: None,
        mfu: None,
        rank: None,
        memory: mem,
        step: None,
    };
    if oom {
        return Ok((row, None));
    }
    let (timeline, step) = sim::run(plan, model, cluster, workload)?;
    row.throughput = Some(step.throughput);
    row.mfu = Some(step.mfu);
    row.step = Some(step);
    Ok((row, keep_timeline.then_some(timeline)))
}

/// Validates and evaluates a single plan.
pub fn simulate_one(
    plan: &ParallelPlan,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    keep_timeline: bool,
) -> Result<(ReportRow, Option<Timeline>)> {
    let v = validate(plan, cluster, model, workload);
    if !v.is_empty() {
        return Err(Error::PlanInvalid(v));
    }
    evaluate(plan, model, cluster, workload, keep_timeline)
}

/// Enumerates plans for every workload, estimates memory, simulates the
/// ones that fit and ranks them. `jobs` caps worker threads (0 = rayon
/// default); output order never depends on it.
pub fn plan_report(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    workloads: &[WorkloadSpec],
    limits: &PlanLimits,
    template: &ParallelPlan,
    jobs: usize,
    stamp: bool,
) -> Result<RecipeReport> {
    let mut valid = Vec::new();
    let mut rejected = Vec::new();
    for w in workloads {
        for (plan, violations) in enumerate_candidates(cluster, model, w, limits, template) {
            if violations.is_empty() {
                valid.push((plan, w));
            } else {
                rejected.push(RejectedPlan { method: plan.label(), seq_len: w.seq_len, plan, violations });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let rows: Result<Vec<ReportRow>> =
        pool.install(|| valid.par_iter().map(|(p, w)| evaluate(p, model, cluster, w, false).map(|r| r.0)).collect());
    let mut rows = rows?;
    rows.sort_by_key(|a| (a.seq_len, a.plan.key()));
    rank_rows(&mut rows);
    rejected.sort_by_key(|a| (a.seq_len, a.plan.key()));
    Ok(RecipeReport { metadata: metadata(cluster, model, workloads, stamp), rows, rejected })
}

fn rank_rows(rows: &mut [ReportRow]) {
    let mut by_seq: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r.throughput.is_some() {
            by_seq.entry(r.seq_len).or_default().push(i);
        }
    }
    for idx in by_seq.values_mut() {
        // stable sort keeps plan-key order among equal throughputs
        idx.sort_by(|&a, &b| rows[b].throughput.partial_cmp(&rows[a].throughput).expect("finite throughput"));
        for (pos, &i) in idx.iter().enumerate() {
            rows[i].rank = Some(pos + 1);
        }
    }
}

impl RecipeReport {
    /// Feasible rows, best throughput first.
    pub fn ranked(&self) -> Vec<&ReportRow> {
        let mut v: Vec<&ReportRow> = self.rows.iter().filter(|r| r.throughput.is_some()).collect();
        v.sort_by(|a, b| b.throughput.partial_cmp(&a.throughput).expect("finite throughput"));
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n", MARKDOWN_HEADER.join(" | "));
        s.push_str("|---|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let (mem, thr, mfu) = if r.oom {
                ("OOM".to_string(), "-".to_string(), "-".to_string())
            } else {
                (
                    format!("{:.2}", r.memory_gb),
                    group_thousands(r.throughput.unwrap_or(0.0).round() as u64),
                    format!("{:.2}", r.mfu.unwrap_or(0.0) * 100.0),
                )
            };
            let _ = writeln!(s, "| {} | {} | {mem} | {thr} | {mfu} |", r.method, seq_label(r.seq_len));
        }
        if !self.rejected.is_empty() {
            s.push_str("\nRejected plans:\n\n");
            for r in &self.rejected {
                let codes: Vec<&str> = r.violations.iter().map(|v| v.code.as_str()).collect();
                let _ = writeln!(s, "- {} @ {}: {} ({})", r.method, seq_label(r.seq_len), codes.join(", "), r.plan);
            }
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::config("output", e.to_string());
        w.write_record([
            "method",
            "seq_len",
            "dp_replicate",
            "dp_shard",
            "sp",
            "ep",
            "micro_batch",
            "memory_gb",
            "oom",
            "throughput",
            "mfu_percent",
            "step_time_s",
            "exposed_comm",
            "rank",
        ])
        .map_err(io)?;
        for r in &self.rows {
            let p = &r.plan;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                r.method.clone(),
                r.seq_len.to_string(),
                p.dp_replicate.to_string(),
                p.dp_shard.to_string(),
                p.sp.to_string(),
                p.ep.to_string(),
                p.micro_batch.to_string(),
                format!("{:.4}", r.memory_gb),
                r.oom.to_string(),
                opt(r.throughput),
                opt(r.mfu.map(|m| m * 100.0)),
                opt(r.step.as_ref().map(|s| s.step_time)),
                opt(r.step.as_ref().map(|s| s.exposed_comm)),
                r.rank.map(|x| x.to_string()).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config("output", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// `8192` -> `8k`; lengths that are not whole multiples of 1024 print as is.
pub fn seq_label(seq_len: u64) -> String {
    if seq_len >= 1024 && seq_len.is_multiple_of(1024) {
        format!("{}k", seq_len / 1024)
    } else {
        seq_len.to_string()
    }
}

/// Parses the labels produced by [`seq_label`].
pub fn parse_seq_label(s: &str) -> Option<u64> {
    match s.strip_suffix(['k', 'K']) {
        Some(n) => n.parse::<u64>().ok().map(|n| n * 1024),
        None => s.parse().ok(),
    }
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}
