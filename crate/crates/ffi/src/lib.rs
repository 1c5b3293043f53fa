//! C ABI over the meshplan library.
//!
//! Every function returns an [`MpStatus`]. On failure a message is stored
//! per thread and can be read with [`mp_last_error_message`]. Objects are
//! opaque handles created by `*_new` / `*_from_json` functions and released
//! with the matching `*_free`. Strings returned through `char **` out
//! parameters are owned by the caller and must be released with
//! [`mp_string_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use meshplan::config::{ClusterSpec, ModelSpec, WorkloadSpec};
use meshplan::error::Error;
use meshplan::pack::{pack_report, PackPolicy, PackReport, Sample};
use meshplan::plan::{validate, ParallelPlan, PlanLimits};
use meshplan::reshard::{make_plan, verify, ReshardPlan, ShardLayout};

/// Result codes. Values 2-5 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpStatus {
    Ok = 0,
    Config = 2,
    PlanInvalid = 3,
    Pack = 4,
    Reshard = 5,
    /// Null pointer, bad UTF-8 or an out-of-range argument.
    InvalidArgument = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpPackPolicy {
    FirstFitDecreasing = 0,
    FirstFitArrival = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpFormat {
    Json = 0,
    Csv = 1,
    Markdown = 2,
}

/// Per-rank memory in bytes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MpMemory {
    pub params: u64,
    pub grads: u64,
    pub optimizer: u64,
    pub activations_saved: u64,
    pub activations_working: u64,
    pub comm_buffers: u64,
    pub logits: u64,
    pub runtime_overhead: u64,
    pub total: u64,
    /// 1 when `total` fits in device memory.
    pub fits: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MpStepSummary {
    pub step_time: f64,
    /// Tokens per second per device.
    pub throughput: f64,
    pub mfu: f64,
    pub exposed_comm: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MpCopyOp {
    pub src_rank: u32,
    pub src_offset: u64,
    pub dst_rank: u32,
    pub dst_offset: u64,
    pub len: u64,
}

/// Cluster, model and workload descriptions.
pub struct MpConfig {
    cluster: ClusterSpec,
    model: ModelSpec,
    workload: WorkloadSpec,
}

pub struct MpPlan {
    plan: ParallelPlan,
}

pub struct MpPackResult {
    report: PackReport,
}

pub struct MpReshardPlan {
    plan: ReshardPlan,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(MpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => MpStatus::Config,
            3 => MpStatus::PlanInvalid,
            4 => MpStatus::Pack,
            5 => MpStatus::Reshard,
            _ => MpStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MpStatus::InvalidArgument, msg.into())
}

/// Runs `f` behind the panic boundary and records any error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{name} is null")))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, root: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure(MpStatus::Config, format!("{root}: {e}")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn mp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn mp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates the three JSON documents.
#[no_mangle]
pub unsafe extern "C" fn mp_config_from_json(
    cluster_json: *const c_char,
    model_json: *const c_char,
    workload_json: *const c_char,
    out: *mut *mut MpConfig,
) -> MpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cluster: ClusterSpec = parse_json(str_arg(cluster_json, "cluster_json")?, "cluster")?;
        let model: ModelSpec = parse_json(str_arg(model_json, "model_json")?, "model")?;
        let workload: WorkloadSpec = parse_json(str_arg(workload_json, "workload_json")?, "workload")?;
        cluster.validate()?;
        model.validate()?;
        workload.validate(Some(&model))?;
        *out = Box::into_raw(Box::new(MpConfig { cluster, model, workload }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_config_free(cfg: *mut MpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mp_config_world_size(cfg: *const MpConfig, out: *mut u32) -> MpStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(cfg, "cfg")?.cluster.world_size();
        Ok(())
    })
}

/// Replaces the workload's sequence length.
#[no_mangle]
pub unsafe extern "C" fn mp_config_set_seq_len(cfg: *mut MpConfig, seq_len: u64) -> MpStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        let w = WorkloadSpec { seq_len, ..cfg.workload.clone() };
        w.validate(Some(&cfg.model))?;
        cfg.workload = w;
        Ok(())
    })
}

/// A plan with default toggles (full recompute, prefetch depth 1).
#[no_mangle]
pub unsafe extern "C" fn mp_plan_new(
    dp_replicate: u32,
    dp_shard: u32,
    sp: u32,
    ep: u32,
    micro_batch: u32,
    out: *mut *mut MpPlan,
) -> MpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let plan = ParallelPlan { dp_replicate, dp_shard, sp, ep, micro_batch, ..Default::default() };
        *out = Box::into_raw(Box::new(MpPlan { plan }));
        Ok(())
    })
}

/// Plan from a JSON object; missing fields take their defaults.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_from_json(json: *const c_char, out: *mut *mut MpPlan) -> MpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let plan: ParallelPlan = parse_json(str_arg(json, "json")?, "plan")?;
        *out = Box::into_raw(Box::new(MpPlan { plan }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_plan_free(plan: *mut MpPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mp_plan_set_overlap(plan: *mut MpPlan, async_ulysses: bool, moe_overlap: bool, prefetch_depth: u32) -> MpStatus {
    guard(|| {
        let p = &mut out_arg(plan, "plan")?.plan;
        p.async_ulysses = async_ulysses;
        p.moe_overlap = moe_overlap;
        p.fsdp_prefetch_depth = prefetch_depth;
        Ok(())
    })
}

/// Method label such as `FSDP+SP4+EP8`.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_label(plan: *const MpPlan, out: *mut *mut c_char) -> MpStatus {
    guard(|| {
        let label = ref_arg(plan, "plan")?.plan.label();
        *out_arg(out, "out")? = into_c_string(label);
        Ok(())
    })
}

/// Returns `MP_STATUS_PLAN_INVALID` when the plan breaks a composition rule;
/// the violation codes are in the error message. `violation_count` may be
/// NULL.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_validate(cfg: *const MpConfig, plan: *const MpPlan, violation_count: *mut usize) -> MpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let v = validate(&ref_arg(plan, "plan")?.plan, &cfg.cluster, &cfg.model, &cfg.workload);
        if let Some(n) = violation_count.as_mut() {
            *n = v.len();
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::PlanInvalid(v).into())
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_estimate_memory(cfg: *const MpConfig, plan: *const MpPlan, out: *mut MpMemory) -> MpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let plan = &ref_arg(plan, "plan")?.plan;
        let out = out_arg(out, "out")?;
        let v = validate(plan, &cfg.cluster, &cfg.model, &cfg.workload);
        if !v.is_empty() {
            return Err(Error::PlanInvalid(v).into());
        }
        let m = meshplan::memory::estimate(plan, &cfg.model, &cfg.cluster, &cfg.workload);
        *out = MpMemory {
            params: m.params,
            grads: m.grads,
            optimizer: m.optimizer,
            activations_saved: m.activations_saved,
            activations_working: m.activations_working,
            comm_buffers: m.comm_buffers,
            logits: m.logits,
            runtime_overhead: m.runtime_overhead,
            total: m.total,
            fits: meshplan::memory::fits(&m, &cfg.cluster.gpu) as u8,
        };
        Ok(())
    })
}

/// Simulates one step regardless of memory fit.
#[no_mangle]
pub unsafe extern "C" fn mp_simulate(cfg: *const MpConfig, plan: *const MpPlan, out: *mut MpStepSummary) -> MpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let plan = &ref_arg(plan, "plan")?.plan;
        let out = out_arg(out, "out")?;
        let v = validate(plan, &cfg.cluster, &cfg.model, &cfg.workload);
        if !v.is_empty() {
            return Err(Error::PlanInvalid(v).into());
        }
        let (_, r) = meshplan::sim::run(plan, &cfg.model, &cfg.cluster, &cfg.workload)?;
        *out = MpStepSummary { step_time: r.step_time, throughput: r.throughput, mfu: r.mfu, exposed_comm: r.exposed_comm };
        Ok(())
    })
}

unsafe fn u32_list(p: *const u32, n: usize, name: &str) -> Result<Vec<u32>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n).to_vec())
}

/// Sweeps every combination of the candidate lists (an empty list means
/// `{1}`; micro batch comes from the workload) and renders the report.
#[no_mangle]
pub unsafe extern "C" fn mp_plan_report(
    cfg: *const MpConfig,
    sp: *const u32,
    sp_len: usize,
    ep: *const u32,
    ep_len: usize,
    format: MpFormat,
    out: *mut *mut c_char,
) -> MpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        let limits = PlanLimits::new(
            u32_list(sp, sp_len, "sp")?,
            u32_list(ep, ep_len, "ep")?,
            vec![1],
            vec![cfg.workload.micro_batch as u32],
        );
        let report = meshplan::report::plan_report(
            &cfg.cluster,
            &cfg.model,
            std::slice::from_ref(&cfg.workload),
            &limits,
            &ParallelPlan::default(),
            1,
            false,
        )?;
        let text = match format {
            MpFormat::Json => report.to_json(),
            MpFormat::Csv => report.to_csv()?,
            MpFormat::Markdown => report.to_markdown(),
        };
        *out = into_c_string(text);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_pack(
    lengths: *const u64,
    count: usize,
    target: u64,
    policy: MpPackPolicy,
    out: *mut *mut MpPackResult,
) -> MpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let lengths = if count == 0 {
            &[][..]
        } else if lengths.is_null() {
            return Err(invalid("lengths is null"));
        } else {
            std::slice::from_raw_parts(lengths, count)
        };
        let samples: Vec<Sample> = lengths.iter().enumerate().map(|(i, &length)| Sample { id: i as u64, length }).collect();
        let policy = match policy {
            MpPackPolicy::FirstFitDecreasing => PackPolicy::FirstFitDecreasing,
            MpPackPolicy::FirstFitArrival => PackPolicy::FirstFitArrival,
        };
        let report = pack_report(&samples, target, policy, false)?;
        *out = Box::into_raw(Box::new(MpPackResult { report }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_pack_result_free(r: *mut MpPackResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mp_pack_result_batch_count(r: *const MpPackResult, out: *mut usize) -> MpStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(r, "result")?.report.batch_count;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_pack_result_padding_ratio(r: *const MpPackResult, out: *mut f64) -> MpStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(r, "result")?.report.padding_ratio;
        Ok(())
    })
}

/// Full result (batches, entries, boundaries) as JSON.
#[no_mangle]
pub unsafe extern "C" fn mp_pack_result_to_json(r: *const MpPackResult, out: *mut *mut c_char) -> MpStatus {
    guard(|| {
        let text = serde_json::to_string(&ref_arg(r, "result")?.report).map_err(|e| invalid(e.to_string()))?;
        *out_arg(out, "out")? = into_c_string(text);
        Ok(())
    })
}

/// Copy plan moving parameter `param` of `numel` elements from an even
/// shard over `src_group` ranks to one over `dst_group` ranks.
#[no_mangle]
pub unsafe extern "C" fn mp_reshard_plan_new(
    param: *const c_char,
    numel: u64,
    src_group: u32,
    dst_group: u32,
    out: *mut *mut MpReshardPlan,
) -> MpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let name = str_arg(param, "param")?;
        let plan = make_plan(&ShardLayout::new(name, numel, src_group), &ShardLayout::new(name, numel, dst_group))?;
        *out = Box::into_raw(Box::new(MpReshardPlan { plan }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_reshard_plan_free(p: *mut MpReshardPlan) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mp_reshard_plan_op_count(p: *const MpReshardPlan, out: *mut usize) -> MpStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(p, "plan")?.plan.ops.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_reshard_plan_get_op(p: *const MpReshardPlan, index: usize, out: *mut MpCopyOp) -> MpStatus {
    guard(|| {
        let plan = &ref_arg(p, "plan")?.plan;
        let op = plan.ops.get(index).ok_or_else(|| invalid(format!("op index {index} out of range ({})", plan.ops.len())))?;
        *out_arg(out, "out")? = MpCopyOp {
            src_rank: op.src_rank,
            src_offset: op.src_offset,
            dst_rank: op.dst_rank,
            dst_offset: op.dst_offset,
            len: op.len,
        };
        Ok(())
    })
}

/// Checks coverage, overlap and placement of the plan's ops.
#[no_mangle]
pub unsafe extern "C" fn mp_reshard_plan_verify(p: *const MpReshardPlan) -> MpStatus {
    guard(|| {
        let v = verify(&ref_arg(p, "plan")?.plan);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Failure(MpStatus::Reshard, format!("{v:?}")))
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mp_reshard_plan_to_json(p: *const MpReshardPlan, out: *mut *mut c_char) -> MpStatus {
    guard(|| {
        let text = serde_json::to_string(&ref_arg(p, "plan")?.plan).map_err(|e| invalid(e.to_string()))?;
        *out_arg(out, "out")? = into_c_string(text);
        Ok(())
    })
}
