//! Shard ownership intervals and copy plans between shard layouts.
//!
//! A parameter of `n` elements sharded over `P` ranks is split into even
//! chunks of `ceil(n / P)`; trailing ranks may own an empty interval.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardLayout {
    pub param: String,
    pub numel: u64,
    pub group_size: u32,
}

impl ShardLayout {
    pub fn new(param: impl Into<String>, numel: u64, group_size: u32) -> Self {
        ShardLayout { param: param.into(), numel, group_size }
    }

    pub fn chunk(&self) -> u64 {
        self.numel.div_ceil(self.group_size.max(1) as u64)
    }

    pub fn interval(&self, rank: u32) -> Result<Range<u64>> {
        owned_interval(self.numel, self.group_size, rank)
    }

    pub fn intervals(&self) -> Vec<Range<u64>> {
        (0..self.group_size).map(|r| self.interval(r).expect("rank in range")).collect()
    }

    /// Splits a full tensor into this layout's shards.
    pub fn shard<T: Clone>(&self, full: &[T]) -> Result<Vec<Vec<T>>> {
        if full.len() as u64 != self.numel {
            return Err(Error::Reshard(format!(
                "param {:?}: data has {} elements, layout expects {}",
                self.param,
                full.len(),
                self.numel
            )));
        }
        Ok(self.intervals().into_iter().map(|r| full[r.start as usize..r.end as usize].to_vec()).collect())
    }
}

pub fn owned_interval(numel: u64, group_size: u32, rank: u32) -> Result<Range<u64>> {
    if group_size == 0 || rank >= group_size {
        return Err(Error::Reshard(format!("rank {rank} out of range for group of {group_size}")));
    }
    let c = numel.div_ceil(group_size as u64);
    let r = rank as u64;
    Ok((r * c).min(numel)..((r + 1) * c).min(numel))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CopyOp {
    pub src_rank: u32,
    pub src_offset: u64,
    pub dst_rank: u32,
    pub dst_offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReshardPlan {
    pub param: String,
    pub numel: u64,
    pub src_group: u32,
    pub dst_group: u32,
    pub ops: Vec<CopyOp>,
}

impl ReshardPlan {
    pub fn src_layout(&self) -> ShardLayout {
        ShardLayout::new(self.param.clone(), self.numel, self.src_group)
    }

    pub fn dst_layout(&self) -> ShardLayout {
        ShardLayout::new(self.param.clone(), self.numel, self.dst_group)
    }
}

/// One copy op per non-empty intersection of a destination interval with a
/// source interval, ordered by `(dst_rank, dst_offset)`.
pub fn make_plan(src: &ShardLayout, dst: &ShardLayout) -> Result<ReshardPlan> {
    if src.param != dst.param {
        return Err(Error::Reshard(format!("param mismatch: {:?} vs {:?}", src.param, dst.param)));
    }
    if src.numel != dst.numel {
        return Err(Error::Reshard(format!(
            "param {:?}: numel mismatch {} vs {}",
            src.param, src.numel, dst.numel
        )));
    }
    if src.group_size == 0 || dst.group_size == 0 {
        return Err(Error::Reshard(format!("param {:?}: group size must be >= 1", src.param)));
    }
    let src_iv = src.intervals();
    let c = src.chunk().max(1);
    let mut ops = Vec::new();
    for (d, dr) in dst.intervals().into_iter().enumerate() {
        if dr.is_empty() {
            continue;
        }
        // only the source ranks whose chunks can overlap [dr.start, dr.end)
        let first = (dr.start / c) as usize;
        let last = ((dr.end - 1) / c) as usize;
        for (s, sr) in src_iv.iter().enumerate().take(last + 1).skip(first) {
            let lo = dr.start.max(sr.start);
            let hi = dr.end.min(sr.end);
            if lo < hi {
                ops.push(CopyOp {
                    src_rank: s as u32,
                    src_offset: lo - sr.start,
                    dst_rank: d as u32,
                    dst_offset: lo - dr.start,
                    len: hi - lo,
                });
            }
        }
    }
    Ok(ReshardPlan { param: src.param.clone(), numel: src.numel, src_group: src.group_size, dst_group: dst.group_size, ops })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanViolation {
    /// Destination elements `[start, end)` (global indices) are never written.
    Gap { start: u64, end: u64 },
    /// Destination elements `[start, end)` are written more than once.
    Overlap { start: u64, end: u64 },
    OutOfRange { op: usize, detail: String },
    /// Source and destination global positions disagree.
    Misplaced { op: usize },
    LengthSum { expected: u64, actual: u64 },
}

/// Checks the plan invariants by materializing destination coverage.
pub fn verify(plan: &ReshardPlan) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    let src = plan.src_layout();
    let dst = plan.dst_layout();
    if plan.src_group == 0 || plan.dst_group == 0 {
        out.push(PlanViolation::OutOfRange { op: 0, detail: "group size 0".into() });
        return out;
    }
    let mut writes = vec![0u32; plan.numel as usize];
    let mut sum = 0u64;
    for (i, op) in plan.ops.iter().enumerate() {
        sum += op.len;
        let (Ok(sr), Ok(dr)) = (src.interval(op.src_rank), dst.interval(op.dst_rank)) else {
            out.push(PlanViolation::OutOfRange { op: i, detail: "rank outside group".into() });
            continue;
        };
        let s0 = sr.start + op.src_offset;
        let d0 = dr.start + op.dst_offset;
        if s0 + op.len > sr.end {
            out.push(PlanViolation::OutOfRange { op: i, detail: "source range exceeds shard".into() });
            continue;
        }
        if d0 + op.len > dr.end {
            out.push(PlanViolation::OutOfRange { op: i, detail: "destination range exceeds shard".into() });
            continue;
        }
        if s0 != d0 {
            out.push(PlanViolation::Misplaced { op: i });
        }
        for w in &mut writes[d0 as usize..(d0 + op.len) as usize] {
            *w += 1;
        }
    }
    let mut runs = |pred: &dyn Fn(u32) -> bool, make: &dyn Fn(u64, u64) -> PlanViolation| {
        let mut i = 0usize;
        while i < writes.len() {
            if pred(writes[i]) {
                let start = i;
                while i < writes.len() && pred(writes[i]) {
                    i += 1;
                }
                out.push(make(start as u64, i as u64));
            } else {
                i += 1;
            }
        }
    };
    runs(&|w| w == 0, &|start, end| PlanViolation::Gap { start, end });
    runs(&|w| w > 1, &|start, end| PlanViolation::Overlap { start, end });
    if sum != plan.numel {
        out.push(PlanViolation::LengthSum { expected: plan.numel, actual: sum });
    }
    out
}

/// Moves `src_shards` (laid out per the plan's source layout) into the
/// destination layout.
pub fn apply<T: Clone + Default>(plan: &ReshardPlan, src_shards: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let src = plan.src_layout();
    if src_shards.len() != plan.src_group as usize {
        return Err(Error::Reshard(format!(
            "param {:?}: {} source shards for a group of {}",
            plan.param,
            src_shards.len(),
            plan.src_group
        )));
    }
    for (r, (shard, iv)) in src_shards.iter().zip(src.intervals()).enumerate() {
        if shard.len() as u64 != iv.end - iv.start {
            return Err(Error::Reshard(format!("param {:?}: source shard {r} has wrong length", plan.param)));
        }
    }
    let mut out: Vec<Vec<T>> =
        plan.dst_layout().intervals().into_iter().map(|iv| vec![T::default(); (iv.end - iv.start) as usize]).collect();
    for op in &plan.ops {
        let s = &src_shards[op.src_rank as usize][op.src_offset as usize..(op.src_offset + op.len) as usize];
        out[op.dst_rank as usize][op.dst_offset as usize..(op.dst_offset + op.len) as usize].clone_from_slice(s);
    }
    Ok(out)
}

/// A set of parameter layouts as stored in a layout file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSet {
    pub params: Vec<ShardLayout>,
}

/// One plan per parameter of `src`, matched by name against `dst`.
pub fn plan_all(src: &LayoutSet, dst: &LayoutSet) -> Result<Vec<ReshardPlan>> {
    if src.params.len() != dst.params.len() {
        return Err(Error::Reshard(format!(
            "source lists {} params, destination {}",
            src.params.len(),
            dst.params.len()
        )));
    }
    src.params
        .iter()
        .map(|s| {
            let d = dst
                .params
                .iter()
                .find(|d| d.param == s.param)
                .ok_or_else(|| Error::Reshard(format!("param {:?} missing from destination", s.param)))?;
            let plan = make_plan(s, d)?;
            let v = verify(&plan);
            if !v.is_empty() {
                return Err(Error::Reshard(format!("param {:?}: invalid plan {v:?}", s.param)));
            }
            Ok(plan)
        })
        .collect()
}

/// Treats `data` as the concatenation of every parameter (in plan order,
/// `elem_size` bytes per element), reshards it there and back, and checks
/// both directions element by element.
pub fn verify_round_trip(plans: &[ReshardPlan], data: &[u8], elem_size: usize) -> Result<()> {
    if elem_size == 0 {
        return Err(Error::Reshard("element size must be >= 1".into()));
    }
    let expected: u64 = plans.iter().map(|p| p.numel * elem_size as u64).sum();
    if data.len() as u64 != expected {
        return Err(Error::Reshard(format!("data has {} bytes, layouts need {expected}", data.len())));
    }
    let mut at = 0usize;
    for plan in plans {
        let n = plan.numel as usize * elem_size;
        let full: Vec<Vec<u8>> = data[at..at + n].chunks(elem_size).map(<[u8]>::to_vec).collect();
        at += n;
        let moved = apply(plan, &plan.src_layout().shard(&full)?)?;
        if moved != plan.dst_layout().shard(&full)? {
            return Err(Error::Reshard(format!("param {:?}: destination shards differ from direct sharding", plan.param)));
        }
        let back = make_plan(&plan.dst_layout(), &plan.src_layout())?;
        if apply(&back, &moved)?.concat() != full {
            return Err(Error::Reshard(format!("param {:?}: round trip changed the data", plan.param)));
        }
    }
    Ok(())
}
