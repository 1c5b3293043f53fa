//! Dynamic batching: pack variable-length samples into fixed-capacity
//! sequences and record per-sample boundaries for varlen attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedEntry {
    pub id: u64,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub capacity: u64,
    pub entries: Vec<PackedEntry>,
    /// Cumulative sequence lengths, starting at 0.
    pub boundaries: Vec<u64>,
}

impl PackedBatch {
    fn new(capacity: u64) -> Self {
        PackedBatch { capacity, entries: Vec::new(), boundaries: vec![0] }
    }

    pub fn used(&self) -> u64 {
        *self.boundaries.last().unwrap_or(&0)
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used()
    }

    fn push(&mut self, s: Sample) {
        let offset = self.used();
        self.entries.push(PackedEntry { id: s.id, offset, length: s.length });
        self.boundaries.push(offset + s.length);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackPolicy {
    #[default]
    FirstFitDecreasing,
    FirstFitArrival,
}

impl PackPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            PackPolicy::FirstFitDecreasing => "first_fit_decreasing",
            PackPolicy::FirstFitArrival => "first_fit_arrival",
        }
    }
}

pub fn check_samples(samples: &[Sample], capacity: u64) -> Result<()> {
    if capacity == 0 {
        return Err(Error::Pack("target length must be >= 1".into()));
    }
    for s in samples {
        if s.length == 0 {
            return Err(Error::Pack(format!("sample {} has length 0", s.id)));
        }
        if s.length > capacity {
            return Err(Error::Pack(format!(
                "sample {} has length {} > target {}",
                s.id, s.length, capacity
            )));
        }
    }
    Ok(())
}

pub fn pack(samples: &[Sample], capacity: u64, policy: PackPolicy) -> Result<Vec<PackedBatch>> {
    check_samples(samples, capacity)?;
    let mut order: Vec<Sample> = samples.to_vec();
    if policy == PackPolicy::FirstFitDecreasing {
        order.sort_by(|a, b| b.length.cmp(&a.length).then(a.id.cmp(&b.id)));
    }
    let mut batches: Vec<PackedBatch> = Vec::new();
    for s in order {
        match batches.iter_mut().find(|b| b.free() >= s.length) {
            Some(b) => b.push(s),
            None => {
                let mut b = PackedBatch::new(capacity);
                b.push(s);
                batches.push(b);
            }
        }
    }
    Ok(batches)
}

pub fn padding_ratio(batches: &[PackedBatch]) -> f64 {
    let capacity: u64 = batches.iter().map(|b| b.capacity).sum();
    if capacity == 0 {
        return 0.0;
    }
    let used: u64 = batches.iter().map(PackedBatch::used).sum();
    1.0 - used as f64 / capacity as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackReport {
    pub policy: PackPolicy,
    pub target: u64,
    pub batch_count: usize,
    pub padding_ratio: f64,
    pub batches: Vec<PackedBatch>,
    /// Batch count under every policy, when a comparison was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<std::collections::BTreeMap<String, usize>>,
}

pub fn pack_report(samples: &[Sample], capacity: u64, policy: PackPolicy, compare: bool) -> Result<PackReport> {
    let batches = pack(samples, capacity, policy)?;
    let comparison = if compare {
        let mut m = std::collections::BTreeMap::new();
        for p in [PackPolicy::FirstFitDecreasing, PackPolicy::FirstFitArrival] {
            m.insert(p.as_str().to_string(), pack(samples, capacity, p)?.len());
        }
        Some(m)
    } else {
        None
    };
    Ok(PackReport {
        policy,
        target: capacity,
        batch_count: batches.len(),
        padding_ratio: padding_ratio(&batches),
        batches,
        comparison,
    })
}

/// Parses a newline-separated list of positive lengths; sample ids are
/// 0-based line indices. Blank lines are skipped. Errors name the 1-based
/// line.
pub fn parse_lengths(text: &str, capacity: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let length: u64 = t.parse().map_err(|_| Error::Pack(format!("line {line_no}: {t:?} is not a non-negative integer")))?;
        if length == 0 {
            return Err(Error::Pack(format!("line {line_no}: sample length must be >= 1")));
        }
        if length > capacity {
            return Err(Error::Pack(format!("line {line_no}: sample length {length} exceeds target {capacity}")));
        }
        out.push(Sample { id: i as u64, length });
    }
    Ok(out)
}

/// Buffers incoming samples and packs once `flush_factor x capacity` tokens
/// are waiting. Each flush emits every batch except the least filled one,
/// whose samples stay buffered for the next round.
#[derive(Debug, Clone)]
pub struct StreamingPacker {
    capacity: u64,
    policy: PackPolicy,
    flush_factor: u64,
    buffer: Vec<Sample>,
    buffered_tokens: u64,
}

impl StreamingPacker {
    pub fn new(capacity: u64, policy: PackPolicy, flush_factor: u64) -> Result<Self> {
        if capacity == 0 || flush_factor == 0 {
            return Err(Error::Pack("capacity and flush factor must be >= 1".into()));
        }
        Ok(StreamingPacker { capacity, policy, flush_factor, buffer: Vec::new(), buffered_tokens: 0 })
    }

    pub fn buffered_tokens(&self) -> u64 {
        self.buffered_tokens
    }

    pub fn push(&mut self, sample: Sample) -> Result<Vec<PackedBatch>> {
        check_samples(std::slice::from_ref(&sample), self.capacity)?;
        self.buffer.push(sample);
        self.buffered_tokens += sample.length;
        if self.buffered_tokens < self.flush_factor * self.capacity {
            return Ok(Vec::new());
        }
        let mut batches = pack(&self.buffer, self.capacity, self.policy)?;
        let (keep, _) = batches
            .iter()
            .enumerate()
            .min_by_key(|(i, b)| (b.used(), std::cmp::Reverse(*i)))
            .expect("flush with a non-empty buffer");
        let kept = batches.remove(keep);
        self.buffer = kept.entries.iter().map(|e| Sample { id: e.id, length: e.length }).collect();
        self.buffered_tokens = kept.used();
        Ok(batches)
    }

    pub fn finish(&mut self) -> Result<Vec<PackedBatch>> {
        let out = pack(&self.buffer, self.capacity, self.policy)?;
        self.buffer.clear();
        self.buffered_tokens = 0;
        Ok(out)
    }
}
