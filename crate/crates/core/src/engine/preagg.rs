//! Pre-aggregate tree over consecutive dates.
//!
//! Level `l` holds aligned blocks of `2^l` days that lie fully inside the
//! span; each block is the aggregate of its two halves. A range query takes
//! the largest aligned block starting at the cursor that still fits and
//! moves on, so `days 1..=7` over a 7-day tree reads `1..=4`, `5..=6`, `7`.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use super::{load_days, EngineError, TableSource};
use crate::bsi::{AggFn, Bsi};
use crate::model::{Date, MetricId};

/// One tree node: `2^level` days starting at `first`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeSpan {
    pub level: u32,
    pub index: u32,
    pub first: Date,
    pub last: Date,
}

impl fmt::Display for NodeSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..={}", self.first, self.last)
    }
}

#[derive(Clone, Debug)]
pub struct RangeResult {
    pub nodes: Vec<NodeSpan>,
    pub per_segment: Vec<Bsi>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreAggTree {
    kind: AggFn,
    start: Date,
    days: u32,
    segments: usize,
    /// `levels[l][i][segment]`.
    levels: Vec<Vec<Vec<Bsi>>>,
}

/// Upper bound on the nodes a query over an `n`-leaf tree reads.
pub fn node_bound(n: u32) -> usize {
    let log = 32 - n.saturating_sub(1).leading_zeros();
    core::cmp::max(1, 2 * log as usize)
}

impl PreAggTree {
    /// Builds from per-day, per-segment leaves starting at `start`.
    pub fn build(kind: AggFn, start: Date, leaves: Vec<Vec<Bsi>>) -> Result<PreAggTree, EngineError> {
        if leaves.is_empty() {
            return Err(EngineError::NoDates);
        }
        let segments = leaves[0].len();
        if leaves.iter().any(|l| l.len() != segments) {
            return Err(EngineError::Incompatible);
        }
        let days = leaves.len() as u32;
        let mut levels = alloc::vec![leaves];
        loop {
            let below = levels.last().unwrap();
            if below.len() < 2 {
                break;
            }
            let mut level = Vec::with_capacity(below.len() / 2);
            for pair in below.chunks_exact(2) {
                let node = (0..segments)
                    .map(|s| Bsi::aggregate_refs(kind, &[&pair[0][s], &pair[1][s]]))
                    .collect::<Result<Vec<_>, _>>()?;
                level.push(node);
            }
            levels.push(level);
        }
        let tree = PreAggTree {
            kind,
            start,
            days,
            segments,
            levels,
        };
        tree.verify_sample()?;
        Ok(tree)
    }

    /// Builds over `lo..=hi` from a table source.
    pub fn from_source<S: TableSource + ?Sized>(
        src: &S,
        metric: MetricId,
        lo: Date,
        hi: Date,
        kind: AggFn,
    ) -> Result<PreAggTree, EngineError> {
        if hi < lo {
            return Err(EngineError::NoDates);
        }
        let dates: Vec<Date> = (lo.0..=hi.0).map(Date).collect();
        let loaded = load_days(src, metric, &dates)?;
        PreAggTree::build(kind, lo, loaded.into_values().collect())
    }

    // Checks a spread of internal nodes against a direct fold of their
    // leaves, on the first, middle and last segment.
    fn verify_sample(&self) -> Result<(), EngineError> {
        let mut probe: Vec<usize> = alloc::vec![0, self.segments / 2, self.segments.saturating_sub(1)];
        probe.dedup();
        for level in 1..self.levels.len() {
            let count = self.levels[level].len();
            let stride = core::cmp::max(1, count / 4);
            for index in (0..count).step_by(stride) {
                let span = self.span(level as u32, index as u32);
                let lo = index << level;
                let leaves = &self.levels[0][lo..lo + (1 << level)];
                for &s in &probe {
                    if s >= self.segments {
                        continue;
                    }
                    let refs: Vec<&Bsi> = leaves.iter().map(|l| &l[s]).collect();
                    if Bsi::aggregate_refs(self.kind, &refs)? != self.levels[level][index][s] {
                        return Err(EngineError::TreeVerification(span));
                    }
                }
            }
        }
        Ok(())
    }

    fn span(&self, level: u32, index: u32) -> NodeSpan {
        let first = self.start.add_days(index << level);
        NodeSpan {
            level,
            index,
            first,
            last: first.add_days((1 << level) - 1),
        }
    }

    pub fn kind(&self) -> AggFn {
        self.kind
    }

    pub fn start(&self) -> Date {
        self.start
    }

    pub fn end(&self) -> Date {
        self.start.add_days(self.days - 1)
    }

    pub fn days(&self) -> u32 {
        self.days
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.levels
            .iter()
            .flatten()
            .flatten()
            .map(Bsi::serialized_len)
            .sum()
    }

    /// Canonical nodes covering `lo..=hi`, in date order.
    pub fn decompose(&self, lo: Date, hi: Date) -> Result<Vec<NodeSpan>, EngineError> {
        if lo > hi || lo < self.start || hi > self.end() {
            return Err(EngineError::OutOfSpan {
                lo,
                hi,
                start: self.start,
                end: self.end(),
            });
        }
        let mut pos = lo.days_since(self.start) as u32;
        let last = hi.days_since(self.start) as u32;
        let mut nodes = Vec::new();
        while pos <= last {
            let mut level = 0u32;
            while (level + 1) < self.levels.len() as u32 {
                let size = 1u32 << (level + 1);
                if pos % size != 0 || pos + size - 1 > last {
                    break;
                }
                level += 1;
            }
            nodes.push(self.span(level, pos >> level));
            pos += 1 << level;
        }
        Ok(nodes)
    }

    /// Folds the canonical nodes of `lo..=hi` per segment.
    pub fn query(&self, lo: Date, hi: Date) -> Result<RangeResult, EngineError> {
        let nodes = self.decompose(lo, hi)?;
        let per_segment = (0..self.segments)
            .map(|s| {
                let refs: Vec<&Bsi> = nodes
                    .iter()
                    .map(|n| &self.levels[n.level as usize][n.index as usize][s])
                    .collect();
                Bsi::aggregate_refs(self.kind, &refs)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RangeResult { nodes, per_segment })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PreAggKey {
    pub metric: MetricId,
    pub start: Date,
    pub end: Date,
    pub kind: AggFn,
}

struct Entry {
    tree: Arc<PreAggTree>,
    bytes: usize,
    used: u64,
}

/// Trees keyed by metric, span and aggregate. Evicts least recently used
/// trees once their total serialized size passes the cap.
pub struct PreAggCache {
    cap: usize,
    bytes: usize,
    clock: u64,
    entries: BTreeMap<PreAggKey, Entry>,
}

impl PreAggCache {
    pub fn new(cap_bytes: usize) -> Self {
        PreAggCache {
            cap: cap_bytes,
            bytes: 0,
            clock: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn contains(&self, key: &PreAggKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_or_build<F>(&mut self, key: PreAggKey, build: F) -> Result<Arc<PreAggTree>, EngineError>
    where
        F: FnOnce() -> Result<PreAggTree, EngineError>,
    {
        self.clock += 1;
        if let Some(e) = self.entries.get_mut(&key) {
            e.used = self.clock;
            return Ok(e.tree.clone());
        }
        let tree = Arc::new(build()?);
        let bytes = tree.byte_size();
        if bytes > self.cap {
            return Ok(tree);
        }
        while self.bytes + bytes > self.cap {
            let oldest = self
                .entries
                .iter()
                .min_by_key(|(_, e)| e.used)
                .map(|(k, _)| *k)
                .expect("cache over cap with no entries");
            let gone = self.entries.remove(&oldest).unwrap();
            self.bytes -= gone.bytes;
        }
        self.bytes += bytes;
        self.entries.insert(
            key,
            Entry {
                tree: tree.clone(),
                bytes,
                used: self.clock,
            },
        );
        Ok(tree)
    }
}
