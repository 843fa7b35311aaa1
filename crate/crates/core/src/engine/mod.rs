//! Metric computation by BSI arithmetic.
//!
//! Everything here works per segment and merges [`BucketVector`]s at the end.
//! The merge is integer addition, so results do not depend on how segments
//! are scheduled.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::bitmap::Bitmap;
use crate::bsi::{AggFn, BinaryBsi, Bsi, BsiError, CmpOp};
use crate::model::{
    Catalog, Date, DimensionTable, ExposeSegment, ExposeTable, MetricId, MetricTable, PartitionKey,
    StrategyId,
};

mod preagg;
mod predicate;
pub mod reference;

pub use preagg::{node_bound, NodeSpan, PreAggCache, PreAggKey, PreAggTree, RangeResult};
pub use predicate::{
    bind, parse_predicate, BoundClause, BoundPredicate, Clause, Literal, PredicateError,
    PredicateErrorKind, PredicateExpr, Test,
};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EngineError {
    #[error("unknown strategy {0}")]
    UnknownStrategy(StrategyId),
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("dimension `{name}` expects a {expected} literal")]
    LiteralType { name: String, expected: &'static str },
    #[error("categorical dimension `{0}` supports only = and !=")]
    CategoryOrdering(String),
    #[error("missing partitions: {}", list(.0))]
    MissingPartitions(Vec<PartitionKey>),
    #[error("{orphans} valued positions have no bucket")]
    OrphanPositions { orphans: u64 },
    #[error("bucket code {code} exceeds bucket count {count}")]
    BucketOutOfRange { code: u64, count: u32 },
    #[error("empty expose window [{lo}, {hi}]")]
    EmptyWindow { lo: u64, hi: u64 },
    #[error("no dates given")]
    NoDates,
    #[error("dates must be strictly ascending")]
    UnsortedDates,
    #[error("range {lo}..={hi} is outside the tree span {start}..={end}")]
    OutOfSpan {
        lo: Date,
        hi: Date,
        start: Date,
        end: Date,
    },
    #[error("pre-aggregate node {0} does not match its leaves")]
    TreeVerification(NodeSpan),
    #[error("pre-experiment window must be at least one day and end after the epoch")]
    BadPreWindow,
    #[error("bucket vectors differ in kind or length")]
    Incompatible,
    #[error("reading tables: {0}")]
    Storage(String),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error(transparent)]
    Bsi(#[from] BsiError),
}

fn list(keys: &[PartitionKey]) -> String {
    let mut out = String::new();
    for (i, k) in keys.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&alloc::format!("{k}"));
    }
    out
}

/// Per-unit aggregate reported by a scorecard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Agg {
    /// Sum of metric values.
    Sum,
    /// Unit-days with a nonzero value.
    Count,
    /// Distinct units with a nonzero value on any day.
    UniqueUnits,
}

impl Agg {
    pub fn name(self) -> &'static str {
        match self {
            Agg::Sum => "sum",
            Agg::Count => "count",
            Agg::UniqueUnits => "unique",
        }
    }

    pub fn parse(s: &str) -> Option<Agg> {
        match s {
            "sum" => Some(Agg::Sum),
            "count" => Some(Agg::Count),
            "unique" | "uniq" => Some(Agg::UniqueUnits),
            _ => None,
        }
    }
}

/// Per-bucket value sums and unit counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketVector {
    pub kind: Agg,
    pub sums: Vec<u128>,
    pub counts: Vec<u64>,
}

impl BucketVector {
    pub fn zeros(kind: Agg, buckets: u32) -> Self {
        BucketVector {
            kind,
            sums: alloc::vec![0; buckets as usize],
            counts: alloc::vec![0; buckets as usize],
        }
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    /// The aggregate per bucket: sums for `Sum`, counts otherwise.
    pub fn values(&self) -> Vec<u128> {
        match self.kind {
            Agg::Sum => self.sums.clone(),
            Agg::Count | Agg::UniqueUnits => self.counts.iter().map(|&c| u128::from(c)).collect(),
        }
    }

    pub fn total(&self) -> u128 {
        self.values().iter().sum()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &BucketVector) -> Result<(), EngineError> {
        if self.kind != other.kind || self.len() != other.len() {
            return Err(EngineError::Incompatible);
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn with_kind(mut self, kind: Agg) -> Self {
        self.kind = kind;
        self
    }
}

#[cfg(feature = "parallel")]
pub trait MaybeSync: Sync {}
#[cfg(feature = "parallel")]
impl<T: Sync + ?Sized> MaybeSync for T {}
#[cfg(not(feature = "parallel"))]
pub trait MaybeSync {}
#[cfg(not(feature = "parallel"))]
impl<T: ?Sized> MaybeSync for T {}

/// Read access to BSI tables, one segment at a time.
pub trait TableSource: MaybeSync {
    fn catalog(&self) -> &Catalog;

    fn expose(&self, strategy: StrategyId, segment: u32) -> Result<Cow<'_, ExposeSegment>, EngineError>;

    fn has_metric(&self, metric: MetricId, date: Date) -> bool;

    fn metric(&self, metric: MetricId, date: Date, segment: u32) -> Result<Cow<'_, Bsi>, EngineError>;

    fn has_dimension(&self, name: &str, date: Date) -> bool;

    fn dimension(&self, name: &str, date: Date, segment: u32) -> Result<Cow<'_, Bsi>, EngineError>;
}

/// Tables held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub catalog: Catalog,
    pub expose: ExposeTable,
    pub metrics: MetricTable,
    pub dimensions: DimensionTable,
}

impl TableSource for Dataset {
    fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn expose(&self, strategy: StrategyId, segment: u32) -> Result<Cow<'_, ExposeSegment>, EngineError> {
        let segs = self
            .expose
            .strategies
            .get(&strategy)
            .ok_or(EngineError::UnknownStrategy(strategy))?;
        segs.get(segment as usize)
            .map(Cow::Borrowed)
            .ok_or_else(|| EngineError::MissingPartitions(alloc::vec![PartitionKey::Expose(strategy)]))
    }

    fn has_metric(&self, metric: MetricId, date: Date) -> bool {
        self.metrics.partitions.contains_key(&(metric, date))
    }

    fn metric(&self, metric: MetricId, date: Date, segment: u32) -> Result<Cow<'_, Bsi>, EngineError> {
        self.metrics
            .partitions
            .get(&(metric, date))
            .and_then(|p| p.get(segment as usize))
            .map(Cow::Borrowed)
            .ok_or_else(|| EngineError::MissingPartitions(alloc::vec![PartitionKey::Metric(metric, date)]))
    }

    fn has_dimension(&self, name: &str, date: Date) -> bool {
        self.dimensions.partitions.contains_key(&(String::from(name), date))
    }

    fn dimension(&self, name: &str, date: Date, segment: u32) -> Result<Cow<'_, Bsi>, EngineError> {
        self.dimensions
            .partitions
            .get(&(String::from(name), date))
            .and_then(|p| p.get(segment as usize))
            .map(Cow::Borrowed)
            .ok_or_else(|| {
                EngineError::MissingPartitions(alloc::vec![PartitionKey::Dimension(name.into(), date)])
            })
    }
}

/// Runs `f` for every segment, on rayon when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn map_segments<T, F>(segments: u32, f: F) -> Result<Vec<T>, EngineError>
where
    T: Send,
    F: Fn(u32) -> Result<T, EngineError> + Sync + Send,
{
    use rayon::prelude::*;
    (0..segments).into_par_iter().map(f).collect()
}

/// Runs `f` for every segment, on rayon when the `parallel` feature is on.
#[cfg(not(feature = "parallel"))]
pub fn map_segments<T, F>(segments: u32, f: F) -> Result<Vec<T>, EngineError>
where
    F: Fn(u32) -> Result<T, EngineError>,
{
    (0..segments).map(f).collect()
}

fn merge_all(kind: Agg, buckets: u32, parts: Vec<BucketVector>) -> Result<BucketVector, EngineError> {
    let mut total = BucketVector::zeros(kind, buckets);
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total)
}

/// Positions exposed on or before `date`.
pub fn expose_filter(seg: &ExposeSegment, date: Date) -> BinaryBsi {
    match seg.min_expose_date {
        Some(min) if date >= min => seg
            .offset
            .compare_scalar(CmpOp::Le, date.days_since(min) as u64 + 1),
        _ => BinaryBsi::empty(),
    }
}

/// Positions whose offset lies in `lo..=hi`.
pub fn expose_window_filter(seg: &ExposeSegment, lo: u64, hi: u64) -> Result<BinaryBsi, EngineError> {
    if lo == 0 || lo > hi {
        return Err(EngineError::EmptyWindow { lo, hi });
    }
    Ok(seg
        .offset
        .compare_scalar(CmpOp::Ge, lo)
        .and(&seg.offset.compare_scalar(CmpOp::Le, hi)))
}

/// Groups `value` by bucket code (`bucket_id + 1`) by descending through the
/// bucket slices from the top, splitting the position set on each slice.
pub fn group_by_bucket(value: &Bsi, bucket: &Bsi, buckets: u32) -> Result<BucketVector, EngineError> {
    let mut out = BucketVector::zeros(Agg::Sum, buckets);
    let support = value.nonzero();
    let orphans = support.andnot(&bucket.nonzero()).len();
    if orphans > 0 {
        return Err(EngineError::OrphanPositions { orphans });
    }
    let slices = bucket.slices();
    descend(value, slices, slices.len(), support, 0, &mut out)?;
    Ok(out)
}

const SMALL_MASK: u64 = 24;

fn bucket_index(code: u64, count: usize) -> Result<usize, EngineError> {
    if code == 0 || code > count as u64 {
        return Err(EngineError::BucketOutOfRange {
            code,
            count: count as u32,
        });
    }
    Ok((code - 1) as usize)
}

fn descend(
    value: &Bsi,
    slices: &[Bitmap],
    depth: usize,
    mask: Bitmap,
    code: u64,
    out: &mut BucketVector,
) -> Result<(), EngineError> {
    if mask.is_empty() {
        return Ok(());
    }
    if depth == 0 {
        let b = bucket_index(code, out.len())?;
        out.sums[b] += value.sum_masked(&mask);
        out.counts[b] += mask.len();
        return Ok(());
    }
    // Splitting a handful of positions costs more than reading their
    // remaining bucket bits one by one.
    if mask.len() <= SMALL_MASK {
        for p in mask.iter() {
            let low = (0..depth).fold(0, |acc, i| acc | u64::from(slices[i].contains(p)) << i);
            let b = bucket_index(code | low, out.len())?;
            out.sums[b] += u128::from(value.get(p));
            out.counts[b] += 1;
        }
        return Ok(());
    }
    let slice = &slices[depth - 1];
    let ones = mask.and(slice);
    let zeros = mask.andnot(slice);
    descend(value, slices, depth - 1, zeros, code, out)?;
    descend(value, slices, depth - 1, ones, code | 1 << (depth - 1), out)
}

/// Same result as [`group_by_bucket`], computed with one equality scan per
/// bucket.
pub fn group_by_bucket_scan(value: &Bsi, bucket: &Bsi, buckets: u32) -> Result<BucketVector, EngineError> {
    let mut out = BucketVector::zeros(Agg::Sum, buckets);
    let support = value.nonzero();
    let orphans = support.andnot(&bucket.nonzero()).len();
    if orphans > 0 {
        return Err(EngineError::OrphanPositions { orphans });
    }
    if let Ok(max) = bucket.max() {
        if max > u64::from(buckets) {
            return Err(EngineError::BucketOutOfRange { code: max, count: buckets });
        }
    }
    for b in 0..buckets {
        let eq = bucket.compare_scalar(CmpOp::Eq, u64::from(b) + 1);
        let mask = eq.as_bitmap().and(&support);
        out.sums[b as usize] = value.sum_masked(&mask);
        out.counts[b as usize] = mask.len();
    }
    Ok(out)
}

fn check_dates(dates: &[Date]) -> Result<(), EngineError> {
    if dates.is_empty() {
        return Err(EngineError::NoDates);
    }
    if dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EngineError::UnsortedDates);
    }
    Ok(())
}

fn require_metric<S: TableSource + ?Sized>(src: &S, metric: MetricId, dates: &[Date]) -> Result<(), EngineError> {
    let missing: Vec<_> = dates
        .iter()
        .filter(|&&d| !src.has_metric(metric, d))
        .map(|&d| PartitionKey::Metric(metric, d))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EngineError::MissingPartitions(missing))
    }
}

/// A scorecard request.
#[derive(Clone, Debug)]
pub struct Query<'a> {
    pub strategy: StrategyId,
    pub metric: MetricId,
    /// Strictly ascending analysis dates. Each day uses that day's exposure.
    pub dates: &'a [Date],
    pub agg: Agg,
    /// Dimension filter and the date of the dimension snapshot it reads.
    pub filter: Option<(&'a BoundPredicate, Date)>,
}

/// Runs a query over all segments and merges the bucket vectors.
pub fn run_query<S: TableSource + ?Sized>(src: &S, q: &Query<'_>) -> Result<BucketVector, EngineError> {
    check_dates(q.dates)?;
    require_metric(src, q.metric, q.dates)?;
    if let Some((pred, date)) = q.filter {
        pred.require(src, date)?;
    }
    let hash = src.catalog().hash;
    let parts = map_segments(hash.segment_count, |seg| segment_query(src, q, seg, hash.bucket_count))?;
    merge_all(q.agg, hash.bucket_count, parts)
}

fn segment_query<S: TableSource + ?Sized>(
    src: &S,
    q: &Query<'_>,
    seg: u32,
    buckets: u32,
) -> Result<BucketVector, EngineError> {
    let exposure = src.expose(q.strategy, seg)?;
    let dim = match q.filter {
        Some((pred, date)) => Some(dimension_filter(src, pred, date, seg)?),
        None => None,
    };
    let mut total = BucketVector::zeros(q.agg, buckets);
    let mut state = Bitmap::new();
    for &date in q.dates {
        let mut filter = expose_filter(&exposure, date);
        if let Some(d) = &dim {
            filter = filter.and(d);
        }
        let value = src.metric(q.metric, date, seg)?;
        let filtered = value.multiply_binary(&filter);
        match q.agg {
            Agg::Sum | Agg::Count => {
                let day = group_by_bucket(&filtered, &exposure.bucket, buckets)?;
                total.merge(&day.with_kind(q.agg))?;
            }
            Agg::UniqueUnits => state = state.or(&filtered.nonzero()),
        }
    }
    if q.agg == Agg::UniqueUnits {
        let distinct = BinaryBsi::from_bitmap(state).to_bsi();
        total = group_by_bucket(&distinct, &exposure.bucket, buckets)?.with_kind(Agg::UniqueUnits);
    }
    Ok(total)
}

/// Single-day scorecard for one strategy and metric.
pub fn scorecard<S: TableSource + ?Sized>(
    src: &S,
    strategy: StrategyId,
    metric: MetricId,
    date: Date,
    agg: Agg,
) -> Result<BucketVector, EngineError> {
    run_query(
        src,
        &Query {
            strategy,
            metric,
            dates: &[date],
            agg,
            filter: None,
        },
    )
}

/// Multi-day scorecard. `UniqueUnits` folds per-day nonzero sets with
/// `DistinctPos` before grouping, so a unit active on several days counts
/// once.
pub fn multi_day_scorecard<S: TableSource + ?Sized>(
    src: &S,
    strategy: StrategyId,
    metric: MetricId,
    dates: &[Date],
    agg: Agg,
) -> Result<BucketVector, EngineError> {
    run_query(
        src,
        &Query {
            strategy,
            metric,
            dates,
            agg,
            filter: None,
        },
    )
}

/// Units exposed by `date`, per bucket. This is the usual denominator.
pub fn exposed_units<S: TableSource + ?Sized>(
    src: &S,
    strategy: StrategyId,
    date: Date,
    filter: Option<(&BoundPredicate, Date)>,
) -> Result<BucketVector, EngineError> {
    if let Some((pred, d)) = filter {
        pred.require(src, d)?;
    }
    let hash = src.catalog().hash;
    let parts = map_segments(hash.segment_count, |seg| {
        let exposure = src.expose(strategy, seg)?;
        let mut f = expose_filter(&exposure, date);
        if let Some((pred, d)) = filter {
            f = f.and(&dimension_filter(src, pred, d, seg)?);
        }
        Ok(group_by_bucket(&f.to_bsi(), &exposure.bucket, hash.bucket_count)?.with_kind(Agg::Count))
    })?;
    merge_all(Agg::Count, hash.bucket_count, parts)
}

/// Conjunction of the predicate's clauses on one segment's dimension
/// snapshot. Units without a value never match.
pub fn dimension_filter<S: TableSource + ?Sized>(
    src: &S,
    pred: &BoundPredicate,
    date: Date,
    segment: u32,
) -> Result<BinaryBsi, EngineError> {
    let mut acc: Option<BinaryBsi> = None;
    for clause in &pred.clauses {
        let dim = src.dimension(&clause.name, date, segment)?;
        let hit = match clause.test {
            Test::Cmp(op, k) => dim.compare_scalar(op, k),
            Test::Present => dim.nonzero_binary(),
            Test::Never => BinaryBsi::empty(),
        };
        acc = Some(match acc {
            Some(a) => a.and(&hit),
            None => hit,
        });
    }
    Ok(acc.unwrap_or_else(BinaryBsi::empty))
}

/// Sum of `metric` over `start - days ..= start - 1` for units exposed by
/// `as_of`, per bucket. The range sum comes from a cached pre-aggregate tree.
pub fn pre_experiment<S: TableSource + ?Sized>(
    src: &S,
    cache: &mut PreAggCache,
    strategy: StrategyId,
    metric: MetricId,
    start: Date,
    days: u32,
    as_of: Date,
) -> Result<BucketVector, EngineError> {
    if days == 0 {
        return Err(EngineError::BadPreWindow);
    }
    let lo = start.sub_days(days).ok_or(EngineError::BadPreWindow)?;
    let hi = start.sub_days(1).ok_or(EngineError::BadPreWindow)?;
    let key = PreAggKey {
        metric,
        start: lo,
        end: hi,
        kind: AggFn::Sum,
    };
    let tree = cache.get_or_build(key, || PreAggTree::from_source(src, metric, lo, hi, AggFn::Sum))?;
    let covariate = tree.query(lo, hi)?;
    let hash = src.catalog().hash;
    let parts = map_segments(hash.segment_count, |seg| {
        let exposure = src.expose(strategy, seg)?;
        let filter = expose_filter(&exposure, as_of);
        let filtered = covariate.per_segment[seg as usize].multiply_binary(&filter);
        group_by_bucket(&filtered, &exposure.bucket, hash.bucket_count)
    })?;
    merge_all(Agg::Sum, hash.bucket_count, parts)
}

/// Population variance of the nonzero values, from BSI sums:
/// `sum(v*v)/n - (sum(v)/n)^2`. `None` when `v` is empty.
pub fn bsi_variance(v: &Bsi) -> Result<Option<f64>, EngineError> {
    let n = v.compare_scalar(CmpOp::Gt, 0).count();
    if n == 0 {
        return Ok(None);
    }
    let sq = v.multiply(v)?.sum();
    let s = v.sum();
    let nf = n as f64;
    // Exact integer numerator n*sum(v^2) - sum(v)^2 when it fits.
    let exact = (n as u128)
        .checked_mul(sq)
        .zip(s.checked_mul(s))
        .map(|(a, b)| a - b);
    Ok(Some(match exact {
        Some(num) => num as f64 / (nf * nf),
        None => sq as f64 / nf - (s as f64 / nf) * (s as f64 / nf),
    }))
}

/// Root of [`bsi_variance`].
pub fn bsi_rmse(v: &Bsi) -> Result<Option<f64>, EngineError> {
    Ok(bsi_variance(v)?.map(libm::sqrt))
}

/// Per-segment metric BSIs for the dates, keyed by date.
pub fn load_days<S: TableSource + ?Sized>(
    src: &S,
    metric: MetricId,
    dates: &[Date],
) -> Result<BTreeMap<Date, Vec<Bsi>>, EngineError> {
    require_metric(src, metric, dates)?;
    let segments = src.catalog().hash.segment_count;
    let mut out = BTreeMap::new();
    for &d in dates {
        let day = map_segments(segments, |seg| Ok(src.metric(metric, d, seg)?.into_owned()))?;
        out.insert(d, day);
    }
    Ok(out)
}
