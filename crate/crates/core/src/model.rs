//! Experiment data model: unit hashing into segments and buckets, per-segment
//! position encoding, and the BSI layouts of the expose, metric and dimension
//! logs.
//!
//! Analysis units are hashed into segments; each segment owns a dense
//! dictionary mapping unit ids to positions `0..n`. All BSIs of a segment are
//! indexed by those positions, so joining logs on the unit id is implicit.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use hashbrown::HashMap;
use thiserror::Error;

use crate::bsi::{Bsi, BsiError};

pub const DEFAULT_SEGMENTS: u32 = 1024;
pub const DEFAULT_BUCKETS: u32 = 1024;
pub const DEFAULT_BUCKET_SALT: u8 = 0x01;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ModelError {
    #[error("unit id is empty")]
    EmptyId,
    #[error("unit hashes to segment {actual}, not {expected}")]
    SegmentMismatch { expected: u32, actual: u32 },
    #[error("segment {segment} out of range (segment count {count})")]
    SegmentOutOfRange { segment: u32, count: u32 },
    #[error("invalid hash configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid date `{0}`, expected YYYYMMDD on or after 19700101")]
    InvalidDate(String),
    #[error("record {record}: unit already exposed to strategy {strategy}")]
    DuplicateExpose { record: usize, strategy: StrategyId },
    #[error("record {record}: duplicate row for {what} on {date}")]
    DuplicateRow {
        record: usize,
        what: String,
        date: Date,
    },
    #[error("record {record}: value {value} is negative or not finite")]
    InvalidValue { record: usize, value: f64 },
    #[error("record {record}: scaled value {value} does not fit in 64 bits")]
    ValueTooLarge { record: usize, value: f64 },
    #[error("record {record}: dimension `{name}` is categorical; got a number")]
    ExpectedCategory { record: usize, name: String },
    #[error("record {record}: dimension `{name}` is numeric; got `{value}`")]
    ExpectedNumber {
        record: usize,
        name: String,
        value: String,
    },
    #[error("scale {0} is not a power of ten")]
    InvalidScale(u64),
    #[error(transparent)]
    Bsi(#[from] BsiError),
}

/// 64-bit FNV-1a over `bytes`, finished with the murmur3 `fmix64` avalanche
/// so that every output bit depends on every input bit.
pub fn unit_hash(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    fmix64(h)
}

fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

fn salted_hash(salt: u8, id: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = (OFFSET ^ u64::from(salt)).wrapping_mul(PRIME);
    for &b in id {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    fmix64(h)
}

/// Segment and bucket assignment. Fixed when a catalog is created.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashConfig {
    pub segment_count: u32,
    pub bucket_count: u32,
    /// Byte prepended to the id before hashing for buckets.
    pub bucket_salt: u8,
    /// Analysis unit and randomization unit coincide, and bucketing reuses
    /// segmentation: `bucket_of == segment_of`.
    pub shared: bool,
}

impl Default for HashConfig {
    fn default() -> Self {
        HashConfig {
            segment_count: DEFAULT_SEGMENTS,
            bucket_count: DEFAULT_BUCKETS,
            bucket_salt: DEFAULT_BUCKET_SALT,
            shared: false,
        }
    }
}

impl HashConfig {
    pub fn new(segment_count: u32, bucket_count: u32) -> Result<Self, ModelError> {
        let config = HashConfig {
            segment_count,
            bucket_count,
            ..HashConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn shared(count: u32) -> Result<Self, ModelError> {
        let config = HashConfig {
            segment_count: count,
            bucket_count: count,
            shared: true,
            ..HashConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.segment_count == 0 || self.segment_count > 1 << 16 {
            return Err(ModelError::InvalidConfig("segment count must be in 1..=65536"));
        }
        if self.bucket_count == 0 || self.bucket_count > 1 << 16 {
            return Err(ModelError::InvalidConfig("bucket count must be in 1..=65536"));
        }
        if self.shared && self.segment_count != self.bucket_count {
            return Err(ModelError::InvalidConfig(
                "shared bucketing needs equal segment and bucket counts",
            ));
        }
        Ok(())
    }

    pub fn segment_of(&self, analysis_unit: &[u8]) -> Result<u32, ModelError> {
        if analysis_unit.is_empty() {
            return Err(ModelError::EmptyId);
        }
        Ok((unit_hash(analysis_unit) % u64::from(self.segment_count)) as u32)
    }

    pub fn bucket_of(&self, randomization_unit: &[u8]) -> Result<u32, ModelError> {
        if self.shared {
            return self.segment_of(randomization_unit);
        }
        if randomization_unit.is_empty() {
            return Err(ModelError::EmptyId);
        }
        let h = salted_hash(self.bucket_salt, randomization_unit);
        Ok((h % u64::from(self.bucket_count)) as u32)
    }

    pub fn segments(&self) -> core::ops::Range<u32> {
        0..self.segment_count
    }

    pub fn check_segment(&self, segment: u32) -> Result<(), ModelError> {
        if segment < self.segment_count {
            Ok(())
        } else {
            Err(ModelError::SegmentOutOfRange {
                segment,
                count: self.segment_count,
            })
        }
    }
}

/// Calendar day, counted from 1970-01-01 (proleptic Gregorian).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Date(pub u32);

impl Date {
    pub fn from_ymd(year: i32, month: u32, day: u32) -> Option<Date> {
        if !(1..=12).contains(&month) || day == 0 || day > days_in_month(year, month) {
            return None;
        }
        let days = days_from_civil(year, month, day);
        u32::try_from(days).ok().map(Date)
    }

    /// Parses decimal `YYYYMMDD`.
    pub fn parse(s: &str) -> Result<Date, ModelError> {
        let bad = || ModelError::InvalidDate(s.to_string());
        if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let year: i32 = s[..4].parse().map_err(|_| bad())?;
        let month: u32 = s[4..6].parse().map_err(|_| bad())?;
        let day: u32 = s[6..].parse().map_err(|_| bad())?;
        Date::from_ymd(year, month, day).ok_or_else(bad)
    }

    pub fn ymd(self) -> (i32, u32, u32) {
        civil_from_days(i64::from(self.0))
    }

    pub fn add_days(self, days: u32) -> Date {
        Date(self.0 + days)
    }

    pub fn sub_days(self, days: u32) -> Option<Date> {
        self.0.checked_sub(days).map(Date)
    }

    /// `self - earlier` in days.
    pub fn days_since(self, earlier: Date) -> i64 {
        i64::from(self.0) - i64::from(earlier.0)
    }
}

impl fmt::Display for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (y, m, d) = self.ymd();
        write!(f, "{y:04}{m:02}{d:02}")
    }
}

fn is_leap(y: i32) -> bool {
    (y % 4 == 0 && y % 100 != 0) || y % 400 == 0
}

fn days_in_month(y: i32, m: u32) -> u32 {
    match m {
        2 if is_leap(y) => 29,
        2 => 28,
        4 | 6 | 9 | 11 => 30,
        _ => 31,
    }
}

// Howard Hinnant's civil calendar conversions.
fn days_from_civil(y: i32, m: u32, d: u32) -> i64 {
    let y = i64::from(y) - i64::from(m <= 2);
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let m = i64::from(m);
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + i64::from(d) - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

fn civil_from_days(z: i64) -> (i32, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    ((y + i64::from(m <= 2)) as i32, m, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StrategyId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MetricId(pub u64);

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Names one stored partition.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PartitionKey {
    Expose(StrategyId),
    Metric(MetricId, Date),
    Dimension(String, Date),
}

impl PartitionKey {
    pub fn kind(&self) -> &'static str {
        match self {
            PartitionKey::Expose(_) => "expose",
            PartitionKey::Metric(..) => "metric",
            PartitionKey::Dimension(..) => "dimension",
        }
    }

    /// Directory name below the table kind, e.g. `3_20240101`.
    pub fn dir_name(&self) -> String {
        match self {
            PartitionKey::Expose(s) => alloc::format!("{s}"),
            PartitionKey::Metric(m, d) => alloc::format!("{m}_{d}"),
            PartitionKey::Dimension(n, d) => alloc::format!("{n}_{d}"),
        }
    }
}

impl fmt::Display for PartitionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind(), self.dir_name())
    }
}

#[derive(Clone, Debug, Default)]
struct SegmentDictionary {
    ids: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
}

/// Per-segment dictionary from analysis-unit id to dense position.
///
/// Positions are handed out in first-seen order starting at 0 and never
/// change. Ingest order decides ties; it carries no meaning.
#[derive(Clone, Debug)]
pub struct PositionEncoder {
    config: HashConfig,
    segments: Vec<SegmentDictionary>,
}

impl PositionEncoder {
    pub fn new(config: HashConfig) -> Self {
        PositionEncoder {
            config,
            segments: (0..config.segment_count)
                .map(|_| SegmentDictionary::default())
                .collect(),
        }
    }

    /// Rebuilds an encoder from saved per-segment id lists (position order).
    pub fn from_ids(config: HashConfig, segments: Vec<Vec<Vec<u8>>>) -> Result<Self, ModelError> {
        if segments.len() != config.segment_count as usize {
            return Err(ModelError::InvalidConfig("dictionary count differs from segment count"));
        }
        let mut encoder = PositionEncoder::new(config);
        for (segment, ids) in segments.into_iter().enumerate() {
            for id in ids {
                encoder.encode(segment as u32, &id)?;
            }
        }
        Ok(encoder)
    }

    pub fn config(&self) -> &HashConfig {
        &self.config
    }

    /// Returns the unit's position in `segment`, assigning the next free one
    /// on first sight.
    pub fn encode(&mut self, segment: u32, id: &[u8]) -> Result<u32, ModelError> {
        self.config.check_segment(segment)?;
        let actual = self.config.segment_of(id)?;
        if actual != segment {
            return Err(ModelError::SegmentMismatch {
                expected: segment,
                actual,
            });
        }
        let dict = &mut self.segments[segment as usize];
        if let Some(&p) = dict.index.get(id) {
            return Ok(p);
        }
        let p = dict.ids.len() as u32;
        dict.ids.push(id.to_vec());
        dict.index.insert(id.to_vec(), p);
        Ok(p)
    }

    /// Hashes the unit to its segment and encodes it there.
    pub fn encode_unit(&mut self, id: &[u8]) -> Result<(u32, u32), ModelError> {
        let segment = self.config.segment_of(id)?;
        Ok((segment, self.encode(segment, id)?))
    }

    /// Registers ids in priority order so the most engaged units get the
    /// smallest positions.
    pub fn preregister<'a, I: IntoIterator<Item = &'a [u8]>>(&mut self, ids: I) -> Result<(), ModelError> {
        for id in ids {
            self.encode_unit(id)?;
        }
        Ok(())
    }

    pub fn lookup(&self, segment: u32, id: &[u8]) -> Option<u32> {
        self.segments.get(segment as usize)?.index.get(id).copied()
    }

    pub fn lookup_unit(&self, id: &[u8]) -> Option<(u32, u32)> {
        let segment = self.config.segment_of(id).ok()?;
        Some((segment, self.lookup(segment, id)?))
    }

    pub fn id_at(&self, segment: u32, position: u32) -> Option<&[u8]> {
        self.segments
            .get(segment as usize)?
            .ids
            .get(position as usize)
            .map(Vec::as_slice)
    }

    pub fn segment_len(&self, segment: u32) -> u32 {
        self.segments
            .get(segment as usize)
            .map_or(0, |d| d.ids.len() as u32)
    }

    /// Ids of `segment` in position order.
    pub fn segment_ids(&self, segment: u32) -> &[Vec<u8>] {
        self.segments
            .get(segment as usize)
            .map_or(&[], |d| d.ids.as_slice())
    }

    pub fn total_units(&self) -> u64 {
        self.segments.iter().map(|d| d.ids.len() as u64).sum()
    }
}

/// One expose-log segment of a strategy.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExposeSegment {
    /// Earliest first-expose date in the segment; `None` when nobody in the
    /// segment is exposed.
    pub min_expose_date: Option<Date>,
    /// `first_expose_date - min_expose_date + 1`.
    pub offset: Bsi,
    /// `bucket_id + 1`, so bucket 0 is distinguishable from absence.
    pub bucket: Bsi,
}

impl ExposeSegment {
    pub fn validate(&self, bucket_count: u32) -> Result<(), &'static str> {
        if self.offset.nonzero() != self.bucket.nonzero() {
            return Err("offset and bucket supports differ");
        }
        if self.min_expose_date.is_none() != self.offset.is_empty() {
            return Err("min expose date present iff someone is exposed");
        }
        if let Ok(max) = self.bucket.max() {
            if max > u64::from(bucket_count) {
                return Err("bucket code beyond bucket count");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExposeTable {
    pub strategies: BTreeMap<StrategyId, Vec<ExposeSegment>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricTable {
    /// One BSI per segment for every `(metric, date)` partition.
    pub partitions: BTreeMap<(MetricId, Date), Vec<Bsi>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DimensionTable {
    pub partitions: BTreeMap<(String, Date), Vec<Bsi>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricSpec {
    /// Power-of-ten fixed-point factor: stored = round(raw * scale).
    pub scale: u64,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec { scale: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DimensionSpec {
    pub scale: u64,
    /// Present for categorical dimensions; value `categories[i]` is stored as `i + 1`.
    pub categories: Option<Vec<String>>,
}

impl Default for DimensionSpec {
    fn default() -> Self {
        DimensionSpec {
            scale: 1,
            categories: None,
        }
    }
}

impl DimensionSpec {
    pub fn categorical() -> Self {
        DimensionSpec {
            scale: 1,
            categories: Some(Vec::new()),
        }
    }

    pub fn code_of(&self, category: &str) -> Option<u64> {
        self.categories
            .as_ref()?
            .iter()
            .position(|c| c == category)
            .map(|i| i as u64 + 1)
    }
}

pub fn check_scale(scale: u64) -> Result<(), ModelError> {
    let mut s = scale;
    while s >= 10 && s % 10 == 0 {
        s /= 10;
    }
    if s == 1 {
        Ok(())
    } else {
        Err(ModelError::InvalidScale(scale))
    }
}

/// Hash configuration plus per-metric and per-dimension metadata.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    pub hash: HashConfig,
    pub metrics: BTreeMap<MetricId, MetricSpec>,
    pub dimensions: BTreeMap<String, DimensionSpec>,
}

impl Catalog {
    pub fn new(hash: HashConfig) -> Self {
        Catalog {
            hash,
            ..Catalog::default()
        }
    }

    pub fn metric_scale(&self, metric: MetricId) -> u64 {
        self.metrics.get(&metric).map_or(1, |m| m.scale)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExposeRecord {
    pub strategy: StrategyId,
    pub analysis_unit: Vec<u8>,
    pub randomization_unit: Vec<u8>,
    pub first_expose: Date,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub date: Date,
    pub metric: MetricId,
    pub analysis_unit: Vec<u8>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DimValue {
    Number(f64),
    Category(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionRecord {
    pub date: Date,
    pub name: String,
    pub analysis_unit: Vec<u8>,
    pub value: DimValue,
}

/// Rows seen and dropped while building a table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub records: u64,
    pub stored: u64,
    pub dropped_zero: u64,
}

/// Fixed-point conversion of a raw measurement.
pub fn quantize(record: usize, raw: f64, scale: u64) -> Result<u64, ModelError> {
    if !raw.is_finite() || raw < 0.0 {
        return Err(ModelError::InvalidValue { record, value: raw });
    }
    let scaled = libm::round(raw * scale as f64);
    if scaled >= 18_446_744_073_709_551_616.0 {
        return Err(ModelError::ValueTooLarge { record, value: raw });
    }
    Ok(scaled as u64)
}

pub fn build_expose<I>(records: I, encoder: &mut PositionEncoder) -> Result<ExposeTable, ModelError>
where
    I: IntoIterator<Item = ExposeRecord>,
{
    let config = *encoder.config();
    let segments = config.segment_count as usize;
    // strategy -> segment -> (position, first expose date, bucket code)
    let mut staged: BTreeMap<StrategyId, Vec<Vec<(u32, Date, u64)>>> = BTreeMap::new();
    let mut seen: BTreeMap<StrategyId, hashbrown::HashSet<(u32, u32)>> = BTreeMap::new();
    for (record, r) in records.into_iter().enumerate() {
        let (segment, position) = encoder.encode_unit(&r.analysis_unit)?;
        let bucket = config.bucket_of(&r.randomization_unit)?;
        if !seen.entry(r.strategy).or_default().insert((segment, position)) {
            return Err(ModelError::DuplicateExpose {
                record,
                strategy: r.strategy,
            });
        }
        staged
            .entry(r.strategy)
            .or_insert_with(|| (0..segments).map(|_| Vec::new()).collect())[segment as usize]
            .push((position, r.first_expose, u64::from(bucket) + 1));
    }
    let mut table = ExposeTable::default();
    for (strategy, per_segment) in staged {
        let built = per_segment
            .into_iter()
            .map(|rows| {
                let min = rows.iter().map(|r| r.1).min();
                let Some(min) = min else {
                    return Ok(ExposeSegment::default());
                };
                let offset = Bsi::from_pairs(
                    rows.iter()
                        .map(|&(p, d, _)| (p, d.days_since(min) as u64 + 1)),
                )?;
                let bucket = Bsi::from_pairs(rows.iter().map(|&(p, _, b)| (p, b)))?;
                Ok(ExposeSegment {
                    min_expose_date: Some(min),
                    offset,
                    bucket,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        table.strategies.insert(strategy, built);
    }
    Ok(table)
}

type Staged<K> = BTreeMap<K, Vec<Vec<(u32, u64)>>>;

fn finish_partitions<K: Ord + Clone>(
    staged: Staged<K>,
    describe: impl Fn(&K) -> (String, Date),
    first_record: &BTreeMap<(K, u32, u32), usize>,
) -> Result<BTreeMap<K, Vec<Bsi>>, ModelError> {
    let mut out = BTreeMap::new();
    for (key, per_segment) in staged {
        let mut bsis = Vec::with_capacity(per_segment.len());
        for (segment, rows) in per_segment.into_iter().enumerate() {
            match Bsi::from_pairs(rows) {
                Ok(b) => bsis.push(b),
                Err(BsiError::DuplicatePosition(p)) => {
                    let (what, date) = describe(&key);
                    let record = first_record
                        .get(&(key.clone(), segment as u32, p))
                        .copied()
                        .unwrap_or(0);
                    return Err(ModelError::DuplicateRow { record, what, date });
                }
                Err(e) => return Err(e.into()),
            }
        }
        out.insert(key, bsis);
    }
    Ok(out)
}

/// Builds metric partitions. Metrics missing from the catalog are registered
/// with scale 1. Zero values are dropped and counted.
pub fn build_metric<I>(
    records: I,
    encoder: &mut PositionEncoder,
    catalog: &mut Catalog,
) -> Result<(MetricTable, IngestStats), ModelError>
where
    I: IntoIterator<Item = MetricRecord>,
{
    let segments = encoder.config().segment_count as usize;
    let mut staged: Staged<(MetricId, Date)> = BTreeMap::new();
    let mut latest: BTreeMap<((MetricId, Date), u32, u32), usize> = BTreeMap::new();
    let mut stats = IngestStats::default();
    for (record, r) in records.into_iter().enumerate() {
        stats.records += 1;
        let scale = catalog.metrics.entry(r.metric).or_default().scale;
        let value = quantize(record, r.value, scale)?;
        let (segment, position) = encoder.encode_unit(&r.analysis_unit)?;
        let key = (r.metric, r.date);
        if latest.insert((key, segment, position), record).is_some() {
            return Err(ModelError::DuplicateRow {
                record,
                what: alloc::format!("metric {}", r.metric),
                date: r.date,
            });
        }
        if value == 0 {
            stats.dropped_zero += 1;
            continue;
        }
        stats.stored += 1;
        staged
            .entry(key)
            .or_insert_with(|| (0..segments).map(|_| Vec::new()).collect())[segment as usize]
            .push((position, value));
    }
    let partitions = finish_partitions(
        staged,
        |(m, d)| (alloc::format!("metric {m}"), *d),
        &latest,
    )?;
    Ok((MetricTable { partitions }, stats))
}

/// Builds dimension partitions. Categorical values get dictionary codes
/// starting at 1, appended in first-seen order.
pub fn build_dimension<I>(
    records: I,
    encoder: &mut PositionEncoder,
    catalog: &mut Catalog,
) -> Result<(DimensionTable, IngestStats), ModelError>
where
    I: IntoIterator<Item = DimensionRecord>,
{
    let segments = encoder.config().segment_count as usize;
    let mut staged: Staged<(String, Date)> = BTreeMap::new();
    let mut latest: BTreeMap<((String, Date), u32, u32), usize> = BTreeMap::new();
    let mut stats = IngestStats::default();
    for (record, r) in records.into_iter().enumerate() {
        stats.records += 1;
        let spec = catalog.dimensions.entry(r.name.clone()).or_default();
        let value = match (&r.value, spec.categories.as_mut()) {
            (DimValue::Category(c), Some(categories)) => {
                match categories.iter().position(|x| x == c) {
                    Some(i) => i as u64 + 1,
                    None => {
                        categories.push(c.clone());
                        categories.len() as u64
                    }
                }
            }
            (DimValue::Number(x), None) => quantize(record, *x, spec.scale)?,
            (DimValue::Number(_), Some(_)) => {
                return Err(ModelError::ExpectedCategory {
                    record,
                    name: r.name,
                })
            }
            (DimValue::Category(c), None) => {
                return Err(ModelError::ExpectedNumber {
                    record,
                    name: r.name,
                    value: c.clone(),
                })
            }
        };
        let (segment, position) = encoder.encode_unit(&r.analysis_unit)?;
        let key = (r.name.clone(), r.date);
        if latest.insert((key.clone(), segment, position), record).is_some() {
            return Err(ModelError::DuplicateRow {
                record,
                what: alloc::format!("dimension {}", r.name),
                date: r.date,
            });
        }
        if value == 0 {
            stats.dropped_zero += 1;
            continue;
        }
        stats.stored += 1;
        staged
            .entry(key)
            .or_insert_with(|| (0..segments).map(|_| Vec::new()).collect())[segment as usize]
            .push((position, value));
    }
    let partitions = finish_partitions(
        staged,
        |(n, d)| (alloc::format!("dimension {n}"), *d),
        &latest,
    )?;
    Ok((DimensionTable { partitions }, stats))
}
