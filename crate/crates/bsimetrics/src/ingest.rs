//! TSV log ingest.
//!
//! Column layouts, one record per line, optional header line:
//!
//! ```text
//! expose     strategy-id  analysis-unit-id  randomization-unit-id  first-expose-date
//! metric     date         metric-id         analysis-unit-id       value
//! dimension  date         dimension-name    analysis-unit-id       value
//! ```
//!
//! Dates are `YYYYMMDD`. Blank lines and lines starting with `#` are skipped.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use bsimetrics_core::model::{
    build_dimension, build_expose, build_metric, Catalog, Date, DimValue, DimensionRecord, DimensionSpec,
    ExposeRecord, IngestStats, MetricId, MetricRecord, MetricSpec, ModelError, PartitionKey, StrategyId,
};
use thiserror::Error;

use crate::store::{check_dimension_name, Partition, Store, StoreError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TableKind {
    Expose,
    Metric,
    Dimension,
}

impl TableKind {
    pub fn header(self) -> [&'static str; 4] {
        match self {
            TableKind::Expose => ["strategy-id", "analysis-unit-id", "randomization-unit-id", "first-expose-date"],
            TableKind::Metric => ["date", "metric-id", "analysis-unit-id", "value"],
            TableKind::Dimension => ["date", "dimension-name", "analysis-unit-id", "value"],
        }
    }
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableKind::Expose => "expose",
            TableKind::Metric => "metric",
            TableKind::Dimension => "dimension",
        })
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("reading input: {0}")]
    Io(#[from] std::io::Error),
    #[error("partition {0} already exists; pass --replace to overwrite it")]
    Exists(PartitionKey),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(ModelError),
}

fn line_err(line: usize, reason: impl Into<String>) -> IngestError {
    IngestError::Line {
        line,
        reason: reason.into(),
    }
}

/// Parsed records of one kind, with the source line of each.
#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Expose(Vec<ExposeRecord>),
    Metric(Vec<MetricRecord>),
    Dimension(Vec<DimensionRecord>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parsed {
    pub records: Records,
    pub lines: Vec<usize>,
}

impl Parsed {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

fn field<T: FromStr>(line: usize, what: &str, s: &str) -> Result<T, IngestError> {
    s.parse().map_err(|_| line_err(line, format!("bad {what} `{s}`")))
}

fn date(line: usize, s: &str) -> Result<Date, IngestError> {
    Date::parse(s).map_err(|e| line_err(line, e.to_string()))
}

fn unit(line: usize, what: &str, s: &str) -> Result<Vec<u8>, IngestError> {
    if s.is_empty() {
        return Err(line_err(line, format!("empty {what}")));
    }
    Ok(s.as_bytes().to_vec())
}

fn number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Parses a whole TSV stream. `catalog` decides how dimension values are
/// read: a categorical dimension takes every value as a category, a numeric
/// one requires numbers, and an unknown one takes the type of its first value.
pub fn parse<R: BufRead>(kind: TableKind, input: R, catalog: &Catalog) -> Result<Parsed, IngestError> {
    let mut lines = Vec::new();
    let mut expose = Vec::new();
    let mut metric = Vec::new();
    let mut dimension = Vec::new();
    let mut dim_types: std::collections::HashMap<String, bool> = catalog
        .dimensions
        .iter()
        .map(|(n, d)| (n.clone(), d.categories.is_some()))
        .collect();
    let mut first = true;
    for (i, text) in input.lines().enumerate() {
        let text = text?;
        let n = i + 1;
        let text = text.strip_suffix('\r').unwrap_or(&text);
        if text.trim().is_empty() || text.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = text.split('\t').collect();
        if std::mem::take(&mut first) && cols == kind.header() {
            continue;
        }
        if cols.len() != 4 {
            return Err(line_err(
                n,
                format!("expected 4 tab-separated columns ({}), found {}", kind.header().join(", "), cols.len()),
            ));
        }
        match kind {
            TableKind::Expose => expose.push(ExposeRecord {
                strategy: StrategyId(field(n, "strategy id", cols[0])?),
                analysis_unit: unit(n, "analysis unit id", cols[1])?,
                randomization_unit: unit(n, "randomization unit id", cols[2])?,
                first_expose: date(n, cols[3])?,
            }),
            TableKind::Metric => {
                let value = number(cols[3]).ok_or_else(|| line_err(n, format!("bad value `{}`", cols[3])))?;
                metric.push(MetricRecord {
                    date: date(n, cols[0])?,
                    metric: MetricId(field(n, "metric id", cols[1])?),
                    analysis_unit: unit(n, "analysis unit id", cols[2])?,
                    value,
                })
            }
            TableKind::Dimension => {
                let name = cols[1];
                check_dimension_name(name).map_err(|e| line_err(n, e.to_string()))?;
                let categorical = *dim_types
                    .entry(name.to_string())
                    .or_insert_with(|| number(cols[3]).is_none());
                let value = if categorical {
                    if cols[3].is_empty() {
                        return Err(line_err(n, "empty category"));
                    }
                    DimValue::Category(cols[3].to_string())
                } else {
                    DimValue::Number(number(cols[3]).ok_or_else(|| {
                        line_err(n, format!("dimension `{name}` is numeric; got `{}`", cols[3]))
                    })?)
                };
                dimension.push(DimensionRecord {
                    date: date(n, cols[0])?,
                    name: name.to_string(),
                    analysis_unit: unit(n, "analysis unit id", cols[2])?,
                    value,
                })
            }
        }
        lines.push(n);
    }
    let records = match kind {
        TableKind::Expose => Records::Expose(expose),
        TableKind::Metric => Records::Metric(metric),
        TableKind::Dimension => Records::Dimension(dimension),
    };
    Ok(Parsed { records, lines })
}

/// What an ingest wrote.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub stats: IngestStats,
    pub partitions: Vec<(PartitionKey, u64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    /// Fixed-point scale for metrics and numeric dimensions not yet in the
    /// catalog.
    pub scale: u64,
    pub replace: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { scale: 1, replace: false }
    }
}

fn model_err(lines: &[usize], e: ModelError) -> IngestError {
    let record = match &e {
        ModelError::DuplicateExpose { record, .. }
        | ModelError::DuplicateRow { record, .. }
        | ModelError::InvalidValue { record, .. }
        | ModelError::ValueTooLarge { record, .. }
        | ModelError::ExpectedCategory { record, .. }
        | ModelError::ExpectedNumber { record, .. } => Some(*record),
        _ => None,
    };
    match record.and_then(|r| lines.get(r)) {
        Some(&line) => line_err(line, e.to_string()),
        None => IngestError::Model(e),
    }
}

/// Builds tables from parsed records and writes their partitions. The
/// position dictionary and catalog are saved only after every partition is
/// written.
pub fn ingest(store: &mut Store, parsed: Parsed, opts: IngestOptions) -> Result<IngestReport, IngestError> {
    bsimetrics_core::model::check_scale(opts.scale).map_err(IngestError::Model)?;
    let mut catalog = store.catalog().clone();
    let mut enc = store.load_encoder()?;
    let lines = parsed.lines;
    let mut partitions = Vec::new();
    let mut stats = IngestStats::default();
    match parsed.records {
        Records::Expose(records) => {
            stats.records = records.len() as u64;
            stats.stored = stats.records;
            let table = build_expose(records, &mut enc).map_err(|e| model_err(&lines, e))?;
            for (strategy, segs) in &table.strategies {
                let units = segs.iter().map(|s| s.offset.count()).sum();
                partitions.push((Partition::expose(*strategy, segs), units));
            }
        }
        Records::Metric(records) => {
            for r in &records {
                catalog
                    .metrics
                    .entry(r.metric)
                    .or_insert(MetricSpec { scale: opts.scale });
            }
            let (table, s) = build_metric(records, &mut enc, &mut catalog).map_err(|e| model_err(&lines, e))?;
            stats = s;
            for ((m, d), bsis) in &table.partitions {
                let stored = bsis.iter().map(|b| b.count()).sum();
                partitions.push((Partition::values(PartitionKey::Metric(*m, *d), bsis), stored));
            }
        }
        Records::Dimension(records) => {
            for r in &records {
                catalog.dimensions.entry(r.name.clone()).or_insert_with(|| match r.value {
                    DimValue::Category(_) => DimensionSpec::categorical(),
                    DimValue::Number(_) => DimensionSpec {
                        scale: opts.scale,
                        categories: None,
                    },
                });
            }
            let (table, s) = build_dimension(records, &mut enc, &mut catalog).map_err(|e| model_err(&lines, e))?;
            stats = s;
            for ((name, d), bsis) in &table.partitions {
                let stored = bsis.iter().map(|b| b.count()).sum();
                partitions.push((Partition::values(PartitionKey::Dimension(name.clone(), *d), bsis), stored));
            }
        }
    }
    if !opts.replace {
        if let Some((p, _)) = partitions
            .iter()
            .find(|(p, _)| store.manifest().partitions.contains_key(&p.key))
        {
            return Err(IngestError::Exists(p.key.clone()));
        }
    }
    // Positions must be on disk before any partition refers to them.
    store.save_encoder(&enc)?;
    store.set_catalog(catalog)?;
    let mut report = IngestReport {
        stats,
        partitions: Vec::new(),
    };
    for (p, n) in partitions {
        store.write_partition(&p)?;
        report.partitions.push((p.key, n));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bsimetrics_core::model::HashConfig;

    fn catalog() -> Catalog {
        Catalog::new(HashConfig::new(4, 16).unwrap())
    }

    #[test]
    fn header_is_optional() {
        let with = "date\tmetric-id\tanalysis-unit-id\tvalue\n20240101\t1\tu1\t3\n";
        let without = "20240101\t1\tu1\t3\n";
        let a = parse(TableKind::Metric, with.as_bytes(), &catalog()).unwrap();
        let b = parse(TableKind::Metric, without.as_bytes(), &catalog()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.lines, vec![2]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "20240101\t1\tu1\t3\n\n20240101\t1\tu2\n";
        match parse(TableKind::Metric, text.as_bytes(), &catalog()) {
            Err(IngestError::Line { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let text = "7\tu1\tu1\t2024-01-01\n";
        assert!(matches!(
            parse(TableKind::Expose, text.as_bytes(), &catalog()),
            Err(IngestError::Line { line: 1, .. })
        ));
    }

    #[test]
    fn first_value_decides_dimension_type() {
        let text = "20240101\tos\tu1\tios\n20240101\tos\tu2\t3\n20240101\tver\tu1\t3\n";
        let p = parse(TableKind::Dimension, text.as_bytes(), &catalog()).unwrap();
        let Records::Dimension(r) = p.records else { panic!() };
        assert_eq!(r[1].value, DimValue::Category("3".into()));
        assert_eq!(r[2].value, DimValue::Number(3.0));

        let bad = "20240101\tver\tu1\t3\n20240101\tver\tu2\tbeta\n";
        assert!(matches!(
            parse(TableKind::Dimension, bad.as_bytes(), &catalog()),
            Err(IngestError::Line { line: 2, .. })
        ));
    }

    #[test]
    fn bad_dimension_names_are_rejected() {
        let text = "20240101\t9lives\tu1\t3\n";
        assert!(parse(TableKind::Dimension, text.as_bytes(), &catalog()).is_err());
    }
}
