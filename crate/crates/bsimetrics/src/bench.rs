//! Normal-format vs BSI comparisons on synthetic data.
//!
//! Both sides of every comparison are run on the same input and checked for
//! identical answers before anything is timed. Timings are the median of
//! `runs` repetitions after one warm-up run.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use bsimetrics_core::codec::{decode_per_bitmap, decode_straightforward, encode_presorted, encode_straightforward};
use bsimetrics_core::engine::reference::{hash_sum, Reference};
use bsimetrics_core::engine::{run_query, Agg, Query};
use bsimetrics_core::model::{Catalog, HashConfig, MetricId, StrategyId};
use bsimetrics_core::{Bsi, NormalRows};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use thiserror::Error;

use crate::generate::{GenSpec, GenerateError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    Storage,
    Compute,
    Encode,
    Decode,
    Scorecard,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Storage,
        Scenario::Compute,
        Scenario::Encode,
        Scenario::Decode,
        Scenario::Scorecard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Storage => "storage",
            Scenario::Compute => "compute",
            Scenario::Encode => "encode",
            Scenario::Decode => "decode",
            Scenario::Scorecard => "scorecard",
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error("{0}")]
    Setup(String),
    #[error("{scenario}: the two pipelines disagree on {what}")]
    Mismatch { scenario: &'static str, what: String },
    #[error("need at least 5 timed runs, got {0}")]
    Runs(usize),
}

fn setup(e: impl std::fmt::Display) -> BenchError {
    BenchError::Setup(e.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchParams {
    /// Units in a metric day; positions are `0..units`.
    pub units: u32,
    pub alpha: f64,
    pub cap: u64,
    pub density: f64,
    /// Units for the scorecard scenario, which also builds a reference engine.
    pub scorecard_units: u64,
    pub scorecard_segments: u32,
    pub runs: usize,
    pub lz4: bool,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            units: 1_000_000,
            alpha: 1.16,
            cap: 100,
            density: 0.5,
            scorecard_units: 20_000,
            scorecard_segments: 8,
            runs: 5,
            lz4: false,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Bytes,
    Seconds,
}

/// One measured pair. `ratio` is baseline over candidate, so above 1 means
/// the candidate is smaller or faster.
#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub measure: String,
    pub unit: Unit,
    pub baseline: &'static str,
    pub baseline_value: f64,
    pub candidate: &'static str,
    pub candidate_value: f64,
}

impl Line {
    pub fn ratio(&self) -> f64 {
        self.baseline_value / self.candidate_value
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub rows: u64,
    pub runs: usize,
    pub lines: Vec<Line>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub scenarios: Vec<ScenarioReport>,
}

/// Median wall time of `runs` calls after one warm-up call, in seconds.
pub fn median_secs<T>(runs: usize, mut f: impl FnMut() -> T) -> f64 {
    black_box(f());
    let mut times: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            start.elapsed().as_secs_f64().max(1e-9)
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// One metric day in normal format: each position in `0..units` carries a
/// capped Pareto value with probability `density`.
pub fn metric_day(units: u32, alpha: f64, cap: u64, density: f64, seed: u64) -> Result<NormalRows, BenchError> {
    if !(alpha > 0.0) {
        return Err(GenerateError::Alpha(alpha).into());
    }
    let pareto = Pareto::new(1.0, alpha).map_err(|_| GenerateError::Alpha(alpha))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity((f64::from(units) * density) as usize);
    for p in 0..units {
        if rng.random_bool(density) {
            rows.push((p, (pareto.sample(&mut rng).ceil() as u64).clamp(1, cap.max(1))));
        }
    }
    Ok(NormalRows::new(rows))
}

fn mismatch(scenario: Scenario, what: &str) -> BenchError {
    BenchError::Mismatch {
        scenario: scenario.name(),
        what: what.into(),
    }
}

fn time_line(measure: &str, baseline: (&'static str, f64), candidate: (&'static str, f64)) -> Line {
    Line {
        measure: measure.into(),
        unit: Unit::Seconds,
        baseline: baseline.0,
        baseline_value: baseline.1,
        candidate: candidate.0,
        candidate_value: candidate.1,
    }
}

fn bytes_line(measure: &str, baseline: (&'static str, usize), candidate: (&'static str, usize)) -> Line {
    Line {
        measure: measure.into(),
        unit: Unit::Bytes,
        baseline: baseline.0,
        baseline_value: baseline.1.max(1) as f64,
        candidate: candidate.0,
        candidate_value: candidate.1.max(1) as f64,
    }
}

pub fn storage(p: &BenchParams) -> Result<ScenarioReport, BenchError> {
    let rows = metric_day(p.units, p.alpha, p.cap, p.density, p.seed)?;
    let bsi = encode_presorted(&rows).map_err(setup)?;
    let bsi_bytes = bsi.serialize().map_err(setup)?;
    if Bsi::deserialize(&bsi_bytes).map_err(setup)? != bsi || decode_per_bitmap(&bsi, &bsi.nonzero()) != rows {
        return Err(mismatch(Scenario::Storage, "round trip"));
    }
    let mut lines = vec![bytes_line(
        "size",
        ("normal", rows.raw_len()),
        ("bsi", bsi_bytes.len()),
    )];
    if p.lz4 {
        let normal_lz4 = lz4_flex::compress_prepend_size(&rows.to_bytes()).len();
        let bsi_lz4 = lz4_flex::compress_prepend_size(&bsi_bytes).len();
        lines.push(bytes_line("size", ("normal+lz4", normal_lz4), ("bsi", bsi_bytes.len())));
        lines.push(bytes_line("size", ("normal+lz4", normal_lz4), ("bsi+lz4", bsi_lz4)));
    }
    Ok(ScenarioReport {
        scenario: Scenario::Storage,
        rows: rows.len() as u64,
        runs: 1,
        lines,
    })
}

/// Two-day sum: row hash aggregation against `sumBSI`.
pub fn compute(p: &BenchParams) -> Result<ScenarioReport, BenchError> {
    let a = metric_day(p.units, p.alpha, p.cap, p.density, p.seed)?;
    let b = metric_day(p.units, p.alpha, p.cap, p.density, p.seed + 1)?;
    let (x, y) = (
        encode_presorted(&a).map_err(setup)?,
        encode_presorted(&b).map_err(setup)?,
    );
    let rows_out = hash_sum(&[&a.rows, &b.rows]);
    let bsi_out = x.add(&y).map_err(setup)?;
    let decoded = decode_per_bitmap(&bsi_out, &bsi_out.nonzero());
    if decoded.len() != rows_out.len() || decoded.rows.iter().any(|(p, v)| rows_out.get(p) != Some(v)) {
        return Err(mismatch(Scenario::Compute, "two-day sums"));
    }
    let normal = median_secs(p.runs, || hash_sum(&[&a.rows, &b.rows]));
    let bsi = median_secs(p.runs, || x.add(&y));
    Ok(ScenarioReport {
        scenario: Scenario::Compute,
        rows: (a.len() + b.len()) as u64,
        runs: p.runs,
        lines: vec![time_line("two-day sum", ("hash-aggregate", normal), ("sumBSI", bsi))],
    })
}

pub fn encode(p: &BenchParams) -> Result<ScenarioReport, BenchError> {
    let rows = metric_day(p.units, p.alpha, p.cap, p.density, p.seed)?;
    let slow = encode_straightforward(&rows).map_err(setup)?;
    if encode_presorted(&rows).map_err(setup)? != slow {
        return Err(mismatch(Scenario::Encode, "encoded BSI"));
    }
    let a = median_secs(p.runs, || encode_straightforward(&rows));
    let b = median_secs(p.runs, || encode_presorted(&rows));
    Ok(ScenarioReport {
        scenario: Scenario::Encode,
        rows: rows.len() as u64,
        runs: p.runs,
        lines: vec![time_line("encode", ("straightforward", a), ("presorted", b))],
    })
}

/// Decode on dense binary data, like a daily-active flag.
pub fn decode(p: &BenchParams) -> Result<ScenarioReport, BenchError> {
    let rows = metric_day(p.units, p.alpha, 1, p.density.max(0.9), p.seed)?;
    let x = encode_presorted(&rows).map_err(setup)?;
    let mask = x.nonzero();
    if decode_straightforward(&x, &mask) != rows || decode_per_bitmap(&x, &mask) != rows {
        return Err(mismatch(Scenario::Decode, "decoded rows"));
    }
    let a = median_secs(p.runs, || decode_straightforward(&x, &mask));
    let b = median_secs(p.runs, || decode_per_bitmap(&x, &mask));
    Ok(ScenarioReport {
        scenario: Scenario::Decode,
        rows: rows.len() as u64,
        runs: p.runs,
        lines: vec![time_line("decode", ("straightforward", a), ("per-bitmap", b))],
    })
}

/// Seven-day sum scorecard for one strategy: row-based reference engine
/// against the BSI engine, both on prebuilt tables.
pub fn scorecard(p: &BenchParams) -> Result<ScenarioReport, BenchError> {
    let spec = GenSpec {
        units: p.scorecard_units,
        metrics: 1,
        alpha: p.alpha,
        cap: p.cap,
        density: p.density,
        dimensions: false,
        seed: p.seed,
        ..GenSpec::default()
    };
    let generated = spec.generate()?;
    let hash = HashConfig::new(p.scorecard_segments, 1024).map_err(setup)?;
    let (data, _) = generated.build(Catalog::new(hash)).map_err(setup)?;
    let reference = Reference::new(&data.catalog, &generated.expose, &generated.metric, &[]);
    let dates = spec.experiment_dates();
    let query = Query {
        strategy: StrategyId(1),
        metric: MetricId(1),
        dates: &dates,
        agg: Agg::Sum,
        filter: None,
    };
    let engine = run_query(&data, &query).map_err(setup)?;
    let oracle = reference.scorecard(StrategyId(1), MetricId(1), &dates, Agg::Sum, None);
    if engine != oracle {
        return Err(mismatch(Scenario::Scorecard, "bucket vectors"));
    }
    let a = median_secs(p.runs, || reference.scorecard(StrategyId(1), MetricId(1), &dates, Agg::Sum, None));
    let b = median_secs(p.runs, || run_query(&data, &query));
    Ok(ScenarioReport {
        scenario: Scenario::Scorecard,
        rows: generated.metric.len() as u64,
        runs: p.runs,
        lines: vec![time_line("7-day scorecard", ("reference", a), ("bsi-engine", b))],
    })
}

pub fn run(scenarios: &[Scenario], p: &BenchParams) -> Result<BenchReport, BenchError> {
    if p.runs < 5 {
        return Err(BenchError::Runs(p.runs));
    }
    let mut report = BenchReport::default();
    for &s in scenarios {
        report.scenarios.push(match s {
            Scenario::Storage => storage(p)?,
            Scenario::Compute => compute(p)?,
            Scenario::Encode => encode(p)?,
            Scenario::Decode => decode(p)?,
            Scenario::Scorecard => scorecard(p)?,
        });
    }
    Ok(report)
}

const COLUMNS: [&str; 9] = [
    "scenario",
    "measure",
    "rows",
    "runs",
    "unit",
    "baseline",
    "baseline_value",
    "candidate",
    "candidate_value",
];

fn cells(s: &ScenarioReport, l: &Line) -> Vec<String> {
    let (unit, fmt): (&str, fn(f64) -> String) = match l.unit {
        Unit::Bytes => ("bytes", |v| format!("{v:.0}")),
        Unit::Seconds => ("s", |v| format!("{v:.6}")),
    };
    vec![
        s.scenario.name().into(),
        l.measure.clone(),
        s.rows.to_string(),
        s.runs.to_string(),
        unit.into(),
        l.baseline.into(),
        fmt(l.baseline_value),
        l.candidate.into(),
        fmt(l.candidate_value),
        format!("{:.3}", l.ratio()),
    ]
}

impl BenchReport {
    pub fn to_tsv(&self) -> String {
        let mut out = COLUMNS.join("\t");
        out.push_str("\tratio\n");
        for s in &self.scenarios {
            for l in &s.lines {
                out.push_str(&cells(s, l).join("\t"));
                out.push('\n');
            }
        }
        out
    }

    /// Aligned table built from the same cells as the TSV.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![COLUMNS.iter().chain(&["ratio"]).map(|c| c.to_string()).collect()];
        for s in &self.scenarios {
            rows.extend(s.lines.iter().map(|l| cells(s, l)));
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            for (c, cell) in r.iter().enumerate() {
                let _ = write!(out, "{cell:<w$}  ", w = widths[c]);
            }
            out.truncate(out.trim_end().len());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}
