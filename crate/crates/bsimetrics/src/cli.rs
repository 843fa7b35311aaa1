//! Command-line interface.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use bsimetrics_core::engine::{bind, parse_predicate, Agg, EngineError, PreAggCache, PreAggTree};
use bsimetrics_core::model::{
    Catalog, Date, DimensionSpec, HashConfig, MetricId, MetricSpec, PartitionKey, StrategyId, DEFAULT_BUCKETS, DEFAULT_BUCKET_SALT,
    DEFAULT_SEGMENTS,
};
use bsimetrics_core::AggFn;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::bench::{self, BenchParams, Scenario};
use crate::generate::GenSpec;
use crate::ingest::{self, IngestOptions, TableKind};
use crate::report::{self, ScorecardRequest};
use crate::store::{Store, StoreError};

#[derive(Debug, Parser)]
#[command(name = "bsimetrics", version, about = "Experiment metrics on bit-sliced indexes")]
pub struct Cli {
    /// Catalog root directory.
    #[arg(long, global = true, env = "BSIMETRICS_ROOT")]
    pub root: Option<PathBuf>,
    /// TSV key-value config file (keys: root, threads, preagg_cache_bytes).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-segment work (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty catalog.
    Init(InitArgs),
    /// Load a TSV log into partitions.
    Ingest(IngestArgs),
    /// Per-strategy metric means, with tests against a control.
    Scorecard(ScorecardArgs),
    /// Build and verify a pre-aggregate tree and show range decompositions.
    Precompute(PrecomputeArgs),
    /// Scorecard restricted by a dimension predicate.
    Deepdive(DeepdiveArgs),
    /// Write seeded synthetic TSV logs.
    Generate(GenerateArgs),
    /// Compare normal-format and BSI pipelines.
    Bench(BenchArgs),
    /// Print statistics for a store root, partition directory or segment file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
    pub segments: u32,
    #[arg(long, default_value_t = DEFAULT_BUCKETS)]
    pub buckets: u32,
    #[arg(long, default_value_t = DEFAULT_BUCKET_SALT)]
    pub bucket_salt: u8,
    /// Use the segment hash as the bucket (requires equal counts).
    #[arg(long)]
    pub shared: bool,
    /// Metric fixed-point scale, `ID=SCALE`.
    #[arg(long = "metric", value_name = "ID=SCALE")]
    pub metrics: Vec<String>,
    /// Dimension, `NAME=SCALE` for numeric or `NAME=categorical`.
    #[arg(long = "dimension", value_name = "NAME=SCALE|categorical")]
    pub dimensions: Vec<String>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub kind: TableKind,
    pub input: PathBuf,
    /// Scale for metrics or numeric dimensions not yet in the catalog.
    #[arg(long, default_value_t = 1)]
    pub scale: u64,
    /// Overwrite partitions that already exist.
    #[arg(long)]
    pub replace: bool,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Strategies to report (repeatable).
    #[arg(long = "strategy", required = true)]
    pub strategies: Vec<u64>,
    /// Control strategy for difference tests.
    #[arg(long)]
    pub control: Option<u64>,
    /// Metrics to report (repeatable).
    #[arg(long = "metric", required = true)]
    pub metrics: Vec<u64>,
    /// Single analysis date, YYYYMMDD.
    #[arg(long, conflicts_with_all = ["from", "to"])]
    pub date: Option<String>,
    /// First date of a range.
    #[arg(long, requires = "to")]
    pub from: Option<String>,
    /// Last date of a range.
    #[arg(long, requires = "from")]
    pub to: Option<String>,
    /// sum, count or unique.
    #[arg(long, default_value = "sum", value_parser = parse_agg)]
    pub agg: Agg,
}

#[derive(Debug, Args)]
pub struct ScorecardArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    /// Dimension predicate, e.g. `client-type = 1 AND client-version > 134`.
    #[arg(long = "where")]
    pub predicate: Option<String>,
    /// Dimension snapshot date for `--where` (default: last analysis date).
    #[arg(long)]
    pub dim_date: Option<String>,
    /// CUPED with a covariate over this many pre-experiment days.
    #[arg(long, value_name = "DAYS")]
    pub cuped: Option<u32>,
}

#[derive(Debug, Args)]
pub struct DeepdiveArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long = "where", required = true)]
    pub predicate: String,
    #[arg(long)]
    pub dim_date: Option<String>,
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    #[arg(long)]
    pub metric: u64,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    /// Fold kind: sum, max or distinct.
    #[arg(long, default_value = "sum", value_parser = parse_fold)]
    pub kind: AggFn,
    /// Ranges to decompose, `LO..HI` in YYYYMMDD (repeatable).
    #[arg(long = "query", value_name = "LO..HI")]
    pub queries: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 10_000)]
    pub units: u64,
    #[arg(long, default_value_t = 3)]
    pub strategies: u32,
    #[arg(long, default_value_t = 5)]
    pub metrics: u32,
    #[arg(long, default_value_t = 7)]
    pub days: u32,
    #[arg(long, default_value_t = 0)]
    pub pre_days: u32,
    /// First experiment day, YYYYMMDD.
    #[arg(long, default_value = "20240101")]
    pub start: String,
    #[arg(long, default_value_t = 1.16, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub cap: u64,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = 0.5)]
    pub exposure_rate: f64,
    #[arg(long)]
    pub no_dimensions: bool,
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scenarios to run (default: all).
    #[arg(long = "scenario")]
    pub scenarios: Vec<Scenario>,
    #[arg(long, default_value_t = 1_000_000)]
    pub units: u32,
    #[arg(long, default_value_t = 20_000)]
    pub scorecard_units: u64,
    #[arg(long, default_value_t = 8)]
    pub scorecard_segments: u32,
    #[arg(long, default_value_t = 1.16)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub cap: u64,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Add LZ4-compressed sizes to the storage scenario.
    #[arg(long)]
    pub lz4: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Print TSV instead of the table.
    #[arg(long)]
    pub tsv: bool,
    /// Also write the TSV report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn parse_agg(s: &str) -> Result<Agg, String> {
    Agg::parse(s).ok_or_else(|| format!("unknown aggregate `{s}`; use sum, count or unique"))
}

fn parse_fold(s: &str) -> Result<AggFn, String> {
    match s {
        "sum" => Ok(AggFn::Sum),
        "max" => Ok(AggFn::Max),
        "distinct" => Ok(AggFn::DistinctPos),
        _ => Err(format!("unknown fold `{s}`; use sum, max or distinct")),
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error(transparent)]
    Generate(#[from] crate::generate::GenerateError),
    #[error(transparent)]
    Bench(#[from] bench::BenchError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn date(s: &str) -> Result<Date, CliError> {
    Date::parse(s).map_err(|e| usage(format!("`{s}`: {e}")))
}

/// Settings from `--config`, below flags and the environment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    pub root: Option<PathBuf>,
    pub threads: Option<usize>,
    pub preagg_cache_bytes: Option<usize>,
}

pub const DEFAULT_PREAGG_CACHE_BYTES: usize = 256 << 20;

impl Config {
    pub fn parse(text: &str) -> Result<Config, CliError> {
        let mut c = Config::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| usage(format!("config line {}: {why}", i + 1));
            let (k, v) = line.split_once('\t').ok_or_else(|| bad("expected `key<TAB>value`"))?;
            match k {
                "root" => c.root = Some(PathBuf::from(v)),
                "threads" => c.threads = Some(v.parse().map_err(|_| bad("bad thread count"))?),
                "preagg_cache_bytes" => c.preagg_cache_bytes = Some(v.parse().map_err(|_| bad("bad byte count"))?),
                _ => return Err(bad(&format!("unknown key `{k}`"))),
            }
        }
        Ok(c)
    }
}

struct Ctx {
    root: Option<PathBuf>,
    cache_bytes: usize,
}

impl Ctx {
    fn root(&self) -> Result<&Path, CliError> {
        self.root
            .as_deref()
            .ok_or_else(|| usage("no catalog root; pass --root or set BSIMETRICS_ROOT"))
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    if let Some(n) = cli.threads.or(config.threads) {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // Only the first call per process takes effect; tests run many.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = Ctx {
        root: cli.root.or(config.root),
        cache_bytes: config.preagg_cache_bytes.unwrap_or(DEFAULT_PREAGG_CACHE_BYTES),
    };
    let w = |r: io::Result<()>| {
        r.map_err(|source| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
    };
    match cli.command {
        Command::Init(a) => {
            let catalog = init_catalog(&a)?;
            Store::init(ctx.root()?, catalog)?;
            w(writeln!(out, "initialized {}", ctx.root()?.display()))
        }
        Command::Ingest(a) => {
            let mut store = Store::open(ctx.root()?)?;
            let file = fs::File::open(&a.input).map_err(|source| CliError::Io {
                path: a.input.clone(),
                source,
            })?;
            let parsed = ingest::parse(a.kind, BufReader::new(file), store.catalog())?;
            if parsed.is_empty() {
                w(writeln!(err, "warning: {} has no records; nothing written", a.input.display()))?;
            }
            let rep = ingest::ingest(
                &mut store,
                parsed,
                IngestOptions {
                    scale: a.scale,
                    replace: a.replace,
                },
            )?;
            w(writeln!(
                out,
                "records\t{}\nstored\t{}\tdropped_zero\t{}",
                rep.stats.records, rep.stats.stored, rep.stats.dropped_zero
            ))?;
            for (key, n) in &rep.partitions {
                w(writeln!(out, "partition\t{key}\t{n}"))?;
            }
            Ok(())
        }
        Command::Scorecard(a) => {
            let store = Store::open(ctx.root()?)?;
            query(&store, &ctx, &a.query, a.predicate.as_deref(), a.dim_date.as_deref(), a.cuped, out)
        }
        Command::Deepdive(a) => {
            let store = Store::open(ctx.root()?)?;
            query(&store, &ctx, &a.query, Some(&a.predicate), a.dim_date.as_deref(), None, out)
        }
        Command::Precompute(a) => {
            let store = Store::open(ctx.root()?)?;
            let (lo, hi) = (date(&a.from)?, date(&a.to)?);
            let tree = PreAggTree::from_source(&store, MetricId(a.metric), lo, hi, a.kind)?;
            w(writeln!(
                out,
                "tree\tmetric {}\t{}..={}\tdays={}\tnodes={}\tbytes={}",
                a.metric,
                tree.start(),
                tree.end(),
                tree.days(),
                tree.node_count(),
                tree.byte_size()
            ))?;
            for q in &a.queries {
                let (l, h) = q
                    .split_once("..")
                    .ok_or_else(|| usage(format!("bad range `{q}`; expected LO..HI")))?;
                let nodes = tree.decompose(date(l)?, date(h)?)?;
                let list: Vec<String> = nodes.iter().map(|n| n.to_string()).collect();
                w(writeln!(out, "query\t{q}\tnodes={}\t{}", nodes.len(), list.join(" ")))?;
            }
            Ok(())
        }
        Command::Generate(a) => {
            let spec = GenSpec {
                units: a.units,
                strategies: a.strategies,
                metrics: a.metrics,
                days: a.days,
                pre_days: a.pre_days,
                start: date(&a.start)?,
                alpha: a.alpha,
                cap: a.cap,
                density: a.density,
                exposure_rate: a.exposure_rate,
                dimensions: !a.no_dimensions,
                seed: a.seed,
            };
            let counts = spec.write_tsv(&a.out)?;
            w(writeln!(
                out,
                "expose\t{}\nmetric\t{}\ndimension\t{}",
                counts[0], counts[1], counts[2]
            ))
        }
        Command::Bench(a) => {
            let scenarios = if a.scenarios.is_empty() {
                Scenario::ALL.to_vec()
            } else {
                a.scenarios.clone()
            };
            let params = BenchParams {
                units: a.units,
                alpha: a.alpha,
                cap: a.cap,
                density: a.density,
                scorecard_units: a.scorecard_units,
                scorecard_segments: a.scorecard_segments,
                runs: a.runs,
                lz4: a.lz4,
                seed: a.seed,
            };
            let rep = bench::run(&scenarios, &params)?;
            if let Some(path) = &a.out {
                crate::store::write_atomic(path, rep.to_tsv().as_bytes())?;
            }
            w(write!(out, "{}", if a.tsv { rep.to_tsv() } else { rep.to_table() }))
        }
        Command::Inspect(a) => {
            let text = crate::inspect::inspect(&a.path)?;
            w(write!(out, "{text}"))
        }
    }
}

fn init_catalog(a: &InitArgs) -> Result<Catalog, CliError> {
    let hash = if a.shared {
        if a.segments != a.buckets {
            return Err(usage("--shared needs equal --segments and --buckets"));
        }
        HashConfig::shared(a.segments)
    } else {
        HashConfig::new(a.segments, a.buckets).map(|h| HashConfig {
            bucket_salt: a.bucket_salt,
            ..h
        })
    }
    .map_err(|e| usage(e.to_string()))?;
    let mut catalog = Catalog::new(hash);
    for m in &a.metrics {
        let (id, scale) = m
            .split_once('=')
            .and_then(|(i, s)| Some((i.parse().ok()?, s.parse().ok()?)))
            .ok_or_else(|| usage(format!("bad --metric `{m}`; expected ID=SCALE")))?;
        catalog.metrics.insert(MetricId(id), MetricSpec { scale });
    }
    for d in &a.dimensions {
        let (name, spec) = d
            .split_once('=')
            .ok_or_else(|| usage(format!("bad --dimension `{d}`")))?;
        let spec = match spec {
            "categorical" => DimensionSpec::categorical(),
            s => DimensionSpec {
                scale: s
                    .parse()
                    .map_err(|_| usage(format!("bad --dimension `{d}`; expected NAME=SCALE or NAME=categorical")))?,
                categories: None,
            },
        };
        catalog.dimensions.insert(name.to_string(), spec);
    }
    Ok(catalog)
}

fn query(
    store: &Store,
    ctx: &Ctx,
    a: &QueryArgs,
    predicate: Option<&str>,
    dim_date: Option<&str>,
    cuped: Option<u32>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let dates = match (&a.date, &a.from, &a.to) {
        (Some(d), _, _) => vec![date(d)?],
        (None, Some(f), Some(t)) => {
            let (f, t) = (date(f)?, date(t)?);
            if f > t {
                return Err(usage("--from is after --to"));
            }
            (0..=t.days_since(f) as u32).map(|i| f.add_days(i)).collect()
        }
        _ => return Err(usage("give --date or --from/--to")),
    };
    let bound = match predicate {
        Some(text) => Some(bind(&parse_predicate(text).map_err(EngineError::from)?, store.catalog())?),
        None => None,
    };
    let snapshot = match dim_date {
        Some(d) => date(d)?,
        None => *dates.last().expect("non-empty"),
    };
    let mut strategies: Vec<StrategyId> = a.strategies.iter().map(|&s| StrategyId(s)).collect();
    strategies.dedup();
    let req = ScorecardRequest {
        strategies,
        control: a.control.map(StrategyId),
        metrics: a.metrics.iter().map(|&m| MetricId(m)).collect(),
        dates,
        agg: a.agg,
        filter: bound.as_ref().map(|b| (b, snapshot)),
        cuped_days: cuped,
    };
    check_strategies(store, &req)?;
    let mut cache = PreAggCache::new(ctx.cache_bytes);
    let rows = report::scorecard(store, &mut cache, &req)?;
    write!(out, "{}", report::to_tsv(&rows)).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn check_strategies(store: &Store, req: &ScorecardRequest<'_>) -> Result<(), CliError> {
    for &s in req.strategies.iter().chain(req.control.iter()) {
        if !store.manifest().partitions.contains_key(&PartitionKey::Expose(s)) {
            return Err(EngineError::UnknownStrategy(s).into());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_known_keys_only() {
        let c = Config::parse("# comment\nroot\t/data/x\nthreads\t4\n").unwrap();
        assert_eq!(c.root, Some(PathBuf::from("/data/x")));
        assert_eq!(c.threads, Some(4));
        assert!(Config::parse("colour\tblue\n").is_err());
        assert!(Config::parse("threads 4\n").is_err());
    }

    #[test]
    fn unknown_flags_fail() {
        assert!(Cli::try_parse_from(["bsimetrics", "inspect", "x", "--verbose"]).is_err());
        assert!(Cli::try_parse_from(["bsimetrics", "generate", "--out", "x"]).is_err());
        assert!(Cli::try_parse_from(["bsimetrics", "generate", "--seed", "1", "--out", "x"]).is_ok());
    }

    #[test]
    fn every_command_has_help() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        cmd.clone().debug_assert();
        for sub in cmd.get_subcommands() {
            assert!(sub.get_about().is_some(), "{}", sub.get_name());
        }
    }
}
