//! Seeded synthetic experiment logs.
//!
//! Every unit is exposed to one strategy. Exposure days decay geometrically
//! from the experiment start, metric values are `min(ceil(Pareto(alpha)), cap)`
//! and each unit reports a metric on a given day with probability `density`.
//! Metric rows cover `pre_days` days before the start as well, so
//! pre-experiment covariates have data.

use std::io::{self, Write};
use std::path::Path;

use bsimetrics_core::engine::Dataset;
use bsimetrics_core::model::{
    build_dimension, build_expose, build_metric, Catalog, Date, DimValue, DimensionRecord, DimensionSpec,
    ExposeRecord, MetricId, MetricRecord, ModelError, PositionEncoder, StrategyId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use thiserror::Error;

use crate::ingest::TableKind;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("pareto alpha must be positive, got {0}")]
    Alpha(f64),
    #[error("{0}")]
    Param(&'static str),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub units: u64,
    pub strategies: u32,
    pub metrics: u32,
    pub days: u32,
    pub pre_days: u32,
    pub start: Date,
    pub alpha: f64,
    pub cap: u64,
    pub density: f64,
    /// Probability that a not-yet-exposed unit is exposed on the next day.
    pub exposure_rate: f64,
    /// Emit `client-type` (1..=3), `client-version` (100..=199) and `os`
    /// (categorical) on every experiment day.
    pub dimensions: bool,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            units: 10_000,
            strategies: 3,
            metrics: 5,
            days: 7,
            pre_days: 0,
            start: Date::from_ymd(2024, 1, 1).unwrap(),
            alpha: 1.16,
            cap: 100,
            density: 0.5,
            exposure_rate: 0.5,
            dimensions: true,
            seed: 1,
        }
    }
}

/// Generated logs, in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generated {
    pub expose: Vec<ExposeRecord>,
    pub metric: Vec<MetricRecord>,
    pub dimension: Vec<DimensionRecord>,
}

impl Generated {
    /// Builds in-memory tables. Metrics and dimensions missing from
    /// `catalog` are registered: metrics with scale 1, dimensions by the type
    /// of their first value.
    pub fn build(&self, mut catalog: Catalog) -> Result<(Dataset, PositionEncoder), ModelError> {
        let mut enc = PositionEncoder::new(catalog.hash);
        let expose = build_expose(self.expose.iter().cloned(), &mut enc)?;
        let (metrics, _) = build_metric(self.metric.iter().cloned(), &mut enc, &mut catalog)?;
        for r in &self.dimension {
            if matches!(r.value, DimValue::Category(_)) {
                catalog
                    .dimensions
                    .entry(r.name.clone())
                    .or_insert_with(DimensionSpec::categorical);
            }
        }
        let (dimensions, _) = build_dimension(self.dimension.iter().cloned(), &mut enc, &mut catalog)?;
        let data = Dataset {
            catalog,
            expose,
            metrics,
            dimensions,
        };
        Ok((data, enc))
    }
}

pub const OS_NAMES: [&str; 3] = ["ios", "android", "web"];

impl GenSpec {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(GenerateError::Alpha(self.alpha));
        }
        if self.cap == 0 {
            return Err(GenerateError::Param("value cap must be at least 1"));
        }
        if self.strategies == 0 || self.days == 0 {
            return Err(GenerateError::Param("need at least one strategy and one day"));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(GenerateError::Param("density must be in [0, 1]"));
        }
        if !(self.exposure_rate > 0.0 && self.exposure_rate <= 1.0) {
            return Err(GenerateError::Param("exposure rate must be in (0, 1]"));
        }
        if self.start.sub_days(self.pre_days).is_none() {
            return Err(GenerateError::Param("pre-period starts before 1970-01-01"));
        }
        Ok(())
    }

    pub fn first_day(&self) -> Date {
        self.start.sub_days(self.pre_days).unwrap_or(self.start)
    }

    pub fn experiment_dates(&self) -> Vec<Date> {
        (0..self.days).map(|d| self.start.add_days(d)).collect()
    }

    pub fn unit_id(i: u64) -> Vec<u8> {
        format!("u{i}").into_bytes()
    }

    /// Calls `emit` for every record in a fixed order: exposure, then metric
    /// rows day by day, then dimension rows.
    pub fn for_each(&self, mut emit: impl FnMut(Row<'_>)) -> Result<(), GenerateError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let pareto = Pareto::new(1.0, self.alpha).map_err(|_| GenerateError::Alpha(self.alpha))?;
        for i in 0..self.units {
            let strategy = StrategyId(u64::from(rng.random_range(0..self.strategies)) + 1);
            // Geometric over the experiment days, resampled when it runs past
            // the last one.
            let day = loop {
                let mut d = 0;
                while d < self.days && !rng.random_bool(self.exposure_rate) {
                    d += 1;
                }
                if d < self.days {
                    break d;
                }
            };
            let id = GenSpec::unit_id(i);
            emit(Row::Expose(&ExposeRecord {
                strategy,
                randomization_unit: id.clone(),
                analysis_unit: id,
                first_expose: self.start.add_days(day),
            }));
        }
        let first = self.first_day();
        for d in 0..self.pre_days + self.days {
            let date = first.add_days(d);
            for m in 1..=u64::from(self.metrics) {
                for i in 0..self.units {
                    if !rng.random_bool(self.density) {
                        continue;
                    }
                    let raw: f64 = pareto.sample(&mut rng);
                    let value = (raw.ceil() as u64).min(self.cap);
                    emit(Row::Metric(&MetricRecord {
                        date,
                        metric: MetricId(m),
                        analysis_unit: GenSpec::unit_id(i),
                        value: value as f64,
                    }));
                }
            }
        }
        if self.dimensions {
            let attrs: Vec<(u64, u64, usize)> = (0..self.units)
                .map(|_| {
                    (
                        rng.random_range(1..=3),
                        rng.random_range(100..200),
                        rng.random_range(0..OS_NAMES.len()),
                    )
                })
                .collect();
            for date in self.experiment_dates() {
                for (i, &(ty, ver, os)) in attrs.iter().enumerate() {
                    let unit = GenSpec::unit_id(i as u64);
                    for (name, value) in [
                        ("client-type", DimValue::Number(ty as f64)),
                        ("client-version", DimValue::Number(ver as f64)),
                        ("os", DimValue::Category(OS_NAMES[os].into())),
                    ] {
                        emit(Row::Dimension(&DimensionRecord {
                            date,
                            name: name.into(),
                            analysis_unit: unit.clone(),
                            value,
                        }));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Generated, GenerateError> {
        let mut out = Generated::default();
        self.for_each(|row| match row {
            Row::Expose(r) => out.expose.push(r.clone()),
            Row::Metric(r) => out.metric.push(r.clone()),
            Row::Dimension(r) => out.dimension.push(r.clone()),
        })?;
        Ok(out)
    }

    /// Writes `expose.tsv`, `metric.tsv` and, with dimensions on,
    /// `dimension.tsv` under `dir`, each with a header line.
    pub fn write_tsv(&self, dir: &Path) -> Result<[u64; 3], GenerateError> {
        self.validate()?;
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| GenerateError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut kinds = vec![TableKind::Expose, TableKind::Metric];
        if self.dimensions {
            kinds.push(TableKind::Dimension);
        }
        let mut writers = Vec::new();
        for kind in &kinds {
            let path = dir.join(format!("{kind}.tsv"));
            let mut w = io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
            writeln!(w, "{}", kind.header().join("\t")).map_err(io_err(&path))?;
            writers.push((path, w));
        }
        let mut counts = [0u64; 3];
        let mut failure = None;
        self.for_each(|row| {
            let (i, result) = match row {
                Row::Expose(r) => (
                    0,
                    writeln!(
                        writers[0].1,
                        "{}\t{}\t{}\t{}",
                        r.strategy,
                        String::from_utf8_lossy(&r.analysis_unit),
                        String::from_utf8_lossy(&r.randomization_unit),
                        r.first_expose
                    ),
                ),
                Row::Metric(r) => (
                    1,
                    writeln!(
                        writers[1].1,
                        "{}\t{}\t{}\t{}",
                        r.date,
                        r.metric,
                        String::from_utf8_lossy(&r.analysis_unit),
                        r.value
                    ),
                ),
                Row::Dimension(r) => {
                    let value = match &r.value {
                        DimValue::Number(x) => x.to_string(),
                        DimValue::Category(c) => c.clone(),
                    };
                    (
                        2,
                        writeln!(
                            writers[2].1,
                            "{}\t{}\t{}\t{}",
                            r.date,
                            r.name,
                            String::from_utf8_lossy(&r.analysis_unit),
                            value
                        ),
                    )
                }
            };
            counts[i] += 1;
            if let Err(e) = result {
                failure.get_or_insert((i, e));
            }
        })?;
        if let Some((i, e)) = failure {
            return Err(io_err(&writers[i].0)(e));
        }
        for (path, mut w) in writers {
            w.flush().map_err(io_err(&path))?;
        }
        Ok(counts)
    }
}

pub enum Row<'a> {
    Expose(&'a ExposeRecord),
    Metric(&'a MetricRecord),
    Dimension(&'a DimensionRecord),
}

/// `ceil(Pareto(alpha))` draws capped at `cap`, the metric value law.
pub fn pareto_values(n: usize, alpha: f64, cap: u64, seed: u64) -> Result<Vec<u64>, GenerateError> {
    if !(alpha > 0.0) {
        return Err(GenerateError::Alpha(alpha));
    }
    let pareto = Pareto::new(1.0, alpha).map_err(|_| GenerateError::Alpha(alpha))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| (pareto.sample(&mut rng).ceil() as u64).min(cap))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenSpec {
        GenSpec {
            units: 300,
            pre_days: 2,
            ..GenSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        small().write_tsv(a.path()).unwrap();
        small().write_tsv(b.path()).unwrap();
        for f in ["expose.tsv", "metric.tsv", "dimension.tsv"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let c = GenSpec { seed: 2, ..small() }.generate().unwrap();
        assert_ne!(c, small().generate().unwrap());
    }

    #[test]
    fn pareto_mass_below_twenty() {
        let v = pareto_values(100_000, 1.16, 100, 3).unwrap();
        let share = v.iter().filter(|&&x| x <= 20).count() as f64 / v.len() as f64;
        // Analytic: P(X <= 20) = 1 - 20^-1.16.
        let analytic = 1.0 - 20f64.powf(-1.16);
        assert!(share >= 0.6, "{share}");
        assert!((share - analytic).abs() < 0.01, "{share} vs {analytic}");
        assert!(v.iter().all(|&x| (1..=100).contains(&x)));
    }

    #[test]
    fn cap_one_is_binary() {
        let g = GenSpec { cap: 1, ..small() }.generate().unwrap();
        assert!(!g.metric.is_empty());
        assert!(g.metric.iter().all(|r| r.value == 1.0));
    }

    #[test]
    fn nonpositive_alpha_is_rejected() {
        for alpha in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                GenSpec { alpha, ..small() }.generate(),
                Err(GenerateError::Alpha(_))
            ));
            assert!(pareto_values(1, alpha, 1, 0).is_err());
        }
    }

    #[test]
    fn exposure_front_loaded_and_in_range() {
        let spec = GenSpec { units: 5_000, ..small() };
        let g = spec.generate().unwrap();
        let mut per_day = vec![0u32; spec.days as usize];
        for r in &g.expose {
            per_day[r.first_expose.days_since(spec.start) as usize] += 1;
        }
        assert!(per_day.windows(2).all(|w| w[0] >= w[1]), "{per_day:?}");
        let first = g.metric.iter().map(|r| r.date).min().unwrap();
        assert_eq!(first, spec.first_day());
    }
}
