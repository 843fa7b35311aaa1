//! Scorecard rows: per strategy and metric, the per-exposed-unit mean and,
//! against a control, the difference test and optional CUPED adjustment.

use std::fmt::Write as _;

use bsimetrics_core::engine::{exposed_units, pre_experiment, run_query, Agg, BoundPredicate, EngineError, PreAggCache, Query, TableSource};
use bsimetrics_core::model::{Date, MetricId, StrategyId};
use bsimetrics_core::stats::{cuped_adjust, diff_test, ratio_estimate, CupedArm, DeltaResult, MetricEstimate, RatioInput, StatsError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("strategy {strategy}, metric {metric}: {source}")]
    Stats {
        strategy: StrategyId,
        metric: MetricId,
        source: StatsError,
    },
    #[error("{0}")]
    Request(&'static str),
}

pub struct ScorecardRequest<'a> {
    pub strategies: Vec<StrategyId>,
    pub control: Option<StrategyId>,
    pub metrics: Vec<MetricId>,
    pub dates: Vec<Date>,
    pub agg: Agg,
    pub filter: Option<(&'a BoundPredicate, Date)>,
    /// Pre-period length for CUPED; needs a control.
    pub cuped_days: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adjustment {
    None,
    Cuped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorecardRow {
    pub strategy: StrategyId,
    pub metric: MetricId,
    pub adjustment: Adjustment,
    pub estimate: MetricEstimate,
    /// Against the control; absent on the control's own row.
    pub test: Option<Result<DeltaResult, StatsError>>,
    pub theta: Option<f64>,
}

struct Arm {
    estimate: MetricEstimate,
    input: RatioInput,
    covariate: Option<RatioInput>,
}

fn arm<S: TableSource + ?Sized>(
    src: &S,
    cache: &mut PreAggCache,
    req: &ScorecardRequest<'_>,
    strategy: StrategyId,
    metric: MetricId,
) -> Result<Arm, ReportError> {
    let last = *req.dates.last().ok_or(EngineError::NoDates)?;
    let num = run_query(
        src,
        &Query {
            strategy,
            metric,
            dates: &req.dates,
            agg: req.agg,
            filter: req.filter,
        },
    )?;
    let den = exposed_units(src, strategy, last, req.filter)?;
    let metric_scale = src.catalog().metric_scale(metric);
    let scale = if req.agg == Agg::Sum { metric_scale } else { 1 };
    let input = RatioInput::from_buckets(&num, &den, scale);
    let stats_err = |source| ReportError::Stats {
        strategy,
        metric,
        source,
    };
    let estimate = ratio_estimate(&input).map_err(stats_err)?;
    let covariate = match req.cuped_days {
        Some(days) => {
            let pre = pre_experiment(src, cache, strategy, metric, req.dates[0], days, last)?;
            Some(RatioInput::from_buckets(&pre, &den, metric_scale))
        }
        None => None,
    };
    Ok(Arm {
        estimate,
        input,
        covariate,
    })
}

pub fn scorecard<S: TableSource + ?Sized>(
    src: &S,
    cache: &mut PreAggCache,
    req: &ScorecardRequest<'_>,
) -> Result<Vec<ScorecardRow>, ReportError> {
    if req.cuped_days.is_some() && req.control.is_none() {
        return Err(ReportError::Request("CUPED needs a control strategy"));
    }
    if req.cuped_days.is_some() && req.filter.is_some() {
        return Err(ReportError::Request("CUPED covariates are not filtered; drop the predicate or CUPED"));
    }
    let mut rows = Vec::new();
    for &metric in &req.metrics {
        let control = match req.control {
            Some(c) => Some(arm(src, cache, req, c, metric)?),
            None => None,
        };
        if let (Some(c), Some(id)) = (&control, req.control) {
            rows.push(ScorecardRow {
                strategy: id,
                metric,
                adjustment: Adjustment::None,
                estimate: c.estimate,
                test: None,
                theta: None,
            });
        }
        for &strategy in req.strategies.iter().filter(|&&s| Some(s) != req.control) {
            let t = arm(src, cache, req, strategy, metric)?;
            let test = control.as_ref().map(|c| diff_test(&t.estimate, &c.estimate));
            rows.push(ScorecardRow {
                strategy,
                metric,
                adjustment: Adjustment::None,
                estimate: t.estimate,
                test,
                theta: None,
            });
            if let (Some(c), Some(tx)) = (&control, &t.covariate) {
                let cx = c.covariate.clone().expect("covariate computed for control");
                let r = cuped_adjust(
                    &CupedArm {
                        y: t.input.clone(),
                        x: tx.clone(),
                    },
                    &CupedArm {
                        y: c.input.clone(),
                        x: cx,
                    },
                )
                .map_err(|source| ReportError::Stats {
                    strategy,
                    metric,
                    source,
                })?;
                rows.push(ScorecardRow {
                    strategy,
                    metric,
                    adjustment: Adjustment::Cuped,
                    estimate: t.estimate,
                    test: Some(Ok(r.adjusted)),
                    theta: (!r.skipped).then_some(r.theta),
                });
            }
        }
    }
    Ok(rows)
}

pub const HEADER: &str = "strategy\tmetric\tadjust\tpoint\tvariance\tdelta\trelative_delta\tt\tp";

pub fn to_tsv(rows: &[ScorecardRow]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        let adjust = match (r.adjustment, r.theta) {
            (Adjustment::None, _) => "none".to_string(),
            (Adjustment::Cuped, Some(theta)) => format!("cuped(theta={theta:.6})"),
            (Adjustment::Cuped, None) => "cuped(skipped)".to_string(),
        };
        let _ = write!(
            out,
            "{}\t{}\t{adjust}\t{:.6}\t{:.6e}",
            r.strategy, r.metric, r.estimate.point, r.estimate.variance
        );
        match &r.test {
            None => out.push_str("\t-\t-\t-\t-"),
            Some(Ok(d)) => {
                let rel = d.relative_delta.map_or("-".into(), |v| format!("{v:.6}"));
                let _ = write!(out, "\t{:.6}\t{rel}\t{:.4}\t{:.6}", d.delta, d.t_stat, d.p_value);
            }
            Some(Err(e)) => {
                let _ = write!(out, "\t-\t-\t-\t-\t# {e}");
            }
        }
        out.push('\n');
    }
    out
}
