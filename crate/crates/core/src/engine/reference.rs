//! Row-based reference engine: joins raw records on the unit id with hash
//! maps, filters by first-expose date and groups by bucket. It shares no code
//! path with the BSI engine beyond hashing and fixed-point conversion, and is
//! what the BSI results are checked against.

use alloc::string::String;
use alloc::vec::Vec;

use hashbrown::HashMap;

use super::{Agg, BucketVector, Literal, PredicateExpr};
use crate::bsi::CmpOp;
use crate::model::{
    quantize, Catalog, Date, DimValue, DimensionRecord, ExposeRecord, HashConfig, MetricId, MetricRecord,
    StrategyId,
};

#[derive(Clone, Debug)]
enum RefDim {
    Number(u64),
    Category(String),
}

pub struct Reference {
    hash: HashConfig,
    dim_scales: HashMap<String, u64>,
    exposure: HashMap<StrategyId, HashMap<Vec<u8>, (Date, u32)>>,
    metrics: HashMap<(MetricId, Date), HashMap<Vec<u8>, u64>>,
    dims: HashMap<(String, Date), HashMap<Vec<u8>, RefDim>>,
}

impl Reference {
    /// Panics on records the model would reject; feed it valid data.
    pub fn new(
        catalog: &Catalog,
        expose: &[ExposeRecord],
        metrics: &[MetricRecord],
        dims: &[DimensionRecord],
    ) -> Self {
        let hash = catalog.hash;
        let mut exposure: HashMap<StrategyId, HashMap<Vec<u8>, (Date, u32)>> = HashMap::new();
        for r in expose {
            let bucket = hash.bucket_of(&r.randomization_unit).expect("valid id");
            exposure
                .entry(r.strategy)
                .or_default()
                .insert(r.analysis_unit.clone(), (r.first_expose, bucket));
        }
        let mut metric_rows: HashMap<(MetricId, Date), HashMap<Vec<u8>, u64>> = HashMap::new();
        for (i, r) in metrics.iter().enumerate() {
            let v = quantize(i, r.value, catalog.metric_scale(r.metric)).expect("valid value");
            metric_rows
                .entry((r.metric, r.date))
                .or_default()
                .insert(r.analysis_unit.clone(), v);
        }
        let mut dim_scales = HashMap::new();
        for (name, spec) in &catalog.dimensions {
            dim_scales.insert(name.clone(), spec.scale);
        }
        let mut dim_rows: HashMap<(String, Date), HashMap<Vec<u8>, RefDim>> = HashMap::new();
        for (i, r) in dims.iter().enumerate() {
            let v = match &r.value {
                DimValue::Number(x) => {
                    let scale = dim_scales.get(&r.name).copied().unwrap_or(1);
                    RefDim::Number(quantize(i, *x, scale).expect("valid value"))
                }
                DimValue::Category(c) => RefDim::Category(c.clone()),
            };
            dim_rows
                .entry((r.name.clone(), r.date))
                .or_default()
                .insert(r.analysis_unit.clone(), v);
        }
        Reference {
            hash,
            dim_scales,
            exposure,
            metrics: metric_rows,
            dims: dim_rows,
        }
    }

    fn matches(&self, unit: &[u8], filter: Option<(&PredicateExpr, Date)>) -> bool {
        let Some((expr, date)) = filter else {
            return true;
        };
        expr.clauses.iter().all(|c| {
            let Some(v) = self.dims.get(&(c.name.clone(), date)).and_then(|m| m.get(unit)) else {
                return false;
            };
            match (v, &c.literal) {
                (RefDim::Number(0), _) => false,
                (RefDim::Number(v), Literal::Number(text)) => {
                    let scale = self.dim_scales.get(&c.name).copied().unwrap_or(1);
                    compare_decimal(*v, c.op, text, scale)
                }
                (RefDim::Category(s), Literal::Text(t)) => match c.op {
                    CmpOp::Eq => s == t,
                    CmpOp::Ne => s != t,
                    _ => false,
                },
                _ => false,
            }
        })
    }

    /// Per-bucket aggregate of `metric` over `dates` for units of
    /// `strategy` exposed by each date and passing `filter`.
    pub fn scorecard(
        &self,
        strategy: StrategyId,
        metric: MetricId,
        dates: &[Date],
        agg: Agg,
        filter: Option<(&PredicateExpr, Date)>,
    ) -> BucketVector {
        let mut out = BucketVector::zeros(agg, self.hash.bucket_count);
        let Some(exposed) = self.exposure.get(&strategy) else {
            return out;
        };
        let mut distinct: HashMap<&[u8], u32> = HashMap::new();
        for &date in dates {
            let Some(rows) = self.metrics.get(&(metric, date)) else {
                continue;
            };
            for (unit, &value) in rows {
                let Some(&(first, bucket)) = exposed.get(unit) else {
                    continue;
                };
                if value == 0 || first > date || !self.matches(unit, filter) {
                    continue;
                }
                match agg {
                    Agg::Sum | Agg::Count => {
                        out.sums[bucket as usize] += u128::from(value);
                        out.counts[bucket as usize] += 1;
                    }
                    Agg::UniqueUnits => {
                        distinct.insert(unit, bucket);
                    }
                }
            }
        }
        for bucket in distinct.values() {
            out.sums[*bucket as usize] += 1;
            out.counts[*bucket as usize] += 1;
        }
        out
    }

    pub fn exposed_units(
        &self,
        strategy: StrategyId,
        date: Date,
        filter: Option<(&PredicateExpr, Date)>,
    ) -> BucketVector {
        let mut out = BucketVector::zeros(Agg::Count, self.hash.bucket_count);
        if let Some(exposed) = self.exposure.get(&strategy) {
            for (unit, &(first, bucket)) in exposed {
                if first <= date && self.matches(unit, filter) {
                    out.sums[bucket as usize] += 1;
                    out.counts[bucket as usize] += 1;
                }
            }
        }
        out
    }

    /// Sum over `start - days ..= start - 1` for units exposed by `as_of`.
    pub fn pre_experiment(
        &self,
        strategy: StrategyId,
        metric: MetricId,
        start: Date,
        days: u32,
        as_of: Date,
    ) -> BucketVector {
        let mut out = BucketVector::zeros(Agg::Sum, self.hash.bucket_count);
        let Some(exposed) = self.exposure.get(&strategy) else {
            return out;
        };
        let mut per_unit: HashMap<&[u8], u64> = HashMap::new();
        for d in 1..=days {
            let Some(rows) = start.sub_days(d).and_then(|date| self.metrics.get(&(metric, date))) else {
                continue;
            };
            for (unit, &v) in rows {
                if v > 0 {
                    *per_unit.entry(unit.as_slice()).or_default() += v;
                }
            }
        }
        for (unit, total) in per_unit {
            if let Some(&(first, bucket)) = exposed.get(unit) {
                if first <= as_of {
                    out.sums[bucket as usize] += u128::from(total);
                    out.counts[bucket as usize] += 1;
                }
            }
        }
        out
    }
}

// Compares a stored scaled integer with `text * scale` exactly, by cross
// multiplying with the literal's decimal denominator.
fn compare_decimal(stored: u64, op: CmpOp, text: &str, scale: u64) -> bool {
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    let digits: String = int.chars().chain(frac.chars()).collect();
    let digits = digits.trim_start_matches('0');
    let den_exp = frac.len() as u32;
    // Very long literals exceed every stored value.
    if digits.len() > 30 {
        return matches!(op, CmpOp::Lt | CmpOp::Le | CmpOp::Ne);
    }
    let lit: u128 = if digits.is_empty() { 0 } else { digits.parse().unwrap() };
    let lhs = 10u128
        .checked_pow(den_exp)
        .and_then(|den| u128::from(stored).checked_mul(den));
    let rhs = lit.checked_mul(u128::from(scale));
    match (lhs, rhs) {
        (Some(a), Some(b)) => op.holds(a, b),
        (None, Some(_)) => matches!(op, CmpOp::Gt | CmpOp::Ge | CmpOp::Ne),
        (Some(_), None) => matches!(op, CmpOp::Lt | CmpOp::Le | CmpOp::Ne),
        (None, None) => unreachable!("literal and value both overflow"),
    }
}

/// Two-day (or n-day) per-position sum through a hash map. The row
/// counterpart of folding day BSIs with `sumBSI`.
pub fn hash_sum(days: &[&[(u32, u64)]]) -> HashMap<u32, u64> {
    let mut acc: HashMap<u32, u64> = HashMap::new();
    for rows in days {
        for &(p, v) in *rows {
            *acc.entry(p).or_default() += v;
        }
    }
    acc
}
