//! Inference over bucket replicates.
//!
//! Each of the `B` buckets is an independent replicate of the experiment, so
//! the spread of per-bucket totals estimates the variance of the grand total.
//! Ratio metrics use the delta method on those totals; tests use the normal
//! approximation, which at `B = 1024` is indistinguishable from Student-t.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::engine::BucketVector;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum StatsError {
    #[error("denominator total is zero; the metric is undefined")]
    UndefinedMetric,
    #[error("zero variance with nonzero delta {delta}")]
    DegenerateTest { delta: f64 },
    #[error("inputs have different bucket counts")]
    LengthMismatch,
    #[error("need at least two buckets with data")]
    TooFewBuckets,
    #[error("input is not finite")]
    NonFinite,
}

/// Point estimate with its variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricEstimate {
    pub point: f64,
    pub variance: f64,
    /// Buckets with a nonzero denominator.
    pub buckets_used: u32,
}

impl MetricEstimate {
    pub fn std_err(&self) -> f64 {
        libm::sqrt(self.variance)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaResult {
    pub delta: f64,
    pub variance: f64,
    pub t_stat: f64,
    pub p_value: f64,
    /// `delta / control`; `None` when the control point is zero.
    pub relative_delta: Option<f64>,
}

/// 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

impl DeltaResult {
    /// Two-sided confidence interval at 95%.
    pub fn ci95(&self) -> (f64, f64) {
        let half = Z_975 * libm::sqrt(self.variance);
        (self.delta - half, self.delta + half)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Two-sided p-value of a z statistic: `2 * (1 - Phi(|z|))`.
pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(libm::fabs(z) / core::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Per-bucket numerator and denominator of a ratio metric, plus the grand
/// totals, which are computed exactly when the input is integral.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioInput {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    pub num_total: f64,
    pub den_total: f64,
    /// Fixed-point factor of the numerator; results are divided by it.
    pub scale: f64,
}

impl RatioInput {
    pub fn new(num: Vec<f64>, den: Vec<f64>, scale: f64) -> Self {
        let num_total = num.iter().sum();
        let den_total = den.iter().sum();
        RatioInput {
            num,
            den,
            num_total,
            den_total,
            scale,
        }
    }

    /// Converts integer bucket vectors; the totals are summed as integers
    /// and converted once.
    pub fn from_buckets(num: &BucketVector, den: &BucketVector, scale: u64) -> Self {
        let n = num.values();
        let d = den.values();
        RatioInput {
            num_total: n.iter().sum::<u128>() as f64,
            den_total: d.iter().sum::<u128>() as f64,
            num: n.into_iter().map(|v| v as f64).collect(),
            den: d.into_iter().map(|v| v as f64).collect(),
            scale: scale as f64,
        }
    }

    /// Mean per unit: every bucket's denominator is its unit count.
    pub fn per_unit(values: &BucketVector, scale: u64) -> Self {
        let counts = BucketVector {
            kind: crate::engine::Agg::Count,
            sums: values.counts.iter().map(|&c| u128::from(c)).collect(),
            counts: values.counts.clone(),
        };
        RatioInput::from_buckets(values, &counts, scale)
    }

    fn check(&self) -> Result<(), StatsError> {
        if self.num.len() != self.den.len() {
            return Err(StatsError::LengthMismatch);
        }
        if self.num.len() < 2 {
            return Err(StatsError::TooFewBuckets);
        }
        if !self.num.iter().chain(&self.den).all(|v| v.is_finite()) || !(self.scale > 0.0) {
            return Err(StatsError::NonFinite);
        }
        if self.den_total == 0.0 {
            return Err(StatsError::UndefinedMetric);
        }
        Ok(())
    }

    fn point(&self) -> f64 {
        self.num_total / self.den_total
    }

    /// Delta-method linearization `(x_b - m * n_b) / N`, whose bucket sum
    /// approximates the estimator's deviation from its mean.
    fn linearized(&self) -> Vec<f64> {
        let m = self.point();
        self.num
            .iter()
            .zip(&self.den)
            .map(|(x, n)| (x - m * n) / self.den_total)
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample covariance with divisor `B - 1`.
pub fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0)
}

/// `point = X / N`; `Var = (B / N^2) * (Sxx - 2m Sxn + m^2 Snn)` with `S`
/// the sample covariances of the per-bucket totals.
pub fn ratio_estimate(input: &RatioInput) -> Result<MetricEstimate, StatsError> {
    input.check()?;
    let b = input.num.len() as f64;
    let m = input.point();
    let sxx = sample_cov(&input.num, &input.num);
    let sxn = sample_cov(&input.num, &input.den);
    let snn = sample_cov(&input.den, &input.den);
    let n = input.den_total;
    let var = (b / (n * n) * (sxx - 2.0 * m * sxn + m * m * snn)).max(0.0);
    Ok(MetricEstimate {
        point: m / input.scale,
        variance: var / (input.scale * input.scale),
        buckets_used: input.den.iter().filter(|&&d| d != 0.0).count() as u32,
    })
}

/// Treatment minus control for independent strategies.
pub fn diff_test(treatment: &MetricEstimate, control: &MetricEstimate) -> Result<DeltaResult, StatsError> {
    let fields = [treatment.point, treatment.variance, control.point, control.variance];
    if !fields.iter().all(|v| v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let delta = treatment.point - control.point;
    let variance = treatment.variance + control.variance;
    let (t_stat, p_value) = if variance == 0.0 {
        if delta != 0.0 {
            return Err(StatsError::DegenerateTest { delta });
        }
        (0.0, 1.0)
    } else {
        let t = delta / libm::sqrt(variance);
        (t, two_sided_p(t))
    };
    Ok(DeltaResult {
        delta,
        variance,
        t_stat,
        p_value,
        relative_delta: (control.point != 0.0).then(|| delta / control.point),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CupedResult {
    pub adjusted: DeltaResult,
    pub unadjusted: DeltaResult,
    pub theta: f64,
    /// The covariate had no variance, so `adjusted` equals `unadjusted`.
    pub skipped: bool,
}

/// One strategy's post-period metric and pre-period covariate.
#[derive(Clone, Debug)]
pub struct CupedArm {
    pub y: RatioInput,
    pub x: RatioInput,
}

/// CUPED on ratio metrics. Both metrics are linearized per bucket, `theta`
/// is pooled from the within-arm covariances, and the adjusted variance
/// is the variance of the linear combination `l_y - theta * l_x`.
pub fn cuped_adjust(treatment: &CupedArm, control: &CupedArm) -> Result<CupedResult, StatsError> {
    let yt = ratio_estimate(&treatment.y)?;
    let yc = ratio_estimate(&control.y)?;
    let unadjusted = diff_test(&yt, &yc)?;
    let xt = ratio_estimate(&treatment.x)?;
    let xc = ratio_estimate(&control.x)?;
    if treatment.x.num.len() != treatment.y.num.len() || control.x.num.len() != control.y.num.len() {
        return Err(StatsError::LengthMismatch);
    }
    let arms = [treatment, control].map(|arm| {
        let ly = arm.y.linearized();
        let lx = arm.x.linearized();
        let b = ly.len() as f64;
        // Totals-level covariances in the metrics' own units.
        let sy = arm.y.scale;
        let sx = arm.x.scale;
        (
            b * sample_cov(&ly, &ly) / (sy * sy),
            b * sample_cov(&ly, &lx) / (sy * sx),
            b * sample_cov(&lx, &lx) / (sx * sx),
        )
    });
    let var_x: f64 = arms.iter().map(|a| a.2).sum();
    let cov_yx: f64 = arms.iter().map(|a| a.1).sum();
    if var_x == 0.0 {
        return Ok(CupedResult {
            adjusted: unadjusted,
            unadjusted,
            theta: 0.0,
            skipped: true,
        });
    }
    let theta = cov_yx / var_x;
    let delta = (yt.point - yc.point) - theta * (xt.point - xc.point);
    let variance = arms
        .iter()
        .map(|(vy, cyx, vx)| (vy - 2.0 * theta * cyx + theta * theta * vx).max(0.0))
        .sum::<f64>();
    let (t_stat, p_value) = if variance == 0.0 {
        (0.0, if delta == 0.0 { 1.0 } else { 0.0 })
    } else {
        let t = delta / libm::sqrt(variance);
        (t, two_sided_p(t))
    };
    Ok(CupedResult {
        adjusted: DeltaResult {
            delta,
            variance,
            t_stat,
            p_value,
            relative_delta: (yc.point != 0.0).then(|| delta / yc.point),
        },
        unadjusted,
        theta,
        skipped: false,
    })
}

/// Covariances of the grand totals of several metrics, from per-bucket
/// totals: `B * sample_cov`.
pub fn covariance_matrix(metrics: &[&[f64]]) -> Result<Vec<Vec<f64>>, StatsError> {
    let Some(first) = metrics.first() else {
        return Ok(Vec::new());
    };
    let b = first.len();
    if metrics.iter().any(|m| m.len() != b) {
        return Err(StatsError::LengthMismatch);
    }
    let with_data = (0..b).filter(|&i| metrics.iter().any(|m| m[i] != 0.0)).count();
    if b < 2 || with_data < 2 {
        return Err(StatsError::TooFewBuckets);
    }
    let k = metrics.len();
    let mut out = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let c = b as f64 * sample_cov(metrics[i], metrics[j]);
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    Ok(out)
}
