//! Conversion-rate estimates, binomial intervals and the pooled two-proportion test.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::evolution::Candidate;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum StatsError {
    #[error("cannot estimate a rate from zero impressions")]
    NoImpressions,
    #[error("conversions ({conversions}) exceed impressions ({impressions})")]
    ConversionsExceedImpressions { conversions: u64, impressions: u64 },
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    BadLevel(f64),
    #[error("improvement is undefined for a control rate of zero")]
    ZeroControlRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    /// Normal approximation around the observed mean, clamped to [0, 1].
    #[default]
    Wald,
    Wilson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessEstimate {
    pub impressions: u64,
    pub conversions: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub z_score: f64,
    pub p_value_two_sided: f64,
    pub significant_at: Vec<f64>,
}

impl SignificanceResult {
    pub fn is_significant(&self, level: f64) -> bool {
        self.p_value_two_sided < 1.0 - level
    }
}

/// Levels reported by [`two_proportion_test`].
pub const SIGNIFICANCE_LEVELS: [f64; 2] = [0.95, 0.99];

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided critical value for a confidence level, e.g. 1.95996 for 0.95.
pub fn z_for_level(level: f64) -> Result<f64, StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

pub fn estimate(
    conversions: u64,
    impressions: u64,
    ci_level: f64,
    method: IntervalMethod,
) -> Result<FitnessEstimate, StatsError> {
    if impressions == 0 {
        return Err(StatsError::NoImpressions);
    }
    if conversions > impressions {
        return Err(StatsError::ConversionsExceedImpressions {
            conversions,
            impressions,
        });
    }
    let z = z_for_level(ci_level)?;
    let n = impressions as f64;
    let rate = conversions as f64 / n;
    let (low, high) = match method {
        IntervalMethod::Wald => {
            let half = z * (rate * (1.0 - rate) / n).sqrt();
            (rate - half, rate + half)
        }
        IntervalMethod::Wilson => {
            let z2 = z * z;
            let denom = 1.0 + z2 / n;
            let centre = (rate + z2 / (2.0 * n)) / denom;
            let half = z * (rate * (1.0 - rate) / n + z2 / (4.0 * n * n)).sqrt() / denom;
            (centre - half, centre + half)
        }
    };
    // Clamp, and keep the point estimate inside the interval against rounding.
    Ok(FitnessEstimate {
        impressions,
        conversions,
        rate,
        ci_low: low.clamp(0.0, 1.0).min(rate),
        ci_high: high.clamp(0.0, 1.0).max(rate),
        ci_level,
    })
}

/// Percent change of `rate` relative to `control_rate`.
pub fn improvement_over_control(rate: f64, control_rate: f64) -> Result<f64, StatsError> {
    if control_rate <= 0.0 {
        return Err(StatsError::ZeroControlRate);
    }
    Ok(100.0 * (rate - control_rate) / control_rate)
}

/// Pooled two-proportion z-test. Positive z means the second sample converts better.
pub fn two_proportion_test(
    c1: u64,
    i1: u64,
    c2: u64,
    i2: u64,
) -> Result<SignificanceResult, StatsError> {
    for (c, i) in [(c1, i1), (c2, i2)] {
        if i == 0 {
            return Err(StatsError::NoImpressions);
        }
        if c > i {
            return Err(StatsError::ConversionsExceedImpressions {
                conversions: c,
                impressions: i,
            });
        }
    }
    let (n1, n2) = (i1 as f64, i2 as f64);
    let (p1, p2) = (c1 as f64 / n1, c2 as f64 / n2);
    let pooled = (c1 + c2) as f64 / (n1 + n2);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)).sqrt();
    let z = if se > 0.0 { (p2 - p1) / se } else { 0.0 };
    let p = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    let significant_at = SIGNIFICANCE_LEVELS
        .iter()
        .copied()
        .filter(|level| p < 1.0 - level)
        .collect();
    Ok(SignificanceResult {
        z_score: z,
        p_value_two_sided: p,
        significant_at,
    })
}

/// Orders candidates by exact conversion rate descending, then impressions
/// descending, then id ascending. Rates are compared by cross-multiplication.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    let lhs = a.conversions as u128 * b.impressions as u128;
    let rhs = b.conversions as u128 * a.impressions as u128;
    rhs.cmp(&lhs)
        .then_with(|| b.impressions.cmp(&a.impressions))
        .then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopRow {
    pub candidate_id: u64,
    pub estimate: FitnessEstimate,
    pub improvement_pct: Option<f64>,
    pub significant_95: bool,
}

/// The `k` best candidates by estimated rate, each compared against control.
///
/// Candidates without impressions are skipped. Significance is unadjusted for
/// the number of rows.
pub fn top_k_report(
    candidates: &[&Candidate],
    control: Option<&Candidate>,
    k: usize,
    ci_level: f64,
    method: IntervalMethod,
) -> Result<Vec<TopRow>, StatsError> {
    let mut ranked: Vec<&Candidate> = candidates
        .iter()
        .copied()
        .filter(|c| c.impressions > 0)
        .collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    ranked.truncate(k);
    let control = control.filter(|c| c.impressions > 0);
    ranked
        .into_iter()
        .map(|c| {
            let estimate = estimate(c.conversions, c.impressions, ci_level, method)?;
            let (improvement_pct, significant_95) = match control {
                Some(ctrl) => {
                    let control_rate = ctrl.conversions as f64 / ctrl.impressions as f64;
                    let improvement = improvement_over_control(estimate.rate, control_rate).ok();
                    let test = two_proportion_test(
                        ctrl.conversions,
                        ctrl.impressions,
                        c.conversions,
                        c.impressions,
                    )?;
                    (improvement, test.is_significant(0.95))
                }
                None => (None, false),
            };
            Ok(TopRow {
                candidate_id: c.id,
                estimate,
                improvement_pct,
                significant_95,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{Candidate, CandidateStatus};
    use crate::space::Genome;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn cand(id: u64, conversions: u64, impressions: u64) -> Candidate {
        Candidate {
            id,
            genome: Genome::new(vec![0]),
            birth_generation: 0,
            impressions,
            conversions,
            generation_impressions: 0,
            status: CandidateStatus::Active,
        }
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!(close(standard_normal_cdf(0.0), 0.5, 1e-12));
        assert!(close(standard_normal_cdf(1.959963984540054), 0.975, 1e-9));
        assert!(close(standard_normal_cdf(-3.0), 0.0013498980316301, 1e-9));
        assert!(close(z_for_level(0.95).unwrap(), 1.959963984540054, 1e-9));
        assert!(close(z_for_level(0.99).unwrap(), 2.5758293035489, 1e-9));
    }

    #[test]
    fn wald_interval_example() {
        let e = estimate(112, 2000, 0.95, IntervalMethod::Wald).unwrap();
        assert!(close(e.rate, 0.056, 1e-12));
        assert!(close(e.ci_low, 0.0459, 0.0002));
        assert!(close(e.ci_high, 0.0661, 0.0002));
    }

    #[test]
    fn boundary_intervals() {
        let e = estimate(0, 100, 0.95, IntervalMethod::Wald).unwrap();
        assert_eq!((e.rate, e.ci_low, e.ci_high), (0.0, 0.0, 0.0));
        let w = estimate(0, 100, 0.95, IntervalMethod::Wilson).unwrap();
        assert_eq!(w.ci_low, 0.0);
        assert!(close(w.ci_high, 0.0370, 1e-4));
        let full = estimate(100, 100, 0.95, IntervalMethod::Wald).unwrap();
        assert_eq!((full.rate, full.ci_high), (1.0, 1.0));
        let full = estimate(100, 100, 0.95, IntervalMethod::Wilson).unwrap();
        assert_eq!(full.ci_high, 1.0);
    }

    #[test]
    fn estimate_errors() {
        assert_eq!(
            estimate(0, 0, 0.95, IntervalMethod::Wald),
            Err(StatsError::NoImpressions)
        );
        assert!(matches!(
            estimate(3, 2, 0.95, IntervalMethod::Wald),
            Err(StatsError::ConversionsExceedImpressions { .. })
        ));
        assert!(matches!(
            estimate(1, 2, 1.0, IntervalMethod::Wald),
            Err(StatsError::BadLevel(_))
        ));
    }

    #[test]
    fn wilson_never_zero_width_inside() {
        for n in [2u64, 10, 57, 2000] {
            for c in 1..n {
                let w = estimate(c, n, 0.95, IntervalMethod::Wilson).unwrap();
                assert!(w.ci_high - w.ci_low > 0.0);
                assert!(w.ci_low <= w.rate && w.rate <= w.ci_high);
                let d = estimate(c, n, 0.95, IntervalMethod::Wald).unwrap();
                assert!(d.ci_low <= d.rate && d.rate <= d.ci_high);
            }
        }
    }

    #[test]
    fn improvement_examples() {
        assert!(close(
            improvement_over_control(0.0822, 0.0561).unwrap(),
            46.5,
            0.3
        ));
        assert_eq!(improvement_over_control(0.07, 0.07).unwrap(), 0.0);
        assert!(close(
            improvement_over_control(0.0805, 0.0561).unwrap(),
            43.5,
            0.1
        ));
        assert_eq!(
            improvement_over_control(0.1, 0.0),
            Err(StatsError::ZeroControlRate)
        );
    }

    #[test]
    fn two_proportion_examples() {
        let r = two_proportion_test(182, 3250, 262, 3250).unwrap();
        assert!(close(r.z_score, 3.9, 0.05), "z = {}", r.z_score);
        assert!(r.p_value_two_sided < 0.001);
        assert_eq!(r.significant_at, vec![0.95, 0.99]);

        let same = two_proportion_test(50, 1000, 50, 1000).unwrap();
        assert_eq!(same.z_score, 0.0);
        assert!(same.significant_at.is_empty());

        let zero = two_proportion_test(0, 10, 0, 10).unwrap();
        assert_eq!((zero.z_score, zero.p_value_two_sided), (0.0, 1.0));
        let ones = two_proportion_test(10, 10, 7, 7).unwrap();
        assert_eq!((ones.z_score, ones.p_value_two_sided), (0.0, 1.0));
    }

    #[test]
    fn two_proportion_is_antisymmetric() {
        for (c1, i1, c2, i2) in [(5, 100, 9, 120), (182, 3250, 262, 3250), (0, 40, 3, 41)] {
            let a = two_proportion_test(c1, i1, c2, i2).unwrap();
            let b = two_proportion_test(c2, i2, c1, i1).unwrap();
            assert!(close(a.z_score, -b.z_score, 1e-12));
            assert!(close(a.p_value_two_sided, b.p_value_two_sided, 1e-15));
        }
    }

    #[test]
    fn p_value_decreases_with_z() {
        let mut last = 1.1;
        for c2 in 50..90 {
            let r = two_proportion_test(50, 1000, c2, 1000).unwrap();
            assert!(r.p_value_two_sided < last);
            last = r.p_value_two_sided;
        }
    }

    #[test]
    fn top_k_orders_and_ties() {
        let control = cand(0, 50, 1000);
        let a = cand(1, 10, 100);
        let b = cand(2, 20, 200);
        let c = cand(3, 90, 1000);
        let d = cand(4, 0, 0);
        let rows = top_k_report(
            &[&a, &b, &c, &d],
            Some(&control),
            20,
            0.95,
            IntervalMethod::Wald,
        )
        .unwrap();
        let ids: Vec<u64> = rows.iter().map(|r| r.candidate_id).collect();
        // equal 10% rates: more impressions first.
        assert_eq!(ids, vec![2, 1, 3]);
        assert!(rows[0].significant_95);
        assert!(close(rows[0].improvement_pct.unwrap(), 100.0, 1e-9));

        let best =
            top_k_report(&[&a, &b, &c], Some(&control), 1, 0.95, IntervalMethod::Wald).unwrap();
        assert_eq!(best.len(), 1);

        let e = cand(7, 10, 100);
        let f = cand(5, 10, 100);
        let rows = top_k_report(&[&e, &f], None, 5, 0.95, IntervalMethod::Wald).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.candidate_id).collect::<Vec<_>>(),
            vec![5, 7]
        );
        assert_eq!(rows[0].improvement_pct, None);
    }
}
