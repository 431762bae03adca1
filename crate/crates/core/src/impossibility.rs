//! Demonstrations that group-blind or equal-treatment policies cannot
//! equalize responses when groups differ ex ante.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::sigmoid;
use crate::model::{
    std_normal, CoateLouryMarket, ContinuousMarket1D, GroupId, MarketError, NormalSignals, PerGroup,
};
use crate::response::{coate_loury_pi, continuous_skill_response};

/// Rates within this distance count as matched.
pub const MATCH_TOL: f64 = 1e-9;

/// Default number of thresholds on `[m0 - 2, m1 + 2]`.
pub const DEFAULT_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discrimination {
    /// Equal costs, group A has the higher mean skill.
    SkillGap,
    /// Equal skill laws, group A has the lower cost.
    CostGap,
}

impl Discrimination {
    pub fn name(self) -> &'static str {
        match self {
            Discrimination::SkillGap => "skill_gap",
            Discrimination::CostGap => "cost_gap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "skill_gap" => Some(Discrimination::SkillGap),
            "cost_gap" => Some(Discrimination::CostGap),
            _ => None,
        }
    }
}

/// Evenly spaced thresholds on `[m0 - 2, m1 + 2]`.
pub fn threshold_grid(signals: NormalSignals, points: usize) -> Vec<f64> {
    let (lo, hi) = (signals.m0 - 2.0, signals.m1 + 2.0);
    match points {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    /// `w (TPR - FPR)`: the hiring benefit of being qualified.
    pub incentive: f64,
    pub exante: PerGroup<f64>,
    pub expost: PerGroup<f64>,
    /// `E[Y'|A] - E[Y'|D]`.
    pub gap: f64,
}

fn check_premise(
    market: &ContinuousMarket1D,
    discrimination: Discrimination,
) -> Result<(), MarketError> {
    let (a, d) = (market.skill(GroupId::A), market.skill(GroupId::D));
    let (ca, cd) = (market.cost(GroupId::A), market.cost(GroupId::D));
    let ok = match discrimination {
        Discrimination::SkillGap => ca == cd && a.mean > d.mean && a.sd == d.sd,
        Discrimination::CostGap => a == d && ca < cd,
    };
    if ok {
        Ok(())
    } else {
        Err(MarketError::Invalid(format!(
            "market does not match the {} premise",
            discrimination.name()
        )))
    }
}

/// Sweeps group-blind thresholds over a simulated continuous market.
///
/// Both groups share one stream of standard normal draws, so the skill of
/// worker `i` is `mean_g + sd_g z_i` in either group.
pub fn continuous_gap_sweep(
    market: &ContinuousMarket1D,
    thresholds: &[f64],
    discrimination: Discrimination,
    n: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, MarketError> {
    check_premise(market, discrimination)?;
    if n == 0 {
        return Err(MarketError::Invalid(
            "need at least one worker per group".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..n).map(|_| std_normal(&mut rng)).collect();
    let skills = PerGroup::from_fn(|g| {
        let law = market.skill(g);
        z.iter().map(|&z| law.mean + law.sd * z).collect::<Vec<_>>()
    });
    let exante = skills.map(|_, s| s.iter().map(|&s| sigmoid(s)).sum::<f64>() / n as f64);
    thresholds
        .par_iter()
        .map(|&t| {
            let expost = skills.try_map(|g, s| {
                let mut total = 0.0;
                for &s in s {
                    total += sigmoid(continuous_skill_response(s, g, market, t)?);
                }
                Ok::<_, MarketError>(total / n as f64)
            })?;
            Ok(SweepRow {
                threshold: t,
                incentive: market.wage() * market.signals().gain(t),
                exante,
                expost,
                gap: expost.a - expost.d,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub theta: PerGroup<f64>,
    pub tpr: PerGroup<f64>,
    pub fpr: PerGroup<f64>,
    /// Net hiring benefit of qualification per group.
    pub benefit: PerGroup<f64>,
    pub pi: PerGroup<f64>,
    pub equal_treatment: bool,
    pub equal_response: bool,
}

/// Thresholds for the scan: the regular grid plus the two no-benefit
/// extremes `-inf` (hire everyone) and `+inf` (hire nobody).
pub fn scan_thresholds(signals: NormalSignals, points: usize) -> Vec<f64> {
    let mut t = vec![f64::NEG_INFINITY];
    t.extend(threshold_grid(signals, points));
    t.push(f64::INFINITY);
    t
}

/// Evaluates every threshold pair on the grid; ex-post rates do not depend on
/// the group because signals are independent of group given qualification.
pub fn coate_loury_equal_treatment_scan(
    market: &CoateLouryMarket,
    thresholds: &[f64],
) -> Vec<ScanRow> {
    let signals = market.signals();
    let w = market.wage();
    let per_threshold: Vec<(f64, f64, PerGroup<f64>)> = thresholds
        .par_iter()
        .map(|&t| {
            let pi = PerGroup::from_fn(|g| coate_loury_pi(t, g, market));
            (signals.tpr(t), signals.fpr(t), pi)
        })
        .collect();
    let k = thresholds.len();
    (0..k * k)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / k, idx % k);
            let (tpr_a, fpr_a, pi_a) = per_threshold[i];
            let (tpr_d, fpr_d, pi_d) = per_threshold[j];
            let pi = PerGroup::new(pi_a.a, pi_d.d);
            let equal_treatment =
                (tpr_a - tpr_d).abs() <= MATCH_TOL && (fpr_a - fpr_d).abs() <= MATCH_TOL;
            ScanRow {
                theta: PerGroup::new(thresholds[i], thresholds[j]),
                tpr: PerGroup::new(tpr_a, tpr_d),
                fpr: PerGroup::new(fpr_a, fpr_d),
                benefit: PerGroup::new(
                    w * signals.gain(thresholds[i]),
                    w * signals.gain(thresholds[j]),
                ),
                pi,
                equal_treatment,
                equal_response: (pi.a - pi.d).abs() <= MATCH_TOL,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostFamily, SkillLaw};

    fn signals() -> NormalSignals {
        NormalSignals { m0: 0.0, m1: 2.0 }
    }

    fn skill_market(wage: f64) -> ContinuousMarket1D {
        ContinuousMarket1D::new(
            wage,
            PerGroup::new(6.0, 6.0),
            signals(),
            PerGroup::new(
                SkillLaw { mean: 1.0, sd: 1.0 },
                SkillLaw { mean: 0.0, sd: 1.0 },
            ),
        )
        .unwrap()
    }

    fn cl_market() -> CoateLouryMarket {
        CoateLouryMarket::new(
            2.0,
            PerGroup::new(
                CostFamily::Exponential { rate: 2.0 },
                CostFamily::Exponential { rate: 0.5 },
            ),
            signals(),
            PerGroup::new(0.5, 0.5),
            1.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn grid_spans_signal_range() {
        let g = threshold_grid(signals(), 101);
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], -2.0);
        assert_eq!(g[100], 4.0);
        assert!((g[50] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn skill_gap_is_positive_everywhere() {
        let rows = continuous_gap_sweep(
            &skill_market(5.0),
            &threshold_grid(signals(), 41),
            Discrimination::SkillGap,
            20_000,
            0,
        )
        .unwrap();
        assert!(rows.iter().all(|r| r.gap > 0.0));
    }

    #[test]
    fn cost_gap_is_positive_under_incentive() {
        let market = ContinuousMarket1D::new(
            5.0,
            PerGroup::new(4.0, 10.0),
            signals(),
            PerGroup::new(
                SkillLaw { mean: 0.0, sd: 1.0 },
                SkillLaw { mean: 0.0, sd: 1.0 },
            ),
        )
        .unwrap();
        let rows = continuous_gap_sweep(
            &market,
            &threshold_grid(signals(), 41),
            Discrimination::CostGap,
            5_000,
            3,
        )
        .unwrap();
        for r in &rows {
            assert!(r.incentive > 0.0);
            assert!(r.gap > 0.0, "{r:?}");
        }
    }

    #[test]
    fn zero_wage_keeps_the_exante_gap() {
        let rows = continuous_gap_sweep(
            &skill_market(0.0),
            &[0.0, 1.0],
            Discrimination::SkillGap,
            1000,
            1,
        )
        .unwrap();
        for r in rows {
            assert_eq!(r.expost, r.exante);
            assert_eq!(r.gap, r.exante.a - r.exante.d);
        }
    }

    #[test]
    fn sweep_rejects_wrong_premise() {
        assert!(
            continuous_gap_sweep(&skill_market(1.0), &[0.0], Discrimination::CostGap, 10, 0)
                .is_err()
        );
    }

    #[test]
    fn responses_preserve_skill_order() {
        let market = skill_market(5.0);
        for t in [-1.0, 1.0, 3.0] {
            let mut prev = f64::NEG_INFINITY;
            for k in 0..100 {
                let s = -4.0 + 8.0 * k as f64 / 99.0;
                let r = continuous_skill_response(s, GroupId::A, &market, t).unwrap();
                assert!(r >= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn equal_treatment_means_unequal_investment() {
        let market = cl_market();
        let rows = coate_loury_equal_treatment_scan(&market, &scan_thresholds(signals(), 51));
        let mut treated = 0;
        let mut responded = 0;
        for r in rows.iter().filter(|r| r.equal_treatment) {
            treated += 1;
            if r.benefit.a > 0.0 {
                assert!(r.pi.a > r.pi.d, "{r:?}");
            }
            if r.equal_response {
                responded += 1;
                assert!(r.pi.a <= 1e-6 && r.pi.d <= 1e-6);
            }
        }
        assert_eq!(treated, 53);
        assert_eq!(responded, 2);
    }

    #[test]
    fn no_benefit_threshold_gives_zero_investment() {
        let market = cl_market();
        for t in [f64::NEG_INFINITY, f64::INFINITY] {
            assert_eq!(coate_loury_pi(t, GroupId::A, &market), 0.0);
            assert_eq!(coate_loury_pi(t, GroupId::D, &market), 0.0);
        }
    }

    #[test]
    fn relabeling_swaps_investment() {
        let market = cl_market();
        let swapped = market.relabeled();
        for t in threshold_grid(signals(), 21) {
            assert_eq!(
                coate_loury_pi(t, GroupId::A, &market),
                coate_loury_pi(t, GroupId::D, &swapped)
            );
            assert_eq!(
                coate_loury_pi(t, GroupId::D, &market),
                coate_loury_pi(t, GroupId::A, &swapped)
            );
        }
    }
}
