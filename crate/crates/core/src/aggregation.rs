//! Server-side combination of site reports.
//!
//! Aggregation is pure post-processing: it consumes no privacy budget
//! and never touches the ledgers. The final estimate over a chosen site
//! set `I` is the sample-size-weighted average
//! `Σ_{j∈I} (N_j/N_I)·τ̂_j`, whose predicted variance is
//! `Σ_{j∈I} (N_j/N_I)²·σ̂²_j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PrivateSiteReport;

/// Exhaustive subset search is capped at this many sites (about a
/// million candidate subsets).
pub const MAX_EXHAUSTIVE_SITES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregatorKind {
    #[serde(rename = "mvagg")]
    MvAgg,
    #[serde(rename = "all")]
    All,
    #[serde(rename = "largest")]
    Largest,
}

impl AggregatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AggregatorKind::MvAgg => "mvagg",
            AggregatorKind::All => "all",
            AggregatorKind::Largest => "largest",
        }
    }

    pub fn run(&self, reports: &[PrivateSiteReport]) -> Result<AggregationResult> {
        match self {
            AggregatorKind::MvAgg => mvagg(reports),
            AggregatorKind::All => agg_all(reports),
            AggregatorKind::Largest => agg_largest(reports),
        }
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvagg" => Ok(AggregatorKind::MvAgg),
            "all" => Ok(AggregatorKind::All),
            "largest" => Ok(AggregatorKind::Largest),
            other => Err(Error::InvalidParams(format!("unknown aggregator {other:?}"))),
        }
    }
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Final server output. Serializes with the fixed field order
/// `tau_final`, `chosen_sites`, `predicted_variance`, `method`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationResult {
    pub tau_final: f64,
    pub chosen_sites: Vec<String>,
    pub predicted_variance: f64,
    pub method: String,
}

fn weighted(reports: &[PrivateSiteReport], chosen: &[usize]) -> (f64, f64) {
    let n_total: f64 = chosen.iter().map(|&j| reports[j].n as f64).sum();
    let mut tau = 0.0;
    let mut var = 0.0;
    for &j in chosen {
        let w = reports[j].n as f64 / n_total;
        tau += w * reports[j].tau_dp;
        var += w * w * reports[j].var_dp;
    }
    (tau, var)
}

fn site_ids(reports: &[PrivateSiteReport], chosen: &[usize]) -> Vec<String> {
    chosen.iter().map(|&j| reports[j].site_id.clone()).collect()
}

/// Minimum-variance aggregation: exact minimizer of the predicted
/// variance over every non-empty site subset. Ties prefer the larger
/// subset, then the lexicographically smallest sorted site-id set.
pub fn mvagg(reports: &[PrivateSiteReport]) -> Result<AggregationResult> {
    let j = reports.len();
    if j == 0 {
        return Err(Error::NoReports);
    }
    if j > MAX_EXHAUSTIVE_SITES {
        return Err(Error::TooManySites(j));
    }

    let members = |mask: u32| -> Vec<usize> { (0..j).filter(|&i| mask >> i & 1 == 1).collect() };
    let sorted_ids = |chosen: &[usize]| -> Vec<&str> {
        let mut ids: Vec<&str> = chosen.iter().map(|&i| reports[i].site_id.as_str()).collect();
        ids.sort_unstable();
        ids
    };

    let mut best_mask = 1u32;
    let mut best_var = weighted(reports, &members(1)).1;
    for mask in 2..(1u32 << j) {
        let chosen = members(mask);
        let (_, var) = weighted(reports, &chosen);
        let better = if var < best_var {
            true
        } else if var == best_var {
            let best_count = best_mask.count_ones();
            mask.count_ones() > best_count
                || (mask.count_ones() == best_count
                    && sorted_ids(&chosen) < sorted_ids(&members(best_mask)))
        } else {
            false
        };
        if better {
            best_mask = mask;
            best_var = var;
        }
    }

    let chosen = members(best_mask);
    let (tau, var) = weighted(reports, &chosen);
    Ok(AggregationResult {
        tau_final: tau,
        chosen_sites: site_ids(reports, &chosen),
        predicted_variance: var,
        method: AggregatorKind::MvAgg.as_str().into(),
    })
}

/// Sample-size-weighted average over every site.
pub fn agg_all(reports: &[PrivateSiteReport]) -> Result<AggregationResult> {
    if reports.is_empty() {
        return Err(Error::NoReports);
    }
    let chosen: Vec<usize> = (0..reports.len()).collect();
    let (tau, var) = weighted(reports, &chosen);
    Ok(AggregationResult {
        tau_final: tau,
        chosen_sites: site_ids(reports, &chosen),
        predicted_variance: var,
        method: AggregatorKind::All.as_str().into(),
    })
}

/// Publishes the report of the largest site; ties go to the earliest
/// report in the input order.
pub fn agg_largest(reports: &[PrivateSiteReport]) -> Result<AggregationResult> {
    if reports.is_empty() {
        return Err(Error::NoReports);
    }
    let mut best = 0;
    for (i, r) in reports.iter().enumerate().skip(1) {
        if r.n > reports[best].n {
            best = i;
        }
    }
    Ok(AggregationResult {
        tau_final: reports[best].tau_dp,
        chosen_sites: vec![reports[best].site_id.clone()],
        predicted_variance: reports[best].var_dp,
        method: AggregatorKind::Largest.as_str().into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BudgetSplit, PrivacyBudget};
    use proptest::prelude::*;

    fn report(site_id: &str, n: usize, tau: f64, var: f64) -> PrivateSiteReport {
        PrivateSiteReport {
            site_id: site_id.into(),
            n,
            tau_dp: tau,
            var_dp: var,
            estimator: "diff-in-means".into(),
            budget_spent: BudgetSplit::new(vec![(
                "total".into(),
                PrivacyBudget::new(1.0, 0.0).unwrap(),
            )]),
        }
    }

    #[test]
    fn single_report_is_identity_for_all_methods() {
        let reports = vec![report("s1", 5, 0.42, 0.1)];
        for kind in [AggregatorKind::MvAgg, AggregatorKind::All, AggregatorKind::Largest] {
            let r = kind.run(&reports).unwrap();
            assert_eq!(r.tau_final, 0.42);
            assert_eq!(r.chosen_sites, vec!["s1".to_string()]);
            assert_eq!(r.predicted_variance, 0.1);
        }
    }

    #[test]
    fn mvagg_discards_the_noisy_site() {
        // subset variances: {1}: 1, {2}: 100, {1,2}: 25.25
        let reports = vec![report("s1", 10, 0.3, 1.0), report("s2", 10, 0.9, 100.0)];
        let r = mvagg(&reports).unwrap();
        assert_eq!(r.chosen_sites, vec!["s1".to_string()]);
        assert_eq!(r.tau_final, 0.3);
        assert_eq!(r.predicted_variance, 1.0);
    }

    #[test]
    fn mvagg_averages_equal_quality_sites() {
        let reports = vec![report("s1", 10, 0.2, 1.0), report("s2", 10, 0.6, 1.0)];
        let r = mvagg(&reports).unwrap();
        assert_eq!(r.chosen_sites.len(), 2);
        assert!((r.tau_final - 0.4).abs() < 1e-15);
        assert!((r.predicted_variance - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mvagg_tie_break_prefers_larger_subset() {
        // zero variance everywhere: every subset ties at 0
        let reports = vec![report("s1", 10, 0.2, 0.0), report("s2", 10, 0.6, 0.0)];
        let r = mvagg(&reports).unwrap();
        assert_eq!(r.chosen_sites.len(), 2);
    }

    #[test]
    fn mvagg_tie_break_is_lexicographic_after_size() {
        // sites with identical n and variance: singletons {a} and {b} tie
        // at the subset level, {a,b} wins by size first
        let reports =
            vec![report("b", 10, 0.0, 0.0), report("a", 10, 1.0, 0.0), report("c", 1, 9.0, 5.0)];
        let r = mvagg(&reports).unwrap();
        let mut ids = r.chosen_sites.clone();
        ids.sort();
        assert_eq!(ids, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn mvagg_rejects_empty_and_oversized_inputs() {
        assert!(matches!(mvagg(&[]), Err(Error::NoReports)));
        let many: Vec<_> = (0..21).map(|i| report(&format!("s{i}"), 1, 0.0, 1.0)).collect();
        assert!(matches!(mvagg(&many), Err(Error::TooManySites(21))));
    }

    #[test]
    fn agg_all_weighting() {
        let reports = vec![report("s1", 2, 0.3, 0.0), report("s2", 1, 0.9, 0.0)];
        let r = agg_all(&reports).unwrap();
        assert!((r.tau_final - 0.5).abs() < 1e-15);

        let reports = vec![report("s1", 4, 0.7, 0.0), report("s2", 4, -0.7, 0.0)];
        assert!(agg_all(&reports).unwrap().tau_final.abs() < 1e-15);
    }

    #[test]
    fn agg_largest_picks_first_on_ties() {
        let reports = vec![
            report("s1", 5, 0.1, 1.0),
            report("s2", 3, 0.2, 1.0),
            report("s3", 3, 0.3, 1.0),
            report("s4", 1, 0.4, 1.0),
        ];
        assert_eq!(agg_largest(&reports).unwrap().chosen_sites, vec!["s1".to_string()]);

        let reports = vec![report("s1", 3, 0.1, 1.0), report("s2", 3, 0.2, 1.0)];
        assert_eq!(agg_largest(&reports).unwrap().chosen_sites, vec!["s1".to_string()]);
    }

    #[test]
    fn result_serialization_field_order() {
        let reports = vec![report("s1", 5, 0.42, 0.1)];
        let json = serde_json::to_string(&mvagg(&reports).unwrap()).unwrap();
        let order = ["tau_final", "chosen_sites", "predicted_variance", "method"];
        let mut last = 0;
        for key in order {
            let pos = json.find(&format!("\"{key}\"")).unwrap();
            assert!(pos >= last);
            last = pos;
        }
    }

    proptest! {
        /// MVAgg never predicts worse variance than either baseline, a
        /// huge-variance extra site never hurts, and scaling every
        /// variance rescales the prediction without moving the choice.
        #[test]
        fn mvagg_dominance_and_scale_covariance(
            sites in proptest::collection::vec((1usize..200, 0.0f64..1.0, 1e-6f64..10.0), 1..7),
            scale in 0.5f64..8.0,
        ) {
            let reports: Vec<_> = sites
                .iter()
                .enumerate()
                .map(|(i, &(n, tau, var))| report(&format!("s{i}"), n, tau, var))
                .collect();
            let mv = mvagg(&reports).unwrap();
            let all = agg_all(&reports).unwrap();
            let largest = agg_largest(&reports).unwrap();
            prop_assert!(mv.predicted_variance <= all.predicted_variance + 1e-12);
            prop_assert!(mv.predicted_variance <= largest.predicted_variance + 1e-12);

            let mut extra = reports.clone();
            extra.push(report("huge", 1, 0.0, 1e12));
            let mv2 = mvagg(&extra).unwrap();
            prop_assert!(mv2.predicted_variance <= mv.predicted_variance + 1e-12);

            let scaled: Vec<_> = reports
                .iter()
                .map(|r| report(&r.site_id, r.n, r.tau_dp, r.var_dp * scale))
                .collect();
            let mv3 = mvagg(&scaled).unwrap();
            prop_assert_eq!(&mv3.chosen_sites, &mv.chosen_sites);
            let rel = (mv3.predicted_variance - scale * mv.predicted_variance).abs()
                / (scale * mv.predicted_variance).max(1e-300);
            prop_assert!(rel < 1e-9);
        }
    }
}
