//! Per-site DP pipelines. Each produces a [`PrivateSiteReport`] whose
//! budget ledger allocates the requested (ε, δ) evenly across the
//! pipeline's sub-queries, so ledger sums always reproduce the request
//! exactly. Sub-queries backed by pure Laplace noise leave their δ
//! allocation unused, which only strengthens the guarantee.

use serde::{Deserialize, Serialize};

use crate::dp::{
    beta_for, laplace_mechanism, release_smooth_sensitivity, smooth_laplace_mechanism,
    MechanismTag, NoiseSource,
};
use crate::error::{Error, Result};
use crate::matching::{
    match_and_estimate, smooth_sensitivity_tau, smooth_sensitivity_variance,
    variance_estimate_matching,
};
use crate::model::{even_parts, stratify, BudgetSplit, PrivacyBudget, PrivateSiteReport, SiteDataset};

/// The analytic Gaussian calibration is proven for ε < 1; a sub-budget
/// above that is clamped to the boundary, which can only add noise.
const GAUSSIAN_EPSILON_CAP: f64 = 1.0 - 1e-9;

/// Which per-site pipeline to run. Difference-in-means treats the data
/// as a randomized trial and ignores covariates; callers are responsible
/// for only selecting it on randomized-assignment data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "diff-in-means")]
    DiffInMeans,
    #[serde(rename = "smooth-dp-matching")]
    SmoothDpMatching,
    #[serde(rename = "global-dp-matching")]
    GlobalDpMatching,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::DiffInMeans => "diff-in-means",
            EstimatorKind::SmoothDpMatching => "smooth-dp-matching",
            EstimatorKind::GlobalDpMatching => "global-dp-matching",
        }
    }

    pub fn run(
        &self,
        dataset: &SiteDataset,
        budget: PrivacyBudget,
        noise: &NoiseSource,
    ) -> Result<PrivateSiteReport> {
        match self {
            EstimatorKind::DiffInMeans => dp_diff_in_means(dataset, budget, noise),
            EstimatorKind::SmoothDpMatching => smooth_dp_matching(dataset, budget, noise),
            EstimatorKind::GlobalDpMatching => global_dp_matching(dataset, budget, noise),
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff-in-means" => Ok(EstimatorKind::DiffInMeans),
            "smooth-dp-matching" => Ok(EstimatorKind::SmoothDpMatching),
            "global-dp-matching" => Ok(EstimatorKind::GlobalDpMatching),
            other => Err(Error::InvalidParams(format!("unknown estimator {other:?}"))),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Non-private difference in means; errors when an arm is empty.
pub fn diff_in_means(dataset: &SiteDataset) -> Result<f64> {
    let (mut sum_t, mut n_t, mut sum_c, mut n_c) = (0.0, 0usize, 0.0, 0usize);
    for r in dataset.records() {
        if r.treated {
            sum_t += r.outcome;
            n_t += 1;
        } else {
            sum_c += r.outcome;
            n_c += 1;
        }
    }
    if n_t == 0 || n_c == 0 {
        return Err(Error::OneArmEmpty);
    }
    Ok(sum_t / n_t as f64 - sum_c / n_c as f64)
}

/// DP difference-in-means for randomized trials.
///
/// Splits the budget in half: under ε₁ each arm's outcome sum gets
/// `Lap(B/ε₁)` (parallel composition across the disjoint arms), and
/// under ε₂ each arm's sum of squares gets `Lap(B²/ε₂)` to rebuild the
/// sample variances from already-noisy first moments. The reported
/// variance is the clamped sampling term plus the public noise term
/// `2B²(1/N_t² + 1/N_c²)/ε₁²`.
pub fn dp_diff_in_means(
    dataset: &SiteDataset,
    budget: PrivacyBudget,
    noise: &NoiseSource,
) -> Result<PrivateSiteReport> {
    let b = dataset.outcome_bound();
    let (mut sum_t, mut sumsq_t, mut n_t) = (0.0, 0.0, 0usize);
    let (mut sum_c, mut sumsq_c, mut n_c) = (0.0, 0.0, 0usize);
    for r in dataset.records() {
        if r.treated {
            sum_t += r.outcome;
            sumsq_t += r.outcome * r.outcome;
            n_t += 1;
        } else {
            sum_c += r.outcome;
            sumsq_c += r.outcome * r.outcome;
            n_c += 1;
        }
    }
    if n_t == 0 || n_c == 0 {
        return Err(Error::OneArmEmpty);
    }
    if n_t < 2 || n_c < 2 {
        return Err(Error::InsufficientForVariance { treated: n_t, control: n_c });
    }

    let parts = even_parts(budget, 2)?;
    let (eps1, eps2) = (parts[0].epsilon, parts[1].epsilon);
    let (nt, nc) = (n_t as f64, n_c as f64);

    let noisy_sum_t = laplace_mechanism(sum_t, b, eps1, &mut noise.stream(MechanismTag::AteTreatedSum))?;
    let noisy_sum_c = laplace_mechanism(sum_c, b, eps1, &mut noise.stream(MechanismTag::AteControlSum))?;
    let tau_dp = noisy_sum_t / nt - noisy_sum_c / nc;

    // s² = Σy²/n − (Σy/n)², from the noisy second moment and the
    // first-moment release already paid for above
    let noisy_sumsq_t =
        laplace_mechanism(sumsq_t, b * b, eps2, &mut noise.stream(MechanismTag::VarTreatedSumSq))?;
    let noisy_sumsq_c =
        laplace_mechanism(sumsq_c, b * b, eps2, &mut noise.stream(MechanismTag::VarControlSumSq))?;
    let s2_t = noisy_sumsq_t / nt - (noisy_sum_t / nt) * (noisy_sum_t / nt);
    let s2_c = noisy_sumsq_c / nc - (noisy_sum_c / nc) * (noisy_sum_c / nc);
    let sampling = (s2_t / nt + s2_c / nc).max(0.0);
    let noise_floor = 2.0 * b * b * (1.0 / (nt * nt) + 1.0 / (nc * nc)) / (eps1 * eps1);

    Ok(PrivateSiteReport {
        site_id: dataset.site_id().to_string(),
        n: dataset.len(),
        tau_dp,
        var_dp: sampling + noise_floor,
        estimator: EstimatorKind::DiffInMeans.as_str().to_string(),
        budget_spent: BudgetSplit::new(vec![
            ("ate".into(), parts[0]),
            ("variance".into(), parts[1]),
        ]),
    })
}

/// Smooth-sensitivity DP matching.
///
/// Splits the budget three ways. Under (ε', δ') the matching estimate is
/// released with Laplace noise scaled to `2 S*_τ/ε'`, with
/// `β = ε'/(2 ln(2/δ'))`. The second third releases the sampling
/// variance estimate through the same smooth-Laplace route using the
/// variance estimate's own smooth sensitivity, clamped at zero. The last
/// third releases `S*_τ` itself through the unbiased log-Gaussian
/// mechanism; the reported variance is the clamped sampling variance
/// plus the plug-in noise term `8 (S*_DP)²/ε'²`.
pub fn smooth_dp_matching(
    dataset: &SiteDataset,
    budget: PrivacyBudget,
    noise: &NoiseSource,
) -> Result<PrivateSiteReport> {
    if budget.delta <= 0.0 {
        return Err(Error::DeltaZero);
    }
    let b = dataset.outcome_bound();
    let parts = even_parts(budget, 3)?;
    let (ate, var, sens) = (parts[0], parts[1], parts[2]);
    let counts = stratify(dataset);
    let matching = match_and_estimate(dataset);

    let beta_ate = beta_for(ate.epsilon, ate.delta)?;
    let s_tau = smooth_sensitivity_tau(&counts, b, beta_ate);
    let tau_dp = smooth_laplace_mechanism(
        matching.tau_hat,
        &s_tau,
        ate.epsilon,
        ate.delta,
        &mut noise.stream(MechanismTag::MatchingAte),
    )?;

    let beta_var = beta_for(var.epsilon, var.delta)?;
    let s_var = smooth_sensitivity_variance(&counts, b, beta_var);
    let v_hat = variance_estimate_matching(dataset, &matching);
    let v_dp = smooth_laplace_mechanism(
        v_hat,
        &s_var,
        var.epsilon,
        var.delta,
        &mut noise.stream(MechanismTag::SamplingVariance),
    )?
    .max(0.0);

    let s_dp = release_smooth_sensitivity(
        &s_tau,
        sens.epsilon.min(GAUSSIAN_EPSILON_CAP),
        sens.delta,
        &mut noise.stream(MechanismTag::SensitivityRelease),
    )?;
    let var_dp = v_dp + 8.0 * s_dp * s_dp / (ate.epsilon * ate.epsilon);

    Ok(PrivateSiteReport {
        site_id: dataset.site_id().to_string(),
        n: dataset.len(),
        tau_dp,
        var_dp,
        estimator: EstimatorKind::SmoothDpMatching.as_str().to_string(),
        budget_spent: BudgetSplit::new(vec![
            ("ate".into(), ate),
            ("variance".into(), var),
            ("sensitivity".into(), sens),
        ]),
    })
}

/// Matching estimator with noise calibrated to the global sensitivity.
///
/// The estimate's global sensitivity is the outcome bound B, so the ATE
/// release is `τ̂ + Lap(B/ε')`. The sampling variance is released by a
/// Laplace mechanism with its global sensitivity conservatively taken as
/// B², and the public noise term `2B²/ε'²` is added in the clear.
pub fn global_dp_matching(
    dataset: &SiteDataset,
    budget: PrivacyBudget,
    noise: &NoiseSource,
) -> Result<PrivateSiteReport> {
    let b = dataset.outcome_bound();
    let parts = even_parts(budget, 2)?;
    let (ate, var) = (parts[0], parts[1]);
    let matching = match_and_estimate(dataset);

    let tau_dp = laplace_mechanism(
        matching.tau_hat,
        b,
        ate.epsilon,
        &mut noise.stream(MechanismTag::MatchingAte),
    )?;
    let v_hat = variance_estimate_matching(dataset, &matching);
    let v_dp = laplace_mechanism(
        v_hat,
        b * b,
        var.epsilon,
        &mut noise.stream(MechanismTag::SamplingVariance),
    )?
    .max(0.0);
    let var_dp = v_dp + 2.0 * b * b / (ate.epsilon * ate.epsilon);

    Ok(PrivateSiteReport {
        site_id: dataset.site_id().to_string(),
        n: dataset.len(),
        tau_dp,
        var_dp,
        estimator: EstimatorKind::GlobalDpMatching.as_str().to_string(),
        budget_spent: BudgetSplit::new(vec![("ate".into(), ate), ("variance".into(), var)]),
    })
}
