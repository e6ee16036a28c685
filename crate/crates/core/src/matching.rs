//! Balanced exact-matching ATE estimator and its sensitivity analysis.
//!
//! The estimator imputes each record's missing potential outcome from a
//! record with the same covariate code and opposite treatment, cycling
//! through the opposite side in record order so that no record is reused
//! more than one time above its fair share. Records in strata with one
//! side empty stay unmatched and contribute zero.
//!
//! Sensitivity analysis works on stratum tallies alone:
//!
//! - `local_sensitivity_bound` bounds how much the estimate can move
//!   under a single-record replacement;
//! - `smooth_sensitivity_tau` evaluates the β-smooth envelope
//!   `max_k e^{-kβ}·(4B/N)(1 + max_x R_x^{(k)})`, where absent covariate
//!   codes contribute `R = k`;
//! - `variance_local_sensitivity_bound` and
//!   `smooth_sensitivity_variance` do the same for the matching
//!   estimator's variance estimate, using the one-addition /
//!   one-removal case bounds on the unnormalized variance sum.

use std::collections::BTreeMap;

use crate::dp::SmoothSensitivityValue;
use crate::model::{SiteDataset, StratumCounts};

/// Output of the balanced exact matcher.
#[derive(Debug, Clone)]
pub struct MatchingResult {
    /// `(1/N)·Σ (Ŷ_i(1) − Ŷ_i(0))`.
    pub tau_hat: f64,
    /// Per record, how many other records used this record's outcome as
    /// their imputed value. Zero for unmatched records.
    pub multiplicities: Vec<usize>,
    /// Per record, the imputed pair `(Ŷ_i(1), Ŷ_i(0))`. Unmatched
    /// records carry `(y, y)`.
    pub imputed: Vec<(f64, f64)>,
}

/// Local bound plus the smooth envelope it anchors (its `k = 0` term).
#[derive(Debug, Clone, Copy)]
pub struct SensitivityBound {
    pub local_bound: f64,
    pub smooth: SmoothSensitivityValue,
}

/// Both point-estimate sensitivity figures in one call.
pub fn sensitivity_bounds(counts: &StratumCounts, bound: f64, beta: f64) -> SensitivityBound {
    SensitivityBound {
        local_bound: local_sensitivity_bound(counts, bound),
        smooth: smooth_sensitivity_tau(counts, bound, beta),
    }
}

/// Balanced exact matching in record order.
///
/// Within a stratum, the `j`-th treated record is matched to control
/// `j mod |C_x|` and the `j`-th control to treated `j mod |T_x|`, so any
/// two same-side records' reuse counts differ by at most one.
pub fn match_and_estimate(dataset: &SiteDataset) -> MatchingResult {
    let records = dataset.records();
    let n = records.len();
    let mut strata: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let entry = strata.entry(r.covariate).or_default();
        if r.treated {
            entry.0.push(i);
        } else {
            entry.1.push(i);
        }
    }

    let mut multiplicities = vec![0usize; n];
    let mut imputed = vec![(0.0, 0.0); n];
    for (treated, control) in strata.values() {
        if treated.is_empty() || control.is_empty() {
            // no match: both potential outcomes fall back to the observation
            for &i in treated.iter().chain(control.iter()) {
                imputed[i] = (records[i].outcome, records[i].outcome);
            }
            continue;
        }
        for (j, &i) in treated.iter().enumerate() {
            let m = control[j % control.len()];
            imputed[i] = (records[i].outcome, records[m].outcome);
            multiplicities[m] += 1;
        }
        for (j, &i) in control.iter().enumerate() {
            let m = treated[j % treated.len()];
            imputed[i] = (records[m].outcome, records[i].outcome);
            multiplicities[m] += 1;
        }
    }

    let tau_hat = imputed.iter().map(|(y1, y0)| y1 - y0).sum::<f64>() / n as f64;
    MatchingResult { tau_hat, multiplicities, imputed }
}

/// Variance estimate of the matching estimator:
/// `(1/(2N²))·Σ_i (1 + L_i)²·(Ŷ_i(1) − Ŷ_i(0))²`.
pub fn variance_estimate_matching(dataset: &SiteDataset, matching: &MatchingResult) -> f64 {
    let n = dataset.len() as f64;
    let sum: f64 = matching
        .imputed
        .iter()
        .zip(&matching.multiplicities)
        .map(|(&(y1, y0), &l)| {
            let w = (1 + l) as f64;
            let d = y1 - y0;
            w * w * d * d
        })
        .sum();
    sum / (2.0 * n * n)
}

fn ceil_div(a: u64, b: u64) -> u64 {
    debug_assert!(b > 0);
    a.div_ceil(b)
}

/// Replacement local-sensitivity bound for the matching estimate:
/// `(1/N)·max_x 4(1 + max(|T_x|, |C_x|))B` when one side is empty, else
/// `(1/N)·max_x 4(1 + max(⌈(1+|C_x|)/|T_x|⌉, ⌈(1+|T_x|)/|C_x|⌉))B`.
pub fn local_sensitivity_bound(counts: &StratumCounts, bound: f64) -> f64 {
    let n = counts.n();
    if n == 0 {
        return 0.0;
    }
    let mut coeff: u64 = 0;
    for (_, (t, c)) in counts.iter() {
        let (t, c) = (t as u64, c as u64);
        let r = if t == 0 || c == 0 {
            t.max(c)
        } else {
            ceil_div(1 + c, t).max(ceil_div(1 + t, c))
        };
        coeff = coeff.max(4 * (1 + r));
    }
    coeff as f64 * bound / n as f64
}

/// Closed-form worst reuse ratio of a stratum after up to `k`
/// replacements, ignoring the dataset size: with `m = min(t, c)` and
/// `M = max(t, c)`, returns `M + k` when `m <= k` and
/// `⌈(M + k + 1)/(m − k)⌉` otherwise. An absent stratum (`t = c = 0`)
/// yields `k`.
pub fn r_k(t: usize, c: usize, k: usize) -> u64 {
    let (m, big) = (t.min(c) as u64, t.max(c) as u64);
    let k = k as u64;
    if m <= k {
        big + k
    } else {
        ceil_div(big + k + 1, m - k)
    }
}

/// Per-stratum reuse-ratio coefficient of the local-sensitivity bound:
/// the larger side when one side is empty, `⌈(max + 1)/min⌉` otherwise.
fn r_of(t: u64, c: u64) -> u64 {
    let (m, big) = (t.min(c), t.max(c));
    if m == 0 {
        big
    } else {
        ceil_div(big + 1, m)
    }
}

/// Exact maximum of the per-stratum reuse coefficient (larger side
/// when one side is empty, `⌈(max + 1)/min⌉` otherwise) over every tally
/// reachable from `(t, c)` within `k` replacements in an `n`-record
/// dataset: at most
/// `k` records added, at most `k` removed, and the stratum can never
/// hold more than `n` records.
///
/// Unlike the unconstrained closed form [`r_k`], this maximum saturates
/// once the radius covers every feasible tally, which is what makes the
/// resulting envelope β-smooth on small datasets.
pub fn r_k_reachable(t: usize, c: usize, k: usize, n: usize) -> u64 {
    let (m, big) = (t.min(c) as u64, t.max(c) as u64);
    let (k, n) = (k as u64, n as u64);
    debug_assert!(m + big <= n);
    let mut best = 0;
    // empty the small side, grow the large one
    if m <= k {
        best = (big + k).min(n);
    }
    // pin the small side at its feasible minimum (at least one record)
    let pinned = 1.max(m.saturating_sub(k));
    let adjust_cost = pinned.saturating_sub(m); // 1 when the side was empty
    if adjust_cost <= k {
        let grown = (big + k - adjust_cost).min(n - pinned.min(n));
        if grown >= pinned {
            best = best.max(ceil_div(grown + 1, pinned));
        }
    }
    best.max(r_of(m, big).min(n))
}

/// β-smooth sensitivity of the matching estimate:
/// `max_{k=0..N} e^{-kβ}·(4B/N)·(1 + max_x R_x^{(k)})`, the max over x
/// ranging over the full declared domain (absent codes seed strata with
/// up to `k` records) and `R` maximized over dataset-feasible tallies
/// via [`r_k_reachable`]. Runs in `O(N·min(|X|, N))` time and
/// `O(min(|X|, N))` space.
pub fn smooth_sensitivity_tau(counts: &StratumCounts, bound: f64, beta: f64) -> SmoothSensitivityValue {
    let (value, _, _) = smooth_sensitivity_tau_detailed(counts, bound, beta);
    SmoothSensitivityValue::new(value, beta)
}

/// As [`smooth_sensitivity_tau`], also reporting the maximizing `k` and
/// the stratum code attaining it (`None` when an absent code wins).
pub fn smooth_sensitivity_tau_detailed(
    counts: &StratumCounts,
    bound: f64,
    beta: f64,
) -> (f64, usize, Option<u32>) {
    assert!(beta > 0.0, "beta must be positive");
    let n = counts.n();
    assert!(n > 0, "smooth sensitivity needs a non-empty dataset");
    let absent = counts.has_absent_strata();
    let scale = 4.0 * bound / n as f64;

    let mut best = f64::NEG_INFINITY;
    let mut best_k = 0;
    let mut best_x = None;
    for k in 0..=n {
        let mut r_max: u64 = if absent { r_k_reachable(0, 0, k, n) } else { 0 };
        let mut x_max = None;
        for (x, (t, c)) in counts.iter() {
            let r = r_k_reachable(t, c, k, n);
            if r >= r_max {
                r_max = r;
                x_max = Some(x);
            }
        }
        let term = libm::exp(-(k as f64) * beta) * scale * (1.0 + r_max as f64);
        if term > best {
            best = term;
            best_k = k;
            best_x = x_max;
        }
    }
    (best, best_k, best_x)
}

// --- variance-estimate sensitivity -----------------------------------
//
// Both case expressions below are per-stratum coefficients on B² for the
// unnormalized variance sum g = 2N²·V̂. The final bounds divide by 2N².

/// One-addition bound contribution of a stratum (LS⁺ cases).
fn ls_plus_coeff(t: u64, c: u64) -> u64 {
    match (t, c) {
        (0, 0) => 0,
        (0, c) => (1 + c) * (1 + c) + 4 * c,
        (t, 0) => (1 + t) * (1 + t) + 4 * t,
        (t, c) => plus_ow(t, c).max(plus_ow(c, t)),
    }
}

fn plus_ow(t: u64, c: u64) -> u64 {
    let q1 = 1 + ceil_div(c, t);
    let q2 = 1 + ceil_div(t + 1, c);
    let q3 = 1 + ceil_div(c, t + 1);
    2 * t * q1 * q1 + 2 * c * q2 * q2 + q3 * q3
}

/// Stratum contribution to `max` over one-addition neighbors of the
/// one-removal bound (LS⁻ cases evaluated after the worst addition).
fn ls_minus_add_coeff(t: u64, c: u64) -> u64 {
    match (t, c) {
        (0, 0) => 0,
        (0, c) => minus_add_one_sided(c),
        (t, 0) => minus_add_one_sided(t),
        (t, c) => minus_add_a(t, c)
            .max(minus_add_b(t, c))
            .max(minus_add_a(c, t))
            .max(minus_add_b(c, t)),
    }
}

fn minus_add_one_sided(c: u64) -> u64 {
    let first = 8 * (1 + c) + 2 * (2 + c) * (2 + c) + 4;
    let q = 1 + ceil_div(2, c);
    let second = 4 * (1 + c) * (1 + c) + 2 * c * q * q + (1 + c) * (1 + c);
    first.max(second)
}

fn minus_add_a(t: u64, c: u64) -> u64 {
    let q1 = 1 + ceil_div(1 + t, c);
    let q2 = 1 + ceil_div(1 + c, 1 + t);
    2 * (1 + c) * q1 * q1 + 2 * (1 + t) * q2 * q2 + q1 * q1
}

fn minus_add_b(t: u64, c: u64) -> u64 {
    let q1 = 1 + ceil_div(c, 1 + t);
    let q2 = 1 + ceil_div(2 + t, c);
    2 * (2 + t) * q1 * q1 + 2 * c * q2 * q2 + q1 * q1
}

/// Local-sensitivity bound for the matching variance estimate:
/// `(1/(2N²))·(max_x LS⁺ case + max_x one-addition LS⁻ case)·B²`.
pub fn variance_local_sensitivity_bound(counts: &StratumCounts, bound: f64) -> f64 {
    let n = counts.n();
    if n == 0 {
        return 0.0;
    }
    let mut plus: u64 = 0;
    let mut minus: u64 = 0;
    for (_, (t, c)) in counts.iter() {
        plus = plus.max(ls_plus_coeff(t as u64, c as u64));
        minus = minus.max(ls_minus_add_coeff(t as u64, c as u64));
    }
    (plus + minus) as f64 * bound * bound / (2.0 * (n * n) as f64)
}

/// Stratum tallies reachable with at most `k` replacements: each
/// replacement may add one record to the stratum, remove one, or move
/// one across sides, so `(t', c')` is reachable from `(t, c)` whenever
/// at most `k` records are added in total and at most `k` removed.
fn replacement_cost(from: (u64, u64), to: (u64, u64)) -> u64 {
    let added = to.0.saturating_sub(from.0) + to.1.saturating_sub(from.1);
    let removed = from.0.saturating_sub(to.0) + from.1.saturating_sub(to.1);
    added.max(removed)
}

/// Cost of reaching the unordered tally `{m, M}` from stratum `(t, c)`.
fn pair_cost(from: (u64, u64), m: u64, big: u64) -> u64 {
    replacement_cost(from, (m, big)).min(replacement_cost(from, (big, m)))
}

/// Over-bound on `ls_plus_coeff` and `ls_minus_add_coeff` for any
/// stratum whose larger side is `big`; used only to truncate the
/// smooth-sensitivity scan once `e^{-kβ}` has decayed past relevance.
fn coeff_upper_bound(big: u64) -> f64 {
    let m = (big + 3) as f64;
    128.0 * m * m
}

/// β-smooth sensitivity of the matching variance estimate.
///
/// Evaluates `max_{k=0..N} e^{-kβ}` times the variance local-sensitivity
/// bound maximized over all per-stratum tallies reachable within `k`
/// replacements (at most `k` added, at most `k` removed, never more
/// than `N` in a stratum; absent codes seed new strata with up to `k`
/// records). The two case maxima are enveloped separately over the
/// reachable tallies, which upper-bounds any single reachable dataset,
/// and the reachable sets nest across neighbors, which keeps the
/// envelope β-smooth.
pub fn smooth_sensitivity_variance(
    counts: &StratumCounts,
    bound: f64,
    beta: f64,
) -> SmoothSensitivityValue {
    assert!(beta > 0.0, "beta must be positive");
    let n = counts.n() as u64;
    assert!(n > 0, "smooth sensitivity needs a non-empty dataset");

    // distinct origins as unordered tallies, plus a seed for absent codes
    let mut origins: Vec<(u64, u64)> = counts
        .iter()
        .map(|(_, (t, c))| (t.min(c) as u64, t.max(c) as u64))
        .collect();
    if counts.has_absent_strata() {
        origins.push((0, 0));
    }
    origins.sort_unstable();
    origins.dedup();
    let max_side = origins.iter().map(|&(_, big)| big).max().unwrap();

    // Truncate k once e^{-kβ}·(worst possible coefficients) falls below
    // the k = 0 value; terms past that point cannot win the max.
    let lower0: f64 = {
        let plus = origins.iter().map(|&(m, big)| ls_plus_coeff(m, big)).max().unwrap();
        let minus = origins.iter().map(|&(m, big)| ls_minus_add_coeff(m, big)).max().unwrap();
        (plus + minus) as f64
    };
    debug_assert!(lower0 > 0.0);
    let ub_total = 2.0 * coeff_upper_bound(max_side + n);
    let k_cap = {
        let by_decay = (libm::log(ub_total / lower0) / beta).ceil() as u64 + 1;
        n.min(by_decay) as usize
    };

    // Envelopes over cost: the best coefficient reachable at exactly
    // that many replacements, prefix-maxed afterwards.
    let mut env_plus = vec![0.0f64; k_cap + 1];
    let mut env_minus = vec![0.0f64; k_cap + 1];
    let reach = (max_side + k_cap as u64).min(n);
    for m in 0..=reach {
        for big in m..=(reach.min(n - m)) {
            let cost = origins.iter().map(|&o| pair_cost(o, m, big)).min().unwrap();
            if cost as usize > k_cap {
                continue;
            }
            let fp = ls_plus_coeff(m, big) as f64;
            let fm = ls_minus_add_coeff(m, big) as f64;
            debug_assert!(fp <= coeff_upper_bound(big) && fm <= coeff_upper_bound(big));
            let slot = cost as usize;
            if fp > env_plus[slot] {
                env_plus[slot] = fp;
            }
            if fm > env_minus[slot] {
                env_minus[slot] = fm;
            }
        }
    }
    for k in 1..=k_cap {
        env_plus[k] = env_plus[k].max(env_plus[k - 1]);
        env_minus[k] = env_minus[k].max(env_minus[k - 1]);
    }

    let mut best = 0.0f64;
    for k in 0..=k_cap {
        let term = libm::exp(-(k as f64) * beta) * (env_plus[k] + env_minus[k]);
        if term > best {
            best = term;
        }
    }
    let value = best * bound * bound / (2.0 * (n * n) as f64);
    SmoothSensitivityValue::new(value, beta)
}
