//! Synthetic data generation, site splitting, ε-sweeps, the MAE
//! experiment runner, and the brute-force sensitivity oracles backing
//! the property-test suites.

use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::dp::{MechanismTag, NoiseSource, RandomStream};
use crate::error::{Error, Result};
use crate::estimators::{diff_in_means, EstimatorKind};
use crate::matching::{match_and_estimate, smooth_sensitivity_tau};
use crate::model::{stratify, PrivacyBudget, Record, SiteDataset};

/// Observation noise amplitude of the synthetic generator.
pub const SYNTH_NOISE_AMPLITUDE: f64 = 0.1;

/// Parameters of the synthetic observational-study generator.
///
/// Covariates are uniform on the grid `{0, 1/(|X|-1), ..., 1}`,
/// treatment is Bernoulli with probability `sigmoid(a·(2x - 1))`, and
/// outcomes are `b·x + τ·w + e` with `e ~ Uniform[0, 0.1]`, which stay
/// in `[0, 1]` for `τ <= 0.5` and `b <= 0.4`. `a` and `b` left unset are
/// drawn once per dataset from `Uniform[-1, 1]` and `Uniform[0, 0.4]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub domain_size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    pub tau: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// Generates a synthetic dataset with outcome bound 1.
///
/// Per record the stream is consumed in a fixed order (covariate,
/// treatment uniform, noise uniform) so outputs replay exactly.
pub fn generate_synth(params: &SynthParams, rng: &mut RandomStream) -> Result<SiteDataset> {
    if params.n < 1 {
        return Err(Error::InvalidParams("synth size must be >= 1".into()));
    }
    if params.domain_size < 2 {
        return Err(Error::InvalidParams("synth domain size must be >= 2".into()));
    }
    if !(0.0..=0.5).contains(&params.tau) {
        return Err(Error::InvalidParams(format!(
            "true ATE must lie in [0, 0.5] to keep outcomes in [0, 1] (got {})",
            params.tau
        )));
    }
    if let Some(b) = params.b {
        if !(0.0..=0.4).contains(&b) {
            return Err(Error::InvalidParams(format!(
                "slope must lie in [0, 0.4] to keep outcomes in [0, 1] (got {b})"
            )));
        }
    }
    if let Some(a) = params.a {
        if !a.is_finite() {
            return Err(Error::InvalidParams("imbalance must be finite".into()));
        }
    }

    let a = params.a.unwrap_or_else(|| 2.0 * rng.uniform_open01() - 1.0);
    let b = params.b.unwrap_or_else(|| 0.4 * rng.uniform_open01());
    let grid_step = 1.0 / (params.domain_size - 1) as f64;
    let mut records = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let code = rng.next_below(params.domain_size as u64) as u32;
        let x = code as f64 * grid_step;
        let treated = rng.uniform_open01() < sigmoid(a * (2.0 * x - 1.0));
        let e = SYNTH_NOISE_AMPLITUDE * rng.uniform_open01();
        let y = b * x + params.tau * if treated { 1.0 } else { 0.0 } + e;
        records.push(Record { treated, outcome: y, covariate: code });
    }
    SiteDataset::new(records, 1.0, params.domain_size, "synth")
}

/// Randomly partitions a dataset into disjoint sites with sizes matching
/// the given integer proportions (nearest rounding, remainder absorbed
/// by site 1). Every record lands in exactly one site.
pub fn split_sites(
    dataset: &SiteDataset,
    proportions: &[u64],
    rng: &mut RandomStream,
) -> Result<Vec<SiteDataset>> {
    let j = proportions.len();
    if j == 0 || proportions.iter().any(|&p| p == 0) {
        return Err(Error::InvalidParams("proportions must be positive integers".into()));
    }
    let n = dataset.len();
    let total: u64 = proportions.iter().sum();

    let mut sizes = vec![0usize; j];
    let mut assigned = 0usize;
    for (i, &p) in proportions.iter().enumerate().skip(1) {
        let raw = n as f64 * p as f64 / total as f64;
        sizes[i] = raw.round() as usize;
        assigned += sizes[i];
    }
    if assigned >= n {
        return Err(Error::TooFewRecords { records: n, sites: j });
    }
    sizes[0] = n - assigned;
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::TooFewRecords { records: n, sites: j });
    }

    // Fisher-Yates over the index vector
    let mut indices: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let k = rng.next_below(i as u64 + 1) as usize;
        indices.swap(i, k);
    }

    let mut sites = Vec::with_capacity(j);
    let mut offset = 0;
    for (i, &size) in sizes.iter().enumerate() {
        let slice = &indices[offset..offset + size];
        sites.push(dataset.subset(slice, format!("site-{}", i + 1))?);
        offset += size;
    }
    Ok(sites)
}

/// Geometric privacy schedule `ε_j = α^{(j-1)/(J-1)}·ε₁` for sites
/// `j = 1..J`.
pub fn epsilon_schedule(eps1: f64, j: usize, alpha: f64) -> Result<Vec<f64>> {
    if j < 2 {
        return Err(Error::InvalidJ(j));
    }
    if !(eps1 > 0.0) || !(alpha > 0.0) {
        return Err(Error::InvalidParams("eps1 and alpha must be positive".into()));
    }
    Ok((0..j)
        .map(|idx| alpha.powf(idx as f64 / (j - 1) as f64) * eps1)
        .collect())
}

/// Where an experiment's data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthParams),
    Csv {
        path: PathBuf,
        /// When set, the site split is drawn once and reused across
        /// repetitions instead of re-randomized per repetition.
        #[serde(default)]
        fixed_split: bool,
    },
}

/// Full description of one privacy-utility experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub estimator: EstimatorKind,
    pub aggregators: Vec<AggregatorKind>,
    pub proportions: Vec<u64>,
    pub eps1: f64,
    pub delta: f64,
    pub alphas: Vec<f64>,
    pub repetitions: usize,
    pub seed: u64,
    pub data: DataSource,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aggregators.is_empty() {
            return Err(Error::Config("at least one aggregator is required".into()));
        }
        if self.proportions.len() < 2 {
            return Err(Error::Config("experiments need at least two sites".into()));
        }
        if self.proportions.iter().any(|&p| p == 0) {
            return Err(Error::Config("proportions must be positive".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config("alphas must be positive".into()));
        }
        if self.repetitions < 1 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if !(self.eps1 > 0.0) {
            return Err(Error::Config("eps1 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config("delta must lie in [0, 1)".into()));
        }
        if self.estimator == EstimatorKind::SmoothDpMatching && self.delta <= 0.0 {
            return Err(Error::Config("smooth-dp-matching requires delta > 0".into()));
        }
        if self.estimator == EstimatorKind::DiffInMeans {
            if let DataSource::Synth(p) = &self.data {
                // difference-in-means assumes randomized assignment
                if p.a != Some(0.0) {
                    return Err(Error::Config(
                        "diff-in-means on synthetic data requires a randomized trial (a = 0)"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Mean and standard deviation of the absolute error per
/// (aggregator, α) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaeRow {
    pub aggregator: String,
    pub alpha: f64,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeTable {
    pub rows: Vec<MaeRow>,
}

impl MaeTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("aggregator,alpha,mean_mae,std_mae,repetitions\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.aggregator, r.alpha, r.mean_mae, r.std_mae, r.repetitions
            ));
        }
        out
    }

    pub fn get(&self, aggregator: AggregatorKind, alpha: f64) -> Option<&MaeRow> {
        self.rows
            .iter()
            .find(|r| r.aggregator == aggregator.as_str() && r.alpha == alpha)
    }
}

/// Runs the configured sweep: per (α, repetition), split the data, run
/// the per-site estimator under the ε schedule, aggregate, and record
/// the absolute error against the reference (the true ATE for synthetic
/// data, the pooled non-private estimate for CSV data).
pub fn run_experiment(config: &ExperimentConfig) -> Result<MaeTable> {
    run_experiment_inner(config, false)
}

/// As [`run_experiment`] with every noise draw forced to zero; isolates
/// the sampling discrepancy for calibration tests.
pub fn run_experiment_noiseless(config: &ExperimentConfig) -> Result<MaeTable> {
    run_experiment_inner(config, true)
}

fn run_experiment_inner(config: &ExperimentConfig, noiseless: bool) -> Result<MaeTable> {
    config.validate()?;
    let j = config.proportions.len();

    let (base, reference, fixed_split) = match &config.data {
        DataSource::Synth(params) => {
            let mut rng = RandomStream::keyed(config.seed, 0, 0, MechanismTag::DataGen);
            let data = generate_synth(params, &mut rng)?;
            (data, params.tau, None)
        }
        DataSource::Csv { path, fixed_split } => {
            let data = crate::model::load_csv_with_sidecar(path)?;
            let reference = match config.estimator {
                EstimatorKind::DiffInMeans => diff_in_means(&data)?,
                _ => match_and_estimate(&data).tau_hat,
            };
            let split = if *fixed_split {
                let mut rng = RandomStream::keyed(config.seed, 0, 0, MechanismTag::SiteSplit);
                Some(split_sites(&data, &config.proportions, &mut rng)?)
            } else {
                None
            };
            (data, reference, split)
        }
    };

    let reps = config.repetitions;
    let cells: Vec<(usize, usize)> = (0..config.alphas.len())
        .flat_map(|ai| (0..reps).map(move |r| (ai, r)))
        .collect();

    // per (alpha, rep): one absolute error per aggregator
    let errors: Result<Vec<Vec<f64>>> = cells
        .par_iter()
        .map(|&(ai, rep)| {
            let rep_key = (ai * reps + rep) as u32;
            let schedule = epsilon_schedule(config.eps1, j, config.alphas[ai])?;
            let sites = match &fixed_split {
                Some(s) => s.clone(),
                None => {
                    let mut rng =
                        RandomStream::keyed(config.seed, 0, rep_key, MechanismTag::SiteSplit);
                    split_sites(&base, &config.proportions, &mut rng)?
                }
            };
            let mut reports = Vec::with_capacity(j);
            for (idx, site) in sites.iter().enumerate() {
                let budget = PrivacyBudget::new(schedule[idx], config.delta)?;
                let noise = if noiseless {
                    NoiseSource::degenerate()
                } else {
                    NoiseSource::keyed(config.seed, idx as u32 + 1, rep_key)
                };
                reports.push(config.estimator.run(site, budget, &noise)?);
            }
            config
                .aggregators
                .iter()
                .map(|agg| Ok((agg.run(&reports)?.tau_final - reference).abs()))
                .collect()
        })
        .collect();
    let errors = errors?;

    let mut rows = Vec::new();
    for (gi, agg) in config.aggregators.iter().enumerate() {
        for (ai, &alpha) in config.alphas.iter().enumerate() {
            let samples: Vec<f64> = (0..reps)
                .map(|r| errors[ai * reps + r][gi])
                .collect();
            let mean = samples.iter().sum::<f64>() / reps as f64;
            let std = if reps > 1 {
                let ss: f64 = samples.iter().map(|e| (e - mean) * (e - mean)).sum();
                (ss / (reps - 1) as f64).sqrt()
            } else {
                0.0
            };
            rows.push(MaeRow {
                aggregator: agg.as_str().into(),
                alpha,
                mean_mae: mean,
                std_mae: std,
                repetitions: reps,
            });
        }
    }
    Ok(MaeTable { rows })
}

// --- brute-force oracles ----------------------------------------------

const BRUTE_FORCE_CANDIDATE_CAP: u64 = 2_000_000;

fn replacement_alternatives(dataset: &SiteDataset, grid: &[f64]) -> Result<u64> {
    if grid.is_empty() {
        return Err(Error::InvalidParams("value grid must be non-empty".into()));
    }
    for &y in grid {
        if y < 0.0 || y > dataset.outcome_bound() {
            return Err(Error::InvalidParams(format!(
                "grid value {y} outside [0, {}]",
                dataset.outcome_bound()
            )));
        }
    }
    Ok(2 * dataset.domain_size() as u64 * grid.len() as u64)
}

/// Exact local sensitivity of `f` at the dataset under the replacement
/// neighbor model: the max of `|f(D) - f(D')|` over every single-record
/// replacement with treatment in {0, 1}, covariate in the declared
/// domain, and outcome on the given grid.
pub fn brute_force_local_sensitivity<F>(
    dataset: &SiteDataset,
    f: F,
    value_grid: &[f64],
) -> Result<f64>
where
    F: Fn(&SiteDataset) -> f64,
{
    let alts = replacement_alternatives(dataset, value_grid)?;
    let candidates = dataset.len() as u64 * alts;
    if candidates > BRUTE_FORCE_CANDIDATE_CAP {
        return Err(Error::TooLarge(candidates));
    }

    let base = f(dataset);
    let mut worst = 0.0f64;
    let mut records = dataset.records().to_vec();
    for i in 0..records.len() {
        let original = records[i];
        for treated in [false, true] {
            for covariate in 0..dataset.domain_size() {
                for &outcome in value_grid {
                    let candidate = Record { treated, outcome, covariate };
                    if candidate == original {
                        continue;
                    }
                    records[i] = candidate;
                    let neighbor = SiteDataset::new(
                        records.clone(),
                        dataset.outcome_bound(),
                        dataset.domain_size(),
                        dataset.site_id(),
                    )?;
                    worst = worst.max((base - f(&neighbor)).abs());
                }
            }
        }
        records[i] = original;
    }
    Ok(worst)
}

/// Brute-force β-smooth sensitivity by enumerating every dataset within
/// the given Hamming radius and taking
/// `max LS_f(D')·e^{-β·d(D, D')}`, with LS from
/// [`brute_force_local_sensitivity`].
pub fn brute_force_smooth_sensitivity<F>(
    dataset: &SiteDataset,
    f: F,
    beta: f64,
    value_grid: &[f64],
    radius: usize,
) -> Result<f64>
where
    F: Fn(&SiteDataset) -> f64 + Copy,
{
    let alts = replacement_alternatives(dataset, value_grid)?;
    let n = dataset.len();
    let radius = radius.min(n);
    // datasets within the radius, times the per-dataset LS cost
    let mut work: u64 = (n as u64).saturating_mul(alts);
    let mut layer: u64 = 1;
    for d in 1..=radius as u64 {
        layer = layer.saturating_mul((n as u64 - d + 1) * alts) / d;
        work = work.saturating_add(layer.saturating_mul(n as u64 * alts));
        if work > 50 * BRUTE_FORCE_CANDIDATE_CAP {
            return Err(Error::TooLarge(work));
        }
    }

    let mut records = dataset.records().to_vec();
    let mut best = 0.0f64;
    enumerate_within_radius(
        dataset,
        f,
        beta,
        value_grid,
        &mut records,
        0,
        radius,
        0,
        &mut best,
    )?;
    Ok(best)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_within_radius<F>(
    dataset: &SiteDataset,
    f: F,
    beta: f64,
    grid: &[f64],
    records: &mut Vec<Record>,
    start: usize,
    budget: usize,
    distance: usize,
    best: &mut f64,
) -> Result<()>
where
    F: Fn(&SiteDataset) -> f64 + Copy,
{
    let candidate = SiteDataset::new(
        records.clone(),
        dataset.outcome_bound(),
        dataset.domain_size(),
        dataset.site_id(),
    )?;
    let ls = brute_force_local_sensitivity(&candidate, f, grid)?;
    let score = ls * libm::exp(-beta * distance as f64);
    if score > *best {
        *best = score;
    }
    if budget == 0 {
        return Ok(());
    }
    for i in start..records.len() {
        let original = records[i];
        for treated in [false, true] {
            for covariate in 0..dataset.domain_size() {
                for &outcome in grid {
                    let alt = Record { treated, outcome, covariate };
                    if alt == original {
                        continue;
                    }
                    records[i] = alt;
                    enumerate_within_radius(
                        dataset,
                        f,
                        beta,
                        grid,
                        records,
                        i + 1,
                        budget - 1,
                        distance + 1,
                        best,
                    )?;
                }
            }
        }
        records[i] = original;
    }
    Ok(())
}

// --- exhaustive validity check over the small-dataset corpus ----------

/// Outcome of sweeping the smooth-sensitivity bound over an exhaustive
/// corpus of small datasets.
#[derive(Debug, Clone, Default)]
pub struct SmoothValidityReport {
    pub datasets_checked: u64,
    pub count_signatures: u64,
    /// Cases where the closed-form bound fell below the brute-force
    /// local sensitivity.
    pub lower_violations: u64,
    /// Cases where the bound failed `S*(D) <= e^β·S*(D')` against a
    /// replacement neighbor.
    pub smoothness_violations: u64,
}

impl SmoothValidityReport {
    pub fn ok(&self) -> bool {
        self.lower_violations == 0 && self.smoothness_violations == 0
    }
}

type CountsKey = (u32, Vec<(u32, usize, usize)>);

fn counts_key(counts: &crate::model::StratumCounts) -> CountsKey {
    (counts.domain_size(), counts.iter().map(|(x, (t, c))| (x, t, c)).collect())
}

fn eq1_value(key: &CountsKey, beta: f64, memo: &mut HashMap<CountsKey, f64>) -> f64 {
    if let Some(&v) = memo.get(key) {
        return v;
    }
    let map = key.1.iter().map(|&(x, t, c)| (x, (t, c))).collect();
    let counts = crate::model::StratumCounts::from_parts(map, key.0);
    let v = smooth_sensitivity_tau(&counts, 1.0, beta).value();
    memo.insert(key.clone(), v);
    v
}

/// Replacement neighbors at the stratum-count level: move one record
/// from an occupied (stratum, arm) slot to any (stratum, arm) slot.
fn count_neighbors(key: &CountsKey) -> Vec<CountsKey> {
    let domain = key.0;
    let mut out = Vec::new();
    for (i, &(_, t, c)) in key.1.iter().enumerate() {
        for from_treated in [true, false] {
            let occupancy = if from_treated { t } else { c };
            if occupancy == 0 {
                continue;
            }
            for to_x in 0..domain {
                for to_treated in [true, false] {
                    let mut map: std::collections::BTreeMap<u32, (usize, usize)> =
                        key.1.iter().map(|&(x, t, c)| (x, (t, c))).collect();
                    {
                        let from = map.get_mut(&key.1[i].0).unwrap();
                        if from_treated {
                            from.0 -= 1;
                        } else {
                            from.1 -= 1;
                        }
                    }
                    let to = map.entry(to_x).or_insert((0, 0));
                    if to_treated {
                        to.0 += 1;
                    } else {
                        to.1 += 1;
                    }
                    map.retain(|_, &mut (t, c)| t + c > 0);
                    out.push((domain, map.into_iter().map(|(x, (t, c))| (x, t, c)).collect()));
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Exhaustively checks, over every dataset with `n <= max_n`, covariate
/// domain sizes from the given list, outcomes on the grid, and both
/// treatment arms, that the closed-form smooth sensitivity of the
/// matching estimate (a) dominates the brute-force local sensitivity
/// and (b) is β-smooth across every replacement neighbor.
pub fn check_smooth_validity_corpus(
    max_n: usize,
    domain_sizes: &[u32],
    betas: &[f64],
    grid: &[f64],
) -> Result<SmoothValidityReport> {
    let mut report = SmoothValidityReport::default();
    let tau = |d: &SiteDataset| match_and_estimate(d).tau_hat;

    for &domain in domain_sizes {
        let mut alphabet = Vec::new();
        for treated in [false, true] {
            for covariate in 0..domain {
                for &outcome in grid {
                    alphabet.push(Record { treated, outcome, covariate });
                }
            }
        }

        for n in 1..=max_n {
            // iterate alphabet^n with an index vector
            let mut idx = vec![0usize; n];
            loop {
                let records: Vec<Record> = idx.iter().map(|&i| alphabet[i]).collect();
                let dataset = SiteDataset::new(records, 1.0, domain, "corpus")?;
                report.datasets_checked += 1;

                let counts = stratify(&dataset);
                let key = counts_key(&counts);
                let ls = brute_force_local_sensitivity(&dataset, tau, grid)?;
                for &beta in betas {
                    let mut memo = HashMap::new();
                    let s = eq1_value(&key, beta, &mut memo);
                    if s < ls - 1e-9 {
                        report.lower_violations += 1;
                    }
                }

                // advance the odometer
                let mut pos = 0;
                loop {
                    idx[pos] += 1;
                    if idx[pos] < alphabet.len() {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                    if pos == n {
                        break;
                    }
                }
                if pos == n {
                    break;
                }
            }

            // smoothness is a pure function of the stratum counts: check
            // it once per distinct count signature at this n
            let mut signatures: Vec<CountsKey> = Vec::new();
            enumerate_count_signatures(domain, n, &mut signatures);
            report.count_signatures += signatures.len() as u64;
            for &beta in betas {
                let mut memo = HashMap::new();
                for key in &signatures {
                    let s = eq1_value(key, beta, &mut memo);
                    for neighbor in count_neighbors(key) {
                        let s_n = eq1_value(&neighbor, beta, &mut memo);
                        if s > libm::exp(beta) * s_n * (1.0 + 1e-9) {
                            report.smoothness_violations += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

/// All stratum-count maps for `n` records over the given domain.
fn enumerate_count_signatures(domain: u32, n: usize, out: &mut Vec<CountsKey>) {
    // each record independently picks (stratum, arm): enumerate counts as
    // compositions of n over 2·domain slots
    fn rec(slots: &mut Vec<usize>, slot: usize, remaining: usize, domain: u32, out: &mut Vec<CountsKey>) {
        if slot == slots.len() - 1 {
            slots[slot] = remaining;
            let mut sig = Vec::new();
            for x in 0..domain {
                let t = slots[2 * x as usize];
                let c = slots[2 * x as usize + 1];
                if t + c > 0 {
                    sig.push((x, t, c));
                }
            }
            out.push((domain, sig));
            return;
        }
        for take in 0..=remaining {
            slots[slot] = take;
            rec(slots, slot + 1, remaining - take, domain, out);
        }
    }
    let mut slots = vec![0usize; 2 * domain as usize];
    rec(&mut slots, 0, n, domain, out);
}
