//! Command-line entry point: dataset generation, per-site private
//! reports, server aggregation, sensitivity inspection, experiment
//! sweeps, and the brute-force oracle self-check.
//!
//! JSON results go to standard output, diagnostics to standard error.
//! Exit codes: 0 success, 1 I/O or parse failure, 2 precondition
//! violation, 3 internal invariant failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedate_core::aggregation::AggregatorKind;
use fedate_core::dp::{beta_for, MechanismTag, NoiseSource, RandomStream};
use fedate_core::error::Error;
use fedate_core::estimators::EstimatorKind;
use fedate_core::matching::{
    local_sensitivity_bound, smooth_sensitivity_tau_detailed, smooth_sensitivity_variance,
};
use fedate_core::model::{
    load_csv, load_csv_with_sidecar, save_csv, stratify, PrivacyBudget, PrivateSiteReport,
    SiteDataset,
};
use fedate_core::sim::{
    check_smooth_validity_corpus, generate_synth, run_experiment, ExperimentConfig, SynthParams,
};

#[derive(Parser)]
#[command(name = "fedate", version, about = "Federated DP average-treatment-effect toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic observational dataset as CSV plus metadata sidecar.
    Generate {
        /// Number of records
        #[arg(long)]
        n: usize,
        /// Covariate domain size |X|
        #[arg(long = "domain-size")]
        domain_size: u32,
        /// Treatment imbalance; drawn from Uniform[-1, 1] when omitted
        #[arg(long)]
        a: Option<f64>,
        /// Outcome slope in [0, 0.4]; drawn from Uniform[0, 0.4] when omitted
        #[arg(long)]
        b: Option<f64>,
        /// True average treatment effect
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// RNG seed; entropy-based (and echoed) when omitted
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path; the sidecar lands at `<out>.meta.json`
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one per-site estimator and print the private report as JSON.
    SiteReport {
        /// Dataset CSV (metadata read from `<data>.meta.json` unless -b/--domain-size given)
        #[arg(long)]
        data: PathBuf,
        /// Outcome bound B, overriding the sidecar
        #[arg(short = 'b', long = "outcome-bound")]
        outcome_bound: Option<f64>,
        /// Covariate domain size, overriding the sidecar
        #[arg(long = "domain-size")]
        domain_size: Option<u32>,
        #[arg(long, value_parser = parse_estimator)]
        estimator: EstimatorKind,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Stream key component: site index
        #[arg(long, default_value_t = 1)]
        site: u32,
        /// Stream key component: repetition index
        #[arg(long, default_value_t = 0)]
        repetition: u32,
    },
    /// Combine site report JSON files into a final estimate.
    Aggregate {
        #[arg(long, value_parser = parse_aggregator)]
        method: AggregatorKind,
        /// Report files produced by site-report
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Print the sensitivity figures of a dataset's matching estimate.
    Sensitivity {
        #[arg(long)]
        data: PathBuf,
        #[arg(short = 'b', long = "outcome-bound")]
        outcome_bound: Option<f64>,
        #[arg(long = "domain-size")]
        domain_size: Option<u32>,
        /// Smoothing parameter; alternatively derive it from --epsilon/--delta
        #[arg(long, conflicts_with_all = ["epsilon", "delta"])]
        beta: Option<f64>,
        #[arg(long, requires = "delta")]
        epsilon: Option<f64>,
        #[arg(long, requires = "epsilon")]
        delta: Option<f64>,
    },
    /// Run a privacy-utility sweep from a JSON config and write the MAE table.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path for the MAE table
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate the closed-form sensitivity bounds against brute force
    /// on an exhaustive corpus of small datasets.
    OracleCheck {
        /// Largest dataset size to enumerate
        #[arg(long, default_value_t = 4)]
        max_n: usize,
        /// Smoothing parameters to check
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.04096, 0.5, 2.0])]
        betas: Vec<f64>,
    },
}

fn parse_estimator(s: &str) -> fedate_core::Result<EstimatorKind> {
    s.parse()
}

fn parse_aggregator(s: &str) -> fedate_core::Result<AggregatorKind> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedate: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0);
            let seed = nanos ^ (std::process::id() as u64).rotate_left(32);
            eprintln!("fedate: seed not given, using {seed}");
            seed
        }
    }
}

fn load_dataset(
    data: &Path,
    outcome_bound: Option<f64>,
    domain_size: Option<u32>,
) -> fedate_core::Result<SiteDataset> {
    match (outcome_bound, domain_size) {
        (Some(b), Some(ds)) => load_csv(data, b, ds),
        (None, None) => load_csv_with_sidecar(data),
        _ => Err(Error::InvalidParams(
            "give both --outcome-bound and --domain-size, or neither (sidecar)".into(),
        )),
    }
}

fn run(command: Command) -> fedate_core::Result<()> {
    match command {
        Command::Generate { n, domain_size, a, b, tau, seed, out } => {
            let seed = resolve_seed(seed);
            let params = SynthParams { n, domain_size, a, b, tau };
            let mut rng = RandomStream::keyed(seed, 0, 0, MechanismTag::DataGen);
            let dataset = generate_synth(&params, &mut rng)?;
            let label = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "synth".into());
            let dataset = dataset.with_site_id(label);
            save_csv(&dataset, &out)?;
            eprintln!("fedate: wrote {n} records to {}", out.display());
            Ok(())
        }
        Command::SiteReport {
            data,
            outcome_bound,
            domain_size,
            estimator,
            epsilon,
            delta,
            seed,
            site,
            repetition,
        } => {
            let dataset = load_dataset(&data, outcome_bound, domain_size)?;
            let budget = PrivacyBudget::new(epsilon, delta)?;
            let noise = NoiseSource::keyed(resolve_seed(seed), site, repetition);
            let report = estimator.run(&dataset, budget, &noise)?;
            println!("{}", report.to_json()?);
            Ok(())
        }
        Command::Aggregate { method, reports } => {
            let mut parsed = Vec::with_capacity(reports.len());
            for path in &reports {
                let text = std::fs::read_to_string(path)?;
                parsed.push(PrivateSiteReport::from_wire(serde_json::from_str(&text)?)?);
            }
            let result = method.run(&parsed)?;
            println!("{}", serde_json::to_string(&result)?);
            Ok(())
        }
        Command::Sensitivity { data, outcome_bound, domain_size, beta, epsilon, delta } => {
            let dataset = load_dataset(&data, outcome_bound, domain_size)?;
            let beta = match (beta, epsilon, delta) {
                (Some(b), _, _) => b,
                (None, Some(e), Some(d)) => beta_for(e, d)?,
                _ => {
                    return Err(Error::InvalidParams(
                        "give --beta, or --epsilon together with --delta".into(),
                    ))
                }
            };
            if !(beta > 0.0) {
                return Err(Error::InvalidParams("beta must be positive".into()));
            }
            let counts = stratify(&dataset);
            let b = dataset.outcome_bound();
            let local = local_sensitivity_bound(&counts, b);
            let (smooth_tau, k_star, x_star) = smooth_sensitivity_tau_detailed(&counts, b, beta);
            let smooth_var = smooth_sensitivity_variance(&counts, b, beta);
            println!("beta: {beta}");
            println!("local sensitivity bound (ate): {local}");
            let stratum = match x_star {
                Some(x) => format!("stratum {x}"),
                None => "an absent stratum".to_string(),
            };
            println!("smooth sensitivity (ate): {smooth_tau} (max at k={k_star}, {stratum})");
            println!("smooth sensitivity (variance): {}", smooth_var.value());
            Ok(())
        }
        Command::Experiment { config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let config: ExperimentConfig =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let table = run_experiment(&config)?;
            std::fs::write(&out, table.to_csv())?;
            for agg in &config.aggregators {
                let summary: Vec<String> = config
                    .alphas
                    .iter()
                    .filter_map(|&alpha| table.get(*agg, alpha))
                    .map(|row| format!("alpha={} mae={:.6}+-{:.6}", row.alpha, row.mean_mae, row.std_mae))
                    .collect();
                println!("{}: {}", agg.as_str(), summary.join(" "));
            }
            eprintln!("fedate: wrote {}", out.display());
            Ok(())
        }
        Command::OracleCheck { max_n, betas } => {
            let report =
                check_smooth_validity_corpus(max_n, &[1, 2], &betas, &[0.0, 0.5, 1.0])?;
            println!(
                "checked {} datasets ({} count signatures), lower violations {}, smoothness violations {}",
                report.datasets_checked,
                report.count_signatures,
                report.lower_violations,
                report.smoothness_violations
            );
            if report.ok() {
                Ok(())
            } else {
                Err(Error::Internal("sensitivity bound violated on the corpus".into()))
            }
        }
    }
}
