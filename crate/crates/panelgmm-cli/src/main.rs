//! Batch CLI for dynamic panel GMM.
//!
//! Subcommands:
//! - `run-experiment <config>` — run a Monte Carlo grid and write
//!   summary/comparison CSVs,
//! - `estimate <csv>` — estimate a user panel,
//! - `check-equivalence` — nesting verdict plus FD/FOD two-step comparison
//!   on a CSV panel or a synthetic design.
//!
//! Exit codes: 0 success, 1 input/validation error, 2 estimation or cell
//! error, 3 inconsistent equivalence verdict.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use panelgmm::config::ExperimentConfig;
use panelgmm::runner::{
    check_equivalence, estimate_from_csv, format_estimate, run_experiment, EstimateRequest,
};
use panelgmm::{
    generate_panel, DesignPoint, Error, ErrorModel, EstimatorSpec, GmmEstimate, GmmStep,
    InstrumentScheme, PanelData, TransformFamily,
};

#[derive(Parser)]
#[command(
    name = "panelgmm",
    about = "Dynamic panel GMM: experiments, estimation, and FD/FOD equivalence checks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment grid from a config file.
    RunExperiment {
        /// Flat key-value config file.
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's replication count.
        #[arg(long)]
        reps: Option<usize>,
        /// Override the config's worker thread count.
        #[arg(long)]
        threads: Option<usize>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate a panel CSV (header `id,t,y,x1[,x2,…]`).
    Estimate {
        data: PathBuf,
        /// Base transform: `fd` or `fod`.
        #[arg(long, default_value = "fd")]
        transform: String,
        /// Use the system estimator (transformed plus levels equations).
        #[arg(long)]
        system: bool,
        /// Instrument scheme: `all-lags` or `recent-lags`.
        #[arg(long, default_value = "recent-lags")]
        scheme: String,
        /// 1 (fixed weighting) or 2 (residual-based reweighting).
        #[arg(long, default_value_t = 2)]
        step: u8,
        /// Also write the estimate as a JSON record.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check whether FD and FOD two-step GMM coincide on a panel.
    CheckEquivalence {
        /// Panel CSV; omit to use a synthetic panel from the design flags.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Instrument scheme: `all-lags` or `recent-lags`.
        #[arg(long, default_value = "recent-lags")]
        scheme: String,
        #[command(flatten)]
        design: DesignArgs,
        /// Seed for the synthetic panel.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long, default_value_t = 6)]
    t: usize,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_eta: f64,
    #[arg(long, default_value = "conditional-hetero")]
    error_model: String,
}

#[derive(Serialize)]
struct EstimateRecord {
    transform: String,
    system: bool,
    step: u8,
    scheme: String,
    moments: usize,
    condition_number: f64,
    near_singular: bool,
    beta: Vec<f64>,
    initial_beta: Option<Vec<f64>>,
}

impl EstimateRecord {
    fn new(estimate: &GmmEstimate, request: &EstimateRequest) -> Self {
        EstimateRecord {
            transform: match request.spec.family {
                TransformFamily::FirstDifference => "fd".into(),
                TransformFamily::Fod => "fod".into(),
            },
            system: request.spec.system,
            step: match estimate.step {
                GmmStep::One => 1,
                GmmStep::Two => 2,
            },
            scheme: request.scheme.name().to_string(),
            moments: estimate.moments,
            condition_number: estimate.condition_number,
            near_singular: estimate.near_singular,
            beta: estimate.beta.iter().copied().collect(),
            initial_beta: estimate
                .initial_beta
                .as_ref()
                .map(|b| b.iter().copied().collect()),
        }
    }
}

fn exit_code_for(error: &Error) -> u8 {
    if error.is_validation() {
        1
    } else {
        2
    }
}

fn fail(error: &Error) -> ExitCode {
    eprintln!("error: {error}");
    ExitCode::from(exit_code_for(error))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::RunExperiment {
            config,
            seed,
            reps,
            threads,
            out,
        } => run_experiment_command(config, seed, reps, threads, out),
        Command::Estimate {
            data,
            transform,
            system,
            scheme,
            step,
            json,
        } => estimate_command(data, &transform, system, &scheme, step, json),
        Command::CheckEquivalence {
            data,
            scheme,
            design,
            seed,
        } => check_equivalence_command(data, &scheme, &design, seed),
    }
}

fn run_experiment_command(
    config_path: PathBuf,
    seed: Option<u64>,
    reps: Option<usize>,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> ExitCode {
    let mut config = match ExperimentConfig::from_file(&config_path) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    if let Some(reps) = reps {
        config.replications = reps;
    }
    if let Some(threads) = threads {
        config.threads = Some(threads);
    }
    if let Some(out) = out {
        config.out_dir = out;
    }
    match run_experiment(&config) {
        Ok(outcome) => {
            println!("wrote {}", outcome.summary_path.display());
            println!("wrote {}", outcome.comparison_path.display());
            if let Some(p) = &outcome.failures_path {
                println!("wrote {}", p.display());
            }
            if outcome.success() {
                ExitCode::SUCCESS
            } else {
                for line in &outcome.cell_errors {
                    eprintln!("cell error: {line}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => fail(&e),
    }
}

fn parse_spec(transform: &str, system: bool, step: u8) -> Result<EstimatorSpec, Error> {
    let family = match transform {
        "fd" => TransformFamily::FirstDifference,
        "fod" => TransformFamily::Fod,
        other => {
            return Err(Error::InvalidIndex(format!(
                "unknown transform `{other}` (expected `fd` or `fod`)"
            )))
        }
    };
    let step = match step {
        1 => GmmStep::One,
        2 => GmmStep::Two,
        other => {
            return Err(Error::InvalidIndex(format!(
                "step must be 1 or 2, got {other}"
            )))
        }
    };
    Ok(EstimatorSpec {
        family,
        system,
        step,
    })
}

fn estimate_command(
    data: PathBuf,
    transform: &str,
    system: bool,
    scheme: &str,
    step: u8,
    json: Option<PathBuf>,
) -> ExitCode {
    let request = match (parse_spec(transform, system, step), InstrumentScheme::from_name(scheme))
    {
        (Ok(spec), Ok(scheme)) => EstimateRequest { spec, scheme },
        (Err(e), _) | (_, Err(e)) => return fail(&e),
    };
    match estimate_from_csv(&data, &request) {
        Ok(estimate) => {
            print!("{}", format_estimate(&estimate, &request.scheme));
            if let Some(path) = json {
                let record = EstimateRecord::new(&estimate, &request);
                match serde_json::to_string_pretty(&record) {
                    Ok(text) => {
                        if let Err(e) = std::fs::write(&path, text + "\n") {
                            return fail(&Error::Io(e));
                        }
                        println!("wrote {}", path.display());
                    }
                    Err(e) => {
                        eprintln!("error: serializing record: {e}");
                        return ExitCode::from(2);
                    }
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn check_equivalence_command(
    data: Option<PathBuf>,
    scheme: &str,
    design: &DesignArgs,
    seed: u64,
) -> ExitCode {
    let scheme = match InstrumentScheme::from_name(scheme) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let panel = match &data {
        Some(path) => match PanelData::read_csv(path) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        },
        None => {
            let error_model = match ErrorModel::from_name(&design.error_model) {
                Ok(m) => m,
                Err(e) => return fail(&e),
            };
            let point = DesignPoint {
                n: design.n,
                t: design.t,
                delta: design.delta,
                alpha: design.alpha,
                rho: design.rho,
                sigma_eta: design.sigma_eta,
                error_model,
            };
            if let Err(e) = point.validate() {
                return fail(&e);
            }
            generate_panel(&point, seed)
        }
    };
    let check = match check_equivalence(&panel, &scheme) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let report = &check.report;
    if report.nested {
        println!("nesting: NESTED");
    } else {
        match report.witness {
            Some(w) => println!(
                "nesting: NOT NESTED (witness s={} t={} column={})",
                w.s, w.t, w.column
            ),
            None => println!("nesting: NOT NESTED"),
        }
    }
    if report.degenerate {
        println!("warning: degenerate instrument data; verdict may be unreliable");
    }
    match check.transfer_nonsingular {
        Some(nonsingular) => println!(
            "transfer residual: {:.3e} (nonsingular: {nonsingular})",
            check.transfer_residual
        ),
        None => println!(
            "transfer residual: {:.3e} (no transfer matrix)",
            check.transfer_residual
        ),
    }
    let mut estimation_error = None;
    match &report.fd {
        Ok(e) => println!(
            "fd  two-step beta: {}",
            e.beta
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
        Err(e) => {
            println!("fd  two-step: error: {e}");
            estimation_error = Some(exit_code_for(e));
        }
    }
    match &report.fod {
        Ok(e) => println!(
            "fod two-step beta: {}",
            e.beta
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
        Err(e) => {
            println!("fod two-step: error: {e}");
            estimation_error = Some(exit_code_for(e));
        }
    }
    if let Some(diff) = report.max_rel_diff {
        let verdict = if report.nested { "NESTED" } else { "NOT NESTED" };
        println!("summary: {verdict}; max rel diff {diff:.3e}");
    }
    if let Some(code) = estimation_error {
        return ExitCode::from(code);
    }
    if report.consistent {
        println!("verdict: CONSISTENT");
        ExitCode::SUCCESS
    } else {
        println!("verdict: INCONSISTENT (nesting and estimate difference disagree)");
        ExitCode::from(3)
    }
}
