//! Experiment runner: expands a config grid into batteries, writes summary
//! and comparison CSVs, and backs the CLI's estimate and equivalence
//! commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::estimators::{
    equivalence_report, run_estimator, EquivalenceReport, EstimatorSpec, GmmEstimate, GmmStep,
    TransformFamily,
};
use crate::instruments::{
    instrument_matrix, transfer_matrix, InstrumentScheme, TransferMatrixResult,
    DEFAULT_NESTING_TOL,
};
use crate::panel::PanelData;
use crate::simulation::{run_battery, DesignPoint, McSummary};
use crate::transforms::{first_difference_matrix, upper_cholesky};

/// Header of the per-cell summary CSV.
pub const SUMMARY_HEADER: &str = "T,sigma_eta,delta,rho,error_model,estimator,coef,bias,sd,rmse,failures";

/// Header of the FD-vs-FOD comparison CSV (percent reductions).
pub const COMPARISON_HEADER: &str =
    "T,sigma_eta,delta,rho,error_model,comparison,coef,bias_pct,sd_pct,rmse_pct";

/// Header of the per-replication failure log.
pub const FAILURES_HEADER: &str = "T,sigma_eta,delta,rho,error_model,estimator,rep,failure";

/// Outcome of a full experiment run.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub summary_path: PathBuf,
    pub comparison_path: PathBuf,
    /// Present when at least one replication failed.
    pub failures_path: Option<PathBuf>,
    /// Cells where an estimator produced no usable replications (or a
    /// comparison was undefined).
    pub cell_errors: Vec<String>,
}

impl ExperimentOutcome {
    pub fn success(&self) -> bool {
        self.cell_errors.is_empty()
    }
}

fn coef_names(k: usize) -> Vec<String> {
    let mut names = vec!["delta".to_string()];
    if k == 2 {
        names.push("alpha".to_string());
    } else {
        for j in 1..k {
            names.push(format!("alpha{j}"));
        }
    }
    names
}

fn design_prefix(d: &DesignPoint) -> String {
    format!(
        "{},{},{},{},{}",
        d.t,
        fmt_param(d.sigma_eta),
        fmt_param(d.delta),
        fmt_param(d.rho),
        d.error_model.name()
    )
}

fn fmt_param(v: f64) -> String {
    // grid parameters are short decimals; print them as written
    format!("{v}")
}

fn fmt_stat(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_pct(v: f64) -> String {
    format!("{v:.3}")
}

/// Runs every cell of the config grid and writes `summary.csv`,
/// `comparison.csv`, and (when replications failed) `failures.csv` into the
/// config's output directory.
///
/// Failing cells never abort sibling cells: their rows carry empty
/// statistics and the outcome lists them as cell errors.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    match config.threads {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidDimension(format!("thread pool: {e}")))?;
            pool.install(|| run_experiment_inner(config))
        }
        None => run_experiment_inner(config),
    }
}

fn run_experiment_inner(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(&config.out_dir)?;
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    let mut comparison = String::from(COMPARISON_HEADER);
    comparison.push('\n');
    let mut failures = String::from(FAILURES_HEADER);
    failures.push('\n');
    let mut any_failures = false;
    let mut cell_errors = Vec::new();

    for design in config.designs() {
        let battery = run_battery(
            &design,
            &config.estimators,
            &config.scheme,
            config.replications,
            config.master_seed,
        )?;
        let prefix = design_prefix(&design);
        let names = coef_names(2);

        let mut summaries: Vec<Option<McSummary>> = Vec::with_capacity(config.estimators.len());
        for (s, spec) in config.estimators.iter().enumerate() {
            let label = spec.label();
            match battery.summarize(s) {
                Ok(mc) => {
                    for (c, name) in names.iter().enumerate() {
                        let stats = &mc.coefs[c];
                        let _ = writeln!(
                            summary,
                            "{prefix},{label},{name},{},{},{},{}",
                            fmt_stat(stats.bias),
                            fmt_stat(stats.sd),
                            fmt_stat(stats.rmse),
                            mc.failures
                        );
                    }
                    summaries.push(Some(mc));
                }
                Err(Error::EmptySummary { failures: n_fail }) => {
                    for name in &names {
                        let _ = writeln!(summary, "{prefix},{label},{name},,,,{n_fail}");
                    }
                    let dominant = battery
                        .dominant_failure(s)
                        .unwrap_or_else(|| "unknown".into());
                    cell_errors.push(format!(
                        "cell [{prefix}] estimator {label}: all {n_fail} replications failed \
                         ({dominant})"
                    ));
                    summaries.push(None);
                }
                Err(other) => return Err(other),
            }
            for row in &battery.rows {
                if let Err(f) = &row.outcomes[s] {
                    any_failures = true;
                    let _ = writeln!(failures, "{prefix},{label},{},{}", row.rep, f.label);
                }
            }
        }

        // paired comparisons: FD baseline vs FOD alternative at equal
        // (system, step)
        for (s_fd, fd_spec) in config.estimators.iter().enumerate() {
            if fd_spec.family != TransformFamily::FirstDifference {
                continue;
            }
            let partner = config.estimators.iter().enumerate().find(|(_, other)| {
                other.family == TransformFamily::Fod
                    && other.system == fd_spec.system
                    && other.step == fd_spec.step
            });
            let Some((s_fod, fod_spec)) = partner else {
                continue;
            };
            let comparison_label = format!("{}-vs-{}", fod_spec.label(), fd_spec.label());
            match (&summaries[s_fd], &summaries[s_fod]) {
                (Some(fd), Some(fod)) => {
                    for (c, name) in names.iter().enumerate() {
                        let base = &fd.coefs[c];
                        let alt = &fod.coefs[c];
                        let cells = [
                            crate::simulation::percent_reduction(base.bias.abs(), alt.bias.abs()),
                            crate::simulation::percent_reduction(base.sd, alt.sd),
                            crate::simulation::percent_reduction(base.rmse, alt.rmse),
                        ];
                        match cells {
                            [Ok(b), Ok(s), Ok(r)] => {
                                let _ = writeln!(
                                    comparison,
                                    "{prefix},{comparison_label},{name},{},{},{}",
                                    fmt_pct(b),
                                    fmt_pct(s),
                                    fmt_pct(r)
                                );
                            }
                            _ => {
                                let _ = writeln!(
                                    comparison,
                                    "{prefix},{comparison_label},{name},,,"
                                );
                                cell_errors.push(format!(
                                    "cell [{prefix}] comparison {comparison_label} ({name}): \
                                     zero baseline statistic"
                                ));
                            }
                        }
                    }
                }
                _ => {
                    // at least one side failed entirely; already reported
                    for name in &names {
                        let _ = writeln!(comparison, "{prefix},{comparison_label},{name},,,");
                    }
                }
            }
        }
    }

    let summary_path = config.out_dir.join("summary.csv");
    let comparison_path = config.out_dir.join("comparison.csv");
    std::fs::write(&summary_path, summary)?;
    std::fs::write(&comparison_path, comparison)?;
    let failures_path = if any_failures {
        let p = config.out_dir.join("failures.csv");
        std::fs::write(&p, failures)?;
        Some(p)
    } else {
        None
    };
    Ok(ExperimentOutcome {
        summary_path,
        comparison_path,
        failures_path,
        cell_errors,
    })
}

/// Everything the estimate command needs beyond the data.
#[derive(Debug, Clone)]
pub struct EstimateRequest {
    pub spec: EstimatorSpec,
    pub scheme: InstrumentScheme,
}

/// Reads a panel CSV and runs the requested estimator on it.
pub fn estimate_from_csv(path: impl AsRef<Path>, request: &EstimateRequest) -> Result<GmmEstimate> {
    let panel = PanelData::read_csv(path)?;
    run_estimator(&panel, &request.spec, &request.scheme)
}

/// Equivalence check result: estimator report plus the transfer-matrix
/// diagnostics for the first-difference factor.
#[derive(Debug)]
pub struct EquivalenceCheck {
    pub report: EquivalenceReport,
    pub transfer_residual: f64,
    /// `Some(true/false)` when a transfer matrix was found, `None` when not.
    pub transfer_nonsingular: Option<bool>,
}

/// Runs the equivalence harness plus the transfer-matrix construction on a
/// panel.
pub fn check_equivalence(panel: &PanelData, scheme: &InstrumentScheme) -> Result<EquivalenceCheck> {
    let report = equivalence_report(panel, scheme);
    let d = first_difference_matrix(panel.t_max())?;
    let gram_inverse = upper_cholesky(&d.gram())?.inverse();
    let u = upper_cholesky(&gram_inverse)?;
    let instruments: Vec<_> = (0..panel.individuals())
        .map(|i| instrument_matrix(panel, i, scheme))
        .collect::<Result<_>>()?;
    let transfer = transfer_matrix(&instruments, &u, DEFAULT_NESTING_TOL)?;
    let (transfer_residual, transfer_nonsingular) = match &transfer {
        TransferMatrixResult::Found {
            residual,
            nonsingular,
            ..
        } => (*residual, Some(*nonsingular)),
        TransferMatrixResult::NotFound { residual } => (*residual, None),
    };
    Ok(EquivalenceCheck {
        report,
        transfer_residual,
        transfer_nonsingular,
    })
}

/// Renders an estimate the way the CLI prints it.
pub fn format_estimate(estimate: &GmmEstimate, scheme: &InstrumentScheme) -> String {
    let mut out = String::new();
    let step = match estimate.step {
        GmmStep::One => "one-step",
        GmmStep::Two => "two-step",
    };
    let _ = writeln!(
        out,
        "estimator: {} {step} ({})",
        estimate.transform_kind.name(),
        scheme.name()
    );
    let _ = writeln!(out, "moments: {}", estimate.moments);
    let _ = writeln!(out, "condition number: {:.6e}", estimate.condition_number);
    if estimate.near_singular {
        let _ = writeln!(out, "warning: weighting target is near-singular");
    }
    let names = coef_names(estimate.beta.len());
    for (name, value) in names.iter().zip(estimate.beta.iter()) {
        let _ = writeln!(out, "beta[{name}] = {value:.6}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate_panel, ErrorModel};

    fn small_config(dir: &Path, reps: usize, threads: Option<usize>) -> ExperimentConfig {
        ExperimentConfig {
            n: 60,
            alpha: 0.5,
            t: vec![5],
            delta: vec![0.5],
            rho: vec![0.3],
            sigma_eta: vec![1.0],
            error_model: vec![ErrorModel::ConditionalHetero],
            replications: reps,
            master_seed: 7,
            estimators: vec![
                EstimatorSpec::parse("fd-2").unwrap(),
                EstimatorSpec::parse("fod-2").unwrap(),
            ],
            scheme: InstrumentScheme::RecentLags,
            threads,
            out_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn experiment_writes_summary_and_comparison() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), 8, None);
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.success());
        let summary = std::fs::read_to_string(&outcome.summary_path).unwrap();
        let mut lines = summary.lines();
        assert_eq!(lines.next().unwrap(), SUMMARY_HEADER);
        // 1 cell × 2 estimators × 2 coefficients
        assert_eq!(lines.count(), 4);
        let comparison = std::fs::read_to_string(&outcome.comparison_path).unwrap();
        let mut lines = comparison.lines();
        assert_eq!(lines.next().unwrap(), COMPARISON_HEADER);
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn experiment_outputs_are_thread_count_invariant() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir8 = tempfile::tempdir().unwrap();
        let out1 = run_experiment(&small_config(dir1.path(), 6, Some(1))).unwrap();
        let out8 = run_experiment(&small_config(dir8.path(), 6, Some(8))).unwrap();
        let a = std::fs::read(&out1.summary_path).unwrap();
        let b = std::fs::read(&out8.summary_path).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(&out1.comparison_path).unwrap();
        let b = std::fs::read(&out8.comparison_path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failed_cells_are_marked_and_do_not_abort_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path(), 3, None);
        cfg.t = vec![5, 30];
        cfg.n = 200;
        cfg.estimators = vec![EstimatorSpec::parse("fd-sys-2").unwrap()];
        let outcome = run_experiment(&cfg).unwrap();
        assert!(!outcome.success());
        assert_eq!(outcome.cell_errors.len(), 1);
        assert!(outcome.cell_errors[0].contains("singular-weighting"));
        let summary = std::fs::read_to_string(&outcome.summary_path).unwrap();
        // T=5 rows carry stats; T=30 rows are empty with failure counts
        assert!(summary.lines().any(|l| l.starts_with("5,") && !l.contains(",,")));
        assert!(summary.lines().any(|l| l.starts_with("30,") && l.contains(",,,,3")));
        let failures = std::fs::read_to_string(outcome.failures_path.unwrap()).unwrap();
        assert!(failures.lines().skip(1).all(|l| l.contains("singular-weighting")));
        assert_eq!(failures.lines().count(), 4); // header + 3 reps
    }

    #[test]
    fn csv_estimate_round_trips_bit_for_bit() {
        let design = crate::simulation::DesignPoint {
            n: 80,
            t: 6,
            delta: 0.5,
            alpha: 0.5,
            rho: 0.3,
            sigma_eta: 1.0,
            error_model: ErrorModel::ConditionalHetero,
        };
        let panel = generate_panel(&design, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        panel.write_csv(&path).unwrap();
        let request = EstimateRequest {
            spec: EstimatorSpec::parse("fod-2").unwrap(),
            scheme: InstrumentScheme::RecentLags,
        };
        let from_csv = estimate_from_csv(&path, &request).unwrap();
        let direct = run_estimator(&panel, &request.spec, &request.scheme).unwrap();
        assert_eq!(from_csv.beta, direct.beta);
        assert_eq!(from_csv.weighting, direct.weighting);
    }

    #[test]
    fn equivalence_check_composes_report_and_transfer() {
        let design = crate::simulation::DesignPoint {
            n: 200,
            t: 5,
            delta: 0.5,
            alpha: 0.5,
            rho: 0.3,
            sigma_eta: 1.0,
            error_model: ErrorModel::ConditionalHetero,
        };
        let panel = generate_panel(&design, 3);
        let nested = check_equivalence(&panel, &InstrumentScheme::AllLags).unwrap();
        assert!(nested.report.nested);
        assert!(nested.report.consistent);
        assert!(nested.transfer_nonsingular == Some(true));
        assert!(nested.transfer_residual < 1e-8);
        let split = check_equivalence(&panel, &InstrumentScheme::RecentLags).unwrap();
        assert!(!split.report.nested);
        assert!(split.report.consistent);
        assert!(split.transfer_nonsingular.is_none());
        assert!(split.transfer_residual >= 1e-8);
    }
}
