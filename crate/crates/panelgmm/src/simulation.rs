//! Data-generating process and Monte Carlo battery.
//!
//! Panels follow the dynamic model
//!
//! ```text
//! y_it = δ·y_{i,t−1} + α·x_it + η_i + v_it
//! x_it = ρ·x_{i,t−1} − 0.3·y_{i,t−1} + 0.5·η_i + ξ_it
//! ```
//!
//! simulated from `t = −49` with start-up values `y_{i,−50} = 0` and
//! `x_{i,−50} = 5 + 10·ξ_{i,−50}`; the burn-in is discarded and periods
//! `0..=T` are retained. `ξ` is uniform with mean zero and unit variance,
//! `η_i = σ_η·ζ_i` with `ζ` standard normal, and the idiosyncratic error is
//! either conditionally heteroskedastic (`v_it = x_it·ε_it`) or time-series
//! heteroskedastic (`v_it = λ_t·ε_it` with one uniform `λ_t` path per
//! replication).
//!
//! Replications are seeded by a counter-based rule, so batteries are
//! bit-reproducible regardless of how many worker threads execute them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{run_estimator, EstimatorSpec};
use crate::instruments::InstrumentScheme;
use crate::panel::PanelData;

/// Simulated periods before period 0; start-up values sit at `−(BURN_IN+1)`.
const BURN_IN: usize = 50;

/// Feedback of lagged `y` into `x`, fixed by the design.
const X_FEEDBACK: f64 = -0.3;

/// Loading of the individual effect on `x`, fixed by the design.
const X_EFFECT_LOADING: f64 = 0.5;

/// Idiosyncratic error model for [`generate_panel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorModel {
    /// `v_it = x_it·ε_it`: variance moves with the regressor.
    ConditionalHetero,
    /// `v_it = λ_t·ε_it`: one uniform volatility path per replication.
    TimeSeriesHetero,
}

impl ErrorModel {
    pub fn name(&self) -> &'static str {
        match self {
            ErrorModel::ConditionalHetero => "conditional-hetero",
            ErrorModel::TimeSeriesHetero => "time-series-hetero",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "conditional-hetero" => Ok(ErrorModel::ConditionalHetero),
            "time-series-hetero" => Ok(ErrorModel::TimeSeriesHetero),
            other => Err(Error::InvalidIndex(format!(
                "unknown error model `{other}` \
                 (expected `conditional-hetero` or `time-series-hetero`)"
            ))),
        }
    }
}

/// One Monte Carlo design cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignPoint {
    pub n: usize,
    pub t: usize,
    pub delta: f64,
    pub alpha: f64,
    pub rho: f64,
    pub sigma_eta: f64,
    pub error_model: ErrorModel,
}

impl DesignPoint {
    /// The generating coefficient vector `(δ, α)`.
    pub fn truth(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.delta, self.alpha])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t < 2 {
            return Err(Error::InvalidDimension(format!(
                "design needs N >= 1 and T >= 2, got N={} T={}",
                self.n, self.t
            )));
        }
        for (name, v) in [
            ("delta", self.delta),
            ("alpha", self.alpha),
            ("rho", self.rho),
            ("sigma_eta", self.sigma_eta),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidDimension(format!("{name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Uniform draw on `[−√3, √3)`: mean zero, variance one.
pub fn uniform_unit_variance<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * 3.0_f64.sqrt()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Counter-based per-replication seed: a fixed mix of the master seed and
/// the replication index, independent of execution order.
pub fn rep_seed(master_seed: u64, rep: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(rep.wrapping_add(1)))
}

/// Runs one individual's recursion over `t = −49..=T` given its effect and
/// pre-drawn shock paths (index 0 is period `−49`). Returns the retained
/// `(y, x)` levels for periods `0..=T`.
#[allow(clippy::too_many_arguments)]
fn simulate_individual(
    design: &DesignPoint,
    eta: f64,
    xi_start: f64,
    xi: &[f64],
    eps: &[f64],
    lambda: Option<&[f64]>,
    y_out: &mut [f64],
    x_out: &mut [f64],
) {
    let steps = BURN_IN + design.t; // periods −49..=T
    debug_assert_eq!(xi.len(), steps);
    debug_assert_eq!(eps.len(), steps);
    let mut y_prev = 0.0;
    let mut x_prev = 5.0 + 10.0 * xi_start;
    for s in 0..steps {
        let x_cur = design.rho * x_prev + X_FEEDBACK * y_prev + X_EFFECT_LOADING * eta + xi[s];
        let shock_scale = match lambda {
            None => x_cur,
            Some(l) => l[s],
        };
        let v = shock_scale * eps[s];
        let y_cur = design.delta * y_prev + design.alpha * x_cur + eta + v;
        // period index: s = 0 is t = −49, so t = s − 49
        if s + 1 >= BURN_IN {
            let t = s + 1 - BURN_IN;
            y_out[t] = y_cur;
            x_out[t] = x_cur;
        }
        y_prev = y_cur;
        x_prev = x_cur;
    }
}

/// Generates one balanced panel from the design under the given seed.
///
/// The same `(design, seed)` pair always produces a bit-identical panel.
pub fn generate_panel(design: &DesignPoint, seed: u64) -> PanelData {
    design.validate().expect("invalid design point");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let steps = BURN_IN + design.t;
    let lambda: Option<Vec<f64>> = match design.error_model {
        ErrorModel::ConditionalHetero => None,
        ErrorModel::TimeSeriesHetero => {
            Some((0..steps).map(|_| uniform_unit_variance(&mut rng)).collect())
        }
    };
    let mut y = DMatrix::zeros(design.n, design.t + 1);
    let mut x = vec![DMatrix::zeros(design.t + 1, 1); design.n];
    let mut xi = vec![0.0; steps];
    let mut eps = vec![0.0; steps];
    let mut y_row = vec![0.0; design.t + 1];
    let mut x_row = vec![0.0; design.t + 1];
    for i in 0..design.n {
        let zeta: f64 = StandardNormal.sample(&mut rng);
        let eta = design.sigma_eta * zeta;
        let xi_start = uniform_unit_variance(&mut rng);
        for s in 0..steps {
            xi[s] = uniform_unit_variance(&mut rng);
            eps[s] = StandardNormal.sample(&mut rng);
        }
        simulate_individual(
            design,
            eta,
            xi_start,
            &xi,
            &eps,
            lambda.as_deref(),
            &mut y_row,
            &mut x_row,
        );
        for t in 0..=design.t {
            y[(i, t)] = y_row[t];
            x[i][(t, 0)] = x_row[t];
        }
    }
    PanelData::from_parts(y, x, Some(design.truth())).expect("simulated panel is well formed")
}

/// A replication that errored, tagged with the error kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepFailure {
    pub label: String,
    pub message: String,
}

/// Estimate or failure for one (replication, estimator) pair.
pub type RepOutcome = std::result::Result<DVector<f64>, RepFailure>;

/// Outcomes of all estimator specs on one replication's panel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryRow {
    pub rep: usize,
    pub outcomes: Vec<RepOutcome>,
}

/// Result of a replication battery: every spec evaluated on the same panels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryResult {
    pub design: DesignPoint,
    pub specs: Vec<EstimatorSpec>,
    pub rows: Vec<BatteryRow>,
}

impl BatteryResult {
    /// Successful estimates for one spec, in replication order.
    pub fn estimates(&self, spec_index: usize) -> Vec<DVector<f64>> {
        self.rows
            .iter()
            .filter_map(|row| row.outcomes[spec_index].as_ref().ok().cloned())
            .collect()
    }

    /// Failure count for one spec.
    pub fn failures(&self, spec_index: usize) -> usize {
        self.rows
            .iter()
            .filter(|row| row.outcomes[spec_index].is_err())
            .count()
    }

    /// Most common failure label for one spec, if any replication failed.
    pub fn dominant_failure(&self, spec_index: usize) -> Option<String> {
        let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
        for row in &self.rows {
            if let Err(f) = &row.outcomes[spec_index] {
                *counts.entry(f.label.as_str()).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .max_by_key(|(_, c)| *c)
            .map(|(l, _)| l.to_string())
    }

    /// Bias/sd/rmse summary for one spec against the design truth.
    pub fn summarize(&self, spec_index: usize) -> Result<McSummary> {
        let estimates = self.estimates(spec_index);
        let failures = self.failures(spec_index);
        if estimates.is_empty() {
            return Err(Error::EmptySummary { failures });
        }
        let mut summary = summarize(&estimates, &self.design.truth())?;
        summary.failures = failures;
        Ok(summary)
    }
}

/// Runs `reps` replications of the design, evaluating every estimator spec
/// on the same generated panel (paired comparisons). Replications run in
/// parallel; results are merged by replication index, so the outcome is
/// independent of thread count.
pub fn run_battery(
    design: &DesignPoint,
    specs: &[EstimatorSpec],
    scheme: &InstrumentScheme,
    reps: usize,
    master_seed: u64,
) -> Result<BatteryResult> {
    design.validate()?;
    if reps == 0 {
        return Err(Error::InvalidDimension("battery needs reps >= 1".into()));
    }
    let rows: Vec<BatteryRow> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let panel = generate_panel(design, rep_seed(master_seed, rep as u64));
            let outcomes = specs
                .iter()
                .map(|spec| {
                    run_estimator(&panel, spec, scheme)
                        .map(|e| e.beta)
                        .map_err(|e| RepFailure {
                            label: e.label().to_string(),
                            message: e.to_string(),
                        })
                })
                .collect();
            BatteryRow { rep, outcomes }
        })
        .collect();
    Ok(BatteryResult {
        design: *design,
        specs: specs.to_vec(),
        rows,
    })
}

/// Per-coefficient Monte Carlo statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefSummary {
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
}

/// Bias, standard deviation, and root mean squared error per coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub coefs: Vec<CoefSummary>,
    /// Replications entering the summary.
    pub used: usize,
    /// Replications excluded because estimation failed.
    pub failures: usize,
}

/// Summarizes replication estimates against the truth.
///
/// The standard deviation uses the population divisor `n`, which makes
/// `rmse² = bias² + sd²` hold exactly.
pub fn summarize(estimates: &[DVector<f64>], truth: &DVector<f64>) -> Result<McSummary> {
    if estimates.is_empty() {
        return Err(Error::EmptySummary { failures: 0 });
    }
    let k = truth.len();
    for (r, e) in estimates.iter().enumerate() {
        if e.len() != k {
            return Err(Error::InvalidDimension(format!(
                "estimate {r} has {} coefficients, expected {k}",
                e.len()
            )));
        }
    }
    let n = estimates.len() as f64;
    let mut coefs = Vec::with_capacity(k);
    for j in 0..k {
        let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / n;
        let bias = mean - truth[j];
        let var = estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / n;
        let mse = estimates.iter().map(|e| (e[j] - truth[j]).powi(2)).sum::<f64>() / n;
        coefs.push(CoefSummary {
            bias,
            sd: var.sqrt(),
            rmse: mse.sqrt(),
        });
    }
    Ok(McSummary {
        coefs,
        used: estimates.len(),
        failures: 0,
    })
}

/// `100·(baseline − alternative)/baseline`.
///
/// For bias comparisons the inputs must be absolute biases.
pub fn percent_reduction(baseline: f64, alternative: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(100.0 * (baseline - alternative) / baseline)
}
