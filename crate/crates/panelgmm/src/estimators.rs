//! One-step, two-step, and system GMM estimators for the transformed panel
//! model, plus the FD/FOD equivalence harness.
//!
//! All estimators share the sandwich
//!
//! ```text
//! β = [ (ΣᵢX̃ᵢᵀZᵢ) W (ΣᵢZᵢᵀX̃ᵢ) ]⁻¹ (ΣᵢX̃ᵢᵀZᵢ) W (ΣᵢZᵢᵀỹᵢ)
//! ```
//!
//! and differ only in the transform applied to the data and in the weighting
//! matrix `W`. One-step weights invert `Σ Zᵢᵀ(K·Kᵀ)Zᵢ` (which reduces to
//! `Σ ZᵢᵀZᵢ` under forward orthogonal deviations); two-step weights invert
//! the residual moment covariance `Σ Zᵢᵀẽᵢẽᵢᵀ Zᵢ`, with residuals always
//! formed in levels and then transformed. System estimators stack the
//! transformed equations on top of the levels equations with lagged
//! differences instrumenting the latter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::instruments::{
    instrument_matrix, nesting_check, system_instruments, InstrumentScheme, NestingWitness,
    DEFAULT_NESTING_TOL,
};
use crate::panel::PanelData;
use crate::transforms::{
    first_difference_matrix, fod_matrix, system_extend, upper_cholesky, TransformKind,
    TransformMatrix,
};

/// Weighting targets with condition numbers above this are flagged on the
/// estimate rather than rejected.
pub const NEAR_SINGULAR_CONDITION: f64 = 1e12;

/// One-step or two-step GMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmmStep {
    One,
    Two,
}

/// Base transform family used by an estimator spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformFamily {
    FirstDifference,
    Fod,
}

/// What produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Fd,
    Fod,
    FdSys,
    FodSys,
    Custom,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Fd => "fd",
            EstimatorKind::Fod => "fod",
            EstimatorKind::FdSys => "fd-sys",
            EstimatorKind::FodSys => "fod-sys",
            EstimatorKind::Custom => "custom",
        }
    }
}

/// An estimator selection: transform family, system or transformed-only,
/// one- or two-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub family: TransformFamily,
    pub system: bool,
    pub step: GmmStep,
}

impl EstimatorSpec {
    /// Parses labels like `fd-2`, `fod-1`, `fd-sys-2`, `fod-sys-1`.
    pub fn parse(token: &str) -> Result<Self> {
        let (head, step) = token.rsplit_once('-').ok_or_else(|| {
            Error::InvalidIndex(format!("bad estimator `{token}` (expected e.g. `fd-2`)"))
        })?;
        let step = match step {
            "1" => GmmStep::One,
            "2" => GmmStep::Two,
            other => {
                return Err(Error::InvalidIndex(format!(
                    "bad estimator step `{other}` in `{token}` (expected 1 or 2)"
                )))
            }
        };
        let (family, system) = match head {
            "fd" => (TransformFamily::FirstDifference, false),
            "fod" => (TransformFamily::Fod, false),
            "fd-sys" => (TransformFamily::FirstDifference, true),
            "fod-sys" => (TransformFamily::Fod, true),
            other => {
                return Err(Error::InvalidIndex(format!(
                    "bad estimator family `{other}` in `{token}`"
                )))
            }
        };
        Ok(EstimatorSpec {
            family,
            system,
            step,
        })
    }

    pub fn label(&self) -> String {
        let family = match (self.family, self.system) {
            (TransformFamily::FirstDifference, false) => "fd",
            (TransformFamily::Fod, false) => "fod",
            (TransformFamily::FirstDifference, true) => "fd-sys",
            (TransformFamily::Fod, true) => "fod-sys",
        };
        let step = match self.step {
            GmmStep::One => 1,
            GmmStep::Two => 2,
        };
        format!("{family}-{step}")
    }

    /// Builds the base (non-system) transform at the panel's `T`.
    pub fn base_transform(&self, t: usize) -> Result<TransformMatrix> {
        match self.family {
            TransformFamily::FirstDifference => first_difference_matrix(t),
            TransformFamily::Fod => fod_matrix(t),
        }
    }
}

/// A fitted GMM estimate with its weighting diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmEstimate {
    /// Coefficients, `(δ, α…)`.
    pub beta: DVector<f64>,
    /// The realized weighting matrix `W`.
    pub weighting: DMatrix<f64>,
    /// Moment count.
    pub moments: usize,
    pub step: GmmStep,
    pub transform_kind: EstimatorKind,
    /// Condition number of the weighting target before inversion.
    pub condition_number: f64,
    /// Initial coefficients used for two-step residuals.
    pub initial_beta: Option<DVector<f64>>,
    /// The weighting target exceeded [`NEAR_SINGULAR_CONDITION`].
    pub near_singular: bool,
}

fn kind_of(transform: &TransformMatrix, system: bool) -> EstimatorKind {
    match (transform.kind(), system) {
        (TransformKind::Difference, false) => EstimatorKind::Fd,
        (TransformKind::Fod, false) => EstimatorKind::Fod,
        (TransformKind::Difference, true) => EstimatorKind::FdSys,
        (TransformKind::Fod, true) => EstimatorKind::FodSys,
        _ => EstimatorKind::Custom,
    }
}

/// Solves the GMM sandwich for the coefficient vector.
///
/// `xt`, `yt`, and `z` hold per-individual transformed regressors, outcomes,
/// and dense instrument matrices; `w` is a symmetric positive definite
/// weighting matrix on the moment space.
pub fn gmm_kernel(
    xt: &[DMatrix<f64>],
    yt: &[DVector<f64>],
    z: &[DMatrix<f64>],
    w: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if xt.is_empty() || xt.len() != yt.len() || xt.len() != z.len() {
        return Err(Error::InvalidDimension(
            "kernel inputs must be nonempty and equally long".into(),
        ));
    }
    let m = w.nrows();
    if w.ncols() != m {
        return Err(Error::InvalidDimension("weighting matrix must be square".into()));
    }
    let k = xt[0].ncols();
    let mut g = DMatrix::zeros(m, k);
    let mut q = DVector::zeros(m);
    for ((xi, yi), zi) in xt.iter().zip(yt).zip(z) {
        if zi.ncols() != m || zi.nrows() != xi.nrows() || yi.len() != xi.nrows() {
            return Err(Error::InvalidDimension(format!(
                "kernel dimension mismatch: Z {}x{}, X {}x{}, y {}",
                zi.nrows(),
                zi.ncols(),
                xi.nrows(),
                xi.ncols(),
                yi.len()
            )));
        }
        g += zi.transpose() * xi;
        q += zi.transpose() * yi;
    }
    let gw = g.transpose() * w; // K×m
    let mut sandwich = &gw * &g; // K×K
    // enforce exact symmetry before factoring
    let st = sandwich.transpose();
    sandwich = (sandwich + st) * 0.5;
    let rhs = &gw * &q;
    let factor = upper_cholesky(&sandwich).map_err(|_| {
        let sv = sandwich.clone().svd(false, false).singular_values;
        let condition = if sv.min() > 0.0 {
            sv.max() / sv.min()
        } else {
            f64::INFINITY
        };
        Error::Identification { condition }
    })?;
    Ok(factor.solve_vector(&rhs))
}

/// Inverts a weighting target via Cholesky, reporting its condition number.
fn invert_weighting_target(
    target: &DMatrix<f64>,
    individuals: usize,
) -> Result<(DMatrix<f64>, f64, bool)> {
    let moments = target.nrows();
    let factor = upper_cholesky(target).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, .. } => Error::SingularWeighting {
            moments,
            individuals,
            pivot,
        },
        other => other,
    })?;
    let sv = target.clone().svd(false, false).singular_values;
    let condition = if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    };
    Ok((
        factor.inverse(),
        condition,
        condition > NEAR_SINGULAR_CONDITION,
    ))
}

/// Per-individual transformed data and dense instruments for the
/// transformed-equations estimators.
struct TransformedSystem {
    xt: Vec<DMatrix<f64>>,
    yt: Vec<DVector<f64>>,
    z: Vec<DMatrix<f64>>,
    moments: usize,
}

fn check_base_transform(panel: &PanelData, transform: &TransformMatrix) -> Result<()> {
    if transform.kind() == TransformKind::SystemExtended {
        return Err(Error::InvalidDimension(
            "system-extended transform passed to a non-system estimator".into(),
        ));
    }
    if transform.cols() != panel.t_max() {
        return Err(Error::InvalidDimension(format!(
            "transform has {} columns but the panel has T = {}",
            transform.cols(),
            panel.t_max()
        )));
    }
    Ok(())
}

fn transformed_system(
    panel: &PanelData,
    transform: &TransformMatrix,
    scheme: &InstrumentScheme,
) -> Result<TransformedSystem> {
    check_base_transform(panel, transform)?;
    let n = panel.individuals();
    let mut xt = Vec::with_capacity(n);
    let mut yt = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut moments = 0;
    for i in 0..n {
        let zi = instrument_matrix(panel, i, scheme)?;
        if i == 0 {
            moments = zi.total_moments();
        } else if zi.total_moments() != moments {
            return Err(Error::InvalidInstrument(
                "instrument shapes differ across individuals".into(),
            ));
        }
        z.push(zi.to_dense());
        xt.push(transform.entries() * panel.regressor_matrix(i));
        yt.push(transform.entries() * panel.outcome_vector(i));
    }
    Ok(TransformedSystem { xt, yt, z, moments })
}

/// One-step GMM on transformed equations: weights invert
/// `Σ Zᵢᵀ(K·Kᵀ)Zᵢ`.
pub fn one_step(
    panel: &PanelData,
    transform: &TransformMatrix,
    scheme: &InstrumentScheme,
) -> Result<GmmEstimate> {
    let sys = transformed_system(panel, transform, scheme)?;
    let lambda = transform.gram();
    let mut target = DMatrix::zeros(sys.moments, sys.moments);
    for zi in &sys.z {
        target += zi.transpose() * &lambda * zi;
    }
    let (w, condition_number, near_singular) =
        invert_weighting_target(&target, panel.individuals())?;
    let beta = gmm_kernel(&sys.xt, &sys.yt, &sys.z, &w)?;
    Ok(GmmEstimate {
        beta,
        weighting: w,
        moments: sys.moments,
        step: GmmStep::One,
        transform_kind: kind_of(transform, false),
        condition_number,
        initial_beta: None,
        near_singular,
    })
}

/// Levels residuals `e_i = y_i − X_i·β̂` for every individual.
fn level_residuals(panel: &PanelData, beta: &DVector<f64>) -> Vec<DVector<f64>> {
    (0..panel.individuals())
        .map(|i| panel.outcome_vector(i) - panel.regressor_matrix(i) * beta)
        .collect()
}

/// Two-step GMM on transformed equations: weights invert the residual
/// moment covariance `Σ Zᵢᵀẽᵢẽᵢᵀ Zᵢ`, with residuals formed in levels and
/// then transformed. Without an explicit initial estimate, the one-step
/// estimate under the same transform seeds the residuals.
pub fn two_step(
    panel: &PanelData,
    transform: &TransformMatrix,
    scheme: &InstrumentScheme,
    initial: Option<&GmmEstimate>,
) -> Result<GmmEstimate> {
    let initial_beta = match initial {
        Some(e) => e.beta.clone(),
        None => one_step(panel, transform, scheme)?.beta,
    };
    let sys = transformed_system(panel, transform, scheme)?;
    let mut target = DMatrix::zeros(sys.moments, sys.moments);
    for (zi, ei) in sys.z.iter().zip(level_residuals(panel, &initial_beta)) {
        let moment = zi.transpose() * (transform.entries() * ei);
        target += &moment * moment.transpose();
    }
    let (w, condition_number, near_singular) =
        invert_weighting_target(&target, panel.individuals())?;
    let beta = gmm_kernel(&sys.xt, &sys.yt, &sys.z, &w)?;
    Ok(GmmEstimate {
        beta,
        weighting: w,
        moments: sys.moments,
        step: GmmStep::Two,
        transform_kind: kind_of(transform, false),
        condition_number,
        initial_beta: Some(initial_beta),
        near_singular,
    })
}

struct StackedSystem {
    xt: Vec<DMatrix<f64>>,
    yt: Vec<DVector<f64>>,
    z: Vec<DMatrix<f64>>,
    moments: usize,
    extended: TransformMatrix,
}

fn stacked_system(
    panel: &PanelData,
    base_transform: &TransformMatrix,
    scheme: &InstrumentScheme,
) -> Result<StackedSystem> {
    check_base_transform(panel, base_transform)?;
    let t = panel.t_max();
    let extended = system_extend(base_transform, t)?;
    let n = panel.individuals();
    let mut xt = Vec::with_capacity(n);
    let mut yt = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut moments = 0;
    for i in 0..n {
        let zi = system_instruments(panel, i, scheme)?;
        if i == 0 {
            moments = zi.total_moments();
        } else if zi.total_moments() != moments {
            return Err(Error::InvalidInstrument(
                "instrument shapes differ across individuals".into(),
            ));
        }
        z.push(zi.to_dense());
        xt.push(extended.entries() * panel.stacked_regressors(i));
        yt.push(extended.entries() * panel.stacked_outcome(i));
    }
    Ok(StackedSystem {
        xt,
        yt,
        z,
        moments,
        extended,
    })
}

/// One-step system GMM. The weighting target is
/// `Σ Zᵢ⁺ᵀ·blockdiag(K·Kᵀ, I_T)·Zᵢ⁺`, the system analogue of the
/// transformed-equations one-step rule; under a FOD base it reduces to
/// `Σ Zᵢ⁺ᵀZᵢ⁺`.
pub fn system_one_step(
    panel: &PanelData,
    base_transform: &TransformMatrix,
    scheme: &InstrumentScheme,
) -> Result<GmmEstimate> {
    let sys = stacked_system(panel, base_transform, scheme)?;
    let t = panel.t_max();
    let r = base_transform.rows();
    let mut lambda = DMatrix::identity(r + t, r + t);
    lambda.view_mut((0, 0), (r, r)).copy_from(&base_transform.gram());
    let mut target = DMatrix::zeros(sys.moments, sys.moments);
    for zi in &sys.z {
        target += zi.transpose() * &lambda * zi;
    }
    let (w, condition_number, near_singular) =
        invert_weighting_target(&target, panel.individuals())?;
    let beta = gmm_kernel(&sys.xt, &sys.yt, &sys.z, &w)?;
    Ok(GmmEstimate {
        beta,
        weighting: w,
        moments: sys.moments,
        step: GmmStep::One,
        transform_kind: kind_of(base_transform, true),
        condition_number,
        initial_beta: None,
        near_singular,
    })
}

/// Two-step system GMM: residuals on stacked levels, transformed by the
/// extended matrix, with the inverse of `Σ Zᵢ⁺ᵀẽᵢ⁺ẽᵢ⁺ᵀZᵢ⁺` as weighting.
///
/// Without an explicit initial estimate, the plain (non-system) one-step
/// estimate under the same base transform seeds the residuals; this
/// initializer reproduces the reference system GMM bias profile, unlike
/// seeding from the system one-step.
pub fn system_two_step(
    panel: &PanelData,
    base_transform: &TransformMatrix,
    scheme: &InstrumentScheme,
    initial: Option<&GmmEstimate>,
) -> Result<GmmEstimate> {
    let initial_beta = match initial {
        Some(e) => e.beta.clone(),
        None => one_step(panel, base_transform, scheme)?.beta,
    };
    let sys = stacked_system(panel, base_transform, scheme)?;
    let mut target = DMatrix::zeros(sys.moments, sys.moments);
    for (i, zi) in sys.z.iter().enumerate() {
        let residual = panel.stacked_outcome(i) - panel.stacked_regressors(i) * &initial_beta;
        let moment = zi.transpose() * (sys.extended.entries() * residual);
        target += &moment * moment.transpose();
    }
    let (w, condition_number, near_singular) =
        invert_weighting_target(&target, panel.individuals())?;
    let beta = gmm_kernel(&sys.xt, &sys.yt, &sys.z, &w)?;
    Ok(GmmEstimate {
        beta,
        weighting: w,
        moments: sys.moments,
        step: GmmStep::Two,
        transform_kind: kind_of(base_transform, true),
        condition_number,
        initial_beta: Some(initial_beta),
        near_singular,
    })
}

/// Dispatches an [`EstimatorSpec`] on a panel.
pub fn run_estimator(
    panel: &PanelData,
    spec: &EstimatorSpec,
    scheme: &InstrumentScheme,
) -> Result<GmmEstimate> {
    let transform = spec.base_transform(panel.t_max())?;
    match (spec.system, spec.step) {
        (false, GmmStep::One) => one_step(panel, &transform, scheme),
        (false, GmmStep::Two) => two_step(panel, &transform, scheme, None),
        (true, GmmStep::One) => system_one_step(panel, &transform, scheme),
        (true, GmmStep::Two) => system_two_step(panel, &transform, scheme, None),
    }
}

/// Side-by-side two-step FD and FOD estimates with the nesting verdict.
#[derive(Debug)]
pub struct EquivalenceReport {
    pub fd: Result<GmmEstimate>,
    pub fod: Result<GmmEstimate>,
    /// Numeric nesting verdict for the scheme on this panel.
    pub nested: bool,
    pub witness: Option<NestingWitness>,
    pub degenerate: bool,
    /// Max-norm relative difference between the two estimates.
    pub max_rel_diff: Option<f64>,
    /// Whether the verdict and the difference agree:
    /// nested ⇔ difference below tolerance.
    pub consistent: bool,
}

/// Relative difference used by the equivalence harness.
pub fn relative_difference(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = b.amax();
    if scale == 0.0 {
        (a - b).amax()
    } else {
        (a - b).amax() / scale
    }
}

/// Runs two-step FD and FOD with a shared initial estimate (the FD one-step
/// by convention), checks instrument nesting, and reports whether the two
/// agree exactly when nesting predicts they should.
pub fn equivalence_report(panel: &PanelData, scheme: &InstrumentScheme) -> EquivalenceReport {
    let t = panel.t_max();
    let run = |family: TransformFamily, initial: Option<&GmmEstimate>| -> Result<GmmEstimate> {
        let transform = match family {
            TransformFamily::FirstDifference => first_difference_matrix(t)?,
            TransformFamily::Fod => fod_matrix(t)?,
        };
        two_step(panel, &transform, scheme, initial)
    };
    let shared_initial = first_difference_matrix(t)
        .and_then(|d| one_step(panel, &d, scheme));
    let (fd, fod) = match &shared_initial {
        Ok(init) => (
            run(TransformFamily::FirstDifference, Some(init)),
            run(TransformFamily::Fod, Some(init)),
        ),
        // FD one-step failed: report that on the FD side, let FOD seed itself
        Err(_) => (
            shared_initial.as_ref().map(|e| e.clone()).map_err(clone_error),
            run(TransformFamily::Fod, None),
        ),
    };
    let (nested, witness, degenerate) = match nesting_check(scheme, panel, DEFAULT_NESTING_TOL) {
        Ok(report) => (report.nested, report.witness, report.degenerate),
        Err(_) => (false, None, true),
    };
    let max_rel_diff = match (&fd, &fod) {
        (Ok(a), Ok(b)) => Some(relative_difference(&b.beta, &a.beta)),
        _ => None,
    };
    let consistent = match max_rel_diff {
        Some(d) => nested == (d < DEFAULT_NESTING_TOL),
        None => false,
    };
    EquivalenceReport {
        fd,
        fod,
        nested,
        witness,
        degenerate,
        max_rel_diff,
        consistent,
    }
}

/// Rebuilds an error for the side of a report that shares a failed
/// prerequisite (the shared initial estimate).
fn clone_error(e: &Error) -> Error {
    match e {
        Error::SingularWeighting {
            moments,
            individuals,
            pivot,
        } => Error::SingularWeighting {
            moments: *moments,
            individuals: *individuals,
            pivot: *pivot,
        },
        Error::Identification { condition } => Error::Identification {
            condition: *condition,
        },
        other => Error::InvalidDimension(other.to_string()),
    }
}
