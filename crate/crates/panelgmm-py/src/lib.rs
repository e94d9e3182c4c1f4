//! Python bindings for the panelgmm dynamic panel GMM library.
//!
//! Exposes panel construction (simulated, CSV, or array-backed), the four
//! GMM estimators, the FD/FOD equivalence check, and the transformation
//! matrices. Build as a cdylib and import as `panelgmm_py`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use panelgmm::runner::{check_equivalence as run_check, format_estimate, EstimateRequest};
use panelgmm::{
    generate_panel, nesting_check, run_estimator, DesignPoint, Error, ErrorModel, EstimatorSpec,
    GmmStep, InstrumentScheme, PanelData, TransformFamily, DEFAULT_NESTING_TOL,
};

fn to_py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn scheme_from(name: &str) -> PyResult<InstrumentScheme> {
    InstrumentScheme::from_name(name).map_err(to_py_err)
}

fn spec_from(transform: &str, system: bool, step: u8) -> PyResult<EstimatorSpec> {
    let family = match transform {
        "fd" => TransformFamily::FirstDifference,
        "fod" => TransformFamily::Fod,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown transform `{other}` (expected `fd` or `fod`)"
            )))
        }
    };
    let step = match step {
        1 => GmmStep::One,
        2 => GmmStep::Two,
        other => return Err(PyValueError::new_err(format!("step must be 1 or 2, got {other}"))),
    };
    Ok(EstimatorSpec {
        family,
        system,
        step,
    })
}

/// A balanced panel: `N` individuals over periods `0..=T`.
#[pyclass(name = "Panel")]
struct Panel {
    inner: PanelData,
}

#[pymethods]
impl Panel {
    /// Simulates a panel from the dynamic design at a given seed.
    #[staticmethod]
    #[pyo3(signature = (n=200, t=10, delta=0.5, alpha=0.5, rho=0.3, sigma_eta=1.0,
                        error_model="conditional-hetero", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        n: usize,
        t: usize,
        delta: f64,
        alpha: f64,
        rho: f64,
        sigma_eta: f64,
        error_model: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let design = DesignPoint {
            n,
            t,
            delta,
            alpha,
            rho,
            sigma_eta,
            error_model: ErrorModel::from_name(error_model).map_err(to_py_err)?,
        };
        design.validate().map_err(to_py_err)?;
        Ok(Panel {
            inner: generate_panel(&design, seed),
        })
    }

    /// Reads a panel CSV with header `id,t,y,x1[,x2,…]`.
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(Panel {
            inner: PanelData::read_csv(path).map_err(to_py_err)?,
        })
    }

    /// Builds a panel from levels: `y[i][t]` and `x[i][t][j]`.
    #[staticmethod]
    fn from_arrays(y: Vec<Vec<f64>>, x: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        if y.is_empty() || y[0].is_empty() {
            return Err(PyValueError::new_err("y must be a nonempty N×(T+1) array"));
        }
        let n = y.len();
        let periods = y[0].len();
        if y.iter().any(|row| row.len() != periods) {
            return Err(PyValueError::new_err("y rows must have equal length"));
        }
        if x.len() != n {
            return Err(PyValueError::new_err("x must have one block per individual"));
        }
        let p = x[0].first().map(|r| r.len()).unwrap_or(0);
        let mut xm = Vec::with_capacity(n);
        for block in &x {
            if block.len() != periods || block.iter().any(|r| r.len() != p) {
                return Err(PyValueError::new_err(
                    "x blocks must be (T+1)×P with a fixed P",
                ));
            }
            xm.push(nalgebra::DMatrix::from_fn(periods, p, |t, j| block[t][j]));
        }
        let ym = nalgebra::DMatrix::from_fn(n, periods, |i, t| y[i][t]);
        Ok(Panel {
            inner: PanelData::from_parts(ym, xm, None).map_err(to_py_err)?,
        })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv(path).map_err(to_py_err)
    }

    #[getter]
    fn individuals(&self) -> usize {
        self.inner.individuals()
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.inner.t_max()
    }

    #[getter]
    fn regressors(&self) -> usize {
        self.inner.regressors()
    }

    /// Generating coefficients `(δ, α…)` when simulated, else `None`.
    #[getter]
    fn truth(&self) -> Option<Vec<f64>> {
        self.inner.truth().map(|b| b.iter().copied().collect())
    }

    fn y(&self, i: usize, t: usize) -> f64 {
        self.inner.y(i, t)
    }

    fn x(&self, i: usize, t: usize, j: usize) -> f64 {
        self.inner.x(i, t, j)
    }

    fn __repr__(&self) -> String {
        format!(
            "Panel(individuals={}, t_max={}, regressors={})",
            self.inner.individuals(),
            self.inner.t_max(),
            self.inner.regressors()
        )
    }
}

/// A fitted GMM estimate.
#[pyclass(name = "Estimate")]
struct Estimate {
    #[pyo3(get)]
    beta: Vec<f64>,
    #[pyo3(get)]
    moments: usize,
    #[pyo3(get)]
    step: u8,
    #[pyo3(get)]
    transform: String,
    #[pyo3(get)]
    condition_number: f64,
    #[pyo3(get)]
    near_singular: bool,
    #[pyo3(get)]
    initial_beta: Option<Vec<f64>>,
    rendered: String,
}

#[pymethods]
impl Estimate {
    fn __repr__(&self) -> String {
        format!(
            "Estimate(transform={}, step={}, beta={:?})",
            self.transform, self.step, self.beta
        )
    }

    fn __str__(&self) -> String {
        self.rendered.clone()
    }
}

/// Runs a GMM estimator on a panel.
#[pyfunction]
#[pyo3(signature = (panel, transform="fd", system=false, scheme="recent-lags", step=2))]
fn estimate(
    panel: &Panel,
    transform: &str,
    system: bool,
    scheme: &str,
    step: u8,
) -> PyResult<Estimate> {
    let request = EstimateRequest {
        spec: spec_from(transform, system, step)?,
        scheme: scheme_from(scheme)?,
    };
    let fitted = run_estimator(&panel.inner, &request.spec, &request.scheme).map_err(to_py_err)?;
    Ok(Estimate {
        beta: fitted.beta.iter().copied().collect(),
        moments: fitted.moments,
        step,
        transform: fitted.transform_kind.name().to_string(),
        condition_number: fitted.condition_number,
        near_singular: fitted.near_singular,
        initial_beta: fitted
            .initial_beta
            .as_ref()
            .map(|b| b.iter().copied().collect()),
        rendered: format_estimate(&fitted, &request.scheme),
    })
}

/// Nesting verdict plus the two-step FD/FOD comparison.
#[pyclass(name = "EquivalenceResult")]
struct EquivalenceResult {
    #[pyo3(get)]
    nested: bool,
    #[pyo3(get)]
    witness: Option<(usize, usize, usize)>,
    #[pyo3(get)]
    degenerate: bool,
    #[pyo3(get)]
    fd_beta: Option<Vec<f64>>,
    #[pyo3(get)]
    fod_beta: Option<Vec<f64>>,
    #[pyo3(get)]
    max_rel_diff: Option<f64>,
    #[pyo3(get)]
    transfer_residual: f64,
    #[pyo3(get)]
    transfer_nonsingular: Option<bool>,
    #[pyo3(get)]
    consistent: bool,
}

#[pymethods]
impl EquivalenceResult {
    fn __repr__(&self) -> String {
        format!(
            "EquivalenceResult(nested={}, max_rel_diff={:?}, consistent={})",
            self.nested, self.max_rel_diff, self.consistent
        )
    }
}

/// Checks whether two-step FD and FOD GMM coincide on this panel under the
/// given instrument scheme.
#[pyfunction]
#[pyo3(signature = (panel, scheme="recent-lags"))]
fn check_equivalence(panel: &Panel, scheme: &str) -> PyResult<EquivalenceResult> {
    let check = run_check(&panel.inner, &scheme_from(scheme)?).map_err(to_py_err)?;
    let report = check.report;
    Ok(EquivalenceResult {
        nested: report.nested,
        witness: report.witness.map(|w| (w.s, w.t, w.column)),
        degenerate: report.degenerate,
        fd_beta: report
            .fd
            .ok()
            .map(|e| e.beta.iter().copied().collect()),
        fod_beta: report
            .fod
            .ok()
            .map(|e| e.beta.iter().copied().collect()),
        max_rel_diff: report.max_rel_diff,
        transfer_residual: check.transfer_residual,
        transfer_nonsingular: check.transfer_nonsingular,
        consistent: report.consistent,
    })
}

/// `(earlier block, later block, column)` of the first nesting violation.
type Witness = (usize, usize, usize);

/// Numeric nesting test only; returns `(nested, witness)`.
#[pyfunction]
#[pyo3(signature = (panel, scheme="recent-lags"))]
fn check_nesting(panel: &Panel, scheme: &str) -> PyResult<(bool, Option<Witness>)> {
    let report = nesting_check(&scheme_from(scheme)?, &panel.inner, DEFAULT_NESTING_TOL)
        .map_err(to_py_err)?;
    Ok((report.nested, report.witness.map(|w| (w.s, w.t, w.column))))
}

/// (T−1)×T first-difference matrix as nested lists.
#[pyfunction]
fn first_difference_matrix(t: usize) -> PyResult<Vec<Vec<f64>>> {
    let m = panelgmm::first_difference_matrix(t).map_err(to_py_err)?;
    Ok(matrix_rows(m.entries()))
}

/// (T−1)×T forward orthogonal deviations matrix as nested lists.
#[pyfunction]
fn fod_matrix(t: usize) -> PyResult<Vec<Vec<f64>>> {
    let m = panelgmm::fod_matrix(t).map_err(to_py_err)?;
    Ok(matrix_rows(m.entries()))
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

#[pymodule]
fn panelgmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Panel>()?;
    m.add_class::<Estimate>()?;
    m.add_class::<EquivalenceResult>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(check_equivalence, m)?)?;
    m.add_function(wrap_pyfunction!(check_nesting, m)?)?;
    m.add_function(wrap_pyfunction!(first_difference_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(fod_matrix, m)?)?;
    Ok(())
}
