//! Balanced panel data: levels of the outcome and regressors over periods
//! `0..=T`, plus CSV ingestion with strict validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A balanced panel: `N` individuals observed over periods `0..=T`.
///
/// Estimation uses the `T` rows `t = 1..=T`, each with regressors
/// `(y_{i,t−1}, x_itᵀ)`, so the stored series include the initial period 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    /// Outcome levels, `N × (T+1)`; column `t` is period `t`.
    y: DMatrix<f64>,
    /// Regressor levels, one `(T+1) × P` matrix per individual.
    x: Vec<DMatrix<f64>>,
    /// Generating coefficients `(δ, α…)` when the panel is simulated.
    truth: Option<DVector<f64>>,
}

impl PanelData {
    pub fn from_parts(
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        truth: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = y.nrows();
        if n == 0 || y.ncols() < 2 {
            return Err(Error::InvalidDimension(format!(
                "panel needs at least 1 individual and 2 periods, got {}x{}",
                n,
                y.ncols()
            )));
        }
        if x.len() != n {
            return Err(Error::InvalidDimension(format!(
                "outcome has {} individuals but regressors have {}",
                n,
                x.len()
            )));
        }
        let p = x[0].ncols();
        for (i, xi) in x.iter().enumerate() {
            if xi.nrows() != y.ncols() || xi.ncols() != p {
                return Err(Error::InvalidDimension(format!(
                    "regressor block {} is {}x{}, expected {}x{}",
                    i,
                    xi.nrows(),
                    xi.ncols(),
                    y.ncols(),
                    p
                )));
            }
        }
        if let Some(b) = &truth {
            if b.len() != 1 + p {
                return Err(Error::InvalidDimension(format!(
                    "truth vector has {} entries, expected {}",
                    b.len(),
                    1 + p
                )));
            }
        }
        Ok(Self { y, x, truth })
    }

    /// Number of individuals.
    pub fn individuals(&self) -> usize {
        self.y.nrows()
    }

    /// Final period index `T`; periods run `0..=T`.
    pub fn t_max(&self) -> usize {
        self.y.ncols() - 1
    }

    /// Number of `x` regressors `P`.
    pub fn regressors(&self) -> usize {
        self.x[0].ncols()
    }

    /// Coefficient count `1 + P` (lag coefficient plus regressors).
    pub fn coef_count(&self) -> usize {
        1 + self.regressors()
    }

    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[(i, t)]
    }

    pub fn x(&self, i: usize, t: usize, j: usize) -> f64 {
        self.x[i][(t, j)]
    }

    pub fn truth(&self) -> Option<&DVector<f64>> {
        self.truth.as_ref()
    }

    /// Outcome vector `(y_{i1}, …, y_{iT})ᵀ` for individual `i`.
    pub fn outcome_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_fn(self.t_max(), |r, _| self.y[(i, r + 1)])
    }

    /// Regressor matrix with `(y_{i,t−1}, x_itᵀ)` in row `t` (`t = 1..=T`).
    pub fn regressor_matrix(&self, i: usize) -> DMatrix<f64> {
        let t_max = self.t_max();
        let p = self.regressors();
        DMatrix::from_fn(t_max, 1 + p, |r, c| {
            if c == 0 {
                self.y[(i, r)]
            } else {
                self.x[i][(r + 1, c - 1)]
            }
        })
    }

    /// Stacked outcome `(y_iᵀ, y_iᵀ)ᵀ` used by system estimators.
    pub fn stacked_outcome(&self, i: usize) -> DVector<f64> {
        let base = self.outcome_vector(i);
        let t = base.len();
        DVector::from_fn(2 * t, |r, _| base[r % t])
    }

    /// Stacked regressors `(X_iᵀ, X_iᵀ)ᵀ` used by system estimators.
    pub fn stacked_regressors(&self, i: usize) -> DMatrix<f64> {
        let base = self.regressor_matrix(i);
        let t = base.nrows();
        DMatrix::from_fn(2 * t, base.ncols(), |r, c| base[(r % t, c)])
    }

    /// Reads a panel from CSV with header `id,t,y,x1[,x2,…]`.
    ///
    /// Every id must cover the complete period range `0..=T` with the same
    /// `T` across ids. Errors carry the offending id or the line/column of
    /// the first bad cell.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Panel("empty file".into()))?;
        let columns: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
        if columns.len() < 4 || columns[0] != "id" || columns[1] != "t" || columns[2] != "y" {
            return Err(Error::Panel(format!(
                "header must be `id,t,y,x1[,x2,…]`, got `{header}`"
            )));
        }
        for (j, name) in columns[3..].iter().enumerate() {
            let expected = format!("x{}", j + 1);
            if *name != expected {
                return Err(Error::Panel(format!(
                    "regressor column {} must be named `{expected}`, got `{name}`",
                    j + 4
                )));
            }
        }
        let p = columns.len() - 3;

        let mut order: Vec<String> = Vec::new();
        let mut rows: BTreeMap<String, BTreeMap<usize, (f64, Vec<f64>)>> = BTreeMap::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(Error::Panel(format!(
                    "line {line_no}: expected {} fields, got {}",
                    columns.len(),
                    fields.len()
                )));
            }
            let id = fields[0].to_string();
            let t: usize = fields[1].trim().parse().map_err(|_| Error::NonNumericCell {
                line: line_no,
                column: "t".into(),
                value: fields[1].into(),
            })?;
            let parse_cell = |j: usize| -> Result<f64> {
                fields[j].trim().parse().map_err(|_| Error::NonNumericCell {
                    line: line_no,
                    column: columns[j].into(),
                    value: fields[j].into(),
                })
            };
            let y = parse_cell(2)?;
            let mut xs = Vec::with_capacity(p);
            for j in 0..p {
                xs.push(parse_cell(3 + j)?);
            }
            if !rows.contains_key(&id) {
                order.push(id.clone());
            }
            let per_id = rows.entry(id.clone()).or_default();
            if per_id.insert(t, (y, xs)).is_some() {
                return Err(Error::UnbalancedPanel {
                    id,
                    detail: format!("duplicate period {t} (line {line_no})"),
                });
            }
        }
        if order.is_empty() {
            return Err(Error::Panel("no data rows".into()));
        }

        let t_max = *rows[&order[0]].keys().max().unwrap();
        for id in &order {
            let per_id = &rows[id];
            let id_max = *per_id.keys().max().unwrap();
            if id_max != t_max {
                return Err(Error::UnbalancedPanel {
                    id: id.clone(),
                    detail: format!("last period {id_max}, expected {t_max}"),
                });
            }
            for t in 0..=t_max {
                if !per_id.contains_key(&t) {
                    return Err(Error::UnbalancedPanel {
                        id: id.clone(),
                        detail: format!("missing period {t}"),
                    });
                }
            }
        }
        if t_max < 1 {
            return Err(Error::Panel("panel needs periods 0..=T with T >= 1".into()));
        }

        let n = order.len();
        let mut y = DMatrix::zeros(n, t_max + 1);
        let mut x = vec![DMatrix::zeros(t_max + 1, p); n];
        for (i, id) in order.iter().enumerate() {
            for (t, (yv, xs)) in &rows[id] {
                y[(i, *t)] = *yv;
                for (j, xv) in xs.iter().enumerate() {
                    x[i][(*t, j)] = *xv;
                }
            }
        }
        Self::from_parts(y, x, None)
    }

    /// Writes the panel in the same CSV format `read_csv` accepts.
    ///
    /// Floats use Rust's shortest round-trip formatting, so a write/read
    /// cycle reproduces the panel bit for bit.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let p = self.regressors();
        let mut out = String::from("id,t,y");
        for j in 1..=p {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for i in 0..self.individuals() {
            for t in 0..=self.t_max() {
                let _ = write!(out, "{i},{t},{}", self.y[(i, t)]);
                for j in 0..p {
                    let _ = write!(out, ",{}", self.x[i][(t, j)]);
                }
                out.push('\n');
            }
        }
        out
    }
}
