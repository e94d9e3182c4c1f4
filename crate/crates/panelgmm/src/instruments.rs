//! Per-period instrument vectors, block-diagonal instrument matrices, and
//! the numeric instrument-nesting test.
//!
//! For transformed equations, block `t` (`t = 1..=T−1`) holds the instrument
//! vector `z_itᵀ`, laid out block-diagonally so each transformed equation is
//! instrumented only by its own block. Two named schemes are built in:
//!
//! - `all-lags`: `z_it = (y_{i0}, …, y_{i,t−1}, x_{i0}, …, x_{it})`,
//! - `recent-lags`: `z_i1 = (y_{i0}, x_{i0}, x_{i1})` and
//!   `z_it = (y_{i,t−2}, y_{i,t−1}, x_{i,t−2}, x_{i,t−1}, x_{it})` for `t ≥ 2`.
//!
//! Whether two transformations of the data can yield the same GMM estimate
//! hinges on a nesting property: every instrument used in an earlier block
//! must be a linear combination of the instruments used in each later block.
//! `all-lags` satisfies it; `recent-lags` violates it once `T ≥ 4` because
//! early lags drop out of later blocks. [`nesting_check`] decides the
//! property on realized data via least squares, and [`transfer_matrix`]
//! constructs the nonsingular matrix `C` with `C·Z_iᵀ = Z_iᵀ·U` whose
//! existence is equivalent to it.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::transforms::CholeskyFactor;

/// Default relative-residual tolerance for nesting and transfer-matrix
/// decisions.
pub const DEFAULT_NESTING_TOL: f64 = 1e-8;

/// Condition-number threshold above which stacked instrument blocks are
/// flagged as degenerate.
const DEGENERATE_CONDITION: f64 = 1e10;

/// Rule producing the instrument vector for block `t` of individual `i`.
pub type InstrumentRule = dyn Fn(&PanelData, usize, usize) -> Result<Vec<f64>> + Send + Sync;

/// A named instrument scheme. Blocks are indexed `t = 1..=T−1` and the rule
/// must be deterministic and depend on `t` only through shape, so every
/// individual yields identically shaped blocks.
#[derive(Clone)]
pub enum InstrumentScheme {
    AllLags,
    RecentLags,
    Custom { name: String, rule: Arc<InstrumentRule> },
}

impl std::fmt::Debug for InstrumentScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl InstrumentScheme {
    pub fn name(&self) -> &str {
        match self {
            InstrumentScheme::AllLags => "all-lags",
            InstrumentScheme::RecentLags => "recent-lags",
            InstrumentScheme::Custom { name, .. } => name,
        }
    }

    /// Looks up one of the named schemes.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "all-lags" => Ok(InstrumentScheme::AllLags),
            "recent-lags" => Ok(InstrumentScheme::RecentLags),
            other => Err(Error::InvalidInstrument(format!(
                "unknown scheme `{other}` (expected `all-lags` or `recent-lags`)"
            ))),
        }
    }

    pub fn custom(
        name: impl Into<String>,
        rule: impl Fn(&PanelData, usize, usize) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        InstrumentScheme::Custom {
            name: name.into(),
            rule: Arc::new(rule),
        }
    }

    /// Instrument vector for block `t` of individual `i`.
    pub fn block(&self, panel: &PanelData, i: usize, t: usize) -> Result<Vec<f64>> {
        match self {
            InstrumentScheme::AllLags => all_lags(panel, i, t),
            InstrumentScheme::RecentLags => recent_lags(panel, i, t),
            InstrumentScheme::Custom { rule, .. } => rule(panel, i, t),
        }
    }
}

fn check_block_index(panel: &PanelData, i: usize, t: usize) -> Result<()> {
    if i >= panel.individuals() {
        return Err(Error::InvalidIndex(format!(
            "individual {i} out of range (N = {})",
            panel.individuals()
        )));
    }
    if t < 1 || t > panel.t_max() - 1 {
        return Err(Error::InvalidIndex(format!(
            "block {t} out of range 1..={}",
            panel.t_max() - 1
        )));
    }
    Ok(())
}

/// Recent-lags instruments: `(y_{i0}, x_{i0}, x_{i1})` at `t = 1`, then
/// `(y_{i,t−2}, y_{i,t−1}, x_{i,t−2}, x_{i,t−1}, x_{it})`.
pub fn recent_lags(panel: &PanelData, i: usize, t: usize) -> Result<Vec<f64>> {
    check_block_index(panel, i, t)?;
    let p = panel.regressors();
    let mut z = Vec::with_capacity(2 + 3 * p);
    if t == 1 {
        z.push(panel.y(i, 0));
        for s in [0, 1] {
            for j in 0..p {
                z.push(panel.x(i, s, j));
            }
        }
    } else {
        z.push(panel.y(i, t - 2));
        z.push(panel.y(i, t - 1));
        for s in [t - 2, t - 1, t] {
            for j in 0..p {
                z.push(panel.x(i, s, j));
            }
        }
    }
    Ok(z)
}

/// All-lags instruments: every `y` lag through `t−1` and every `x` lag
/// through `t`.
pub fn all_lags(panel: &PanelData, i: usize, t: usize) -> Result<Vec<f64>> {
    check_block_index(panel, i, t)?;
    let p = panel.regressors();
    let mut z = Vec::with_capacity(t + (t + 1) * p);
    for s in 0..t {
        z.push(panel.y(i, s));
    }
    for s in 0..=t {
        for j in 0..p {
            z.push(panel.x(i, s, j));
        }
    }
    Ok(z)
}

/// Block-diagonal instrument matrix: block `t` holds the row vector
/// `z_itᵀ`, and the realized matrix has one row per block.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentMatrix {
    blocks: Vec<DVector<f64>>,
}

impl InstrumentMatrix {
    pub fn blocks(&self) -> &[DVector<f64>] {
        &self.blocks
    }

    /// Number of diagonal blocks `R`.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Total moment count `Σ k_t`.
    pub fn total_moments(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// Realizes the dense `R × Σk_t` layout.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.block_count(), self.total_moments());
        let mut offset = 0;
        for (r, block) in self.blocks.iter().enumerate() {
            for (j, v) in block.iter().enumerate() {
                out[(r, offset + j)] = *v;
            }
            offset += block.len();
        }
        out
    }
}

/// Builds a block-diagonal [`InstrumentMatrix`] from per-block vectors.
pub fn build_block_diagonal(blocks: Vec<Vec<f64>>) -> Result<InstrumentMatrix> {
    if blocks.is_empty() {
        return Err(Error::InvalidInstrument("no instrument blocks".into()));
    }
    for (t, b) in blocks.iter().enumerate() {
        if b.is_empty() {
            return Err(Error::InvalidInstrument(format!(
                "instrument block {} is empty",
                t + 1
            )));
        }
    }
    Ok(InstrumentMatrix {
        blocks: blocks.into_iter().map(DVector::from_vec).collect(),
    })
}

/// Realizes `Z_i` for one individual: scheme blocks `t = 1..=T−1`.
pub fn instrument_matrix(
    panel: &PanelData,
    i: usize,
    scheme: &InstrumentScheme,
) -> Result<InstrumentMatrix> {
    let r = panel.t_max() - 1;
    let mut blocks = Vec::with_capacity(r);
    for t in 1..=r {
        blocks.push(scheme.block(panel, i, t)?);
    }
    build_block_diagonal(blocks)
}

/// System instrument matrix: the transformed-equation part `Z_1i` and the
/// levels part `Z_2i`, combined block-diagonally.
///
/// `Z_2i` holds the first differences of the regressors in its first block
/// and `(Δy_{i,t−1}, Δx_itᵀ)` in blocks `t = 2..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemInstrumentMatrix {
    diff_part: InstrumentMatrix,
    level_part: InstrumentMatrix,
}

impl SystemInstrumentMatrix {
    pub fn diff_part(&self) -> &InstrumentMatrix {
        &self.diff_part
    }

    pub fn level_part(&self) -> &InstrumentMatrix {
        &self.level_part
    }

    pub fn total_moments(&self) -> usize {
        self.diff_part.total_moments() + self.level_part.total_moments()
    }

    /// Dense `(2T−1) × (m₁+m₂)` block-diagonal layout.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.diff_part.to_dense();
        let l = self.level_part.to_dense();
        let mut out = DMatrix::zeros(d.nrows() + l.nrows(), d.ncols() + l.ncols());
        out.view_mut((0, 0), d.shape()).copy_from(&d);
        out.view_mut(d.shape(), l.shape()).copy_from(&l);
        out
    }
}

/// Builds the system instruments for individual `i`: scheme blocks for the
/// transformed equations plus lagged-difference blocks for the levels
/// equations.
pub fn system_instruments(
    panel: &PanelData,
    i: usize,
    scheme: &InstrumentScheme,
) -> Result<SystemInstrumentMatrix> {
    if panel.t_max() < 2 {
        return Err(Error::InvalidDimension(format!(
            "system instruments need T >= 2, got {}",
            panel.t_max()
        )));
    }
    let diff_part = instrument_matrix(panel, i, scheme)?;
    let p = panel.regressors();
    let mut level_blocks = Vec::with_capacity(panel.t_max());
    let mut first = Vec::with_capacity(p);
    for j in 0..p {
        first.push(panel.x(i, 1, j) - panel.x(i, 0, j));
    }
    level_blocks.push(first);
    for t in 2..=panel.t_max() {
        let mut block = Vec::with_capacity(1 + p);
        block.push(panel.y(i, t - 1) - panel.y(i, t - 2));
        for j in 0..p {
            block.push(panel.x(i, t, j) - panel.x(i, t - 1, j));
        }
        level_blocks.push(block);
    }
    Ok(SystemInstrumentMatrix {
        diff_part,
        level_part: build_block_diagonal(level_blocks)?,
    })
}

/// First violation found by [`nesting_check`]: the component `column` of
/// block `s` is not in the span of block `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NestingWitness {
    pub s: usize,
    pub t: usize,
    pub column: usize,
}

/// Outcome of the numeric nesting test.
#[derive(Debug, Clone)]
pub struct NestingReport {
    /// Every earlier-block instrument lies in the span of every later block.
    pub nested: bool,
    /// First violating `(s, t, column)` when not nested.
    pub witness: Option<NestingWitness>,
    /// Some stacked block was ill-conditioned (or N is too small for the
    /// column-space test to bind); membership may be spuriously true.
    pub degenerate: bool,
}

/// Stacks block `t` over individuals into an `N × k_t` matrix.
fn stack_block(panel: &PanelData, scheme: &InstrumentScheme, t: usize) -> Result<DMatrix<f64>> {
    let n = panel.individuals();
    let first = scheme.block(panel, 0, t)?;
    let k = first.len();
    if k == 0 {
        return Err(Error::InvalidInstrument(format!("block {t} is empty")));
    }
    let mut out = DMatrix::zeros(n, k);
    for j in 0..k {
        out[(0, j)] = first[j];
    }
    for i in 1..n {
        let z = scheme.block(panel, i, t)?;
        if z.len() != k {
            return Err(Error::InvalidInstrument(format!(
                "block {t} has length {} for individual {i} but {k} for individual 0",
                z.len()
            )));
        }
        for j in 0..k {
            out[(i, j)] = z[j];
        }
    }
    Ok(out)
}

/// Tests on realized data whether the scheme's instruments are nested:
/// for every `s ≤ t`, each component of `z_is` (stacked over individuals)
/// must lie in the column span of the stacked `z_it`, up to relative
/// residual `tol`.
pub fn nesting_check(
    scheme: &InstrumentScheme,
    panel: &PanelData,
    tol: f64,
) -> Result<NestingReport> {
    let r = panel.t_max() - 1;
    let n = panel.individuals();
    let mut stacks = Vec::with_capacity(r);
    let mut svds = Vec::with_capacity(r);
    let mut degenerate = false;
    for t in 1..=r {
        let a = stack_block(panel, scheme, t)?;
        if n < a.ncols() + 1 {
            degenerate = true;
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= smax / DEGENERATE_CONDITION {
            degenerate = true;
        }
        stacks.push(a);
        svds.push(svd);
    }
    for s in 1..=r {
        for t in s..=r {
            if s == t {
                continue; // a block trivially spans itself
            }
            let source = &stacks[s - 1];
            for column in 0..source.ncols() {
                let b = source.column(column).into_owned();
                let norm = b.norm();
                if norm == 0.0 {
                    continue;
                }
                let coeffs = svds[t - 1]
                    .solve(&b, 0.0)
                    .map_err(|e| Error::InvalidInstrument(format!("least squares failed: {e}")))?;
                let residual = (&stacks[t - 1] * coeffs - &b).norm() / norm;
                if residual >= tol {
                    return Ok(NestingReport {
                        nested: false,
                        witness: Some(NestingWitness { s, t, column }),
                        degenerate,
                    });
                }
            }
        }
    }
    Ok(NestingReport {
        nested: true,
        witness: None,
        degenerate,
    })
}

/// Result of the transfer-matrix construction.
#[derive(Debug, Clone)]
pub enum TransferMatrixResult {
    /// The joint least-squares residual fell below tolerance: a transfer
    /// matrix exists on this data.
    Found {
        matrix: DMatrix<f64>,
        nonsingular: bool,
        residual: f64,
    },
    /// No matrix `C` reproduces `Z_iᵀ·U` across individuals; expected
    /// exactly when the instruments are not nested.
    NotFound { residual: f64 },
}

impl TransferMatrixResult {
    pub fn residual(&self) -> f64 {
        match self {
            TransferMatrixResult::Found { residual, .. }
            | TransferMatrixResult::NotFound { residual } => *residual,
        }
    }

    pub fn found(&self) -> bool {
        matches!(self, TransferMatrixResult::Found { .. })
    }
}

/// Solves for the matrix `C` minimizing `Σ_i ‖C·Z_iᵀ − Z_iᵀ·U‖²` and decides
/// whether it reproduces the products within `tol`.
///
/// A nonsingular solution realizes the identity `C·Z_iᵀ = Z_iᵀ·U` that makes
/// GMM invariant to replacing the transform `K` by `U·K`.
pub fn transfer_matrix(
    instruments: &[InstrumentMatrix],
    u: &CholeskyFactor,
    tol: f64,
) -> Result<TransferMatrixResult> {
    if instruments.is_empty() {
        return Err(Error::InvalidInstrument("no instrument matrices".into()));
    }
    let r = instruments[0].block_count();
    let m = instruments[0].total_moments();
    if u.order() != r {
        return Err(Error::InvalidDimension(format!(
            "Cholesky factor order {} does not match block count {r}",
            u.order()
        )));
    }
    // Normal equations for C: C·(Σ AᵢAᵢᵀ) = Σ BᵢAᵢᵀ with Aᵢ = Zᵢᵀ, Bᵢ = ZᵢᵀU.
    let mut gram = DMatrix::zeros(m, m);
    let mut cross = DMatrix::zeros(m, m);
    let mut dense = Vec::with_capacity(instruments.len());
    for z in instruments {
        if z.block_count() != r || z.total_moments() != m {
            return Err(Error::InvalidInstrument(
                "instrument matrices are not identically shaped".into(),
            ));
        }
        let a = z.to_dense().transpose();
        let b = &a * u.entries();
        gram += &a * a.transpose();
        cross += &b * a.transpose();
        dense.push((a, b));
    }
    let gram_svd = gram.svd(true, true);
    let c = gram_svd
        .solve(&cross.transpose(), 0.0)
        .map_err(|e| Error::InvalidInstrument(format!("least squares failed: {e}")))?
        .transpose();

    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in &dense {
        num += (&c * a - b).norm_squared();
        den += b.norm_squared();
    }
    let residual = if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    };
    if residual < tol {
        let sv = c.clone().svd(false, false).singular_values;
        let nonsingular = sv.min() > tol * sv.max();
        Ok(TransferMatrixResult::Found {
            matrix: c,
            nonsingular,
            residual,
        })
    } else {
        Ok(TransferMatrixResult::NotFound { residual })
    }
}
