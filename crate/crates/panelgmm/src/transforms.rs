//! Transformation matrices that sweep time-invariant effects out of panel
//! equations.
//!
//! A valid transform `K` annihilates constants (`K·ι = 0`), so premultiplying
//! a panel equation by it removes the individual effect. The two standard
//! choices are the first-difference matrix `D` and the forward orthogonal
//! deviations (FOD) matrix `F`, which subtracts from each observation the
//! mean of all future observations and rescales so its rows are orthonormal
//! (`F·Fᵀ = I`). Any transform with positive definite `K·Kᵀ` has an
//! orthonormal equivalent `U·K`, where `U` is the upper-triangular Cholesky
//! factor of `(K·Kᵀ)⁻¹`; [`equivalent_transform`] constructs it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pivot acceptance threshold for Cholesky, relative to the largest diagonal.
const PIVOT_RTOL: f64 = 1e-12;

/// Relative asymmetry tolerated by [`upper_cholesky`].
const SYMMETRY_RTOL: f64 = 1e-10;

/// What a transformation matrix is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// First differences: −1 on the diagonal, +1 on the superdiagonal.
    Difference,
    /// Forward orthogonal deviations: orthonormal rows.
    Fod,
    /// User-supplied matrix with `K·ι = 0`.
    Custom,
    /// Block-diagonal extension `diag(K, I)` used by system estimators.
    SystemExtended,
}

/// A transformation matrix together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix {
    entries: DMatrix<f64>,
    kind: TransformKind,
}

impl TransformMatrix {
    /// Wraps a user-supplied transform, checking that it annihilates
    /// constants and drops exactly the expected rank.
    pub fn custom(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() >= entries.ncols() {
            return Err(Error::InvalidDimension(format!(
                "transform must have fewer rows than columns, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let scale = entries.amax().max(1.0);
        for r in 0..entries.nrows() {
            let row_sum: f64 = entries.row(r).iter().sum();
            if row_sum.abs() > 1e-10 * scale * entries.ncols() as f64 {
                return Err(Error::InvalidDimension(format!(
                    "transform row {r} does not annihilate constants (row sum {row_sum:.3e})"
                )));
            }
        }
        Ok(Self {
            entries,
            kind: TransformKind::Custom,
        })
    }

    pub(crate) fn from_parts(entries: DMatrix<f64>, kind: TransformKind) -> Self {
        Self { entries, kind }
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    /// `K·Kᵀ`, the weighting target of one-step GMM under this transform.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.entries * self.entries.transpose()
    }
}

/// Upper-triangular Cholesky factor `U` with `A = Uᵀ·U`.
///
/// This orientation is the one under which `(U·K)(U·K)ᵀ = I` when
/// `A = (K·Kᵀ)⁻¹`, which is exactly how the factor is consumed here.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    entries: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn order(&self) -> usize {
        self.entries.nrows()
    }

    /// Solves `A·x = b` where `A = Uᵀ·U` is the factored matrix.
    pub fn solve_vector(&self, b: &DVector<f64>) -> DVector<f64> {
        let u = &self.entries;
        let n = u.nrows();
        // forward substitution with Uᵀ (lower triangular)
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= u[(j, i)] * y[j];
            }
            y[i] = s / u[(i, i)];
        }
        // back substitution with U
        let mut x = DVector::zeros(n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= u[(i, j)] * x[j];
            }
            x[i] = s / u[(i, i)];
        }
        x
    }

    /// Solves `A·X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col = self.solve_vector(&b.column(c).into_owned());
            out.set_column(c, &col);
        }
        out
    }

    /// Materializes `A⁻¹` by solving against the identity.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.order(), self.order()))
    }
}

/// First-difference matrix `D`: the `(T−1)×T` matrix with −1 on the diagonal
/// and +1 on the superdiagonal.
pub fn first_difference_matrix(t: usize) -> Result<TransformMatrix> {
    if t < 2 {
        return Err(Error::InvalidDimension(format!(
            "first-difference matrix needs at least 2 periods, got {t}"
        )));
    }
    let mut m = DMatrix::zeros(t - 1, t);
    for r in 0..t - 1 {
        m[(r, r)] = -1.0;
        m[(r, r + 1)] = 1.0;
    }
    Ok(TransformMatrix::from_parts(m, TransformKind::Difference))
}

/// Forward orthogonal deviations matrix `F` for `t` periods.
///
/// Row `r` (1-based) is `√((T−r)/(T−r+1)) · (0,…,0, 1, −1/(T−r), …, −1/(T−r))`:
/// each observation minus the mean of all later ones, scaled so the rows are
/// orthonormal.
pub fn fod_matrix(t: usize) -> Result<TransformMatrix> {
    if t < 2 {
        return Err(Error::InvalidDimension(format!(
            "FOD matrix needs at least 2 periods, got {t}"
        )));
    }
    let mut m = DMatrix::zeros(t - 1, t);
    for r in 0..t - 1 {
        let remaining = (t - 1 - r) as f64; // observations after position r
        let scale = (remaining / (remaining + 1.0)).sqrt();
        m[(r, r)] = scale;
        for c in r + 1..t {
            m[(r, c)] = -scale / remaining;
        }
    }
    Ok(TransformMatrix::from_parts(m, TransformKind::Fod))
}

/// Upper-triangular Cholesky factorization `A = Uᵀ·U` of a symmetric
/// positive definite matrix.
pub fn upper_cholesky(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::InvalidDimension(format!(
            "Cholesky input must be square and nonempty, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in i + 1..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                return Err(Error::InvalidDimension(format!(
                    "Cholesky input is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(f64::MIN_POSITIVE, f64::max);
    let mut u = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut pivot = a[(k, k)];
        for j in 0..k {
            pivot -= u[(j, k)] * u[(j, k)];
        }
        if pivot <= PIVOT_RTOL * max_diag {
            return Err(Error::NotPositiveDefinite {
                pivot: k,
                value: pivot,
            });
        }
        let ukk = pivot.sqrt();
        u[(k, k)] = ukk;
        for i in k + 1..n {
            let mut s = 0.5 * (a[(k, i)] + a[(i, k)]);
            for j in 0..k {
                s -= u[(j, k)] * u[(j, i)];
            }
            u[(k, i)] = s / ukk;
        }
    }
    Ok(CholeskyFactor { entries: u })
}

/// The orthonormal transform equivalent to `K`: `F = U·K` with `U` the
/// upper-triangular Cholesky factor of `(K·Kᵀ)⁻¹`.
///
/// The result satisfies `F·Fᵀ = I` and `F·ι = 0`. Individual rows may differ
/// from [`fod_matrix`] by a sign; that ambiguity never changes a GMM
/// estimate because a per-block sign flip is a nonsingular recombination of
/// the instruments.
pub fn equivalent_transform(k: &TransformMatrix) -> Result<TransformMatrix> {
    let gram = k.gram();
    let gram_factor = upper_cholesky(&gram)?;
    let inv_gram = gram_factor.inverse();
    let u = upper_cholesky(&inv_gram)?;
    let f = u.entries() * k.entries();
    Ok(TransformMatrix::from_parts(f, TransformKind::Custom))
}

/// Block-diagonal system extension `diag(M, I_T)` mapping stacked
/// `(yᵀ, yᵀ)ᵀ` data to `(M·y ; y)`.
pub fn system_extend(m: &TransformMatrix, t: usize) -> Result<TransformMatrix> {
    if m.cols() != t {
        return Err(Error::InvalidDimension(format!(
            "system extension expects a transform with {t} columns, got {}",
            m.cols()
        )));
    }
    let rows = m.rows() + t;
    let mut out = DMatrix::zeros(rows, 2 * t);
    out.view_mut((0, 0), (m.rows(), t)).copy_from(m.entries());
    for i in 0..t {
        out[(m.rows() + i, t + i)] = 1.0;
    }
    Ok(TransformMatrix::from_parts(
        out,
        TransformKind::SystemExtended,
    ))
}

/// `M · data`, checking conformability.
pub fn apply_transform(m: &TransformMatrix, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if data.nrows() != m.cols() {
        return Err(Error::InvalidDimension(format!(
            "transform has {} columns but data has {} rows",
            m.cols(),
            data.nrows()
        )));
    }
    Ok(m.entries() * data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    #[test]
    fn first_difference_smallest_case() {
        let d = first_difference_matrix(2).unwrap();
        assert_eq!(d.entries(), &dmatrix![-1.0, 1.0]);
        assert_eq!(d.kind(), TransformKind::Difference);
    }

    #[test]
    fn first_difference_t3_pattern() {
        let d = first_difference_matrix(3).unwrap();
        assert_eq!(d.entries(), &dmatrix![-1.0, 1.0, 0.0; 0.0, -1.0, 1.0]);
    }

    #[test]
    fn first_difference_rejects_short_panels() {
        assert!(matches!(
            first_difference_matrix(1),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn difference_and_fod_annihilate_constants() {
        for t in 2..=30 {
            for m in [first_difference_matrix(t).unwrap(), fod_matrix(t).unwrap()] {
                for r in 0..m.rows() {
                    let row_sum: f64 = m.entries().row(r).iter().sum();
                    assert!(row_sum.abs() < 1e-14, "T={t} row {r} sum {row_sum}");
                }
            }
        }
    }

    #[test]
    fn fod_smallest_case() {
        let f = fod_matrix(2).unwrap();
        let h = 0.5_f64.sqrt();
        assert!((f.entries()[(0, 0)] - h).abs() < 1e-15);
        assert!((f.entries()[(0, 1)] + h).abs() < 1e-15);
    }

    #[test]
    fn fod_t3_matches_closed_form() {
        let f = fod_matrix(3).unwrap();
        let a = (2.0_f64 / 3.0).sqrt();
        let b = 0.5_f64.sqrt();
        let expected = dmatrix![a, -a / 2.0, -a / 2.0; 0.0, b, -b];
        assert!(max_abs(&(f.entries() - expected)) < 1e-15);
    }

    #[test]
    fn fod_rows_are_orthonormal() {
        for t in 2..=30 {
            let f = fod_matrix(t).unwrap();
            let gram = f.gram();
            let dev = gram - DMatrix::identity(t - 1, t - 1);
            assert!(max_abs(&dev) < 1e-12, "T={t}");
        }
    }

    #[test]
    fn upper_cholesky_identity() {
        let u = upper_cholesky(&dmatrix![1.0]).unwrap();
        assert_eq!(u.entries(), &dmatrix![1.0]);
    }

    #[test]
    fn upper_cholesky_scalar_half() {
        // the T=2 case of (D·Dᵀ)⁻¹
        let u = upper_cholesky(&dmatrix![0.5]).unwrap();
        assert!((u.entries()[(0, 0)] - 0.5_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn upper_cholesky_two_by_two_hand_solved() {
        // (D₃·D₃ᵀ)⁻¹ = (1/3)·[[2,1],[1,2]]
        let a = dmatrix![2.0 / 3.0, 1.0 / 3.0; 1.0 / 3.0, 2.0 / 3.0];
        let u = upper_cholesky(&a).unwrap();
        let expected = dmatrix![
            (2.0_f64 / 3.0).sqrt(), 1.0 / 6.0_f64.sqrt();
            0.0, 1.0 / 2.0_f64.sqrt()
        ];
        assert!(max_abs(&(u.entries() - expected)) < 1e-15);
    }

    #[test]
    fn upper_cholesky_reports_failing_pivot() {
        // eigenvalues 3 and −1: the second pivot goes negative
        let a = dmatrix![1.0, 2.0; 2.0, 1.0];
        match upper_cholesky(&a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn upper_cholesky_rejects_asymmetry() {
        let a = dmatrix![1.0, 0.5; 0.1, 1.0];
        assert!(matches!(
            upper_cholesky(&a),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn upper_cholesky_round_trips_random_spd() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for n in 1..=20 {
            let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let a = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
            let u = upper_cholesky(&a).unwrap();
            let dev = u.entries().transpose() * u.entries() - &a;
            let rel = max_abs(&dev) / max_abs(&a);
            assert!(rel < 1e-10, "order {n}: relative deviation {rel}");
            // diagonal positivity and upper-triangularity
            for i in 0..n {
                assert!(u.entries()[(i, i)] > 0.0);
                for j in 0..i {
                    assert_eq!(u.entries()[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn cholesky_solve_matches_direct_multiplication() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 6;
        let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let a = &b * b.transpose() + DMatrix::identity(n, n);
        let factor = upper_cholesky(&a).unwrap();
        let x_true = DVector::from_fn(n, |i, _| (i + 1) as f64);
        let rhs = &a * &x_true;
        let x = factor.solve_vector(&rhs);
        assert!((x - x_true).amax() < 1e-10);
        let inv = factor.inverse();
        assert!(max_abs(&(&a * inv - DMatrix::identity(n, n))) < 1e-10);
    }

    #[test]
    fn equivalent_transform_of_difference_is_scaled_fod_t2() {
        let d = first_difference_matrix(2).unwrap();
        let f = equivalent_transform(&d).unwrap();
        let h = 0.5_f64.sqrt();
        assert!((f.entries()[(0, 0)] + h).abs() < 1e-14);
        assert!((f.entries()[(0, 1)] - h).abs() < 1e-14);
    }

    #[test]
    fn equivalent_transform_matches_fod_up_to_row_sign() {
        for t in 2..=30 {
            let d = first_difference_matrix(t).unwrap();
            let f = equivalent_transform(&d).unwrap();
            let reference = fod_matrix(t).unwrap();
            for r in 0..t - 1 {
                let row = f.entries().row(r);
                let reference_row = reference.entries().row(r);
                let diff_plus = (row - reference_row).amax();
                let diff_minus = (row + reference_row).amax();
                assert!(
                    diff_plus.min(diff_minus) < 1e-10,
                    "T={t} row {r}: +{diff_plus:.2e} -{diff_minus:.2e}"
                );
            }
        }
    }

    #[test]
    fn equivalent_transform_is_orthonormal_with_zero_row_sums() {
        for t in [2, 5, 17, 30] {
            let f = equivalent_transform(&first_difference_matrix(t).unwrap()).unwrap();
            assert!(max_abs(&(f.gram() - DMatrix::identity(t - 1, t - 1))) < 1e-12);
            for r in 0..f.rows() {
                let s: f64 = f.entries().row(r).iter().sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equivalent_transform_fixes_orthonormal_input() {
        for t in [2, 4, 9] {
            let f = fod_matrix(t).unwrap();
            let g = equivalent_transform(&f).unwrap();
            assert!(max_abs(&(g.entries() - f.entries())) < 1e-12, "T={t}");
        }
    }

    #[test]
    fn system_extend_places_blocks() {
        let d = first_difference_matrix(2).unwrap();
        let s = system_extend(&d, 2).unwrap();
        let expected = dmatrix![
            -1.0, 1.0, 0.0, 0.0;
            0.0, 0.0, 1.0, 0.0;
            0.0, 0.0, 0.0, 1.0
        ];
        assert_eq!(s.entries(), &expected);
        assert_eq!(s.kind(), TransformKind::SystemExtended);

        let f = fod_matrix(2).unwrap();
        let s = system_extend(&f, 2).unwrap();
        let h = 0.5_f64.sqrt();
        let expected = dmatrix![
            h, -h, 0.0, 0.0;
            0.0, 0.0, 1.0, 0.0;
            0.0, 0.0, 0.0, 1.0
        ];
        assert!(max_abs(&(s.entries() - expected)) < 1e-15);
    }

    #[test]
    fn system_extend_transforms_stacked_data() {
        let f = fod_matrix(3).unwrap();
        let s = system_extend(&f, 3).unwrap();
        let y = DVector::from_vec(vec![1.0, 4.0, 9.0]);
        let stacked = DMatrix::from_fn(6, 1, |i, _| y[i % 3]);
        let out = apply_transform(&s, &stacked).unwrap();
        let top = apply_transform(&f, &DMatrix::from_fn(3, 1, |i, _| y[i])).unwrap();
        for r in 0..2 {
            assert!((out[(r, 0)] - top[(r, 0)]).abs() < 1e-15);
        }
        for r in 0..3 {
            assert!((out[(2 + r, 0)] - y[r]).abs() < 1e-15);
        }
    }

    #[test]
    fn system_extend_checks_dimensions() {
        let d = first_difference_matrix(3).unwrap();
        assert!(matches!(
            system_extend(&d, 4),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn apply_transform_examples() {
        let d = first_difference_matrix(3).unwrap();
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let out = apply_transform(&d, &y).unwrap();
        assert_eq!(out, DMatrix::from_column_slice(2, 1, &[1.0, 1.0]));

        let f = fod_matrix(3).unwrap();
        let c = DMatrix::from_column_slice(3, 1, &[4.2, 4.2, 4.2]);
        assert!(max_abs(&apply_transform(&f, &c).unwrap()) < 1e-14);

        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let out = apply_transform(&f, &e1).unwrap();
        assert!((out[(0, 0)] - (2.0_f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(out[(1, 0)].abs() < 1e-15);

        let bad = DMatrix::zeros(4, 1);
        assert!(matches!(
            apply_transform(&f, &bad),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn custom_transform_validates_row_sums() {
        let ok = TransformMatrix::custom(dmatrix![1.0, -2.0, 1.0]);
        assert!(ok.is_ok());
        let bad = TransformMatrix::custom(dmatrix![1.0, 1.0, 1.0]);
        assert!(bad.is_err());
        let square = TransformMatrix::custom(DMatrix::identity(3, 3));
        assert!(square.is_err());
    }
}
