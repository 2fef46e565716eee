//! Tolerance-aware dense linear algebra shared by every other module.
//!
//! All rank decisions go through [`numeric_rank`], which counts singular
//! values above `rank_rel` times the largest one. Empty matrices are valid
//! inputs: a matrix with no columns has rank 0 and its kernel is trivial,
//! a matrix with no rows has the whole space as kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Numerical thresholds used for rank and definiteness decisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    /// Relative singular-value cutoff.
    pub rank_rel: f64,
    /// Minimum-eigenvalue slack for strict definiteness.
    pub psd_margin: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rank_rel: 1e-9,
            psd_margin: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn new(rank_rel: f64, psd_margin: f64) -> Result<Self> {
        if !(rank_rel > 0.0 && psd_margin > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerances must be positive (rank_rel = {rank_rel}, psd_margin = {psd_margin})"
            )));
        }
        Ok(Self {
            rank_rel,
            psd_margin,
        })
    }

    pub fn with_rank_rel(self, rank_rel: f64) -> Self {
        Self { rank_rel, ..self }
    }
}

/// Row-major matrix as it appears in JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixRecord {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<&MatrixRecord> for Matrix {
    type Error = Error;

    fn try_from(r: &MatrixRecord) -> Result<Self> {
        if r.data.len() != r.rows * r.cols {
            return Err(Error::Schema(format!(
                "matrix record declares {}x{} but carries {} entries",
                r.rows,
                r.cols,
                r.data.len()
            )));
        }
        let m = Matrix::from_row_slice(r.rows, r.cols, &r.data);
        ensure_finite(&m)?;
        Ok(m)
    }
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Thin SVD `m = u diag(s) v_t`, `s` in decreasing order.
pub(crate) struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v_t: Matrix,
}

fn to_faer(m: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

// nalgebra's SVD returns wrong factors on some well-conditioned inputs
// (reconstruction errors near 1e-2), so all decompositions go through faer.
pub(crate) fn svd(m: &Matrix) -> Svd {
    let dec = to_faer(m).thin_svd().expect("SVD of a finite matrix converges");
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());
    Svd {
        u: Matrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]),
        s: (0..s.nrows()).map(|i| s[i]).collect(),
        v_t: Matrix::from_fn(v.ncols(), v.nrows(), |i, j| v[(j, i)]),
    }
}

fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    to_faer(m)
        .singular_values()
        .expect("SVD of a finite matrix converges")
}

fn cutoff(sv: &[f64], rank_rel: f64) -> f64 {
    let smax = sv.iter().copied().fold(0.0, f64::max);
    rank_rel * smax
}

/// Number of singular values strictly above `rank_rel * sigma_max`.
pub fn numeric_rank(m: &Matrix, tol: &Tolerance) -> Result<usize> {
    ensure_finite(m)?;
    let sv = singular_values(m);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    let cut = cutoff(&sv, tol.rank_rel);
    Ok(sv.iter().filter(|&&s| s > cut).count())
}

/// Orthonormal basis of the numerical kernel of `m`, one column per
/// direction. The column count is `m.ncols() - numeric_rank(m)`.
pub fn kernel_basis(m: &Matrix, tol: &Tolerance) -> Result<Matrix> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    if rows == 0 {
        return Ok(Matrix::identity(cols, cols));
    }
    // The thin SVD of a wide matrix does not carry the full right singular
    // basis, so pad with zero rows up to a square matrix.
    let padded = if rows < cols {
        let mut p = Matrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let dec = svd(&padded);
    let (v_t, sv) = (dec.v_t, dec.s);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let cut = cutoff(&sv, tol.rank_rel);
    let null: Vec<usize> = (0..sv.len())
        .filter(|&i| smax == 0.0 || sv[i] <= cut)
        .collect();
    let mut basis = Matrix::zeros(cols, null.len());
    for (c, &i) in null.iter().enumerate() {
        basis.set_column(c, &v_t.row(i).transpose());
    }
    Ok(basis)
}

/// Orthonormal basis of the numerical column space of `m`.
pub fn range_basis(m: &Matrix, tol: &Tolerance) -> Result<Matrix> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Matrix::zeros(rows, 0));
    }
    let padded = if cols < rows {
        let mut p = Matrix::zeros(rows, rows);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let dec = svd(&padded);
    let (u, sv) = (dec.u, dec.s);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let cut = cutoff(&sv, tol.rank_rel);
    let keep: Vec<usize> = (0..sv.len())
        .filter(|&i| smax > 0.0 && sv[i] > cut)
        .collect();
    let mut basis = Matrix::zeros(rows, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        basis.set_column(c, &u.column(i));
    }
    Ok(basis)
}

/// `ker a ⊆ ker b`, decided as `rank [a; b] == rank a`.
///
/// Kernels are invariant under scaling, so both blocks are normalised to unit
/// spectral norm before stacking; this keeps a large `b` from swamping the
/// relative cutoff applied to `a`.
pub fn kernel_included(a: &Matrix, b: &Matrix, tol: &Tolerance) -> Result<bool> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "kernel inclusion needs equal column counts ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    ensure_finite(a)?;
    ensure_finite(b)?;
    // Kernels are also invariant under a common column scaling; bring every
    // column of `a` to unit length so transitions recorded at very
    // different state magnitudes weigh the same.
    let mut a = a.clone();
    let mut b = b.clone();
    for j in 0..a.ncols() {
        let s = match a.column(j).norm() {
            s if s > 0.0 => s,
            _ => b.column(j).norm(),
        };
        if s > 0.0 {
            a.column_mut(j).unscale_mut(s);
            b.column_mut(j).unscale_mut(s);
        }
    }
    let an = normalized(&a);
    let bn = normalized(&b);
    let stacked = vstack(&an, &bn);
    Ok(numeric_rank(&stacked, tol)? == numeric_rank(&an, tol)?)
}

fn normalized(m: &Matrix) -> Matrix {
    let s = spectral_norm_unchecked(m);
    if s > 0.0 {
        m / s
    } else {
        m.clone()
    }
}

fn spectral_norm_unchecked(m: &Matrix) -> f64 {
    singular_values(m).into_iter().fold(0.0, f64::max)
}

/// Largest singular value (0 for an empty matrix).
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    ensure_finite(m)?;
    Ok(spectral_norm_unchecked(m))
}

/// Extreme eigenvalues of the symmetric part `(m + mᵀ) / 2`.
pub fn sym_eig_extremes(m: &Matrix) -> Result<(f64, f64)> {
    ensure_finite(m)?;
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "eigenvalues need a nonempty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let ev = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

pub fn min_sym_eig(m: &Matrix) -> Result<f64> {
    Ok(sym_eig_extremes(m)?.0)
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Minimum-norm least-squares solution of `a x = b` (`b` may have several
/// columns). Singular values below the relative cutoff are treated as zero.
pub fn least_squares(a: &Matrix, b: &Matrix, tol: &Tolerance) -> Result<Matrix> {
    ensure_finite(a)?;
    ensure_finite(b)?;
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "least squares: {} equations but right-hand side has {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Ok(Matrix::zeros(cols, b.ncols()));
    }
    let Svd { u, s: sv, v_t } = svd(a);
    let cut = cutoff(&sv, tol.rank_rel);
    let utb = u.transpose() * b;
    let mut x = Matrix::zeros(cols, b.ncols());
    for (i, &s) in sv.iter().enumerate() {
        if s > cut && s > 0.0 {
            let coeff = utb.row(i) / s;
            x += v_t.row(i).transpose() * coeff;
        }
    }
    Ok(x)
}

/// Vertical concatenation `[top; bottom]`.
pub fn vstack(top: &Matrix, bottom: &Matrix) -> Matrix {
    assert_eq!(top.ncols(), bottom.ncols(), "vstack column mismatch");
    let mut out = Matrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape())
        .copy_from(bottom);
    out
}

/// Horizontal concatenation `[left right]`.
pub fn hstack(left: &Matrix, right: &Matrix) -> Matrix {
    assert_eq!(left.nrows(), right.nrows(), "hstack row mismatch");
    let mut out = Matrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.view_mut((0, 0), left.shape()).copy_from(left);
    out.view_mut((0, left.ncols()), right.shape())
        .copy_from(right);
    out
}

/// Controllability rank test on `[B, AB, ..., A^{n-1}B]`.
pub fn is_controllable(a: &Matrix, b: &Matrix, tol: &Tolerance) -> Result<bool> {
    let n = a.nrows();
    let mut blocks = b.clone();
    let mut power = b.clone();
    for _ in 1..n {
        power = a * power;
        blocks = hstack(&blocks, &power);
    }
    Ok(numeric_rank(&blocks, tol)? == n)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tol() -> Tolerance {
        Tolerance::default()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rank_of_identity_and_ones() {
        assert_eq!(numeric_rank(&Matrix::identity(2, 2), &tol()).unwrap(), 2);
        assert_eq!(
            numeric_rank(&Matrix::from_element(2, 2, 1.0), &tol()).unwrap(),
            1
        );
    }

    #[test]
    fn rank_of_product_of_thin_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(&mut rng, 5, 3) * random(&mut rng, 3, 8);
        assert_eq!(numeric_rank(&m, &tol()).unwrap(), 3);
    }

    #[test]
    fn empty_matrices() {
        assert_eq!(numeric_rank(&Matrix::zeros(3, 0), &tol()).unwrap(), 0);
        assert_eq!(numeric_rank(&Matrix::zeros(0, 3), &tol()).unwrap(), 0);
        let k = kernel_basis(&Matrix::zeros(0, 3), &tol()).unwrap();
        assert_eq!(k.shape(), (3, 3));
        assert_eq!(kernel_basis(&Matrix::zeros(2, 2), &tol()).unwrap().ncols(), 2);
    }

    #[test]
    fn non_finite_rejected() {
        let m = Matrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(numeric_rank(&m, &tol()), Err(Error::NonFinite)));
        assert!(matches!(spectral_norm(&m), Err(Error::NonFinite)));
    }

    #[test]
    fn kernel_of_axis_row() {
        let m = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let k = kernel_basis(&m, &tol()).unwrap();
        assert_eq!(k.ncols(), 1);
        assert_relative_eq!(k[(0, 0)].abs(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(k[(1, 0)].abs(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn kernel_of_full_column_rank_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 5, 3);
        assert_eq!(kernel_basis(&m, &tol()).unwrap().ncols(), 0);
    }

    #[test]
    fn kernel_of_random_wide_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(&mut rng, 2, 4);
        let k = kernel_basis(&m, &tol()).unwrap();
        assert_eq!(k.ncols(), 2);
        assert!((&m * &k).amax() < 1e-10);
    }

    #[test]
    fn kernel_inclusion_examples() {
        let i2 = Matrix::identity(2, 2);
        assert!(kernel_included(&i2, &i2, &tol()).unwrap());
        let a = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = Matrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(!kernel_included(&a, &b, &tol()).unwrap());
        let a = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = Matrix::from_row_slice(1, 2, &[2.0, 2.0]);
        assert!(kernel_included(&a, &b, &tol()).unwrap());
        assert!(matches!(
            kernel_included(&a, &Matrix::zeros(1, 3), &tol()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn kernel_inclusion_is_scale_robust() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-3]);
        let b = Matrix::from_row_slice(1, 2, &[1e7, 1e7]);
        assert!(kernel_included(&a, &b, &tol()).unwrap());
    }

    #[test]
    fn norms_and_eigs() {
        assert_relative_eq!(spectral_norm(&Matrix::identity(3, 3)).unwrap(), 1.0);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 5.0]));
        let (lo, hi) = sym_eig_extremes(&d).unwrap();
        assert_relative_eq!(lo, 2.0, epsilon = 1e-14);
        assert_relative_eq!(hi, 5.0, epsilon = 1e-14);
    }

    #[test]
    fn least_squares_square_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 4, 4) + Matrix::identity(4, 4) * 3.0;
        let x = random(&mut rng, 4, 2);
        let b = &a * &x;
        let sol = least_squares(&a, &b, &tol()).unwrap();
        assert!((&a * &sol - &b).amax() < 1e-12);
    }

    #[test]
    fn least_squares_min_norm() {
        // x1 + x2 = 2 has minimum-norm solution (1, 1).
        let a = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = Matrix::from_row_slice(1, 1, &[2.0]);
        let sol = least_squares(&a, &b, &tol()).unwrap();
        assert_relative_eq!(sol[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol[(1, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matrix_record_is_row_major() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = MatrixRecord::from(&m);
        assert_eq!(r.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Matrix::try_from(&r).unwrap(), m);
        let bad = MatrixRecord {
            rows: 2,
            cols: 2,
            data: vec![1.0],
        };
        assert!(Matrix::try_from(&bad).is_err());
    }

    #[test]
    fn controllability() {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(is_controllable(&a, &b, &tol()).unwrap());
        let b = Matrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(!is_controllable(&a, &b, &tol()).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy() -> impl Strategy<Value = Matrix> {
            (1usize..6, 1usize..6, 0usize..4, any::<u64>()).prop_map(|(r, c, k, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = k.min(r).min(c);
                random(&mut rng, r, k) * random(&mut rng, k, c)
            })
        }

        proptest! {
            #[test]
            fn rank_is_transpose_invariant(m in matrix_strategy()) {
                let t = tol();
                prop_assert_eq!(numeric_rank(&m, &t).unwrap(), numeric_rank(&m.transpose(), &t).unwrap());
            }

            #[test]
            fn kernel_basis_is_orthonormal_and_annihilated(m in matrix_strategy()) {
                let t = tol();
                let v = kernel_basis(&m, &t).unwrap();
                prop_assert_eq!(v.ncols(), m.ncols() - numeric_rank(&m, &t).unwrap());
                let norm = spectral_norm(&m).unwrap();
                prop_assert!(spectral_norm(&(&m * &v)).unwrap() <= 10.0 * t.rank_rel * norm.max(1e-300) + 1e-15);
                let gram = v.transpose() * &v;
                let eye = Matrix::identity(v.ncols(), v.ncols());
                prop_assert!((gram - eye).amax() < 1e-10);
            }

            #[test]
            fn kernel_inclusion_is_transitive(seed in any::<u64>(), c in 2usize..6) {
                // Nested row spaces: rows(a) ⊇ rows(b) ⊇ rows(d) by construction.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(&mut rng, c - 1, c);
                let b = random(&mut rng, 2, c - 1) * &a;
                let d = random(&mut rng, 1, 2) * &b;
                let t = tol();
                let ab = kernel_included(&a, &b, &t).unwrap();
                let bd = kernel_included(&b, &d, &t).unwrap();
                prop_assert!(ab && bd);
                prop_assert!(kernel_included(&a, &d, &t).unwrap());
            }
        }
    }
}
