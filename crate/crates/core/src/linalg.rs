//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for constraint pseudo-inverses.
pub const PINV_RCOND: f64 = 1e-10;

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
///
/// Returns the pseudo-inverse together with the numerical rank.
pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> (DMatrix<f64>, usize) {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return (DMatrix::zeros(cols, rows), 0);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rcond * sigma_max;
    let mut out = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    for (i, &sv) in svd.singular_values.iter().enumerate() {
        if sv > cutoff && sv > 0.0 {
            rank += 1;
            out += (v_t.row(i).transpose() * u.column(i).transpose()) / sv;
        }
    }
    (out, rank)
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues in ascending order with matching eigenvector columns.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// (lambda_min, lambda_max) of a symmetric matrix.
pub fn eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    if a.is_empty() {
        return (0.0, 0.0);
    }
    let (vals, _) = sym_eigen(a);
    (vals[0], vals[vals.len() - 1])
}

/// Rebuild a symmetric matrix from eigenpairs after mapping the eigenvalues.
pub fn map_spectrum(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let mapped = DMatrix::from_diagonal(&vals.map(f));
    symmetrize(&(&vecs * mapped * vecs.transpose()))
}

/// Principal square root of a positive semidefinite matrix.
///
/// Eigenvalues down to `-tol` are treated as zero; anything more negative is an error.
pub fn psd_sqrt(a: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let (vals, _) = sym_eigen(a);
    if vals.len() > 0 && vals[0] < -tol {
        return Err(Error::contract(format!(
            "matrix is not PSD: smallest eigenvalue {}",
            vals[0]
        )));
    }
    Ok(map_spectrum(a, |v| v.max(0.0).sqrt()))
}

/// Orthonormal-column factor `U V^T` of a thin SVD of `m` (d x k, d >= k).
///
/// Directions with vanishing singular values are completed with a
/// Gram-Schmidt pass over the standard basis so the result always has
/// orthonormal columns.
pub fn polar_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = m.shape();
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut keep = Vec::new();
    for i in 0..svd.singular_values.len() {
        if smax > 0.0 && svd.singular_values[i] > 1e-12 * smax {
            keep.push(i);
        }
    }
    // U columns for well-conditioned directions, completed to k columns.
    let mut u_full = DMatrix::zeros(d, k);
    let mut v_full = DMatrix::zeros(k, k);
    for (c, &i) in keep.iter().enumerate() {
        u_full.set_column(c, &u.column(i));
        v_full.set_column(c, &v_t.row(i).transpose());
        basis.push(u.column(i).into_owned());
    }
    let mut c = keep.len();
    let mut vbasis: Vec<DVector<f64>> = keep.iter().map(|&i| v_t.row(i).transpose()).collect();
    let mut e = 0;
    while c < k {
        // Complete U.
        let mut cand = DVector::zeros(d);
        while e < d {
            cand = DVector::zeros(d);
            cand[e] = 1.0;
            e += 1;
            for b in &basis {
                let proj = b.dot(&cand);
                cand -= b * proj;
            }
            if cand.norm() > 1e-8 {
                break;
            }
        }
        let cand = cand.normalize();
        basis.push(cand.clone());
        u_full.set_column(c, &cand);
        // Complete V.
        let mut vc = DVector::zeros(k);
        for j in 0..k {
            vc = DVector::zeros(k);
            vc[j] = 1.0;
            for b in &vbasis {
                let proj = b.dot(&vc);
                vc -= b * proj;
            }
            if vc.norm() > 1e-8 {
                break;
            }
        }
        let vc = vc.normalize();
        vbasis.push(vc.clone());
        v_full.set_column(c, &vc);
        c += 1;
    }
    u_full * v_full.transpose()
}

/// Solve a symmetric positive definite system, falling back to LU.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::numerical("singular linear system"))
}

/// Column-major `vec` of a matrix.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let (p, rank) = pinv(&a, PINV_RCOND);
        assert_eq!(rank, 2);
        let id = &a * &p;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn pinv_reports_rank_deficiency() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let (p, rank) = pinv(&a, PINV_RCOND);
        assert_eq!(rank, 1);
        // Penrose identity A A+ A = A.
        assert!((&a * &p * &a - &a).norm() < 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&a, 1e-12).unwrap();
        assert!((&r * &r - &a).norm() < 1e-12);
        let neg = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(psd_sqrt(&neg, 1e-12).is_err());
    }

    #[test]
    fn polar_factor_has_orthonormal_columns() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let q = polar_factor(&m);
        assert!((q.transpose() * &q - DMatrix::identity(2, 2)).norm() < 1e-12);
        let z = DMatrix::zeros(3, 2);
        let q = polar_factor(&z);
        assert!((q.transpose() * &q - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn vec_roundtrip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = vec_of(&m);
        assert_eq!(v.as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(unvec(v.as_slice(), 2, 3), m);
    }
}
