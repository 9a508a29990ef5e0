//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Singular values below this (absolute) are treated as zero for rank and
/// pseudo-inverse decisions on model-derived matrices.
pub const RANK_TOL: f64 = 1e-9;

/// Numerical rank with an absolute singular-value threshold.
pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    m.singular_values().iter().filter(|s| **s > tol).count()
}

/// Smallest singular value, `0.0` for matrices with fewer rows than columns.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() < m.ncols() || m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Moore-Penrose pseudo-inverse via SVD, zeroing singular values `<= tol`.
pub fn pinv(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let k = svd.singular_values.len();
    let mut s_inv = DMatrix::zeros(k, k);
    for (idx, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            s_inv[(idx, idx)] = 1.0 / s;
        }
    }
    v_t.transpose() * s_inv * u.transpose()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric positive definite test via Cholesky on the symmetric part;
/// rejects visibly non-symmetric input.
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.is_empty() {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    symmetrize(m).cholesky().is_some()
}

pub fn matrix_power(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

/// Number of independent entries of a symmetric `d x d` matrix.
pub fn sym_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Quadratic features of `w` such that `svec_features(w) . svec(P) = wᵀPw`
/// for symmetric `P`. Off-diagonal products are doubled.
pub fn svec_features(w: &DVector<f64>) -> DVector<f64> {
    let d = w.len();
    let mut out = DVector::zeros(sym_dim(d));
    let mut t = 0;
    for a in 0..d {
        for b in a..d {
            out[t] = if a == b { w[a] * w[a] } else { 2.0 * w[a] * w[b] };
            t += 1;
        }
    }
    out
}

/// Inverse of the upper-triangle packing: entries ordered row by row.
pub fn unpack_upper(values: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut t = 0;
    for a in 0..d {
        for b in a..d {
            m[(a, b)] = values[t];
            m[(b, a)] = values[t];
            t += 1;
        }
    }
    m
}

/// Row-major upper triangle (diagonal included).
pub fn pack_upper(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(sym_dim(d));
    for a in 0..d {
        for b in a..d {
            out.push(m[(a, b)]);
        }
    }
    out
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

/// Build a matrix from row lists. Returns `None` on ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

/// Stack column vectors into one vector.
pub fn concat(parts: &[&DVector<f64>]) -> DVector<f64> {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

/// Serde adapter storing a matrix as a list of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).ok_or_else(|| D::Error::custom("ragged matrix rows"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svec_matches_quadratic_form() {
        let p = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.0]);
        let w = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let lhs = svec_features(&w).dot(&DVector::from_vec(pack_upper(&p)));
        let rhs = (w.transpose() * &p * &w)[(0, 0)];
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(unpack_upper(&pack_upper(&p), 3), p);
    }

    #[test]
    fn pinv_is_left_inverse_for_full_column_rank() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 1.0, 0.0]);
        let left = pinv(&m, RANK_TOL) * &m;
        assert!((left - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn rotation_has_unit_spectral_radius() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((spectral_radius(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spd_rejects_indefinite() {
        assert!(is_spd(&DMatrix::identity(2, 2)));
        assert!(!is_spd(&DMatrix::from_row_slice(1, 1, &[0.0])));
        assert!(!is_spd(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])));
    }
}
