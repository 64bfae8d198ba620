//! Small dense linear-algebra helpers shared by the synthesis, certification
//! and simulation code.

use nalgebra::{Complex, DMatrix, DVector};

/// `xᵀ W x` for a square weight `W`.
pub fn quad_form(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    quad_form_slice(x.as_slice(), w)
}

pub fn quad_form_slice(x: &[f64], w: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += w[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// Weighted norm `‖x‖_W = √(xᵀ W x)`, clamped at zero against round-off.
pub fn weighted_norm(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    quad_form(x, w).max(0.0).sqrt()
}

pub fn weighted_norm_slice(x: &[f64], w: &DMatrix<f64>) -> f64 {
    quad_form_slice(x, w).max(0.0).sqrt()
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = 0.5 * (m + m.transpose());
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    *symmetric_eigenvalues(m).last().expect("non-empty matrix")
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m)[0]
}

/// Largest eigenvalue of `√P`, i.e. `√λ̄(P)` for `P ≻ 0`.
pub fn sqrt_max_eigenvalue(p: &DMatrix<f64>) -> f64 {
    max_eigenvalue(p).max(0.0).sqrt()
}

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.nrows() == 1 {
        return vec![Complex::new(m[(0, 0)], 0.0)];
    }
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    eigenvalues(m).iter().all(|l| l.re < 0.0)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Row-major construction with a dimension check.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Option<DMatrix<f64>> {
    (data.len() == rows * cols).then(|| DMatrix::from_row_slice(rows, cols, data))
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Deterministic low-discrepancy point set: the Halton sequence in `dim`
/// dimensions, skipping the origin.
pub fn halton(index: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [u64; 20] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
    ];
    (0..dim)
        .map(|d| {
            let base = PRIMES[d % PRIMES.len()];
            let mut i = index as u64 + 1;
            let mut f = 1.0;
            let mut r = 0.0;
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

/// Points on the unit sphere in `dim` dimensions built from Halton samples.
/// For the plane the points are evenly spaced angles.
pub fn sphere_points(count: usize, dim: usize) -> Vec<DVector<f64>> {
    if dim == 1 {
        return (0..count)
            .map(|i| DVector::from_element(1, if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
    }
    if dim == 2 {
        return (0..count)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / count as f64;
                DVector::from_vec(vec![th.cos(), th.sin()])
            })
            .collect();
    }
    let mut out = Vec::with_capacity(count);
    let mut idx = 0;
    while out.len() < count {
        let h = halton(idx, dim);
        idx += 1;
        let v = DVector::from_iterator(dim, h.iter().map(|u| 2.0 * u - 1.0));
        let norm = v.norm();
        if norm > 1e-6 {
            out.push(v / norm);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_norm_matches_definition() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        // 2 - 2 + 4
        assert!((quad_form(&x, &p) - 4.0).abs() < 1e-15);
        assert!((weighted_norm(&x, &p) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn hurwitz_detection() {
        let stable = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        let unstable = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, -3.0]);
        assert!(is_hurwitz(&stable));
        assert!(!is_hurwitz(&unstable));
        assert!(is_hurwitz(&DMatrix::from_element(1, 1, -1.0)));
    }

    #[test]
    fn sphere_points_are_unit() {
        for dim in 1..5 {
            for p in sphere_points(64, dim) {
                assert!((p.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
