//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Each rotation annihilates one off-diagonal pair; sweeping over all pairs
//! drives the off-diagonal mass to zero quadratically once it is small. The
//! accumulated rotations form the eigenvector matrix. Plenty fast for the
//! batch-sized matrices used here (n up to a few hundred).

use crate::error::{Error, Result};
use crate::numeric::Matrix;

const MAX_SWEEPS: usize = 100;

/// Tolerance on `|m_ij - m_ji|` accepted as symmetric, relative to the
/// largest entry when that exceeds one.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues below this are rejected by [`inv_sqrt_psd`]; values between
/// it and zero are treated as round-off and clamped.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Matrix,
}

impl SymEig {
    /// `V · diag(f(w)) · Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fw: Vec<f64> = self.values.iter().map(|&w| f(w)).collect();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for (k, s) in fw.iter().enumerate() {
                let v = scaled.get(i, k) * s;
                scaled.set(i, k, v);
            }
        }
        scaled
            .matmul_nt(&self.vectors)
            .expect("eigenvector matrix is square")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|w| w)
    }
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let asymmetry = m.asymmetry();
    if !(asymmetry <= SYMMETRY_TOL * m.max_abs().max(1.0)) {
        return Err(Error::NotSymmetric { asymmetry });
    }
    Ok(())
}

pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    check_symmetric(m)?;
    let n = m.rows();
    jacobi(m.symmetrized()?, Matrix::identity(n))
}

/// Like [`sym_eig`], starting from an orthogonal `guess` whose columns are
/// approximate eigenvectors. `m` is first rotated into that basis, which
/// leaves little off-diagonal mass when the guess is good.
pub fn sym_eig_from(m: &Matrix, guess: &Matrix) -> Result<SymEig> {
    check_symmetric(m)?;
    if guess.shape() != m.shape() {
        return Err(Error::Shape {
            op: "sym_eig_from",
            left: m.shape(),
            right: guess.shape(),
        });
    }
    let rotated = guess.matmul_tn(&m.matmul(guess)?)?.symmetrized()?;
    jacobi(rotated, guess.transpose())
}

/// Diagonalizes symmetric `a`; row k of `vt` accumulates eigenvector k.
fn jacobi(a: Matrix, vt: Matrix) -> Result<SymEig> {
    let n = a.rows();
    let total = a.frobenius_norm();
    let mut a = a.into_data();
    let mut vt = vt.into_data();
    if total == 0.0 || n < 2 {
        return Ok(sorted(diagonal(&a, n), vt, n));
    }
    let target = (1e-15 * total).powi(2);

    for sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| 2.0 * a[i * n + j].powi(2))
            .sum();
        if off <= target {
            return Ok(sorted(diagonal(&a, n), vt, n));
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // After a few sweeps, entries too small to change either
                // diagonal entry in floating point are dropped.
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut vt, n, p, q, c, s, t);
            }
        }
    }
    Err(Error::NoConvergence { sweeps: MAX_SWEEPS })
}

fn diagonal(a: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Applies `A ← JᵀAJ` for the plane rotation in `(p, q)` that zeroes
/// `a_pq`, and rotates rows `p`, `q` of the transposed vector matrix.
#[allow(clippy::too_many_arguments)]
fn rotate(a: &mut [f64], vt: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let apq = a[p * n + q];
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        let np = c * akp - s * akq;
        let nq = s * akp + c * akq;
        a[k * n + p] = np;
        a[p * n + k] = np;
        a[k * n + q] = nq;
        a[q * n + k] = nq;
    }
    a[p * n + p] -= t * apq;
    a[q * n + q] += t * apq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    let (head, tail) = vt.split_at_mut(q * n);
    let vp = &mut head[p * n..(p + 1) * n];
    let vq = &mut tail[..n];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn sorted(values: Vec<f64>, vt: Vec<f64>, n: usize) -> SymEig {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    let mut vectors = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, new, vt[old * n + i]);
        }
    }
    SymEig {
        values: order.iter().map(|&k| values[k]).collect(),
        vectors,
    }
}

/// `(m + eps·I)^(-1/2)` for symmetric positive semidefinite `m`.
pub fn inv_sqrt_psd(m: &Matrix, eps: f64) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    psd_power(&eig, eps, -0.5)
}

/// `(m + eps·I)^(1/2)`.
pub fn sqrt_psd(m: &Matrix, eps: f64) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    psd_power(&eig, eps, 0.5)
}

fn psd_power(eig: &SymEig, eps: f64, power: f64) -> Result<Matrix> {
    if let Some(&lowest) = eig.values.first() {
        if lowest < -PSD_TOL {
            return Err(Error::NotPsd { eigenvalue: lowest });
        }
        if power < 0.0 && lowest.max(0.0) + eps <= 0.0 {
            return Err(Error::Singular);
        }
    }
    Ok(eig.reconstruct_with(|w| (w.max(0.0) + eps).powf(power)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_orthonormal(v: &Matrix) {
        let n = v.rows();
        let vtv = v.matmul_tn(v).unwrap();
        let err = vtv.sub(&Matrix::identity(n)).unwrap().frobenius_norm();
        assert!(err <= 1e-9 * n as f64, "VᵀV - I = {err}");
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let eig = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0, 1.0]);
        assert_orthonormal(&eig.vectors);
    }

    #[test]
    fn diagonal_is_sorted_and_axis_aligned() {
        let eig = sym_eig(&Matrix::diag(&[4.0, 1.0])).unwrap();
        assert_eq!(eig.values, vec![1.0, 4.0]);
        assert_eq!(eig.vectors.get(1, 0).abs(), 1.0);
        assert_eq!(eig.vectors.get(0, 1).abs(), 1.0);
        assert_eq!(eig.vectors.get(0, 0), 0.0);
    }

    #[test]
    fn known_3x3_spectrum() {
        // [[2,0,0],[0,3,4],[0,4,9]] has eigenvalues 1, 2, 11.
        let m = Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 3.0, 4.0], [0.0, 4.0, 9.0]]);
        let eig = sym_eig(&m).unwrap();
        for (got, want) in eig.values.iter().zip([1.0, 2.0, 11.0]) {
            assert!((got - want).abs() < 1e-13);
        }
        assert!(eig.reconstruct().sub(&m).unwrap().frobenius_norm() < 1e-13);
    }

    #[test]
    fn rejects_asymmetric_and_rectangular() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric { .. })));
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn warm_start_matches_cold() {
        let m = Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 3.0, 4.0], [0.0, 4.0, 9.0]]);
        let cold = sym_eig(&m).unwrap();
        let nudged = m.add(&Matrix::diag(&[0.0, 0.01, 0.0])).unwrap();
        let warm = sym_eig_from(&nudged, &cold.vectors).unwrap();
        assert_orthonormal(&warm.vectors);
        assert!(warm.reconstruct().sub(&nudged).unwrap().frobenius_norm() < 1e-13);
        for (w, c) in warm.values.iter().zip(sym_eig(&nudged).unwrap().values) {
            assert!((w - c).abs() < 1e-13);
        }
    }

    #[test]
    fn inv_sqrt_of_diagonal() {
        let r = inv_sqrt_psd(&Matrix::diag(&[4.0, 9.0]), 0.0).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((r.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.get(0, 1), 0.0);
        assert_eq!(inv_sqrt_psd(&Matrix::identity(4), 0.0).unwrap(), Matrix::identity(4));
    }

    #[test]
    fn inv_sqrt_rejects_indefinite() {
        let m = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(inv_sqrt_psd(&m, 1e-8), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn zero_matrix_needs_regularization() {
        let z = Matrix::zeros(3, 3);
        assert!(matches!(inv_sqrt_psd(&z, 0.0), Err(Error::Singular)));
        let r = inv_sqrt_psd(&z, 1e-8).unwrap();
        assert!((r.get(1, 1) - 1e4).abs() < 1e-6);
    }
}
