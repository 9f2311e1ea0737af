//! Cholesky factorization and the PSD solves built on it.

use super::Matrix;
use crate::error::{FitError, Result};

/// Lower-triangular factor `L` with `L·Lᵀ = A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// Wraps a stored lower factor; the diagonal must be positive.
    pub fn from_lower(l: Matrix) -> Result<Self> {
        if !l.is_square() {
            return Err(FitError::DimensionMismatch(format!(
                "factor of shape {:?}",
                l.shape()
            )));
        }
        for i in 0..l.rows() {
            let d = l.get(i, i);
            if !(d > 0.0) || !d.is_finite() {
                return Err(FitError::NotPositiveDefinite { row: i, pivot: d });
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.l
            .matmul(&self.l.transpose())
            .expect("square factor always conforms")
    }

    /// Solves `L·y = b` in place, column by column.
    fn forward_substitute(&self, b: &mut Matrix) {
        let n = self.dim();
        for col in 0..b.cols() {
            for i in 0..n {
                let mut s = b.get(i, col);
                for k in 0..i {
                    s -= self.l.get(i, k) * b.get(k, col);
                }
                b.set(i, col, s / self.l.get(i, i));
            }
        }
    }

    /// Solves `Lᵀ·x = y` in place.
    fn back_substitute(&self, b: &mut Matrix) {
        let n = self.dim();
        for col in 0..b.cols() {
            for i in (0..n).rev() {
                let mut s = b.get(i, col);
                for k in i + 1..n {
                    s -= self.l.get(k, i) * b.get(k, col);
                }
                b.set(i, col, s / self.l.get(i, i));
            }
        }
    }

    /// `A⁻¹·b` through two triangular solves.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.dim() {
            return Err(FitError::DimensionMismatch(format!(
                "solve: factor is {0}x{0}, rhs has {1} rows",
                self.dim(),
                b.rows()
            )));
        }
        let mut x = b.clone();
        self.forward_substitute(&mut x);
        self.back_substitute(&mut x);
        Ok(x)
    }

    /// `L⁻¹·b`; used for Mahalanobis norms `‖L⁻¹(x−μ)‖²`.
    pub fn solve_lower(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.dim() {
            return Err(FitError::DimensionMismatch(format!(
                "solve_lower: factor is {0}x{0}, rhs has {1} rows",
                self.dim(),
                b.rows()
            )));
        }
        let mut x = b.clone();
        self.forward_substitute(&mut x);
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.dim()))
            .expect("identity conforms")
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l.get(i, i).ln()).sum::<f64>()
    }
}

/// Factorizes `a + jitter·I`. Only the lower triangle of `a` is read.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(FitError::DimensionMismatch(format!(
            "cholesky of non-square {:?}",
            a.shape()
        )));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + jitter;
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(FitError::NotPositiveDefinite { row: j, pivot: d });
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(CholeskyFactor { l })
}

pub fn chol_solve(l: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    l.solve(b)
}

pub fn chol_logdet(l: &CholeskyFactor) -> f64 {
    l.logdet()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, ridge: f64, rng: &mut impl Rng) -> Matrix {
        let m = Matrix::from_vec(
            n,
            n,
            (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        m.transpose()
            .matmul(&m)
            .unwrap()
            .add(&Matrix::identity(n).scale(ridge))
            .unwrap()
    }

    /// Determinant by Gaussian elimination with partial pivoting.
    fn lu_det(a: &Matrix) -> f64 {
        let n = a.rows();
        let mut m = a.clone();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| m.get(x, c).abs().total_cmp(&m.get(y, c).abs()))
                .unwrap();
            if p != c {
                for j in 0..n {
                    let t = m.get(c, j);
                    m.set(c, j, m.get(p, j));
                    m.set(p, j, t);
                }
                det = -det;
            }
            let piv = m.get(c, c);
            det *= piv;
            for r in c + 1..n {
                let f = m.get(r, c) / piv;
                for j in c..n {
                    m.set(r, j, m.get(r, j) - f * m.get(c, j));
                }
            }
        }
        det
    }

    #[test]
    fn identity_factors_to_identity() {
        let f = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(f.lower(), &Matrix::identity(3));
        assert_eq!(f.logdet(), 0.0);
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let f = cholesky(&a, 0.0).unwrap();
        let expected = Matrix::from_rows(&[[2.0, 0.0], [1.0, 2f64.sqrt()]]);
        assert!(f.lower().max_abs_diff(&expected) < 1e-15);

        // A⁻¹ = [[3,-2],[-2,4]] / 8
        let x = f.solve(&Matrix::col_vector(&[1.0, 0.0])).unwrap();
        assert!((x.get(0, 0) - 0.375).abs() < 1e-15);
        assert!((x.get(1, 0) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn jitter_is_added_to_diagonal() {
        let a = Matrix::zeros(2, 2);
        assert!(matches!(
            cholesky(&a, 0.0),
            Err(FitError::NotPositiveDefinite { row: 0, .. })
        ));
        let f = cholesky(&a, 4.0).unwrap();
        assert!(f.reconstruct().max_abs_diff(&Matrix::identity(2).scale(4.0)) < 1e-15);
    }

    #[test]
    fn logdet_of_diagonal() {
        let f = cholesky(&Matrix::diag(&[4.0, 9.0]), 0.0).unwrap();
        assert!((f.logdet() - 36f64.ln()).abs() < 1e-15);
        assert!((f.logdet() - 3.5835).abs() < 1e-4);
    }

    #[test]
    fn random_reconstruction_and_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_psd(8, 0.1, &mut rng);
            let f = cholesky(&a, 0.0).unwrap();
            let rel = f.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-10, "{rel}");
            let brute = lu_det(&a).ln();
            assert!((f.logdet() - brute).abs() < 1e-9, "{} vs {}", f.logdet(), brute);
        }
    }

    #[test]
    fn random_solve_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_psd(16, 0.1, &mut rng);
            let b = Matrix::from_vec(16, 2, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let x = chol_solve(&cholesky(&a, 0.0).unwrap(), &b).unwrap();
            let r = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm() / b.frobenius_norm();
            assert!(r < 1e-10, "{r}");
        }
    }

    #[test]
    fn solve_rejects_bad_rhs() {
        let f = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert!(matches!(
            f.solve(&Matrix::zeros(2, 1)),
            Err(FitError::DimensionMismatch(_))
        ));
    }
}
