//! Positive-definite matrix utilities.
//!
//! Everything that needs `Σ⁻¹` quadratic forms, solves against a covariance
//! or a symmetric square root goes through [`SpdFactor`]. Construction
//! symmetrizes the input and retries the Cholesky factorization with a small
//! diagonal jitter before giving up.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Relative jitter added on the first repair attempt, scaled by `trace / d`.
const JITTER_BASE: f64 = 1e-12;
/// Number of repair attempts after the first failed factorization.
const JITTER_ATTEMPTS: usize = 3;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_mut(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor of a symmetric positive-definite matrix, with a lazily
/// computed symmetric square root and its inverse.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    matrix: DMatrix<f64>,
    lower: DMatrix<f64>,
    jitter: f64,
    roots: OnceLock<(DMatrix<f64>, DMatrix<f64>)>,
}

impl SpdFactor {
    /// Factor `m`, symmetrizing first.
    ///
    /// If the plain factorization fails, `1e-12·trace/d·I` is added and the
    /// factorization retried up to three times with 10× escalation.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::named(m, "matrix")
    }

    /// Same as [`SpdFactor::new`] but reports `what` on failure.
    pub fn named(m: DMatrix<f64>, what: &'static str) -> Result<Self> {
        let d = m.nrows();
        check_dim("square matrix", d, m.ncols())?;
        if d == 0 {
            return Err(Error::InvalidParameter(format!("{what} has zero dimension")));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        let matrix = symmetrize(&m);
        if let Some(chol) = matrix.clone().cholesky() {
            return Ok(Self {
                lower: chol.l(),
                matrix,
                jitter: 0.0,
                roots: OnceLock::new(),
            });
        }
        let scale = matrix.trace() / d as f64;
        if !(scale > 0.0) {
            return Err(Error::NotPositiveDefinite { what });
        }
        let mut jitter = JITTER_BASE * scale;
        for _ in 0..JITTER_ATTEMPTS {
            let mut repaired = matrix.clone();
            for i in 0..d {
                repaired[(i, i)] += jitter;
            }
            if let Some(chol) = repaired.clone().cholesky() {
                return Ok(Self {
                    lower: chol.l(),
                    matrix: repaired,
                    jitter,
                    roots: OnceLock::new(),
                });
            }
            jitter *= 10.0;
        }
        Err(Error::NotPositiveDefinite { what })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The factored matrix (including any jitter that was added).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Diagonal jitter that was needed for the factorization, 0 if none.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor `L` with `L·Lᵀ = matrix`.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `L⁻¹ r`; its squared norm is the Mahalanobis square of `r`.
    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(r)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = self.whiten(b);
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self
            .lower
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.solve_mat(&DMatrix::identity(self.dim(), self.dim()));
        symmetrize_mut(&mut inv);
        inv
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `rᵀ·M⁻¹·r` via a triangular solve.
    pub fn mahalanobis_sq(&self, r: &DVector<f64>) -> f64 {
        self.whiten(r).norm_squared()
    }

    /// Symmetric square root `S` with `S·S = matrix`.
    pub fn sym_sqrt(&self) -> &DMatrix<f64> {
        &self.roots().0
    }

    /// Symmetric inverse square root `S⁻¹`.
    pub fn inv_sym_sqrt(&self) -> &DMatrix<f64> {
        &self.roots().1
    }

    fn roots(&self) -> &(DMatrix<f64>, DMatrix<f64>) {
        self.roots.get_or_init(|| {
            let eig = SymmetricEigen::new(self.matrix.clone());
            let floor = f64::MIN_POSITIVE;
            let sqrt = eig.eigenvalues.map(|l| l.max(floor).sqrt());
            let inv_sqrt = sqrt.map(|s| 1.0 / s);
            let v = &eig.eigenvectors;
            let root = symmetrize(&(v * DMatrix::from_diagonal(&sqrt) * v.transpose()));
            let inv_root = symmetrize(&(v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose()));
            (root, inv_root)
        })
    }
}

/// Squared Mahalanobis distance `rᵀ·cov⁻¹·r`.
pub fn mahalanobis_sq(residual: &DVector<f64>, cov: &SpdFactor) -> f64 {
    cov.mahalanobis_sq(residual)
}

/// Unique symmetric positive semi-definite square root of a symmetric matrix.
///
/// Eigenvalues in `[-tol, 0)` are clamped to zero; anything below `-tol`
/// is reported as a breakdown.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    check_dim("square matrix", m.nrows(), m.ncols())?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to psd_sqrt".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -tol * scale {
            return Err(Error::Numerical(format!(
                "matrix is not positive semi-definite (eigenvalue {l:e})"
            )));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&roots) * v.transpose())))
}

/// Leading eigenvector of a symmetric matrix, signed so that its largest
/// component is positive.
pub fn leading_eigenvector(m: &DMatrix<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let idx = eig.eigenvalues.imax();
    let mut v = eig.eigenvectors.column(idx).into_owned();
    let pivot = v.iamax();
    if v[pivot] < 0.0 {
        v.neg_mut();
    }
    v
}

/// Smallest eigenvalue of a symmetric matrix. Used for Loewner-order checks.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn cholesky_reconstructs() {
        for seed in 0..20 {
            let m = random_spd(1 + (seed as usize % 12), seed);
            let f = SpdFactor::new(m.clone()).unwrap();
            let rec = f.lower() * f.lower().transpose();
            assert!((rec - &m).norm() / m.norm() <= 1e-10);
            assert_eq!(f.jitter(), 0.0);
        }
    }

    #[test]
    fn symmetric_root_squares_back() {
        for seed in 0..20 {
            let m = random_spd(1 + (seed as usize % 9), 100 + seed);
            let f = SpdFactor::new(m.clone()).unwrap();
            let s = f.sym_sqrt();
            assert!((s * s - &m).norm() / m.norm() <= 1e-8);
            let si = f.inv_sym_sqrt();
            let id = si * &m * si;
            assert!((id - DMatrix::identity(m.nrows(), m.nrows())).norm() <= 1e-8);
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let f = SpdFactor::new(DMatrix::from_diagonal_element(2, 2, 2.0)).unwrap();
        assert_eq!(mahalanobis_sq(&DVector::zeros(2), &f), 0.0);
        let r = DVector::from_vec(vec![1.0, 1.0]);
        assert!((mahalanobis_sq(&r, &f) - 1.0).abs() < 1e-15);

        let id = SpdFactor::new(DMatrix::identity(3, 3)).unwrap();
        let r = DVector::from_vec(vec![0.3, -2.0, 1.5]);
        assert!((mahalanobis_sq(&r, &id) - r.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn jitter_repairs_semidefinite_input() {
        // rank-one: v·vᵀ is PSD but singular
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let f = SpdFactor::new(m).unwrap();
        assert!(f.jitter() > 0.0);
        assert!(f.jitter() <= 1e-9 * 14.0 / 3.0);
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            SpdFactor::new(m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn psd_sqrt_clamps_small_negative() {
        let v = DVector::from_vec(vec![1.0, -1.0]);
        let m = &v * v.transpose();
        let s = psd_sqrt(&m, 1e-10).unwrap();
        assert!((&s * &s - &m).norm() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]);
        assert!(psd_sqrt(&bad, 1e-8).is_err());
    }
}
