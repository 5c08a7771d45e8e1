//! The DSM loss written out from its definition, for oracle checks.
//!
//! With `w(y) = k(y) R^{1/2}` and score `s = −R⁻¹(y − Hx)`:
//! `‖wᵀs‖² = k² (y−Hx)ᵀR⁻¹(y−Hx)` and
//! `∇_y·(w wᵀ s) = −∇k²ᵀ(y−Hx) − d_Y k²`, so
//! `DSM(x) = k²‖y−Hx‖²_{R⁻¹} − 2∇k²ᵀ(y−Hx) − 2 d_Y k²`.
//! For block weights the sums run per coordinate with `k²_{b(i)}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Clone, Copy, Debug)]
pub enum Profile {
    Imq(f64),
    SquaredExp(f64),
}

impl Profile {
    /// `(f(s), f'(s))`.
    pub fn eval(self, s: f64) -> (f64, f64) {
        match self {
            Profile::Imq(q) => {
                let k = 1.0 / (1.0 + s / q);
                (k, -k * k / q)
            }
            Profile::SquaredExp(h) => {
                let k = (-s / h).exp();
                (k, -k / h)
            }
        }
    }
}

/// Per-coordinate weights and their partial derivatives `∂k²_{b(i)}/∂y_i`
/// for blocks `sizes`, residual `r` standardized by `sigma`.
pub fn block_weights(
    profile: Profile,
    sizes: &[usize],
    r: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let d = r.len();
    let eig = SymmetricEigen::new(sigma.clone());
    let inv_root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    let z = &inv_root * r;
    let mut k = DVector::zeros(d);
    let mut dk = DVector::zeros(d);
    let mut start = 0;
    for &l in sizes {
        let zb = z.rows(start, l);
        let (f, fp) = profile.eval(zb.norm_squared());
        for i in start..start + l {
            // ∂s_b/∂y_i = 2 Σ_{j∈b} z_j S⁻¹[j, i]
            let ds: f64 = (start..start + l).map(|j| 2.0 * z[j] * inv_root[(j, i)]).sum();
            k[i] = f;
            dk[i] = fp * ds;
        }
        start += l;
    }
    (k, dk)
}

/// `DSM(x)` for a single weight over the whole observation.
pub fn dsm_loss_full(
    profile: Profile,
    x: &DVector<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    center: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> f64 {
    let res = y - center;
    let sigma_inv = sigma.clone().try_inverse().unwrap();
    let w = &sigma_inv * &res;
    let (k2, dk2) = profile.eval(res.dot(&w));
    let grad = w * (2.0 * dk2);
    let e = y - h * x;
    let r_inv = r.clone().try_inverse().unwrap();
    k2 * e.dot(&(&r_inv * &e)) - 2.0 * grad.dot(&e) - 2.0 * y.len() as f64 * k2
}

/// `DSM(x)` with block weights; `r` must be block diagonal along `sizes`.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss_blocks(
    profile: Profile,
    sizes: &[usize],
    x: &DVector<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    center: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> f64 {
    let (k, dk) = block_weights(profile, sizes, &(y - center), sigma);
    let e = y - h * x;
    let r_inv = r.clone().try_inverse().unwrap();
    let whitened = &r_inv * &e;
    (0..y.len())
        .map(|i| k[i] * e[i] * whitened[i] - 2.0 * dk[i] * e[i] - 2.0 * k[i])
        .sum()
}
