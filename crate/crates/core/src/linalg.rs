//! Small dense helpers shared by the spectral and tensor code.
//!
//! Fourth-order tensors T^{jk,lm} are stored as d²×d² matrices with row index
//! j·d+k and column index l·d+m. Contractions against gradients (stored as
//! d²-vectors in the same layout) then reduce to ordinary matrix products.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Fourth-order tensor on (ℝ^{d×d})², flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub d: usize,
    pub flat: Mat,
}

impl Tensor4 {
    pub fn zeros(d: usize) -> Self {
        Tensor4 { d, flat: Mat::zeros(d * d, d * d) }
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize, l: usize, m: usize) -> f64 {
        self.flat[(j * self.d + k, l * self.d + m)]
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, l: usize, m: usize, v: f64) {
        self.flat[(j * self.d + k, l * self.d + m)] = v;
    }

    /// Σ_{jklm} a^{jk,lm} b^{jk,lm}
    pub fn full_contract(&self, other: &Tensor4) -> f64 {
        self.flat.component_mul(&other.flat).sum()
    }

    /// Σ_{jklm} a_{jk} T^{jk,lm} b_{lm}
    pub fn bilinear(&self, a: &Mat, b: &Mat) -> f64 {
        let va = vec_rm(a);
        let vb = vec_rm(b);
        (va.transpose() * &self.flat * vb)[(0, 0)]
    }

    pub fn add(&self, other: &Tensor4) -> Tensor4 {
        Tensor4 { d: self.d, flat: &self.flat + &other.flat }
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        Tensor4 { d: self.d, flat: &self.flat * s }
    }

    /// Average over j↔k, l↔m and (jk)↔(lm).
    pub fn symmetrized(&self) -> Tensor4 {
        let d = self.d;
        let mut out = Tensor4::zeros(d);
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        let s = self.get(j, k, l, m)
                            + self.get(k, j, l, m)
                            + self.get(j, k, m, l)
                            + self.get(k, j, m, l)
                            + self.get(l, m, j, k)
                            + self.get(m, l, j, k)
                            + self.get(l, m, k, j)
                            + self.get(m, l, k, j);
                        out.set(j, k, l, m, s / 8.0);
                    }
                }
            }
        }
        out
    }
}

/// Row-major vectorisation: index j·d+k.
pub fn vec_rm(a: &Mat) -> Vector {
    let (r, c) = a.shape();
    Vector::from_fn(r * c, |i, _| a[(i / c, i % c)])
}

pub fn unvec_rm(v: &[f64], d: usize) -> Mat {
    Mat::from_fn(d, d, |j, k| v[j * d + k])
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn asymmetry(a: &Mat) -> f64 {
    let d = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..d {
        for k in (j + 1)..d {
            worst = worst.max((a[(j, k)] - a[(k, j)]).abs());
        }
    }
    worst
}

pub fn check_symmetric(a: &Mat, tol: f64) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!("matrix is {}x{}, expected square", a.nrows(), a.ncols())));
    }
    let scale = max_abs(a).max(1.0);
    let asym = asymmetry(a);
    if asym > tol * scale {
        return Err(Error::Shape(format!("matrix not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Eigendecomposition with eigenvalues in descending order and a deterministic
/// sign per column: the largest-magnitude entry is made positive, ties going to
/// the lowest row index.
pub fn eig_sorted(c: &Mat) -> Result<(Vector, Mat)> {
    check_symmetric(c, 1e-10)?;
    let d = c.nrows();
    let se = SymmetricEigen::new(symmetrize(c));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
    let lam = Vector::from_fn(d, |i, _| se.eigenvalues[order[i]]);
    let mut q = Mat::zeros(d, d);
    for (col, &src) in order.iter().enumerate() {
        let mut v = se.eigenvectors.column(src).into_owned();
        let n = v.norm();
        if n > 0.0 {
            v /= n;
        }
        if sign_of_rule(v.as_slice()) < 0.0 {
            v = -v;
        }
        q.set_column(col, &v);
    }
    Ok((lam, q))
}

/// +1 if the vector already satisfies the sign rule, −1 otherwise.
pub fn sign_of_rule(v: &[f64]) -> f64 {
    let amax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tie = 1e-12 * amax.max(f64::MIN_POSITIVE);
    for &x in v {
        if x.abs() >= amax - tie {
            return if x < 0.0 { -1.0 } else { 1.0 };
        }
    }
    1.0
}

/// Frobenius-nearest PSD matrix: negative eigenvalues clipped to zero.
pub fn psd_project(m: &Mat) -> Result<Mat> {
    check_symmetric(m, 1e-10)?;
    let (lam, q) = eig_sorted(m)?;
    // Eigenvalues at roundoff level below zero count as zero, so projecting a
    // projection returns it unchanged.
    let scale = lam.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = 4.0 * m.nrows() as f64 * f64::EPSILON * scale;
    if lam.iter().all(|&x| x >= -tol) {
        return Ok(symmetrize(m));
    }
    let clipped = Mat::from_diagonal(&lam.map(|x| x.max(0.0)));
    Ok(symmetrize(&(&q * clipped * q.transpose())))
}

/// Raise eigenvalues below `eps` to `eps`. Returns the (possibly unchanged)
/// matrix and whether the floor was applied.
pub fn eigen_floor(m: &Mat, eps: f64) -> Result<(Mat, bool)> {
    let (lam, q) = eig_sorted(m)?;
    if lam.iter().all(|&x| x >= eps) {
        return Ok((m.clone(), false));
    }
    let fl = Mat::from_diagonal(&lam.map(|x| x.max(eps)));
    Ok((symmetrize(&(&q * fl * q.transpose())), true))
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    let se = SymmetricEigen::new(symmetrize(m));
    se.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eig_descending_with_sign_rule() {
        let c = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (lam, q) = eig_sorted(&c).unwrap();
        assert_abs_diff_eq!(lam[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lam[1], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q[(1, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q[(0, 1)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn eig_offdiagonal_closed_form() {
        let c = Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (lam, q) = eig_sorted(&c).unwrap();
        let r = 0.5f64.sqrt();
        assert_abs_diff_eq!(lam[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lam[1], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q[(0, 0)], r, epsilon = 1e-14);
        assert_abs_diff_eq!(q[(1, 0)], r, epsilon = 1e-14);
        assert_abs_diff_eq!(q[(0, 1)], r, epsilon = 1e-14);
        assert_abs_diff_eq!(q[(1, 1)], -r, epsilon = 1e-14);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let c = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(eig_sorted(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn eig_identity_is_orthonormal() {
        let (lam, q) = eig_sorted(&Mat::identity(3, 3)).unwrap();
        assert!(lam.iter().all(|&x| (x - 1.0).abs() < 1e-14));
        assert!((q.transpose() * &q - Mat::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn psd_project_examples() {
        let p = psd_project(&Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0])).unwrap();
        assert_abs_diff_eq!(p, Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]), epsilon = 1e-14);
        let p = psd_project(&Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(p, Mat::from_element(2, 2, 0.5), epsilon = 1e-14);
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_abs_diff_eq!(psd_project(&a).unwrap(), a, epsilon = 1e-12);
    }

    #[test]
    fn tensor_layout_and_bilinear() {
        let mut t = Tensor4::zeros(2);
        t.set(0, 1, 1, 0, 2.0);
        let a = Mat::from_row_slice(2, 2, &[0.0, 3.0, 0.0, 0.0]);
        let b = Mat::from_row_slice(2, 2, &[0.0, 0.0, 5.0, 0.0]);
        assert_abs_diff_eq!(t.bilinear(&a, &b), 30.0);
    }
}
