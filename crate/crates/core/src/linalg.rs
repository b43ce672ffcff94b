//! Dense helpers shared by the estimators: sorted symmetric eigendecompositions,
//! SPD square roots, orthonormal complements and projector utilities.
//!
//! Everything here is n x n with n at most a few hundred, so plain dense
//! factorizations are used throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Eigenvector signs are canonicalized so the entry of largest magnitude in
/// each column is positive (ties broken by first index), which makes results
/// deterministic across runs.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    canonicalize_column_signs(&mut vectors, None);
    (values, vectors)
}

/// Flip column signs so the largest-magnitude entry of each column is positive.
/// When `paired` is given its columns are flipped together with `m`'s.
pub fn canonicalize_column_signs(m: &mut DMatrix<f64>, mut paired: Option<&mut DMatrix<f64>>) {
    for j in 0..m.ncols() {
        let col = m.column(j);
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            m.column_mut(j).neg_mut();
            if let Some(p) = paired.as_deref_mut() {
                p.column_mut(j).neg_mut();
            }
        }
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Symmetric square root and inverse square root of an SPD matrix.
pub fn spd_sqrt_inv_sqrt(v: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (vals, vecs) = sym_eigen_desc(v);
    let min = vals[vals.len() - 1];
    if min <= 0.0 {
        return Err(Error::Numeric(format!(
            "matrix is not positive definite (smallest eigenvalue {min:.3e})"
        )));
    }
    let sqrt_d = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    let inv_sqrt_d = DMatrix::from_diagonal(&vals.map(|x| 1.0 / x.sqrt()));
    let sqrt = &vecs * sqrt_d * vecs.transpose();
    let inv_sqrt = &vecs * inv_sqrt_d * vecs.transpose();
    Ok((symmetrize(&sqrt), symmetrize(&inv_sqrt)))
}

/// Log-determinant of an SPD matrix via Cholesky; errors if not PD.
pub fn logdet_spd(v: &DMatrix<f64>) -> Result<f64> {
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("Cholesky failed: matrix not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// Orthogonal projector onto the column space of `m` (empty input gives 0).
pub fn projector(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() == 0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let gram = m.transpose() * m;
    let chol = gram.cholesky().ok_or_else(|| Error::RankDeficient {
        context: "projector".into(),
    })?;
    let inv = chol.inverse();
    Ok(symmetrize(&(m * inv * m.transpose())))
}

/// A chain of Householder reflectors triangularizing a full-column-rank
/// matrix; reflector j has zeros in its first j coordinates.
#[derive(Debug, Clone)]
pub struct HouseholderChain {
    /// Unit-norm reflector vectors (H_j = I - 2 w_j w_j^T).
    reflectors: Vec<DVector<f64>>,
    n: usize,
}

impl HouseholderChain {
    /// Householder QR of `x` (n x d, n >= d). Errors when a diagonal of R
    /// collapses, i.e. the columns are linearly dependent.
    pub fn from_columns(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        let d = x.ncols();
        if d > n {
            return Err(Error::RankDeficient {
                context: "HouseholderChain: more columns than rows".into(),
            });
        }
        let scale = x.norm().max(1e-300);
        let mut work = x.clone();
        let mut reflectors = Vec::with_capacity(d);
        for j in 0..d {
            let mut w = DVector::zeros(n);
            let tail_norm: f64 = (j..n).map(|i| work[(i, j)] * work[(i, j)]).sum::<f64>().sqrt();
            if tail_norm <= 1e-12 * scale {
                return Err(Error::RankDeficient {
                    context: format!("HouseholderChain: column {j} dependent"),
                });
            }
            let sign = if work[(j, j)] >= 0.0 { 1.0 } else { -1.0 };
            for i in j..n {
                w[i] = work[(i, j)];
            }
            w[j] += sign * tail_norm;
            let wn = w.norm();
            w /= wn;
            // Apply H_j to the remaining columns.
            for c in j..d {
                let dot: f64 = (j..n).map(|i| w[i] * work[(i, c)]).sum();
                for i in j..n {
                    work[(i, c)] -= 2.0 * dot * w[i];
                }
            }
            reflectors.push(w);
        }
        Ok(Self { reflectors, n })
    }

    pub fn rank(&self) -> usize {
        self.reflectors.len()
    }

    /// The orthonormal complement of the original column span: columns d..n of
    /// Q = H_1 H_2 ... H_d.
    pub fn complement(&self) -> DMatrix<f64> {
        let n = self.n;
        let d = self.reflectors.len();
        let mut m = DMatrix::zeros(n, n - d);
        for j in 0..(n - d) {
            m[(d + j, j)] = 1.0;
        }
        for w in self.reflectors.iter().rev() {
            reflect_columns(&mut m, w);
        }
        m
    }

    /// Q_comp^T v without materializing the complement: apply the reflectors
    /// and drop the first d coordinates.
    pub fn reduce_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        let d = self.reflectors.len();
        let mut u = v.clone();
        for w in &self.reflectors {
            let dot = w.dot(&u);
            u.axpy(-2.0 * dot, w, 1.0);
        }
        DVector::from_fn(self.n - d, |i, _| u[d + i])
    }

    /// Q_comp^T M Q_comp for symmetric M via 2d rank-one updates, O(d n^2).
    pub fn reduce_symmetric(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.reflectors.len();
        let mut a = m.clone();
        for w in &self.reflectors {
            // H A H = A - 2 w (w^T A) - 2 (A w) w^T + 4 (w^T A w) w w^T
            let aw = &a * w;
            let waw = w.dot(&aw);
            let n = self.n;
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] +=
                        -2.0 * w[i] * aw[j] - 2.0 * aw[i] * w[j] + 4.0 * waw * w[i] * w[j];
                }
            }
        }
        a.view((d, d), (self.n - d, self.n - d)).into_owned()
    }
}

fn reflect_columns(m: &mut DMatrix<f64>, w: &DVector<f64>) {
    for c in 0..m.ncols() {
        let mut col = m.column_mut(c);
        let dot: f64 = w.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
        for (dst, wi) in col.iter_mut().zip(w.iter()) {
            *dst -= 2.0 * dot * wi;
        }
    }
}

/// Orthonormal basis of the orthogonal complement of im(`m`) in R^n via
/// Householder QR. An empty `m` yields the identity.
pub fn orthonormal_complement(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    Ok(HouseholderChain::from_columns(m)?.complement())
}

/// Log pseudo-determinant and pseudo-inverse of a symmetric PSD matrix,
/// dropping eigenvalues at or below `tol * max(|lambda|, 1)`.
pub fn pseudo_logdet_inv_sym(m: &DMatrix<f64>, tol: f64) -> (f64, DMatrix<f64>, usize) {
    let n = m.nrows();
    let (vals, vecs) = sym_eigen_desc(m);
    let scale = vals.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let cutoff = tol * scale;
    let mut logdet = 0.0;
    let mut pinv = DMatrix::zeros(n, n);
    let mut rank = 0usize;
    for i in 0..n {
        if vals[i] > cutoff {
            logdet += vals[i].ln();
            let v = vecs.column(i);
            pinv += DMatrix::from_fn(n, n, |r, c| v[r] * v[c] / vals[i]);
            rank += 1;
        }
    }
    (logdet, pinv, rank)
}

/// Checks that `p` is a symmetric idempotent matrix within `tol`.
pub fn check_projection(p: &DMatrix<f64>, tol: f64) -> Result<()> {
    let sym_dev = (p - p.transpose()).norm();
    let idem_dev = (p * p - p).norm();
    let scale = p.norm().max(1.0);
    let deviation = (sym_dev.max(idem_dev)) / scale;
    if deviation > tol {
        return Err(Error::NotAProjection { deviation });
    }
    Ok(())
}

/// Frobenius inner product of two equally sized matrices.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Inverse of a lower-triangular matrix, blocked so the bulk of the work runs
/// through matrix products.
pub fn tri_inverse_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let m = l.nrows();
    if m <= 32 {
        let mut w = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            w[(j, j)] = 1.0 / l[(j, j)];
            for i in (j + 1)..m {
                let mut s = 0.0;
                for k in j..i {
                    s += l[(i, k)] * w[(k, j)];
                }
                w[(i, j)] = -s / l[(i, i)];
            }
        }
        return w;
    }
    let h = m / 2;
    let l11 = l.view((0, 0), (h, h)).into_owned();
    let l21 = l.view((h, 0), (m - h, h)).into_owned();
    let l22 = l.view((h, h), (m - h, m - h)).into_owned();
    let w11 = tri_inverse_lower(&l11);
    let w22 = tri_inverse_lower(&l22);
    let w21 = -(&w22 * l21 * &w11);
    let mut w = DMatrix::zeros(m, m);
    w.view_mut((0, 0), (h, h)).copy_from(&w11);
    w.view_mut((h, 0), (m - h, h)).copy_from(&w21);
    w.view_mut((h, h), (m - h, m - h)).copy_from(&w22);
    w
}

/// Inverse of an SPD matrix from its Cholesky factor L: (L L^T)^-1 = W^T W
/// with W = L^-1.
pub fn spd_inverse_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let w = tri_inverse_lower(l);
    w.transpose() * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(6, 6, &mut rng);
        let s = symmetrize(&(&a * a.transpose()));
        let (vals, vecs) = sym_eigen_desc(&s);
        for i in 1..vals.len() {
            assert!(vals[i - 1] >= vals[i]);
        }
        let recon = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((recon - &s).norm() < 1e-10 * s.norm());
    }

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_matrix(7, 3, &mut rng);
        let q = orthonormal_complement(&m).unwrap();
        assert_eq!(q.ncols(), 4);
        assert!((q.transpose() * &q - DMatrix::identity(4, 4)).norm() < 1e-10);
        assert!((m.transpose() * &q).norm() < 1e-10);
    }

    #[test]
    fn complement_rejects_dependent_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut m = random_matrix(6, 3, &mut rng);
        let c0 = m.column(0).into_owned() * 2.0;
        m.set_column(2, &c0);
        assert!(orthonormal_complement(&m).is_err());
    }

    #[test]
    fn householder_reductions_match_explicit_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for d in 1..=3usize {
            let x = random_matrix(8, d, &mut rng);
            let chain = HouseholderChain::from_columns(&x).unwrap();
            let q = chain.complement();
            assert_eq!(q.ncols(), 8 - d);
            assert!((x.transpose() * &q).norm() < 1e-10);
            assert!((q.transpose() * &q - DMatrix::identity(8 - d, 8 - d)).norm() < 1e-10);
            let v = DVector::from_fn(8, |_, _| StandardNormal.sample(&mut rng));
            let fast = chain.reduce_vector(&v);
            let slow = q.transpose() * &v;
            assert!((fast - slow).norm() < 1e-10);
            let a = random_matrix(8, 8, &mut rng);
            let s = symmetrize(&(&a * a.transpose()));
            let fast_m = chain.reduce_symmetric(&s);
            let slow_m = q.transpose() * &s * &q;
            assert!((fast_m - slow_m).norm() < 1e-9);
        }
    }

    #[test]
    fn pseudo_inverse_matches_dense_inverse_for_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(5, 5, &mut rng);
        let s = symmetrize(&(&a * a.transpose())) + DMatrix::identity(5, 5);
        let (logdet, pinv, rank) = pseudo_logdet_inv_sym(&s, 1e-12);
        assert_eq!(rank, 5);
        assert!((logdet - logdet_spd(&s).unwrap()).abs() < 1e-9);
        assert!((&s * pinv - DMatrix::identity(5, 5)).norm() < 1e-8);
    }

    #[test]
    fn blocked_spd_inverse_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for m in [5usize, 33, 70] {
            let a = random_matrix(m, m, &mut rng);
            let s = symmetrize(&(&a * a.transpose())) + DMatrix::identity(m, m) * m as f64;
            let chol = s.clone().cholesky().unwrap();
            let fast = spd_inverse_from_cholesky(&chol.l());
            let slow = chol.inverse();
            assert!((&fast - &slow).norm() < 1e-10 * slow.norm());
        }
    }

    #[test]
    fn sqrt_pair_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(5, 5, &mut rng);
        let s = symmetrize(&(&a * a.transpose())) + DMatrix::identity(5, 5);
        let (sq, isq) = spd_sqrt_inv_sqrt(&s).unwrap();
        assert!((&sq * &sq - &s).norm() < 1e-9 * s.norm());
        assert!((&sq * &isq - DMatrix::identity(5, 5)).norm() < 1e-9);
    }
}
