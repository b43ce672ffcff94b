//! Covariance model for dependent samples: V(theta) = sum_j theta_j * B_j for
//! known symmetric design matrices B_1..B_b, the polyhedral constraint set
//! Theta = { theta : A_v theta >= 0 }, the compact refinement Theta*, reduced
//! (projected) quadratic forms, and rotation of observed nuisance covariates
//! out of the model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const SYMMETRY_TOL: f64 = 1e-10;

/// Known design matrices B_1..B_b parametrizing the sample covariance,
/// together with the constraint matrix defining Theta and the Gram matrix
/// M_rs = n^-1 tr(B_r B_s) used by the identifiability gate.
#[derive(Debug, Clone)]
pub struct CovarianceBasis {
    n: usize,
    bases: Vec<DMatrix<f64>>,
    constraint_matrix: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl CovarianceBasis {
    /// Builds a basis from symmetric n x n matrices. `constraint` is the
    /// q x b matrix A_v defining Theta = { theta : A_v theta >= 0 }; `None`
    /// means the identity (elementwise nonnegativity).
    ///
    /// Matrices within `1e-10` relative of symmetric are symmetrized with a
    /// warning; anything worse is rejected. The Gram matrix must be positive
    /// definite for the multipliers to be identifiable.
    pub fn new(bases: Vec<DMatrix<f64>>, constraint: Option<DMatrix<f64>>) -> Result<Self> {
        let b = bases.len();
        if b == 0 {
            return Err(Error::InvalidConfig("basis count must be >= 1".into()));
        }
        let n = bases[0].nrows();
        if n < 2 {
            return Err(Error::InvalidConfig("sample count must be >= 2".into()));
        }
        let mut sym_bases = Vec::with_capacity(b);
        for (j, bj) in bases.into_iter().enumerate() {
            if bj.nrows() != n || bj.ncols() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("basis matrix {j}"),
                    expected: n,
                    found: bj.nrows().max(bj.ncols()),
                });
            }
            let dev = (&bj - bj.transpose()).norm() / bj.norm().max(1.0);
            if dev > SYMMETRY_TOL {
                return Err(Error::AsymmetricBasis {
                    index: j,
                    deviation: dev,
                });
            }
            if dev > 0.0 {
                log::warn!("basis matrix {j} symmetrized (relative deviation {dev:.3e})");
            }
            sym_bases.push(linalg::symmetrize(&bj));
        }
        let constraint_matrix = match constraint {
            Some(a) => {
                if a.ncols() != b {
                    return Err(Error::DimensionMismatch {
                        context: "constraint matrix columns".into(),
                        expected: b,
                        found: a.ncols(),
                    });
                }
                a
            }
            None => DMatrix::identity(b, b),
        };
        let mut gram = DMatrix::zeros(b, b);
        for r in 0..b {
            for s in r..b {
                let v = linalg::frob_dot(&sym_bases[r], &sym_bases[s]) / n as f64;
                gram[(r, s)] = v;
                gram[(s, r)] = v;
            }
        }
        let (vals, _) = linalg::sym_eigen_desc(&gram);
        let min_eig = vals[b - 1];
        if min_eig <= 0.0 {
            return Err(Error::NonPdGram { min_eig });
        }
        Ok(Self {
            n,
            bases: sym_bases,
            constraint_matrix,
            gram,
        })
    }

    /// The one-matrix identity basis (independent, homoskedastic samples).
    pub fn identity(n: usize) -> Result<Self> {
        Self::new(vec![DMatrix::identity(n, n)], None)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn b(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &[DMatrix<f64>] {
        &self.bases
    }

    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        &self.constraint_matrix
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Smallest eigenvalue of the Gram matrix, the reference level for the
    /// identifiability gate.
    pub fn gram_min_eigenvalue(&self) -> f64 {
        let (vals, _) = linalg::sym_eigen_desc(&self.gram);
        vals[self.b() - 1]
    }

    /// Whether `theta` satisfies the polyhedral constraint A_v theta >= -tol.
    pub fn in_theta(&self, theta: &VarianceParams, tol: f64) -> bool {
        let prod = &self.constraint_matrix * theta.as_vector();
        prod.iter().all(|&x| x >= -tol)
    }

    /// Reduced basis matrices Q^T B_j Q for an n x m matrix Q.
    pub fn reduced_bases(&self, q: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        self.bases
            .iter()
            .map(|bj| linalg::symmetrize(&(q.transpose() * bj * q)))
            .collect()
    }
}

/// A point theta in R^b; V(theta) = sum_j theta_j B_j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams(Vec<f64>);

impl VarianceParams {
    pub fn new(theta: Vec<f64>) -> Self {
        Self(theta)
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self(v.iter().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

/// Bounds defining the compact set Theta* = Theta intersected with
/// { ||theta|| <= 2 b c, V(theta) - (2c)^-1 I > 0 } for a configurable c.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThetaStarBounds {
    /// The universal constant c; defaults to 1e3.
    pub c: f64,
}

impl Default for ThetaStarBounds {
    fn default() -> Self {
        Self { c: 1e3 }
    }
}

impl ThetaStarBounds {
    pub fn norm_bound(&self, b: usize) -> f64 {
        2.0 * b as f64 * self.c
    }

    pub fn eigen_floor(&self) -> f64 {
        0.5 / self.c
    }

    /// Upper eigenvalue bound 2 b c^2 of the box used for factor-on-covariate
    /// inference.
    pub fn eigen_ceiling(&self, b: usize) -> f64 {
        2.0 * b as f64 * self.c * self.c
    }
}

/// Assembles V(theta) = sum_j theta_j B_j.
pub fn assemble_v(basis: &CovarianceBasis, theta: &VarianceParams) -> Result<DMatrix<f64>> {
    if theta.len() != basis.b() {
        return Err(Error::DimensionMismatch {
            context: "assemble_v: theta length".into(),
            expected: basis.b(),
            found: theta.len(),
        });
    }
    let n = basis.n();
    let mut v = DMatrix::zeros(n, n);
    for (t, bj) in theta.values().iter().zip(basis.bases()) {
        for (dst, src) in v.iter_mut().zip(bj.iter()) {
            *dst += t * src;
        }
    }
    Ok(v)
}

/// Gram matrix of the projected bases: Mhat_rs = n^-1 tr(P B_r P B_s) for an
/// orthogonal projection P (here the projection onto the complement of the
/// estimated factor span).
pub fn projected_gram(basis: &CovarianceBasis, p_perp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p_perp.nrows() != basis.n() || p_perp.ncols() != basis.n() {
        return Err(Error::DimensionMismatch {
            context: "projected_gram: projection".into(),
            expected: basis.n(),
            found: p_perp.nrows(),
        });
    }
    linalg::check_projection(p_perp, 1e-8)?;
    let n = basis.n() as f64;
    let b = basis.b();
    let projected: Vec<DMatrix<f64>> = basis.bases().iter().map(|bj| p_perp * bj).collect();
    let mut m = DMatrix::zeros(b, b);
    for r in 0..b {
        for s in r..b {
            // tr(P B_r P B_s) = <(P B_r)^T, P B_s>_F
            let v = linalg::frob_dot(&projected[r].transpose(), &projected[s]) / n;
            m[(r, s)] = v;
            m[(s, r)] = v;
        }
    }
    Ok(m)
}

/// Restricted log-determinant and quadratic form on a subspace.
///
/// For Q an n x m matrix with orthonormal columns spanning the complement of
/// the projected-out design, returns
///   logdet = log pseudo-determinant of P V(theta) P  (P = Q Q^T)
///   quad   = tr[(p^-1 Y^T Y) { P V(theta) P }^dagger]
/// computed in the reduced coordinates Q^T V Q, which is equivalent and
/// numerically stable.
pub fn restricted_quadratic(
    y: &DMatrix<f64>,
    basis: &CovarianceBasis,
    theta: &VarianceParams,
    q: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let n = basis.n();
    if y.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "restricted_quadratic: Y columns".into(),
            expected: n,
            found: y.ncols(),
        });
    }
    if q.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "restricted_quadratic: Q rows".into(),
            expected: n,
            found: q.nrows(),
        });
    }
    let m = q.ncols();
    let ortho_dev = (q.transpose() * q - DMatrix::identity(m, m)).norm();
    if ortho_dev > 1e-8 {
        return Err(Error::Numeric(format!(
            "restricted_quadratic: Q not orthonormal (deviation {ortho_dev:.3e})"
        )));
    }
    let v = assemble_v(basis, theta)?;
    let v_red = linalg::symmetrize(&(q.transpose() * &v * q));
    let chol = v_red.cholesky().ok_or_else(|| Error::SingularReduced {
        theta: theta.values().to_vec(),
    })?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let p = y.nrows() as f64;
    let yq = y * q; // p x m
    let solved = chol.solve(&(yq.transpose() * &yq));
    let quad = solved.trace() / p;
    Ok((logdet, quad))
}

/// Observed nuisance covariates Z together with an orthonormal basis Q_Z of
/// ker(Z^T); multiplying the data by Q_Z removes the nuisance mean structure.
#[derive(Debug, Clone)]
pub struct NuisanceRotation {
    z: DMatrix<f64>,
    q_z: DMatrix<f64>,
}

impl NuisanceRotation {
    pub fn new(z: DMatrix<f64>) -> Result<Self> {
        let r = z.ncols();
        let gram = z.transpose() * &z;
        if gram.cholesky().is_none() {
            return Err(Error::RankDeficient {
                context: "nuisance covariate matrix".into(),
            });
        }
        let q_z = linalg::orthonormal_complement(&z)?;
        debug_assert_eq!(q_z.ncols(), z.nrows() - r);
        Ok(Self { z, q_z })
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn q_z(&self) -> &DMatrix<f64> {
        &self.q_z
    }
}

/// Rotates the nuisance design out of the data and the basis: Y' = Y Q_Z and
/// B_j' = Q_Z^T B_j Q_Z. The constraint matrix carries over unchanged.
pub fn rotate_out_nuisance(
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    basis: &CovarianceBasis,
) -> Result<(DMatrix<f64>, CovarianceBasis, NuisanceRotation)> {
    if z.nrows() != basis.n() || y.ncols() != basis.n() {
        return Err(Error::DimensionMismatch {
            context: "rotate_out_nuisance".into(),
            expected: basis.n(),
            found: z.nrows(),
        });
    }
    let rotation = NuisanceRotation::new(z.clone())?;
    let q_z = rotation.q_z();
    let y_rot = y * q_z;
    let rotated_bases = basis.reduced_bases(q_z);
    let new_basis = CovarianceBasis::new(rotated_bases, Some(basis.constraint_matrix().clone()))?;
    Ok((y_rot, new_basis, rotation))
}

/// Structural specification of one basis matrix in the JSON input format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BasisMatrixSpec {
    /// The n x n identity.
    Identity,
    /// A dense symmetric matrix given row by row.
    Dense { values: Vec<Vec<f64>> },
    /// I_blocks (Kronecker) a dense block: block-diagonal repetition.
    Kron { blocks: usize, block: Vec<Vec<f64>> },
    /// The outer product a a^T of a given vector.
    Outer { vector: Vec<f64> },
}

/// JSON file format for a covariance basis: sample count, structural basis
/// matrix specs and optional constraint rows (defaults to theta >= 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub n: usize,
    pub bases: Vec<BasisMatrixSpec>,
    #[serde(default)]
    pub constraints: Option<Vec<Vec<f64>>>,
}

impl BasisSpec {
    pub fn to_basis(&self) -> Result<CovarianceBasis> {
        let n = self.n;
        let mut dense = Vec::with_capacity(self.bases.len());
        for (j, spec) in self.bases.iter().enumerate() {
            let m = match spec {
                BasisMatrixSpec::Identity => DMatrix::identity(n, n),
                BasisMatrixSpec::Dense { values } => dense_from_rows(values, n, j)?,
                BasisMatrixSpec::Kron { blocks, block } => {
                    let d = block.len();
                    if blocks * d != n {
                        return Err(Error::InvalidConfig(format!(
                            "basis {j}: {blocks} blocks of size {d} do not tile n = {n}"
                        )));
                    }
                    let blk = dense_from_rows(block, d, j)?;
                    let mut m = DMatrix::zeros(n, n);
                    for t in 0..*blocks {
                        m.view_mut((t * d, t * d), (d, d)).copy_from(&blk);
                    }
                    m
                }
                BasisMatrixSpec::Outer { vector } => {
                    if vector.len() != n {
                        return Err(Error::InvalidConfig(format!(
                            "basis {j}: outer vector length {} does not match n = {n}",
                            vector.len()
                        )));
                    }
                    let a = DVector::from_column_slice(vector);
                    &a * a.transpose()
                }
            };
            dense.push(m);
        }
        let constraint = match &self.constraints {
            None => None,
            Some(rows) => {
                let b = dense.len();
                let q = rows.len();
                let mut a = DMatrix::zeros(q, b);
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != b {
                        return Err(Error::InvalidConfig(format!(
                            "constraint row {i} has length {}, expected {b}",
                            row.len()
                        )));
                    }
                    for (jj, &v) in row.iter().enumerate() {
                        a[(i, jj)] = v;
                    }
                }
                Some(a)
            }
        };
        CovarianceBasis::new(dense, constraint)
    }

    /// Dense spec capturing an existing basis exactly (used when persisting a
    /// rotated basis, which has no structural form).
    pub fn from_basis(basis: &CovarianceBasis) -> Self {
        let bases = basis
            .bases()
            .iter()
            .map(|b| BasisMatrixSpec::Dense {
                values: (0..b.nrows())
                    .map(|i| (0..b.ncols()).map(|j| b[(i, j)]).collect())
                    .collect(),
            })
            .collect();
        let a = basis.constraint_matrix();
        let constraints = Some(
            (0..a.nrows())
                .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
                .collect(),
        );
        BasisSpec {
            n: basis.n(),
            bases,
            constraints,
        }
    }
}

fn dense_from_rows(rows: &[Vec<f64>], n: usize, index: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidConfig(format!(
            "basis {index}: dense matrix is not {n} x {n}"
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}
