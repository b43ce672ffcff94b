//! Iterative latent factor estimation for dependent samples (FALCO).
//!
//! For each candidate dimension k the fit alternates a closed-form
//! generalized-PCA subspace solve with projected variance re-estimation,
//! warm-starting each k at the previous k's variance multipliers. An
//! identifiability gate freezes the variance estimate when the projected
//! basis Gram matrix loses rank. The finishing steps build raw loadings,
//! inflation-corrected eigenvalues and the identified factor/loading pair
//! with n^-1 C_hat^T C_hat = I.

use nalgebra::DMatrix;

use crate::covmodel::{assemble_v, projected_gram, CovarianceBasis, VarianceParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::reml::{RemlOptions, RemlProblem};

/// Relative eigenvalue gap below which the k-th subspace is flagged as
/// ill-defined.
const TIE_TOL: f64 = 1e-10;

/// Output of the closed-form subspace solve.
#[derive(Debug, Clone)]
pub struct SubspaceEstimate {
    /// Rank-k orthogonal projection onto the estimated factor span.
    pub projector: DMatrix<f64>,
    /// A basis of that span: V^(1/2) times the leading right singular
    /// vectors of Y V^(-1/2).
    pub c_tilde: DMatrix<f64>,
    /// Set when the k-th and (k+1)-th singular values are tied within
    /// tolerance, leaving the subspace ill-defined.
    pub tie_warning: bool,
}

/// One fitted dimension: identified factors/loadings, bias-corrected and
/// naive eigenvalues, the variance multipliers used, and gate status.
#[derive(Debug, Clone)]
pub struct FactorFit {
    pub k: usize,
    /// n x k factors with n^-1 C_hat^T C_hat = I_k.
    pub c_hat: DMatrix<f64>,
    /// p x k loadings.
    pub l_hat: DMatrix<f64>,
    /// Bias-corrected eigenvalue estimates, non-increasing; may be negative
    /// past the signal rank and are reported as-is.
    pub lambda_hat: Vec<f64>,
    /// Uncorrected (inflated) eigenvalue estimates for comparison.
    pub lambda_naive: Vec<f64>,
    /// Variance multipliers backing this fit.
    pub vbar_hat: VarianceParams,
    /// The identifiability gate fired at or before this k; the variance
    /// estimate is frozen from that point on.
    pub identifiability_flagged: bool,
    /// Tied singular values at the k boundary.
    pub tie_warning: bool,
    /// Projection onto im(C_hat).
    pub p_c_hat: DMatrix<f64>,
}

impl FactorFit {
    fn empty(n: usize, p: usize, vbar: VarianceParams) -> Self {
        Self {
            k: 0,
            c_hat: DMatrix::zeros(n, 0),
            l_hat: DMatrix::zeros(p, 0),
            lambda_hat: Vec::new(),
            lambda_naive: Vec::new(),
            vbar_hat: vbar,
            identifiability_flagged: false,
            tie_warning: false,
            p_c_hat: DMatrix::zeros(n, n),
        }
    }
}

/// The per-k fits for k = 0..K_max plus the warm-start lineage.
#[derive(Debug, Clone)]
pub struct FalcoTrace {
    /// fits[k] is the dimension-k fit; fits[0] holds the whole-data variance
    /// estimate with no factors.
    pub fits: Vec<FactorFit>,
    pub alpha: f64,
    /// warm_lineage[k] is the index whose variance estimate seeded k.
    pub warm_lineage: Vec<usize>,
}

impl FalcoTrace {
    pub fn k_max(&self) -> usize {
        self.fits.len() - 1
    }
}

/// Closed-form solution of the generalized projection problem: the optimal
/// rank-k projection is onto V^(1/2) W, with W the leading right singular
/// vectors of Y V^(-1/2).
pub fn estimate_subspace(
    y: &DMatrix<f64>,
    vbar: &DMatrix<f64>,
    k: usize,
) -> Result<SubspaceEstimate> {
    let n = y.ncols();
    let p = y.nrows();
    if k > n.min(p) {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds min(n, p) = {}",
            n.min(p)
        )));
    }
    let s = linalg::symmetrize(&((y.transpose() * y) / p as f64));
    estimate_subspace_from_s(&s, vbar, k)
}

/// Same solve given S = p^-1 Y^T Y; all n x n work.
fn estimate_subspace_from_s(
    s: &DMatrix<f64>,
    vbar: &DMatrix<f64>,
    k: usize,
) -> Result<SubspaceEstimate> {
    let n = s.nrows();
    if k == 0 {
        return Ok(SubspaceEstimate {
            projector: DMatrix::zeros(n, n),
            c_tilde: DMatrix::zeros(n, 0),
            tie_warning: false,
        });
    }
    let (v_sqrt, v_inv_sqrt) = linalg::spd_sqrt_inv_sqrt(vbar)?;
    let whitened = linalg::symmetrize(&(&v_inv_sqrt * s * &v_inv_sqrt));
    let (vals, vecs) = linalg::sym_eigen_desc(&whitened);
    let tie_warning = if k < n {
        (vals[k - 1] - vals[k]).abs() <= TIE_TOL * vals[0].abs().max(1.0)
    } else {
        false
    };
    let w = DMatrix::from_fn(n, k, |i, j| vecs[(i, j)]);
    let c_tilde = &v_sqrt * w;
    let projector = linalg::projector(&c_tilde)?;
    Ok(SubspaceEstimate {
        projector,
        c_tilde,
        tie_warning,
    })
}

/// One dimension-k fit: three subspace solves interleaved with two projected
/// variance updates (fewer if the identifiability gate fires), then loadings,
/// eigenvalue correction and the identifying rotation.
pub fn falco_step_k(
    y: &DMatrix<f64>,
    basis: &CovarianceBasis,
    k: usize,
    vbar_warm: &VarianceParams,
    alpha: f64,
    opts: &RemlOptions,
) -> Result<FactorFit> {
    let s = linalg::symmetrize(&((y.transpose() * y) / y.nrows() as f64));
    let gram_min = basis.gram_min_eigenvalue();
    step_k_inner(y, &s, basis, k, vbar_warm, alpha, false, gram_min, opts)
}

#[allow(clippy::too_many_arguments)]
fn step_k_inner(
    y: &DMatrix<f64>,
    s: &DMatrix<f64>,
    basis: &CovarianceBasis,
    k: usize,
    vbar_warm: &VarianceParams,
    alpha: f64,
    frozen: bool,
    gram_min: f64,
    opts: &RemlOptions,
) -> Result<FactorFit> {
    let n = basis.n();
    let mut vbar = vbar_warm.clone();
    let mut flagged = frozen;
    let mut sub = None;
    if frozen {
        let v = assemble_v(basis, &vbar)?;
        sub = Some(estimate_subspace_from_s(s, &v, k)?);
    } else {
        for _ in 0..2 {
            let v = assemble_v(basis, &vbar)?;
            let estimate = estimate_subspace_from_s(s, &v, k)?;
            let p_perp = DMatrix::identity(n, n) - &estimate.projector;
            let m_hat = projected_gram(basis, &p_perp)?;
            let (m_vals, _) = linalg::sym_eigen_desc(&m_hat);
            if m_vals[basis.b() - 1] <= alpha * gram_min {
                flagged = true;
                sub = Some(estimate);
                break;
            }
            let sol =
                RemlProblem::projected(y, basis, &estimate.c_tilde)?.solve(opts, Some(&vbar));
            vbar = sol.theta_hat;
            sub = Some(estimate);
        }
        if !flagged {
            let v = assemble_v(basis, &vbar)?;
            sub = Some(estimate_subspace_from_s(s, &v, k)?);
        }
    }
    let sub = sub.expect("k >= 1 always produces a subspace");
    let v = assemble_v(basis, &vbar)?;
    let mut fit = finish_fit(y, &v, &sub.c_tilde, k)?;
    fit.vbar_hat = vbar;
    fit.identifiability_flagged = flagged;
    fit.tie_warning = sub.tie_warning;
    fit.p_c_hat = sub.projector;
    Ok(fit)
}

/// Loadings, bias-corrected eigenvalues and the identifying rotation for a
/// given factor-span basis. Any basis of the same span gives the same output.
fn finish_fit(
    y: &DMatrix<f64>,
    vbar: &DMatrix<f64>,
    c_tilde: &DMatrix<f64>,
    k: usize,
) -> Result<FactorFit> {
    let n = y.ncols();
    let p = y.nrows();
    let nf = n as f64;
    let pf = p as f64;
    if k == 0 {
        return Ok(FactorFit::empty(n, p, VarianceParams::new(Vec::new())));
    }
    let chol_v = vbar
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("variance matrix not positive definite".into()))?;
    let vinv_c = chol_v.solve(c_tilde); // V^-1 C
    let ct_vinv_c = linalg::symmetrize(&(c_tilde.transpose() * &vinv_c));
    let chol_g1 = ct_vinv_c.clone().cholesky().ok_or_else(|| Error::Numeric(
        "C^T V^-1 C is singular; the factor basis is rank deficient".into(),
    ))?;
    // Raw loadings: Y V^-1 C (C^T V^-1 C)^-1.
    let l_tilde = y * chol_g1.solve(&vinv_c.transpose()).transpose();
    // Bias term (n^-1 C^T V^-1 C)^-1 and the scatter n p^-1 L^T L.
    let bias = chol_g1.inverse() * nf;
    let ltl = linalg::symmetrize(&(l_tilde.transpose() * &l_tilde)) * (nf / pf);
    let g0 = linalg::symmetrize(&(c_tilde.transpose() * c_tilde)) / nf;
    let (g0_sqrt, g0_inv_sqrt) = linalg::spd_sqrt_inv_sqrt(&g0)?;
    let corrected = linalg::symmetrize(&(&g0_sqrt * (&ltl - &bias) * &g0_sqrt));
    let naive = linalg::symmetrize(&(&g0_sqrt * &ltl * &g0_sqrt));
    let (lambda_hat, u_tilde) = linalg::sym_eigen_desc(&corrected);
    let (lambda_naive, _) = linalg::sym_eigen_desc(&naive);
    let mut c_hat = c_tilde * &g0_inv_sqrt * &u_tilde;
    let mut l_hat = &l_tilde * &g0_sqrt * &u_tilde;
    linalg::canonicalize_column_signs(&mut c_hat, Some(&mut l_hat));
    let p_c_hat = linalg::projector(&c_hat)?;
    Ok(FactorFit {
        k,
        c_hat,
        l_hat,
        lambda_hat: lambda_hat.iter().copied().collect(),
        lambda_naive: lambda_naive.iter().copied().collect(),
        vbar_hat: VarianceParams::new(Vec::new()),
        identifiability_flagged: false,
        tie_warning: false,
        p_c_hat,
    })
}

/// The full fit: whole-data variance initialization, then one warm-started
/// dimension-k fit for each k = 1..K_max. fits[0] records the initialization.
pub fn falco_fit(
    y: &DMatrix<f64>,
    basis: &CovarianceBasis,
    k_max: usize,
    alpha: f64,
    opts: &RemlOptions,
) -> Result<FalcoTrace> {
    let n = basis.n();
    let p = y.nrows();
    if k_max < 1 || k_max > n.min(p) {
        return Err(Error::InvalidConfig(format!(
            "K_max = {k_max} out of range 1..={}",
            n.min(p)
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} not in (0, 1)")));
    }
    let s = linalg::symmetrize(&((y.transpose() * y) / p as f64));
    let sol0 = RemlProblem::full(y, basis)?.solve(opts, None);
    let gram_min = basis.gram_min_eigenvalue();
    let mut fits = vec![FactorFit::empty(n, p, sol0.theta_hat.clone())];
    let mut lineage = vec![0usize];
    let mut vbar = sol0.theta_hat;
    let mut frozen = false;
    for k in 1..=k_max {
        let fit = step_k_inner(y, &s, basis, k, &vbar, alpha, frozen, gram_min, opts)?;
        frozen = fit.identifiability_flagged;
        vbar = fit.vbar_hat.clone();
        lineage.push(k - 1);
        fits.push(fit);
    }
    Ok(FalcoTrace {
        fits,
        alpha,
        warm_lineage: lineage,
    })
}

/// Plain PCA fit of rank k (right singular vectors scaled to the same
/// normalization as [`FactorFit::c_hat`]); the standard baseline when the
/// noise covariance is ignored.
pub fn pca_fit(y: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = y.ncols();
    let p = y.nrows();
    if k > n.min(p) {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds min(n, p) = {}",
            n.min(p)
        )));
    }
    let s = linalg::symmetrize(&((y.transpose() * y) / p as f64));
    let (vals, vecs) = linalg::sym_eigen_desc(&s);
    let mut c = DMatrix::from_fn(n, k, |i, j| vecs[(i, j)]) * (n as f64).sqrt();
    linalg::canonicalize_column_signs(&mut c, None);
    Ok((c, vals.iter().take(k).copied().collect()))
}
