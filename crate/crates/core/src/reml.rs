//! Constrained restricted quasi-likelihood estimation of variance multipliers.
//!
//! All four entry points maximize
//!     f(theta) = -log|Q^T V(theta) Q| - tr( S_reduced { Q^T V(theta) Q }^-1 )
//! over the compact feasible set Theta intersected with Theta*, where Q spans
//! the orthogonal complement of whatever design is projected out (nothing, the
//! estimated factors, or factors plus per-gene covariates) and S_reduced is the
//! matching reduced second-moment matrix. The reduced form is equivalent to the
//! pseudo-determinant / pseudo-inverse objective on the projected covariance.
//!
//! The optimizer is a projected quasi-Newton method: dense BFGS directions,
//! Dykstra projection onto the polyhedral part of the feasible set, and a
//! backtracking line search that keeps iterates strictly inside the
//! semidefinite bounds.

use nalgebra::{DMatrix, DVector};

use crate::covmodel::{assemble_v, CovarianceBasis, ThetaStarBounds, VarianceParams};
use crate::error::{Error, Result};
use crate::linalg;

/// Optimizer tolerances. Convergence requires both a relative objective change
/// below `rel_obj_tol` and a projected gradient norm below `grad_tol`.
#[derive(Debug, Clone, Copy)]
pub struct RemlOptions {
    pub bounds: ThetaStarBounds,
    pub max_iterations: usize,
    pub rel_obj_tol: f64,
    pub grad_tol: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            bounds: ThetaStarBounds::default(),
            max_iterations: 500,
            rel_obj_tol: 1e-9,
            grad_tol: 1e-6,
        }
    }
}

/// Result of a variance-multiplier fit.
#[derive(Debug, Clone)]
pub struct RemlSolution {
    pub theta_hat: VarianceParams,
    /// Value of the maximized restricted quasi-likelihood objective.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the unit-step projected gradient at the returned point.
    pub kkt_residual: f64,
    /// The fit was pinned at the lower eigenvalue bound of Theta*
    /// (zero-residual data make the objective unbounded).
    pub degenerate: bool,
    /// At least one polyhedral constraint is active at the solution.
    pub on_boundary: bool,
}

/// Which second moment the quadratic form uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemScale {
    /// S = p^-1 Y^T Y averaged over rows (the vbar problems).
    Averaged,
    /// S = y_g y_g^T for a single row (the per-gene problems).
    SingleGene,
}

#[derive(Debug, Clone)]
enum SecondMoment {
    Dense(DMatrix<f64>),
    Rank1(DVector<f64>),
}

/// Outcome of one optimizer run in scaled coordinates.
struct RunOutcome {
    theta: DVector<f64>,
    phi: f64,
    converged: bool,
    iterations: usize,
    kkt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FeasibleKind {
    /// A_v theta >= 0, ||theta|| <= 2bc, V(theta) strictly above (2c)^-1 I.
    ThetaStar,
    /// (2c)^-1 I <= V(theta) <= 2bc^2 I, no polyhedral part.
    SpdBox,
}

/// A reduced restricted-likelihood problem ready to be solved.
pub struct RemlProblem<'a> {
    basis: &'a CovarianceBasis,
    reduced_bases: Vec<DMatrix<f64>>,
    moment: SecondMoment,
    m: usize,
    scale: ProblemScale,
    feasible: FeasibleKind,
    degenerate_input: bool,
}

impl<'a> RemlProblem<'a> {
    /// Whole-data problem with no projection: S = p^-1 Y^T Y.
    pub fn full(y: &DMatrix<f64>, basis: &'a CovarianceBasis) -> Result<Self> {
        check_data(y, basis)?;
        let p = y.nrows() as f64;
        let s = linalg::symmetrize(&((y.transpose() * y) / p));
        let tr = s.trace();
        Ok(Self {
            basis,
            reduced_bases: basis.bases().to_vec(),
            m: basis.n(),
            degenerate_input: tr <= 1e-12 * basis.n() as f64,
            moment: SecondMoment::Dense(s),
            scale: ProblemScale::Averaged,
            feasible: FeasibleKind::ThetaStar,
        })
    }

    /// Whole-data problem projected onto the complement of im(`subspace`)
    /// (an n x k matrix whose columns span the estimated factor space).
    pub fn projected(
        y: &DMatrix<f64>,
        basis: &'a CovarianceBasis,
        subspace: &DMatrix<f64>,
    ) -> Result<Self> {
        check_data(y, basis)?;
        if subspace.ncols() == 0 {
            return Self::full(y, basis);
        }
        if subspace.nrows() != basis.n() {
            return Err(Error::DimensionMismatch {
                context: "projected REML subspace".into(),
                expected: basis.n(),
                found: subspace.nrows(),
            });
        }
        let q = linalg::orthonormal_complement(subspace)?;
        let p = y.nrows() as f64;
        let yq = y * &q;
        let s_red = linalg::symmetrize(&((yq.transpose() * &yq) / p));
        let full_tr = (y.transpose() * y).trace() / p;
        Ok(Self {
            basis,
            reduced_bases: basis.reduced_bases(&q),
            m: q.ncols(),
            degenerate_input: s_red.trace() <= 1e-12 * full_tr.max(1e-300),
            moment: SecondMoment::Dense(s_red),
            scale: ProblemScale::Averaged,
            feasible: FeasibleKind::ThetaStar,
        })
    }

    /// Single-gene problem: project out the columns of `design` and use the
    /// reduced outer product of the gene's data row.
    pub fn gene(y_g: &DVector<f64>, design: &DMatrix<f64>, basis: &'a CovarianceBasis) -> Result<Self> {
        if y_g.len() != basis.n() {
            return Err(Error::DimensionMismatch {
                context: "gene REML data length".into(),
                expected: basis.n(),
                found: y_g.len(),
            });
        }
        if design.ncols() > 0 {
            check_full_rank(design, "gene REML design")?;
        }
        let q = linalg::orthonormal_complement(design)?;
        let y_red = q.transpose() * y_g;
        let degenerate = y_red.norm_squared() <= 1e-12 * y_g.norm_squared().max(1e-300);
        Ok(Self {
            basis,
            reduced_bases: basis.reduced_bases(&q),
            m: q.ncols(),
            degenerate_input: degenerate,
            moment: SecondMoment::Rank1(y_red),
            scale: ProblemScale::SingleGene,
            feasible: FeasibleKind::ThetaStar,
        })
    }

    /// Problem constrained to the semidefinite box used for factor-on-covariate
    /// inference instead of Theta*.
    pub fn gene_spd_box(
        y_g: &DVector<f64>,
        design: &DMatrix<f64>,
        basis: &'a CovarianceBasis,
    ) -> Result<Self> {
        let mut p = Self::gene(y_g, design, basis)?;
        p.feasible = FeasibleKind::SpdBox;
        Ok(p)
    }

    /// Assembles a single-gene problem from pre-reduced pieces (used by the
    /// batch denoiser, which reduces the basis once per factor fit).
    pub(crate) fn from_reduced_gene(
        basis: &'a CovarianceBasis,
        reduced_bases: Vec<DMatrix<f64>>,
        y_reduced: DVector<f64>,
        raw_norm_squared: f64,
    ) -> Self {
        let m = y_reduced.len();
        let degenerate = y_reduced.norm_squared() <= 1e-12 * raw_norm_squared.max(1e-300);
        Self {
            basis,
            reduced_bases,
            m,
            degenerate_input: degenerate,
            moment: SecondMoment::Rank1(y_reduced),
            scale: ProblemScale::SingleGene,
            feasible: FeasibleKind::ThetaStar,
        }
    }

    pub fn reduced_dim(&self) -> usize {
        self.m
    }

    pub fn scale(&self) -> ProblemScale {
        self.scale
    }

    /// The reduced second-moment matrix S_reduced.
    pub fn second_moment(&self) -> DMatrix<f64> {
        match &self.moment {
            SecondMoment::Dense(s) => s.clone(),
            SecondMoment::Rank1(v) => v * v.transpose(),
        }
    }

    fn b(&self) -> usize {
        self.basis.b()
    }

    /// phi(theta) = -objective together with the Cholesky factor of the
    /// reduced covariance; `None` when that matrix is not positive definite.
    fn phi_state(
        &self,
        theta: &DVector<f64>,
        moment: &SecondMoment,
    ) -> Option<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
        let v = self.reduced_v(theta);
        let chol = v.cholesky()?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let quad = match moment {
            SecondMoment::Dense(s) => chol.solve(s).trace(),
            SecondMoment::Rank1(y) => y.dot(&chol.solve(y)),
        };
        let val = logdet + quad;
        val.is_finite().then_some((val, chol))
    }

    fn phi(&self, theta: &DVector<f64>, moment: &SecondMoment) -> Option<f64> {
        self.phi_state(theta, moment).map(|(v, _)| v)
    }

    /// Gradient of phi at the point whose reduced-covariance Cholesky factor
    /// is given.
    fn grad_from_state(
        &self,
        chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
        moment: &SecondMoment,
    ) -> Option<DVector<f64>> {
        let v_inv = linalg::spd_inverse_from_cholesky(chol.l_dirty());
        let b = self.b();
        let mut grad = DVector::zeros(b);
        match moment {
            SecondMoment::Dense(s) => {
                let w = &v_inv * s * &v_inv; // V^-1 S V^-1
                for j in 0..b {
                    grad[j] = linalg::frob_dot(&v_inv, &self.reduced_bases[j])
                        - linalg::frob_dot(&w, &self.reduced_bases[j]);
                }
            }
            SecondMoment::Rank1(y) => {
                let u = &v_inv * y;
                for j in 0..b {
                    grad[j] = linalg::frob_dot(&v_inv, &self.reduced_bases[j])
                        - u.dot(&(&self.reduced_bases[j] * &u));
                }
            }
        }
        grad.iter().all(|g| g.is_finite()).then_some(grad)
    }

    /// phi and its gradient.
    fn phi_grad(&self, theta: &DVector<f64>, moment: &SecondMoment) -> Option<(f64, DVector<f64>)> {
        let (val, chol) = self.phi_state(theta, moment)?;
        let grad = self.grad_from_state(&chol, moment)?;
        Some((val, grad))
    }

    /// Natural data scale of the quadratic term: the fitted multipliers are
    /// O(scale), so the optimizer works on theta / scale. This keeps the
    /// stopping rule scale-invariant (scaling the data by c rescales the
    /// solution by exactly c^2).
    fn data_scale(&self) -> f64 {
        let trace = match &self.moment {
            SecondMoment::Dense(s) => s.trace(),
            SecondMoment::Rank1(y) => y.norm_squared(),
        };
        if trace > 0.0 && trace.is_finite() {
            trace / self.m as f64
        } else {
            1.0
        }
    }

    fn scaled_moment(&self, scale: f64) -> SecondMoment {
        match &self.moment {
            SecondMoment::Dense(s) => SecondMoment::Dense(s / scale),
            SecondMoment::Rank1(y) => SecondMoment::Rank1(y / scale.sqrt()),
        }
    }

    fn reduced_v(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.m, self.m);
        for (j, bj) in self.reduced_bases.iter().enumerate() {
            let t = theta[j];
            for (dst, src) in v.iter_mut().zip(bj.iter()) {
                *dst += t * src;
            }
        }
        v
    }

    fn is_feasible(&self, theta: &DVector<f64>, bounds: &ThetaStarBounds) -> bool {
        let b = self.b();
        let floor = bounds.eigen_floor();
        let v = match assemble_v(self.basis, &VarianceParams::from_vector(theta)) {
            Ok(v) => v,
            Err(_) => return false,
        };
        let n = self.basis.n();
        let above_floor = (v.clone() - DMatrix::identity(n, n) * (floor * (1.0 + 1e-9)))
            .cholesky()
            .is_some();
        match self.feasible {
            FeasibleKind::ThetaStar => {
                let poly = {
                    let prod = self.basis.constraint_matrix() * theta;
                    let scale = theta.norm().max(1.0);
                    prod.iter().all(|&x| x >= -1e-10 * scale)
                };
                poly && theta.norm() <= bounds.norm_bound(b) * (1.0 + 1e-12) && above_floor
            }
            FeasibleKind::SpdBox => {
                let ceil = bounds.eigen_ceiling(b);
                let below_ceil = (DMatrix::identity(n, n) * ceil - &v).cholesky().is_some();
                above_floor && below_ceil
            }
        }
    }

    /// Projection onto the polyhedral-and-ball part of the feasible set
    /// (the semidefinite bounds are enforced by the line search instead).
    fn project(&self, theta: &DVector<f64>, bounds: &ThetaStarBounds) -> DVector<f64> {
        match self.feasible {
            FeasibleKind::SpdBox => theta.clone(),
            FeasibleKind::ThetaStar => {
                project_poly_ball(theta, self.basis.constraint_matrix(), bounds.norm_bound(self.b()))
            }
        }
    }

    /// Least-squares moment match vec(S_red) ~ sum theta_j vec(B_red_j).
    fn moment_init(&self, moment: &SecondMoment) -> DVector<f64> {
        let b = self.b();
        let mut g = DMatrix::zeros(b, b);
        for r in 0..b {
            for s in r..b {
                let v = linalg::frob_dot(&self.reduced_bases[r], &self.reduced_bases[s]);
                g[(r, s)] = v;
                g[(s, r)] = v;
            }
        }
        let mut rhs = DVector::zeros(b);
        for r in 0..b {
            rhs[r] = match moment {
                SecondMoment::Dense(s) => linalg::frob_dot(&self.reduced_bases[r], s),
                SecondMoment::Rank1(y) => y.dot(&(&self.reduced_bases[r] * y)),
            };
        }
        // The reduced bases can be near-dependent after projection; fall back
        // to a spectral least-squares solve.
        let (_, pinv, _) = linalg::pseudo_logdet_inv_sym(&g, 1e-10);
        pinv * rhs
    }

    /// Least-squares match of V(theta) to the identity on the full space.
    fn identity_init(&self) -> DVector<f64> {
        let b = self.b();
        let n = self.basis.n() as f64;
        let g = self.basis.gram() * n;
        let rhs = DVector::from_iterator(b, self.basis.bases().iter().map(|bj| bj.trace()));
        let (_, pinv, _) = linalg::pseudo_logdet_inv_sym(&g, 1e-10);
        pinv * rhs
    }

    /// The default (moment-matched) starting point used when no warm start is
    /// given.
    pub fn default_init(&self) -> VarianceParams {
        let scale = self.data_scale();
        let start = self.moment_init(&self.scaled_moment(scale)) * scale;
        VarianceParams::from_vector(&start)
    }

    /// First feasible point among the given start, its projection, and
    /// identity-matched fallbacks (all in real theta coordinates). Candidates
    /// are built lazily: the common case accepts the start immediately.
    fn make_feasible(&self, start: &DVector<f64>, bounds: &ThetaStarBounds) -> Option<DVector<f64>> {
        let floor = bounds.eigen_floor();
        if self.is_feasible(start, bounds) {
            return Some(start.clone());
        }
        let projected = self.project(start, bounds);
        if self.is_feasible(&projected, bounds) {
            return Some(projected);
        }
        let scaled = scale_to_floor(self, &projected, floor);
        if self.is_feasible(&scaled, bounds) {
            return Some(scaled);
        }
        let ident = self.project(&self.identity_init(), bounds);
        if self.is_feasible(&ident, bounds) {
            return Some(ident);
        }
        let ident_scaled = scale_to_floor(self, &ident, floor);
        self.is_feasible(&ident_scaled, bounds)
            .then_some(ident_scaled)
    }

    /// Point pinned just above the eigenvalue floor of Theta*, used when the
    /// likelihood is unbounded (zero residual data).
    fn boundary_clamp(&self, bounds: &ThetaStarBounds) -> Option<DVector<f64>> {
        let floor = bounds.eigen_floor();
        let dir = self.project(&self.identity_init(), bounds);
        let v = assemble_v(self.basis, &VarianceParams::from_vector(&dir)).ok()?;
        let (vals, _) = linalg::sym_eigen_desc(&v);
        let min = vals[vals.len() - 1];
        if min <= 0.0 {
            return None;
        }
        let t = floor * (1.0 + 1e-6) / min;
        let clamped = dir * t;
        self.is_feasible(&clamped, bounds).then_some(clamped)
    }

    /// Retraction onto the eigenvalue floor: when V(theta) dips below the
    /// floor, walk back along the constraint normal (the gradient of the
    /// smallest eigenvalue) until it sits just above. Moving along the normal
    /// leaves the tangential component of a line-search step intact, so the
    /// search can slide along the curved boundary instead of stalling on it.
    fn retract_to_floor(
        &self,
        theta_scaled: &DVector<f64>,
        scale: f64,
        bounds: &ThetaStarBounds,
    ) -> Option<DVector<f64>> {
        let floor = bounds.eigen_floor();
        let margin = floor * (1.0 + 1e-9);
        let n = self.basis.n();
        let mut real = theta_scaled * scale;
        let v = assemble_v(self.basis, &VarianceParams::from_vector(&real)).ok()?;
        if (v - DMatrix::identity(n, n) * margin).cholesky().is_some() {
            return Some(theta_scaled.clone());
        }
        for _ in 0..4 {
            let v = assemble_v(self.basis, &VarianceParams::from_vector(&real)).ok()?;
            let (vals, vecs) = linalg::sym_eigen_desc(&v);
            let lam = vals[vals.len() - 1];
            // Land a hair above the feasibility margin so the Cholesky
            // certificate is numerically robust.
            let target = margin + 1e-12 * (v.trace() / n as f64).abs().max(1.0);
            if lam >= margin {
                break;
            }
            let v_min = vecs.column(vecs.ncols() - 1).into_owned();
            let b = self.b();
            let mut normal = DVector::zeros(b);
            for j in 0..b {
                normal[j] = v_min.dot(&(&self.basis.bases()[j] * &v_min));
            }
            let norm2 = normal.norm_squared();
            if !(norm2 > 0.0) {
                return None;
            }
            real += normal * ((target - lam) / norm2);
            // The normal step may leave the polyhedral cone; put it back.
            real = self.project(&real, bounds);
        }
        let v = assemble_v(self.basis, &VarianceParams::from_vector(&real)).ok()?;
        if (v - DMatrix::identity(n, n) * margin).cholesky().is_none() {
            return None;
        }
        if real.norm() > bounds.norm_bound(self.b()) * (1.0 + 1e-12) {
            return None;
        }
        Some(real / scale)
    }

    /// Gradient of the smallest eigenvalue of V(theta) in scaled coordinates:
    /// d lambda_min / d theta'_j = scale * v_min^T B_j v_min.
    fn floor_normal(&self, theta_scaled: &DVector<f64>, scale: f64) -> Option<DVector<f64>> {
        let real = theta_scaled * scale;
        let v = assemble_v(self.basis, &VarianceParams::from_vector(&real)).ok()?;
        let (_, vecs) = linalg::sym_eigen_desc(&v);
        let v_min = vecs.column(vecs.ncols() - 1).into_owned();
        let b = self.b();
        let mut normal = DVector::zeros(b);
        for j in 0..b {
            normal[j] = scale * v_min.dot(&(&self.basis.bases()[j] * &v_min));
        }
        (normal.norm() > 0.0).then(|| normal.normalize())
    }

    /// Whether the eigenvalue floor is active (within tolerance) at a
    /// scaled-space point.
    fn floor_active(&self, theta_scaled: &DVector<f64>, scale: f64, bounds: &ThetaStarBounds) -> bool {
        let real = theta_scaled * scale;
        let floor = bounds.eigen_floor();
        let n = self.basis.n();
        match assemble_v(self.basis, &VarianceParams::from_vector(&real)) {
            Ok(v) => (v - DMatrix::identity(n, n) * (floor * (1.0 + 1e-5)))
                .cholesky()
                .is_none(),
            Err(_) => false,
        }
    }

    /// Unit normals of the constraints active at a scaled-space point:
    /// eigenvalue floor, nonnegativity rows, norm ball.
    fn active_normals(
        &self,
        theta: &DVector<f64>,
        scale: f64,
        bounds: &ThetaStarBounds,
    ) -> Vec<DVector<f64>> {
        let mut normals = Vec::new();
        if self.floor_active(theta, scale, bounds) {
            if let Some(n) = self.floor_normal(theta, scale) {
                normals.push(n);
            }
        }
        if matches!(self.feasible, FeasibleKind::ThetaStar) {
            let real = theta * scale;
            let a = self.basis.constraint_matrix();
            let theta_scale = real.norm().max(1.0);
            for i in 0..a.nrows() {
                let row = a.row(i).transpose();
                let row_norm = row.norm();
                if row_norm > 0.0 && row.dot(&real).abs() <= 1e-8 * theta_scale * row_norm {
                    normals.push(row / row_norm);
                }
            }
            let radius = bounds.norm_bound(self.b());
            if real.norm() >= radius * (1.0 - 1e-10) {
                // Constraint is R - ||theta|| >= 0; its gradient points inward.
                normals.push(-real.normalize());
            }
        }
        normals
    }

    /// Newton refinement on the active-constraint manifold. A first-order
    /// retraction slide crawls near curved-boundary optima; this builds a
    /// finite-difference Hessian of the objective restricted to the tangent
    /// space (through the retraction) and takes damped Newton steps, which
    /// drives the tangential gradient to tolerance in a handful of steps.
    #[allow(clippy::too_many_arguments)]
    fn boundary_polish(
        &self,
        mut theta: DVector<f64>,
        mut phi: f64,
        scale: f64,
        moment: &SecondMoment,
        bounds: &ThetaStarBounds,
        opts: &RemlOptions,
        kkt: &mut f64,
    ) -> (DVector<f64>, f64, bool) {
        let b = self.b();
        for _ in 0..40 {
            let Some((_, grad)) = self.phi_grad(&theta, moment) else {
                return (theta, phi, false);
            };
            let normals = self.active_normals(&theta, scale, bounds);
            if normals.is_empty() {
                return (theta, phi, *kkt < opts.grad_tol);
            }
            let n_mat = DMatrix::from_fn(b, normals.len(), |i, j| normals[j][i]);
            let Ok(chain) = linalg::HouseholderChain::from_columns(&n_mat) else {
                return (theta, phi, false);
            };
            let tangent = chain.complement(); // b x (b - a)
            if tangent.ncols() == 0 {
                // Fully pinned corner: only the multipliers matter.
                *kkt = residual_after_normals(&grad, &normals);
                return (theta, phi, *kkt < opts.grad_tol);
            }
            let g_t = tangent.transpose() * &grad;
            *kkt = residual_after_normals(&grad, &normals);
            if *kkt < opts.grad_tol {
                return (theta, phi, true);
            }
            // Finite-difference tangent Hessian through the retraction.
            let h = 1e-6 * (1.0 + theta.norm());
            let dim = tangent.ncols();
            let mut hess = DMatrix::zeros(dim, dim);
            let mut ok = true;
            for i in 0..dim {
                let probe = &theta + tangent.column(i).into_owned() * h;
                let Some(probe) = self.retract_to_floor(&probe, scale, bounds) else {
                    ok = false;
                    break;
                };
                let Some((_, g_probe)) = self.phi_grad(&probe, moment) else {
                    ok = false;
                    break;
                };
                let col = tangent.transpose() * (&g_probe - &grad) / h;
                hess.set_column(i, &col);
            }
            if !ok {
                return (theta, phi, false);
            }
            hess = linalg::symmetrize(&hess);
            // Levenberg damping until the model is positive definite.
            let mut ridge = 0.0;
            let newton = loop {
                let damped = &hess + DMatrix::identity(dim, dim) * ridge;
                if let Some(chol) = damped.cholesky() {
                    break chol.solve(&g_t);
                }
                ridge = if ridge == 0.0 { 1e-8 } else { ridge * 10.0 };
                if ridge > 1e12 {
                    return (theta, phi, false);
                }
            };
            let direction = -(&tangent * newton);
            let mut improved = false;
            let mut alpha = 1.0f64;
            for _ in 0..40 {
                let candidate = self.project(&((&theta + &direction * alpha) * scale), bounds) / scale;
                if let Some(candidate) = self.retract_to_floor(&candidate, scale, bounds) {
                    if self.is_feasible(&(&candidate * scale), bounds) {
                        if let Some(phi_c) = self.phi(&candidate, moment) {
                            if phi_c < phi {
                                theta = candidate;
                                phi = phi_c;
                                improved = true;
                                break;
                            }
                        }
                    }
                }
                alpha *= 0.5;
            }
            if !improved {
                // No descent left along the manifold at this resolution.
                return (theta, phi, *kkt < opts.grad_tol);
            }
        }
        (theta, phi, *kkt < opts.grad_tol)
    }

    /// One projected-BFGS run from a scaled-space starting point.
    fn optimize_from(
        &self,
        theta0: DVector<f64>,
        scale: f64,
        moment: &SecondMoment,
        bounds: &ThetaStarBounds,
        opts: &RemlOptions,
    ) -> Option<RunOutcome> {
        // Scaled-space helpers: feasibility and projection act on real theta.
        let project_s = |t: &DVector<f64>| self.project(&(t * scale), bounds) / scale;
        let feasible_s = |t: &DVector<f64>| self.is_feasible(&(t * scale), bounds);
        // KKT residual: the gradient minus the best nonnegative multiples of
        // the active constraint normals (eigenvalue floor, nonnegativity
        // rows, norm ball). Vanishes at interior and constrained optima alike.
        let pg_norm = |t: &DVector<f64>, g: &DVector<f64>| {
            residual_after_normals(g, &self.active_normals(t, scale, bounds))
        };

        let b = self.b();
        let mut theta = theta0;
        let (mut phi, mut grad) = self.phi_grad(&theta, moment)?;
        let mut h_inv = DMatrix::identity(b, b);
        let mut iterations = 0usize;
        let mut converged = false;
        let mut kkt = pg_norm(&theta, &grad);

        'outer: for iter in 1..=opts.max_iterations {
            iterations = iter;
            if kkt < opts.grad_tol && iter > 1 {
                converged = true;
                break;
            }
            let mut dir = -(&h_inv * &grad);
            if grad.dot(&dir) >= -1e-14 * grad.norm() * dir.norm() {
                dir = -grad.clone();
                h_inv = DMatrix::identity(b, b);
            }
            let mut accepted: Option<(DVector<f64>, f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> =
                None;
            for attempt in 0..2 {
                let d = if attempt == 0 { dir.clone() } else { -grad.clone() };
                let mut alpha = 1.0f64;
                for _ in 0..60 {
                    let projected = project_s(&(&theta + &d * alpha));
                    let Some(trial) = self.retract_to_floor(&projected, scale, bounds) else {
                        alpha *= 0.5;
                        continue;
                    };
                    let step = &trial - &theta;
                    // Objective and Armijo first (cheap rejects), then the
                    // strict feasibility certificate on surviving candidates.
                    if step.norm() > 1e-18 {
                        if let Some((phi_t, chol_t)) = self.phi_state(&trial, moment) {
                            let pred = grad.dot(&step);
                            if pred < 0.0 && phi_t <= phi + 1e-4 * pred && feasible_s(&trial) {
                                accepted = Some((trial, phi_t, chol_t));
                                break;
                            }
                        }
                    }
                    alpha *= 0.5;
                }
                if accepted.is_some() {
                    break;
                }
                if attempt == 0 {
                    h_inv = DMatrix::identity(b, b);
                }
            }
            let (next, phi_next, chol_next) = match accepted {
                Some(v) => v,
                None => break 'outer, // stalled: no feasible improving step
            };
            let grad_next = match self.grad_from_state(&chol_next, moment) {
                Some(v) => v,
                None => break 'outer,
            };
            let s = &next - &theta;
            let y = &grad_next - &grad;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                // BFGS inverse Hessian update.
                let rho = 1.0 / sy;
                let i = DMatrix::identity(b, b);
                let left = &i - &s * y.transpose() * rho;
                h_inv = &left * h_inv * left.transpose() + &s * s.transpose() * rho;
            } else {
                h_inv = DMatrix::identity(b, b);
            }
            let rel_change = (phi - phi_next).abs() / phi.abs().max(1.0);
            theta = next;
            phi = phi_next;
            grad = grad_next;
            kkt = pg_norm(&theta, &grad);
            if rel_change < opts.rel_obj_tol && kkt < opts.grad_tol {
                converged = true;
                break;
            }
        }
        if !converged && self.floor_active(&theta, scale, bounds) {
            // The ambient method crawls along the curved eigenvalue floor;
            // finish the job with Newton steps on the constraint manifold.
            let (polished, phi_polished, ok) =
                self.boundary_polish(theta, phi, scale, moment, bounds, opts, &mut kkt);
            theta = polished;
            phi = phi_polished;
            converged = ok;
        }
        Some(RunOutcome {
            theta,
            phi,
            converged,
            iterations,
            kkt,
        })
    }

    /// Maximizes the restricted quasi-likelihood. `init` overrides the
    /// moment-matched default starting point (warm starts).
    ///
    /// Internally the search runs on theta / data_scale so the iterates,
    /// tolerances and stopping rule are invariant to the scale of the data;
    /// scaling Y by c rescales the returned multipliers by exactly c^2.
    pub fn solve(&self, opts: &RemlOptions, init: Option<&VarianceParams>) -> RemlSolution {
        let bounds = opts.bounds;
        if self.degenerate_input {
            if let Some(theta) = self.boundary_clamp(&bounds) {
                let objective = self
                    .phi(&theta, &self.moment)
                    .map(|p| -p)
                    .unwrap_or(f64::NEG_INFINITY);
                let grad_norm = match self.phi_grad(&theta, &self.moment) {
                    Some((_, g)) => (self.project(&(&theta - &g), &bounds) - &theta).norm(),
                    None => f64::INFINITY,
                };
                return RemlSolution {
                    theta_hat: VarianceParams::from_vector(&theta),
                    objective,
                    converged: true,
                    iterations: 0,
                    kkt_residual: grad_norm,
                    degenerate: true,
                    on_boundary: true,
                };
            }
        }

        let scale = self.data_scale();
        let moment = self.scaled_moment(scale);

        // Starting-point cascade: the warm start (or moment match) first, then
        // deterministic restarts built from the identity-matched direction and
        // per-coordinate edge matches. A converged interior solution ends the
        // cascade immediately (the common case); solutions pinned to a
        // constraint keep probing, because edge and floor optima can coexist
        // with better basins elsewhere. The best objective wins.
        let primary = match init {
            Some(w) => w.as_vector(),
            None => self.moment_init(&moment) * scale,
        };
        let ident = self.identity_init() * scale;
        let mut starts: Vec<DVector<f64>> = vec![
            primary.clone(),
            ident.clone(),
            &ident * 4.0,
            &ident * 0.25,
        ];
        for j in 0..self.b() {
            let bj = &self.reduced_bases[j];
            let denom = linalg::frob_dot(bj, bj);
            if denom <= 0.0 {
                continue;
            }
            let num = match &moment {
                SecondMoment::Dense(s) => linalg::frob_dot(bj, s),
                SecondMoment::Rank1(y) => y.dot(&(bj * y)),
            };
            let t = num / denom * scale;
            if t > 0.0 && t.is_finite() {
                let mut edge = DVector::zeros(self.b());
                edge[j] = t;
                starts.push(edge);
            }
        }
        // Floor-projected starts: near-degenerate fits can have their best
        // basin pinned to the eigenvalue floor, which interior starts miss.
        for base in [primary.clone(), ident.clone()] {
            let projected = self.project(&base, &bounds);
            if let Ok(v) = assemble_v(self.basis, &VarianceParams::from_vector(&projected)) {
                let (vals, _) = linalg::sym_eigen_desc(&v);
                let min = vals[vals.len() - 1];
                if min > 0.0 {
                    let t = bounds.eigen_floor() * (1.0 + 1e-6) / min;
                    starts.push(projected * t);
                }
            }
        }
        let mut best: Option<(DVector<f64>, f64, bool, usize, f64)> = None;
        let mut tried: Vec<DVector<f64>> = Vec::new();
        let mut interior_found = false;
        let mut run_cascade = |starts: &[DVector<f64>],
                               best: &mut Option<(DVector<f64>, f64, bool, usize, f64)>,
                               tried: &mut Vec<DVector<f64>>|
         -> bool {
            for start_real in starts {
                if tried
                    .iter()
                    .any(|t| (t - start_real).norm() <= 1e-12 * start_real.norm().max(1e-300))
                {
                    continue;
                }
                tried.push(start_real.clone());
                let Some(feasible_start) = self.make_feasible(start_real, &bounds) else {
                    continue;
                };
                let theta0 = feasible_start / scale;
                let Some(run) = self.optimize_from(theta0, scale, &moment, &bounds, opts) else {
                    continue;
                };
                let better = match &best {
                    None => true,
                    Some((_, phi_best, conv_best, _, _)) => {
                        (run.converged && !conv_best)
                            || (run.converged == *conv_best && run.phi < *phi_best)
                    }
                };
                let interior = run.converged
                    && self.active_normals(&run.theta, scale, &bounds).is_empty();
                if better {
                    *best = Some((run.theta, run.phi, run.converged, run.iterations, run.kkt));
                }
                if interior {
                    return true;
                }
            }
            false
        };
        interior_found |= run_cascade(&starts, &mut best, &mut tried);
        if !interior_found {
            // No interior optimum from the deterministic starts: the fit is
            // pinned to a constraint, where the restricted likelihood can be
            // multimodal. Rank a low-discrepancy scan of the data-scaled box
            // (with sub-floor points retracted onto the floor) and optimize
            // from the leaders.
            let mut box_hi = DVector::zeros(self.b());
            for j in 0..self.b() {
                let from_starts = starts
                    .iter()
                    .map(|s| s[j].abs())
                    .fold(0.0f64, f64::max);
                box_hi[j] = 6.0 * from_starts.max(scale * 1e-3);
            }
            let mut scored: Vec<(f64, DVector<f64>)> = Vec::new();
            for idx in 0..160usize {
                let mut candidate = DVector::zeros(self.b());
                for j in 0..self.b() {
                    candidate[j] = box_hi[j] * halton(idx + 1, PRIMES[j % PRIMES.len()]);
                }
                let projected = self.project(&candidate, &bounds) / scale;
                let Some(retracted) = self.retract_to_floor(&projected, scale, &bounds) else {
                    continue;
                };
                if !self.is_feasible(&(&retracted * scale), &bounds) {
                    continue;
                }
                if let Some(phi) = self.phi(&retracted, &moment) {
                    scored.push((phi, retracted * scale));
                }
            }
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let leaders: Vec<DVector<f64>> = scored.into_iter().take(3).map(|(_, t)| t).collect();
            run_cascade(&leaders, &mut best, &mut tried);
        }
        let Some((theta, phi, converged, iterations, kkt)) = best else {
            let fallback = self.project(&primary, &bounds);
            return RemlSolution {
                theta_hat: VarianceParams::from_vector(&fallback),
                objective: f64::NEG_INFINITY,
                converged: false,
                iterations: 0,
                kkt_residual: f64::INFINITY,
                degenerate: false,
                on_boundary: false,
            };
        };

        let theta_real = theta * scale;
        let objective = -(phi + self.m as f64 * scale.ln());
        let floor = bounds.eigen_floor();
        let degenerate = {
            let v = assemble_v(self.basis, &VarianceParams::from_vector(&theta_real))
                .expect("theta dimension checked");
            let n = self.basis.n();
            (v - DMatrix::identity(n, n) * (floor * 1.05))
                .cholesky()
                .is_none()
        };
        let on_boundary = match self.feasible {
            FeasibleKind::SpdBox => degenerate,
            FeasibleKind::ThetaStar => {
                let prod = self.basis.constraint_matrix() * &theta_real;
                let norm = theta_real.norm().max(1.0);
                prod.iter().any(|&x| x.abs() <= 1e-8 * norm) || degenerate
            }
        };
        RemlSolution {
            theta_hat: VarianceParams::from_vector(&theta_real),
            objective,
            converged,
            iterations,
            kkt_residual: kkt,
            degenerate,
            on_boundary,
        }
    }
}

const PRIMES: [usize; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

/// Element `index` of the base-`base` Halton low-discrepancy sequence.
fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Gradient residual after removing the best nonnegative multiples of the
/// given unit constraint normals (sequential clamping; exact for a single
/// active constraint, a good approximation for corners).
fn residual_after_normals(grad: &DVector<f64>, normals: &[DVector<f64>]) -> f64 {
    let mut res = grad.clone();
    for n in normals {
        let mu = res.dot(n).max(0.0);
        res -= n * mu;
    }
    res.norm()
}

fn check_data(y: &DMatrix<f64>, basis: &CovarianceBasis) -> Result<()> {
    if y.ncols() != basis.n() {
        return Err(Error::DimensionMismatch {
            context: "REML data columns".into(),
            expected: basis.n(),
            found: y.ncols(),
        });
    }
    if y.nrows() == 0 {
        return Err(Error::InvalidConfig("REML needs at least one data row".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("REML data contains non-finite values".into()));
    }
    Ok(())
}

fn check_full_rank(m: &DMatrix<f64>, context: &str) -> Result<()> {
    let gram = m.transpose() * m;
    let (vals, vecs) = linalg::sym_eigen_desc(&gram);
    let k = vals.len();
    if vals[k - 1] <= 1e-10 * vals[0].max(1e-300) {
        let dir: Vec<f64> = vecs.column(k - 1).iter().copied().collect();
        return Err(Error::Collinear {
            context: context.into(),
            direction: dir,
        });
    }
    Ok(())
}

fn scale_to_floor(problem: &RemlProblem<'_>, theta: &DVector<f64>, floor: f64) -> DVector<f64> {
    let v = match assemble_v(problem.basis, &VarianceParams::from_vector(theta)) {
        Ok(v) => v,
        Err(_) => return theta.clone(),
    };
    let (vals, _) = linalg::sym_eigen_desc(&v);
    let min = vals[vals.len() - 1];
    if min > 0.0 && min <= floor {
        theta * (floor * 1.01 / min)
    } else {
        theta.clone()
    }
}

/// Dykstra projection onto { A theta >= 0 } intersected with the centered ball
/// of radius `radius`.
fn project_poly_ball(theta: &DVector<f64>, a: &DMatrix<f64>, radius: f64) -> DVector<f64> {
    let q = a.nrows();
    let mut x = theta.clone();
    if q == 0 {
        let norm = x.norm();
        if norm > radius {
            x *= radius / norm;
        }
        return x;
    }
    let b = theta.len();
    let mut corrections = vec![DVector::<f64>::zeros(b); q + 1];
    for _ in 0..500 {
        let before = x.clone();
        for (i, corr) in corrections.iter_mut().enumerate() {
            let z = &x - &*corr;
            let projected = if i < q {
                let row = a.row(i).transpose();
                let denom = row.norm_squared();
                let val = row.dot(&z);
                if val < 0.0 && denom > 0.0 {
                    &z - &row * (val / denom)
                } else {
                    z.clone()
                }
            } else {
                let norm = z.norm();
                if norm > radius {
                    &z * (radius / norm)
                } else {
                    z.clone()
                }
            };
            *corr = &projected - &z;
            x = projected;
        }
        if (&x - &before).norm() <= 1e-13 * x.norm().max(1.0) {
            break;
        }
    }
    x
}

/// Whole-data variance fit with no projection.
pub fn reml_full(y: &DMatrix<f64>, basis: &CovarianceBasis, opts: &RemlOptions) -> Result<RemlSolution> {
    Ok(RemlProblem::full(y, basis)?.solve(opts, None))
}

/// Whole-data variance fit on the complement of an estimated factor projection,
/// warm-started at `warm_start`.
pub fn reml_projected(
    y: &DMatrix<f64>,
    basis: &CovarianceBasis,
    p_c_hat: &DMatrix<f64>,
    warm_start: &VarianceParams,
    opts: &RemlOptions,
) -> Result<RemlSolution> {
    linalg::check_projection(p_c_hat, 1e-8)?;
    // Extract an orthonormal basis of the projected subspace.
    let (vals, vecs) = linalg::sym_eigen_desc(p_c_hat);
    let k = vals.iter().filter(|&&v| v > 0.5).count();
    let subspace = DMatrix::from_fn(p_c_hat.nrows(), k, |i, j| vecs[(i, j)]);
    reml_projected_on_subspace(y, basis, &subspace, warm_start, opts)
}

/// Same as [`reml_projected`] but takes the factor-span basis directly.
pub fn reml_projected_on_subspace(
    y: &DMatrix<f64>,
    basis: &CovarianceBasis,
    subspace: &DMatrix<f64>,
    warm_start: &VarianceParams,
    opts: &RemlOptions,
) -> Result<RemlSolution> {
    Ok(RemlProblem::projected(y, basis, subspace)?.solve(opts, Some(warm_start)))
}

/// Per-gene variance fit with the factor design projected out.
pub fn reml_gene(
    y_g: &DVector<f64>,
    c_hat: &DMatrix<f64>,
    basis: &CovarianceBasis,
    opts: &RemlOptions,
) -> Result<RemlSolution> {
    Ok(RemlProblem::gene(y_g, c_hat, basis)?.solve(opts, None))
}

/// Per-gene variance fit with the combined design (factors, covariates)
/// projected out; the estimate used for denoised effect inference.
pub fn reml_denoise(
    y_g: &DVector<f64>,
    c_hat: &DMatrix<f64>,
    x_g: &DMatrix<f64>,
    basis: &CovarianceBasis,
    opts: &RemlOptions,
) -> Result<RemlSolution> {
    if x_g.nrows() != basis.n() {
        return Err(Error::DimensionMismatch {
            context: "denoise REML covariates".into(),
            expected: basis.n(),
            found: x_g.nrows(),
        });
    }
    let mut design = DMatrix::zeros(basis.n(), c_hat.ncols() + x_g.ncols());
    design.view_mut((0, 0), (basis.n(), c_hat.ncols())).copy_from(c_hat);
    design
        .view_mut((0, c_hat.ncols()), (basis.n(), x_g.ncols()))
        .copy_from(x_g);
    Ok(RemlProblem::gene(y_g, &design, basis)?.solve(opts, None))
}
