//! Cross-validated selection of the number of factors (CBCV+).
//!
//! Genes (rows) are split into folds; each fold's training block is fit for
//! every candidate dimension k and the held-out block is scored with a
//! determinant-weighted, Haar-rotated leave-one-out regression loss. The
//! selected rank minimizes the loss summed over folds.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::covmodel::{assemble_v, CovarianceBasis};
use crate::error::{Error, Result};
use crate::falco::falco_fit;
use crate::linalg;
use crate::reml::RemlOptions;

/// Random assignment of rows to folds.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub n_folds: usize,
    /// Fold id in 1..=n_folds for every row.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Assigns each of `p` rows a fold id uniformly at random, resampling in
    /// the unlikely event some fold comes up empty.
    pub fn sample(p: usize, n_folds: usize, seed: u64) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::InvalidConfig("fold count must be >= 2".into()));
        }
        if p < n_folds {
            return Err(Error::InvalidConfig(format!(
                "cannot split {p} rows into {n_folds} non-empty folds"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let assignment: Vec<usize> =
                (0..p).map(|_| rng.random_range(1..=n_folds)).collect();
            let mut counts = vec![0usize; n_folds + 1];
            for &a in &assignment {
                counts[a] += 1;
            }
            if counts[1..].iter().all(|&c| c > 0) {
                return Ok(Self {
                    n_folds,
                    assignment,
                    seed,
                });
            }
        }
        Err(Error::Numeric(
            "failed to sample non-empty folds (p too small relative to F)".into(),
        ))
    }

    pub fn rows_in_fold(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn rows_out_of_fold(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

/// Per-fold, per-dimension losses and the selected rank.
#[derive(Debug, Clone, PartialEq)]
pub struct CbcvResult {
    /// losses[f][k] for fold f (0-based) and dimension k = 0..=K_max.
    pub losses: Vec<Vec<f64>>,
    /// Losses summed over folds.
    pub total: Vec<f64>,
    /// argmin of `total` (smallest index on ties).
    pub k_hat: usize,
    pub k_max: usize,
    pub eta: f64,
    pub n_folds: usize,
    pub seed: u64,
}

/// Samples an n x n orthogonal matrix from the Haar (rotation-invariant)
/// distribution: QR of an iid Gaussian matrix with the R-diagonal sign
/// correction.
pub fn sample_haar_rotation(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_haar_rotation_with(n, &mut rng)
}

pub(crate) fn sample_haar_rotation_with<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Determinant-weighted leave-one-out loss of a held-out block.
///
/// The block is whitened by the training variance estimate and rotated by `q`;
/// each rotated sample is predicted from an OLS regression of the remaining
/// samples on the rotated, whitened factor design. The leave-one-out residuals
/// come from the closed-form hat-matrix identity rather than n refits.
pub fn loo_loss(
    y_test: &DMatrix<f64>,
    v_hat: &DMatrix<f64>,
    c_hat: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<f64> {
    let n = v_hat.nrows();
    if y_test.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "loo_loss".into(),
            expected: n,
            found: y_test.ncols(),
        });
    }
    let (vals, vecs) = linalg::sym_eigen_desc(v_hat);
    if vals[n - 1] <= 0.0 {
        return Err(Error::Numeric(
            "training variance estimate is not positive definite".into(),
        ));
    }
    let log_det: f64 = vals.iter().map(|x| x.ln()).sum();
    let weight = (log_det / n as f64).exp();
    let inv_sqrt = &vecs * DMatrix::from_diagonal(&vals.map(|x| 1.0 / x.sqrt())) * vecs.transpose();
    let y_bar = y_test * &inv_sqrt * q; // p_f x n
    let k = c_hat.ncols();
    if k == 0 {
        return Ok(weight * y_bar.norm_squared());
    }
    let c_bar = q.transpose() * &inv_sqrt * c_hat; // n x k
    let gram = c_bar.transpose() * &c_bar;
    let chol = gram.cholesky().ok_or_else(|| Error::RankDeficient {
        context: "loo_loss: rotated factor design".into(),
    })?;
    // Leverages of the rotated design.
    let solved = chol.solve(&c_bar.transpose()); // k x n
    let mut leverages = DVector::zeros(n);
    for i in 0..n {
        leverages[i] = c_bar.row(i).transpose().dot(&solved.column(i).into_owned());
        if leverages[i] >= 1.0 - 1e-10 {
            return Err(Error::LeverageOne { sample: i });
        }
    }
    // Full-design OLS residuals, then the closed-form deleted residuals
    // r_i / (1 - h_i).
    let coeffs = &y_bar * chol.solve(&c_bar.transpose()).transpose(); // p_f x k
    let residuals = &y_bar - &coeffs * c_bar.transpose();
    let mut loss = 0.0;
    for i in 0..n {
        let denom = 1.0 - leverages[i];
        loss += residuals.column(i).norm_squared() / (denom * denom);
    }
    Ok(weight * loss)
}

/// Runs the full selection: fold the rows, fit every dimension on each
/// training block, score the held-out block, and pick the argmin of the
/// summed losses. Deterministic given `seed`.
pub fn cbcv_select(
    y: &DMatrix<f64>,
    basis: &CovarianceBasis,
    n_folds: usize,
    eta: f64,
    seed: u64,
    alpha: f64,
    opts: &RemlOptions,
) -> Result<CbcvResult> {
    let n = basis.n();
    let p = y.nrows();
    if y.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "cbcv_select data columns".into(),
            expected: n,
            found: y.ncols(),
        });
    }
    if !(0.0 < eta && eta < 1.0) {
        return Err(Error::InvalidConfig(format!("eta = {eta} not in (0, 1)")));
    }
    let k_max = (eta * n.min(p) as f64).ceil() as usize;
    let plan = FoldPlan::sample(p, n_folds, seed)?;
    let mut q_rng = ChaCha8Rng::seed_from_u64(seed);
    q_rng.set_stream(1);
    let q = sample_haar_rotation_with(n, &mut q_rng);

    let losses: Vec<Vec<f64>> = (1..=n_folds)
        .into_par_iter()
        .map(|fold| -> Result<Vec<f64>> {
            let train_rows = plan.rows_out_of_fold(fold);
            let test_rows = plan.rows_in_fold(fold);
            if train_rows.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "fold {fold} leaves an empty training block"
                )));
            }
            if k_max > n.min(train_rows.len()) {
                return Err(Error::InvalidConfig(format!(
                    "K_max = {k_max} exceeds the training block capacity of fold {fold}"
                )));
            }
            let y_train = y.select_rows(train_rows.iter());
            let y_test = y.select_rows(test_rows.iter());
            let trace = falco_fit(&y_train, basis, k_max, alpha, opts)?;
            let mut fold_losses = Vec::with_capacity(k_max + 1);
            for fit in &trace.fits {
                let v = assemble_v(basis, &fit.vbar_hat)?;
                fold_losses.push(loo_loss(&y_test, &v, &fit.c_hat, &q)?);
            }
            Ok(fold_losses)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = vec![0.0f64; k_max + 1];
    for fold_losses in &losses {
        for (k, &l) in fold_losses.iter().enumerate() {
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite CV loss at k = {k}")));
            }
            total[k] += l;
        }
    }
    let k_hat = total
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(k, _)| k)
        .unwrap();
    Ok(CbcvResult {
        losses,
        total,
        k_hat,
        k_max,
        eta,
        n_folds,
        seed,
    })
}
