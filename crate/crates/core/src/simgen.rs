//! Ground-truth simulation of multi-condition expression data and the
//! evaluation metrics used to validate the estimators against it.
//!
//! Each gene's expression across `n_individuals x n_conditions` samples is a
//! spike-and-slab loading times iid Gaussian factors, plus a genotype effect
//! shared across conditions, plus per-individual correlated condition noise.
//! Condition intercepts are rotated out before anything is returned, so the
//! dataset carries the rotated data, the rotated covariance basis (one basis
//! matrix per entry of the per-individual condition covariance), and oracle
//! quantities computed from the drawn truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covmodel::{
    assemble_v, rotate_out_nuisance, CovarianceBasis, NuisanceRotation, VarianceParams,
};
use crate::error::{Error, Result};
use crate::linalg;

fn default_eqtl_sparsity() -> f64 {
    0.2
}
fn default_eqtl_effect_sd() -> f64 {
    0.4
}
fn default_maf_range() -> (f64, f64) {
    (0.05, 0.5)
}
fn default_marginal_sd_range() -> (f64, f64) {
    (0.5, 1.5)
}
fn default_shared_eqtl_fraction() -> f64 {
    0.25
}
fn default_correlation_ranges() -> Vec<(f64, f64)> {
    vec![(0.3, 0.9), (-0.1, 0.5), (0.1, 0.7)]
}

/// Simulation design. `pi[k]`/`tau[k]` give the spike-and-slab law of the
/// k-th loading column; the remaining fields control the genotype effects and
/// the per-gene condition covariance sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub p: usize,
    pub n_individuals: usize,
    pub n_conditions: usize,
    pub k: usize,
    pub pi: Vec<f64>,
    pub tau: Vec<f64>,
    #[serde(default = "default_eqtl_sparsity")]
    pub eqtl_sparsity: f64,
    #[serde(default = "default_eqtl_effect_sd")]
    pub eqtl_effect_sd: f64,
    #[serde(default = "default_maf_range")]
    pub maf_range: (f64, f64),
    #[serde(default = "default_marginal_sd_range")]
    pub marginal_sd_range: (f64, f64),
    /// One (lo, hi) correlation range per condition pair, pairs ordered
    /// (1,2), (1,3), ..., (2,3), ...
    #[serde(default = "default_correlation_ranges")]
    pub correlation_ranges: Vec<(f64, f64)>,
    #[serde(default = "default_shared_eqtl_fraction")]
    pub shared_eqtl_fraction: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Total sample count before the condition intercepts are rotated out.
    pub fn n_samples(&self) -> usize {
        self.n_individuals * self.n_conditions
    }

    fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n_individuals == 0 || self.n_conditions < 2 {
            return Err(Error::InvalidConfig(
                "need p >= 1, individuals >= 1, conditions >= 2".into(),
            ));
        }
        if self.pi.len() != self.k || self.tau.len() != self.k {
            return Err(Error::InvalidConfig(
                "pi and tau must have one entry per factor".into(),
            ));
        }
        if self.pi.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::InvalidConfig("pi entries must lie in (0, 1]".into()));
        }
        if self.tau.iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidConfig("tau entries must be positive".into()));
        }
        let pairs = self.n_conditions * (self.n_conditions - 1) / 2;
        if self.correlation_ranges.len() != pairs {
            return Err(Error::InvalidConfig(format!(
                "need {pairs} correlation ranges for {} conditions",
                self.n_conditions
            )));
        }
        if !(0.0..=1.0).contains(&self.eqtl_sparsity)
            || !(0.0..1.0).contains(&self.shared_eqtl_fraction)
        {
            return Err(Error::InvalidConfig(
                "eqtl_sparsity in [0,1] and shared_eqtl_fraction in [0,1) required".into(),
            ));
        }
        Ok(())
    }
}

/// Seed for replicate `r` of a study driven by `master` (fixed odd-constant
/// mixing keeps the streams distinct).
pub fn replicate_seed(master: u64, replicate: u64) -> u64 {
    master ^ replicate.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A simulated dataset after nuisance rotation, with ground truth and oracle
/// quantities attached.
#[derive(Debug, Clone)]
pub struct SimDataset {
    /// p x m rotated data, m = individuals * conditions - conditions.
    pub y: DMatrix<f64>,
    /// p x K true loadings.
    pub l_true: DMatrix<f64>,
    /// m x K rotated true factors.
    pub c_true: DMatrix<f64>,
    /// Per-gene true variance multipliers in the rotated basis.
    pub v_g_true: Vec<VarianceParams>,
    /// Per-gene genotype effect (0 for genes without an eQTL).
    pub s_true: Vec<f64>,
    /// p x individuals genotype matrix (rows repeat within a shared cluster).
    pub genotypes: DMatrix<f64>,
    /// Cluster id per gene; genes sharing an id share a causal SNP.
    pub eqtl_clusters: Vec<usize>,
    /// Rotated covariance basis (one matrix per condition-covariance entry).
    pub basis: CovarianceBasis,
    pub rotation: NuisanceRotation,
    /// Rotated average noise covariance.
    pub vbar_true: DMatrix<f64>,
    /// Scalar noise level |Vbar|^(1/m).
    pub delta2: f64,
    /// Signal strengths of the K factors, descending.
    pub gamma: Vec<f64>,
    /// Number of factors whose signal strength exceeds the noise level.
    pub k_oracle: usize,
    pub lambda_oracle: Vec<f64>,
    pub c_oracle: DMatrix<f64>,
    pub l_oracle: DMatrix<f64>,
    pub config: SimConfig,
}

impl SimDataset {
    /// Rotated sample count.
    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    /// Rotated single-column covariate design for gene `g`: the gene's
    /// genotype expanded across conditions and pushed through the rotation.
    pub fn x_for_gene(&self, g: usize) -> DMatrix<f64> {
        let c = self.config.n_conditions;
        let n_raw = self.config.n_samples();
        let raw = DVector::from_fn(n_raw, |i, _| self.genotypes[(g, i / c)]);
        let rotated = self.rotation.q_z().transpose() * raw;
        DMatrix::from_column_slice(rotated.len(), 1, rotated.as_slice())
    }

    /// Residual matrix E = Y - L C^T on the rotated scale.
    pub fn residuals(&self) -> DMatrix<f64> {
        &self.y - &self.l_true * self.c_true.transpose()
    }
}

/// The condition-covariance basis before rotation: diagonal indicators
/// e_i e_i^T followed by symmetric pair indicators, each expanded to
/// block-diagonal form over individuals. Only the diagonal multipliers are
/// sign-constrained.
fn condition_basis(individuals: usize, conditions: usize) -> Result<CovarianceBasis> {
    let c = conditions;
    let n = individuals * c;
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    for i in 0..c {
        let mut a = DMatrix::zeros(c, c);
        a[(i, i)] = 1.0;
        blocks.push(a);
    }
    for i in 0..c {
        for j in (i + 1)..c {
            let mut a = DMatrix::zeros(c, c);
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
            blocks.push(a);
        }
    }
    let b = blocks.len();
    let bases = blocks
        .iter()
        .map(|a| {
            let mut m = DMatrix::zeros(n, n);
            for t in 0..individuals {
                m.view_mut((t * c, t * c), (c, c)).copy_from(a);
            }
            m
        })
        .collect();
    // Constrain the diagonal (variance) multipliers to be nonnegative and
    // leave the covariance multipliers free.
    let mut constraint = DMatrix::zeros(c, b);
    for i in 0..c {
        constraint[(i, i)] = 1.0;
    }
    CovarianceBasis::new(bases, Some(constraint))
}

/// Expands a symmetric c x c condition covariance into multipliers matching
/// [`condition_basis`]'s ordering: diagonal entries then upper off-diagonals.
fn condition_cov_to_theta(m: &DMatrix<f64>) -> Vec<f64> {
    let c = m.nrows();
    let mut theta = Vec::with_capacity(c * (c + 1) / 2);
    for i in 0..c {
        theta.push(m[(i, i)]);
    }
    for i in 0..c {
        for j in (i + 1)..c {
            theta.push(m[(i, j)]);
        }
    }
    theta
}

/// Draws a dataset from the configured design. Deterministic given the seed.
pub fn simulate(config: &SimConfig) -> Result<SimDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let p = config.p;
    let k = config.k;
    let n_ind = config.n_individuals;
    let c = config.n_conditions;
    let n_raw = config.n_samples();

    // Loadings: spike and slab per column.
    let mut l_true = DMatrix::zeros(p, k);
    for r in 0..k {
        for g in 0..p {
            if rng.random::<f64>() < config.pi[r] {
                let z: f64 = StandardNormal.sample(&mut rng);
                l_true[(g, r)] = z * config.tau[r];
            }
        }
    }
    // Factors: iid standard normal.
    let c_raw = DMatrix::from_fn(n_raw, k, |_, _| StandardNormal.sample(&mut rng));

    // Genotype effects.
    let s_true: Vec<f64> = (0..p)
        .map(|_| {
            if rng.random::<f64>() < config.eqtl_sparsity {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * config.eqtl_effect_sd
            } else {
                0.0
            }
        })
        .collect();

    // Cluster genes with effects into SNP-sharing pairs so that the target
    // fraction of eQTL genes is correlated with at least one other gene.
    // Pairing with probability f/(2-f) makes the expected in-pair fraction f.
    let f = config.shared_eqtl_fraction;
    let pair_prob = if f > 0.0 { f / (2.0 - f) } else { 0.0 };
    let mut eqtl_clusters = vec![0usize; p];
    let mut next_cluster = 0usize;
    {
        let effect_genes: Vec<usize> = (0..p).filter(|&g| s_true[g] != 0.0).collect();
        let mut queue = effect_genes.into_iter().peekable();
        while let Some(g) = queue.next() {
            if queue.peek().is_some() && rng.random::<f64>() < pair_prob {
                let h = queue.next().unwrap();
                eqtl_clusters[g] = next_cluster;
                eqtl_clusters[h] = next_cluster;
            } else {
                eqtl_clusters[g] = next_cluster;
            }
            next_cluster += 1;
        }
        for g in 0..p {
            if s_true[g] == 0.0 {
                eqtl_clusters[g] = next_cluster;
                next_cluster += 1;
            }
        }
    }

    // One genotype vector and minor allele frequency per cluster (Hardy-
    // Weinberg: sum of two Bernoulli draws).
    let n_clusters = next_cluster;
    let mut cluster_maf = vec![0.0f64; n_clusters];
    let mut cluster_geno: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    for maf_slot in cluster_maf.iter_mut() {
        let maf = config.maf_range.0
            + rng.random::<f64>() * (config.maf_range.1 - config.maf_range.0);
        *maf_slot = maf;
        // Monomorphic draws leave the gene untestable (the covariate falls in
        // the span of the intercepts); redraw like a pipeline pruning them.
        let mut geno = Vec::new();
        for _ in 0..10_000 {
            geno = (0..n_ind)
                .map(|_| {
                    let a = (rng.random::<f64>() < maf) as u8;
                    let b = (rng.random::<f64>() < maf) as u8;
                    (a + b) as f64
                })
                .collect();
            if n_ind < 2 || geno.iter().any(|&g| g != geno[0]) {
                break;
            }
        }
        cluster_geno.push(geno);
    }
    let genotypes =
        DMatrix::from_fn(p, n_ind, |g, i| cluster_geno[eqtl_clusters[g]][i]);

    // Per-gene condition covariance: heterogeneous marginal sds, pairwise
    // correlations from per-pair ranges, rejection-sampled to be PD.
    let mut cond_cov: Vec<DMatrix<f64>> = Vec::with_capacity(p);
    let (sd_lo, sd_hi) = config.marginal_sd_range;
    for g in 0..p {
        let mut accepted = None;
        for _ in 0..1000 {
            let sds: Vec<f64> = (0..c)
                .map(|_| sd_lo + rng.random::<f64>() * (sd_hi - sd_lo))
                .collect();
            let mut m = DMatrix::zeros(c, c);
            for i in 0..c {
                m[(i, i)] = sds[i] * sds[i];
            }
            let mut pair = 0usize;
            for i in 0..c {
                for j in (i + 1)..c {
                    let (lo, hi) = config.correlation_ranges[pair];
                    let rho = lo + rng.random::<f64>() * (hi - lo);
                    m[(i, j)] = rho * sds[i] * sds[j];
                    m[(j, i)] = m[(i, j)];
                    pair += 1;
                }
            }
            if m.clone().cholesky().is_some() {
                accepted = Some(m);
                break;
            }
        }
        cond_cov.push(accepted.ok_or_else(|| {
            Error::Numeric(format!(
                "gene {g}: could not sample a positive definite condition covariance"
            ))
        })?);
    }

    // Normalize so the rotated average noise covariance has unit
    // pseudo-determinant: scale every gene's covariance by a common factor.
    let z = DMatrix::from_fn(n_raw, c, |i, j| if i % c == j { 1.0 } else { 0.0 });
    let rotation = NuisanceRotation::new(z.clone())?;
    let m_dim = n_raw - c;
    let mut mbar = DMatrix::zeros(c, c);
    for m in &cond_cov {
        mbar += m;
    }
    mbar /= p as f64;
    let mbar_block = block_diag(&mbar, n_ind);
    let reduced = rotation.q_z().transpose() * &mbar_block * rotation.q_z();
    let logdet = linalg::logdet_spd(&linalg::symmetrize(&reduced))
        .map_err(|_| Error::Numeric("degenerate average condition covariance".into()))?;
    let scale = (-logdet / m_dim as f64).exp();
    for m in cond_cov.iter_mut() {
        *m *= scale;
    }

    // Noise and data on the raw scale.
    let mut e = DMatrix::zeros(p, n_raw);
    for g in 0..p {
        let chol = cond_cov[g]
            .clone()
            .cholesky()
            .expect("scaled covariance stays positive definite");
        let lmat = chol.l();
        for ind in 0..n_ind {
            let zvec = DVector::from_fn(c, |_, _| StandardNormal.sample(&mut rng));
            let noise = &lmat * zvec;
            for cc in 0..c {
                e[(g, ind * c + cc)] = noise[cc];
            }
        }
        if s_true[g] != 0.0 {
            for i in 0..n_raw {
                e[(g, i)] += s_true[g] * genotypes[(g, i / c)];
            }
        }
    }
    let y_raw = &l_true * c_raw.transpose() + &e;

    // Rotate condition intercepts out of the data, the factors and the basis.
    let pre_basis = condition_basis(n_ind, c)?;
    let (y, basis, rotation) = rotate_out_nuisance(&y_raw, &z, &pre_basis)?;
    let c_true = rotation.q_z().transpose() * &c_raw;

    // True per-gene multipliers: condition covariance plus the genotype
    // variance 2 maf (1 - maf) s^2 shared across conditions.
    let ones_cc = DMatrix::from_element(c, c, 1.0);
    let mut v_g_true = Vec::with_capacity(p);
    let mut nbar = DMatrix::zeros(c, c);
    for g in 0..p {
        let maf = cluster_maf[eqtl_clusters[g]];
        let geno_var = 2.0 * maf * (1.0 - maf) * s_true[g] * s_true[g];
        let n_g = &cond_cov[g] + &ones_cc * geno_var;
        nbar += &n_g;
        v_g_true.push(VarianceParams::new(condition_cov_to_theta(&n_g)));
    }
    nbar /= p as f64;
    let vbar_theta = VarianceParams::new(condition_cov_to_theta(&nbar));
    let vbar_true = assemble_v(&basis, &vbar_theta)?;

    // Oracle quantities from the drawn truth.
    let delta2 = (linalg::logdet_spd(&vbar_true)? / m_dim as f64).exp();
    let vbar_inv_trace = {
        let chol = vbar_true
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("average covariance not positive definite".into()))?;
        chol.inverse().trace()
    };
    // E[ m^-1 C^T (delta^-2 Vbar)^-1 C ] = psi I for iid normal factors.
    let psi = delta2 * vbar_inv_trace / m_dim as f64;
    let ltl = l_true.transpose() * &l_true;
    let (ltl_vals, _) = linalg::sym_eigen_desc(&ltl);
    let gamma: Vec<f64> = ltl_vals
        .iter()
        .map(|v| psi * m_dim as f64 * v / p as f64)
        .collect();
    let k_oracle = gamma.iter().filter(|&&g| g > delta2).count();
    let (lambda_oracle, c_oracle, l_oracle) =
        oracle_quantities(&l_true, &c_true, &vbar_true, k_oracle)?;

    Ok(SimDataset {
        y,
        l_true,
        c_true,
        v_g_true,
        s_true,
        genotypes,
        eqtl_clusters,
        basis,
        rotation,
        vbar_true,
        delta2,
        gamma,
        k_oracle,
        lambda_oracle,
        c_oracle,
        l_oracle,
        config: config.clone(),
    })
}

fn block_diag(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let c = block.nrows();
    let n = c * copies;
    let mut m = DMatrix::zeros(n, n);
    for t in 0..copies {
        m.view_mut((t * c, t * c), (c, c)).copy_from(block);
    }
    m
}

/// Absolute cosine similarity between one estimated and one true factor
/// column.
pub fn factor_correlation(a_hat: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
    let na = a_hat.norm();
    let nb = a.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector {
            context: "factor_correlation".into(),
        });
    }
    Ok((a_hat.dot(a) / (na * nb)).abs().min(1.0))
}

/// Worst-direction subspace correlation: the k-th largest singular value of
/// Q_hat^T Q (cosine of the largest principal angle between the spans).
pub fn subspace_correlation(a_hat: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<f64> {
    if a_hat.ncols() != a.ncols() || a_hat.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch {
            context: "subspace_correlation".into(),
            expected: a.ncols(),
            found: a_hat.ncols(),
        });
    }
    let q_hat = orthonormal_columns(a_hat)?;
    let q = orthonormal_columns(a)?;
    let cross = q_hat.transpose() * q;
    let svd = cross.svd(false, false);
    let min = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v));
    Ok(min.clamp(0.0, 1.0))
}

fn orthonormal_columns(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = m.ncols();
    if k == 0 {
        return Err(Error::RankDeficient {
            context: "subspace_correlation: empty matrix".into(),
        });
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-10 * scale.max(1e-300)) {
        return Err(Error::RankDeficient {
            context: "subspace_correlation".into(),
        });
    }
    Ok(qr.q())
}

/// Best rank-s approximation of the signal matrix L C^T in the
/// inverse-sqrt-weighted Frobenius norm, returned as identified factors,
/// loadings and their eigenvalues:
/// C_o with n^-1 C_o^T C_o = I_s, L_o with diagonal non-increasing scatter,
/// and lambda_o_r the r-th eigenvalue of p^-1 L_o C_o^T C_o L_o^T.
pub fn oracle_quantities(
    l_true: &DMatrix<f64>,
    c_true: &DMatrix<f64>,
    vbar: &DMatrix<f64>,
    s: usize,
) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = c_true.nrows();
    let p = l_true.nrows();
    let k = l_true.ncols();
    if s > k {
        return Err(Error::InvalidConfig(format!(
            "oracle rank {s} exceeds the true factor count {k}"
        )));
    }
    if s == 0 {
        return Ok((Vec::new(), DMatrix::zeros(n, 0), DMatrix::zeros(p, 0)));
    }
    let (v_sqrt, v_inv_sqrt) = linalg::spd_sqrt_inv_sqrt(vbar)?;
    // T = L C^T Vbar^(-1/2); its best rank-s approximation is T projected onto
    // the span of its top s right singular vectors.
    let t = l_true * (c_true.transpose() * &v_inv_sqrt);
    let gram = linalg::symmetrize(&(t.transpose() * &t));
    let (_, vecs) = linalg::sym_eigen_desc(&gram);
    let v_s = DMatrix::from_fn(n, s, |i, j| vecs[(i, j)]);
    let w = &t * &v_s * v_s.transpose() * &v_sqrt; // p x n, rank s
    // Identified factorization of W.
    let w_gram = linalg::symmetrize(&(w.transpose() * &w));
    let (w_vals, w_vecs) = linalg::sym_eigen_desc(&w_gram);
    let mut c_oracle = DMatrix::from_fn(n, s, |i, j| w_vecs[(i, j)]) * (n as f64).sqrt();
    let mut l_oracle = &w * &c_oracle / n as f64;
    linalg::canonicalize_column_signs(&mut c_oracle, Some(&mut l_oracle));
    let lambda: Vec<f64> = (0..s).map(|r| w_vals[r] / p as f64).collect();
    Ok((lambda, c_oracle, l_oracle))
}
