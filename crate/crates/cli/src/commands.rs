//! Command implementations: orchestration, file formats and validation.

use anyhow::{bail, Context};
use falco_core::cbcv::cbcv_select;
use falco_core::covmodel::{BasisSpec, CovarianceBasis, ThetaStarBounds, VarianceParams};
use falco_core::denoise::{bh_adjust, denoise_genes};
use falco_core::falco::{falco_fit, pca_fit, FactorFit};
use falco_core::io::{read_json, read_matrix_tsv, write_json, write_matrix_tsv, NamedMatrix};
use falco_core::reml::{reml_full, RemlOptions, RemlSolution};
use falco_core::simgen::{factor_correlation, simulate as run_simulation, subspace_correlation, SimConfig};
use falco_core::Error as CoreError;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::manifest::write_manifest;
use crate::{DenoiseArgs, FitArgs, MetricsArgs, SimulateArgs};

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    version: u32,
    sim: SimConfig,
}

/// Study design: how a genotype row expands to per-sample covariates and the
/// rotation that removed the condition intercepts.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignSpec {
    version: u32,
    n_individuals: usize,
    n_conditions: usize,
    /// Orthonormal rotation (raw samples x rotated samples), row by row.
    q_z: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthSummary {
    delta2: f64,
    gamma: Vec<f64>,
    k_oracle: usize,
    lambda_oracle: Vec<f64>,
}

pub fn simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let config: SimulateConfig = read_json(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    if config.version != 1 {
        bail!(CoreError::InvalidConfig(format!(
            "unsupported simulate config version {}",
            config.version
        )));
    }
    let ds = run_simulation(&config.sim)?;
    fs::create_dir_all(&args.out)?;
    let out = &args.out;

    let gene_ids: Vec<String> = (0..ds.config.p).map(|g| format!("g{g}")).collect();
    let sample_ids: Vec<String> = (0..ds.n()).map(|i| format!("s{i}")).collect();
    let factor_ids = |k: usize| -> Vec<String> { (0..k).map(|r| format!("f{}", r + 1)).collect() };

    write_matrix_tsv(
        &out.join("Y.tsv"),
        &NamedMatrix::new(ds.y.clone(), gene_ids.clone(), sample_ids.clone())?,
    )?;
    write_matrix_tsv(
        &out.join("C.tsv"),
        &NamedMatrix::new(ds.c_true.clone(), sample_ids.clone(), factor_ids(ds.config.k))?,
    )?;
    write_matrix_tsv(
        &out.join("L.tsv"),
        &NamedMatrix::new(ds.l_true.clone(), gene_ids.clone(), factor_ids(ds.config.k))?,
    )?;
    write_matrix_tsv(
        &out.join("C_oracle.tsv"),
        &NamedMatrix::new(
            ds.c_oracle.clone(),
            sample_ids.clone(),
            factor_ids(ds.k_oracle),
        )?,
    )?;
    write_matrix_tsv(
        &out.join("L_oracle.tsv"),
        &NamedMatrix::new(ds.l_oracle.clone(), gene_ids.clone(), factor_ids(ds.k_oracle))?,
    )?;

    // One genotype row per SNP cluster plus the gene-to-SNP map.
    let mut cluster_rows: Vec<usize> = ds.eqtl_clusters.clone();
    cluster_rows.sort_unstable();
    cluster_rows.dedup();
    let individual_ids: Vec<String> = (0..ds.config.n_individuals)
        .map(|i| format!("i{i}"))
        .collect();
    let snp_ids: Vec<String> = cluster_rows.iter().map(|c| format!("snp{c}")).collect();
    let mut geno = DMatrix::zeros(cluster_rows.len(), ds.config.n_individuals);
    for (row, &cluster) in cluster_rows.iter().enumerate() {
        let gene = ds
            .eqtl_clusters
            .iter()
            .position(|&c| c == cluster)
            .expect("cluster has at least one gene");
        for i in 0..ds.config.n_individuals {
            geno[(row, i)] = ds.genotypes[(gene, i)];
        }
    }
    write_matrix_tsv(
        &out.join("genotypes.tsv"),
        &NamedMatrix::new(geno, snp_ids, individual_ids)?,
    )?;
    let mut map_text = String::from("gene\tsnp\n");
    for g in 0..ds.config.p {
        map_text.push_str(&format!("g{g}\tsnp{}\n", ds.eqtl_clusters[g]));
    }
    fs::write(out.join("map.tsv"), map_text)?;

    let mut s_text = String::from("gene\ts_true\n");
    for g in 0..ds.config.p {
        s_text.push_str(&format!("g{g}\t{}\n", falco_core::io::format_float(ds.s_true[g])));
    }
    fs::write(out.join("s_true.tsv"), s_text)?;
    let theta_ids: Vec<String> = (0..ds.basis.b()).map(|j| format!("theta{j}")).collect();
    let vg = DMatrix::from_fn(ds.config.p, ds.basis.b(), |g, j| ds.v_g_true[g].values()[j]);
    write_matrix_tsv(
        &out.join("vg_true.tsv"),
        &NamedMatrix::new(vg, gene_ids, theta_ids)?,
    )?;

    write_json(&out.join("basis.json"), &BasisSpec::from_basis(&ds.basis))?;
    let q_z = ds.rotation.q_z();
    let design = DesignSpec {
        version: 1,
        n_individuals: ds.config.n_individuals,
        n_conditions: ds.config.n_conditions,
        q_z: (0..q_z.nrows())
            .map(|i| (0..q_z.ncols()).map(|j| q_z[(i, j)]).collect())
            .collect(),
    };
    write_json(&out.join("design.json"), &design)?;
    write_json(
        &out.join("truth.json"),
        &TruthSummary {
            delta2: ds.delta2,
            gamma: ds.gamma.clone(),
            k_oracle: ds.k_oracle,
            lambda_oracle: ds.lambda_oracle.clone(),
        },
    )?;
    write_manifest(&out.join("manifest.json"), "simulate", &config)?;
    println!(
        "simulated {} genes x {} samples into {} (noise level {:.4}, {} factors above it)",
        ds.config.p,
        ds.n(),
        out.display(),
        ds.delta2,
        ds.k_oracle
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit / select-k
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FitParams {
    version: u32,
    k: Option<usize>,
    select_k: bool,
    no_final_fit: bool,
    alpha: f64,
    folds: usize,
    eta: f64,
    seed: Option<u64>,
    max_iterations: usize,
    rel_obj_tol: f64,
    grad_tol: f64,
    c_bound: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        let opts = RemlOptions::default();
        Self {
            version: 1,
            k: None,
            select_k: false,
            no_final_fit: false,
            alpha: 0.1,
            folds: 2,
            eta: 0.5,
            seed: None,
            max_iterations: opts.max_iterations,
            rel_obj_tol: opts.rel_obj_tol,
            grad_tol: opts.grad_tol,
            c_bound: opts.bounds.c,
        }
    }
}

impl FitParams {
    fn reml_options(&self) -> RemlOptions {
        RemlOptions {
            bounds: ThetaStarBounds { c: self.c_bound },
            max_iterations: self.max_iterations,
            rel_obj_tol: self.rel_obj_tol,
            grad_tol: self.grad_tol,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VbarRecord {
    theta: Vec<f64>,
    objective: f64,
    converged: bool,
    iterations: usize,
    kkt_residual: f64,
    degenerate: bool,
    on_boundary: bool,
}

impl VbarRecord {
    fn from_solution(sol: &RemlSolution) -> Self {
        Self {
            theta: sol.theta_hat.values().to_vec(),
            objective: sol.objective,
            converged: sol.converged,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            degenerate: sol.degenerate,
            on_boundary: sol.on_boundary,
        }
    }
}

#[derive(Debug, Serialize)]
struct TraceEntry {
    k: usize,
    lambda_hat: Vec<f64>,
    lambda_naive: Vec<f64>,
    vbar: Vec<f64>,
    identifiability_flagged: bool,
    tie_warning: bool,
}

#[derive(Debug, Serialize)]
struct SelectionRecord {
    k_hat: usize,
    k_max: usize,
    eta: f64,
    folds: usize,
    seed: u64,
    total: Vec<f64>,
    losses: Vec<Vec<f64>>,
}

fn load_fit_inputs(args: &FitArgs) -> anyhow::Result<(NamedMatrix, CovarianceBasis, FitParams)> {
    let named = read_matrix_tsv(&args.data)?;
    let spec: BasisSpec = read_json(&args.basis)?;
    let basis = spec.to_basis()?;
    if named.values.ncols() != basis.n() {
        bail!(CoreError::DimensionMismatch {
            context: "data columns vs basis dimension".into(),
            expected: basis.n(),
            found: named.values.ncols(),
        });
    }
    let mut params = match &args.config {
        Some(path) => {
            let p: FitParams = read_json(path)?;
            if p.version != 1 {
                bail!(CoreError::InvalidConfig(format!(
                    "unsupported fit config version {}",
                    p.version
                )));
            }
            p
        }
        None => FitParams::default(),
    };
    if args.k.is_some() {
        params.k = args.k;
    }
    if args.select_k {
        params.select_k = true;
    }
    if args.no_final_fit {
        params.no_final_fit = true;
    }
    if let Some(alpha) = args.alpha {
        params.alpha = alpha;
    }
    if let Some(folds) = args.folds {
        params.folds = folds;
    }
    if let Some(eta) = args.eta {
        params.eta = eta;
    }
    if args.seed.is_some() {
        params.seed = args.seed;
    }
    Ok((named, basis, params))
}

pub fn fit(args: &FitArgs, force_select_no_fit: bool) -> anyhow::Result<()> {
    let (named, basis, mut params) = load_fit_inputs(args)?;
    if force_select_no_fit {
        params.select_k = true;
        params.no_final_fit = true;
    }
    if params.select_k == params.k.is_some() {
        bail!(CoreError::InvalidConfig(
            "specify exactly one of --k or --select-k".into()
        ));
    }
    let opts = params.reml_options();
    fs::create_dir_all(&args.out)?;
    let out = &args.out;

    let chosen_k = if params.select_k {
        let seed = params.seed.ok_or_else(|| {
            CoreError::InvalidConfig("--seed is mandatory with --select-k".into())
        })?;
        let selection = cbcv_select(
            &named.values,
            &basis,
            params.folds,
            params.eta,
            seed,
            params.alpha,
            &opts,
        )?;
        write_json(
            &out.join("selection.json"),
            &SelectionRecord {
                k_hat: selection.k_hat,
                k_max: selection.k_max,
                eta: selection.eta,
                folds: selection.n_folds,
                seed: selection.seed,
                total: selection.total.clone(),
                losses: selection.losses.clone(),
            },
        )?;
        println!("selected K = {} (grid 0..={})", selection.k_hat, selection.k_max);
        selection.k_hat
    } else {
        params.k.unwrap()
    };

    if !params.no_final_fit {
        write_fit_outputs(out, &named, &basis, chosen_k, &params, &opts)?;
    }
    write_manifest(&out.join("manifest.json"), "fit", &params)?;
    Ok(())
}

fn write_fit_outputs(
    out: &Path,
    named: &NamedMatrix,
    basis: &CovarianceBasis,
    k: usize,
    params: &FitParams,
    opts: &RemlOptions,
) -> anyhow::Result<()> {
    let sample_ids: Vec<String> = named.col_ids.clone();
    let factor_ids: Vec<String> = (0..k).map(|r| format!("f{}", r + 1)).collect();
    let (fits, vbar_by_k): (Vec<FactorFit>, Vec<VbarRecord>) = if k == 0 {
        let sol = reml_full(&named.values, basis, opts)?;
        let record = VbarRecord::from_solution(&sol);
        write_json(&out.join("vbar.json"), &record)?;
        (Vec::new(), vec![record])
    } else {
        let trace = falco_fit(&named.values, basis, k, params.alpha, opts)?;
        let records: Vec<VbarRecord> = trace
            .fits
            .iter()
            .map(|f| VbarRecord {
                theta: f.vbar_hat.values().to_vec(),
                objective: f64::NAN,
                converged: true,
                iterations: 0,
                kkt_residual: f64::NAN,
                degenerate: false,
                on_boundary: false,
            })
            .collect();
        (trace.fits, records)
    };

    if k > 0 {
        let fit = &fits[k];
        write_matrix_tsv(
            &out.join("C_hat.tsv"),
            &NamedMatrix::new(fit.c_hat.clone(), sample_ids, factor_ids.clone())?,
        )?;
        write_matrix_tsv(
            &out.join("L_hat.tsv"),
            &NamedMatrix::new(fit.l_hat.clone(), named.row_ids.clone(), factor_ids.clone())?,
        )?;
        let lambda = DMatrix::from_fn(k, 2, |r, c| {
            if c == 0 {
                fit.lambda_hat[r]
            } else {
                fit.lambda_naive[r]
            }
        });
        write_matrix_tsv(
            &out.join("lambda.tsv"),
            &NamedMatrix::new(
                lambda,
                factor_ids,
                vec!["lambda_hat".into(), "lambda_naive".into()],
            )?,
        )?;
        write_json(
            &out.join("vbar.json"),
            &VbarRecord {
                theta: fit.vbar_hat.values().to_vec(),
                objective: f64::NAN,
                converged: true,
                iterations: 0,
                kkt_residual: f64::NAN,
                degenerate: false,
                on_boundary: false,
            },
        )?;
        let trace: Vec<TraceEntry> = fits
            .iter()
            .map(|f| TraceEntry {
                k: f.k,
                lambda_hat: f.lambda_hat.clone(),
                lambda_naive: f.lambda_naive.clone(),
                vbar: f.vbar_hat.values().to_vec(),
                identifiability_flagged: f.identifiability_flagged,
                tie_warning: f.tie_warning,
            })
            .collect();
        write_json(&out.join("trace.json"), &trace)?;
    } else {
        // Rank-zero fit: no factors, only the variance multipliers.
        write_matrix_tsv(
            &out.join("C_hat.tsv"),
            &NamedMatrix::new(DMatrix::zeros(basis.n(), 0), sample_ids, Vec::new())?,
        )?;
        let _ = vbar_by_k;
    }
    println!("fit at K = {k} written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// denoise
// ---------------------------------------------------------------------------

pub fn denoise(args: &DenoiseArgs) -> anyhow::Result<()> {
    let named = read_matrix_tsv(&args.data)?;
    let spec: BasisSpec = read_json(&args.basis)?;
    let basis = spec.to_basis()?;
    let c_hat_named = read_matrix_tsv(&args.fit.join("C_hat.tsv"))?;
    let c_hat = c_hat_named.values.clone();
    if c_hat.nrows() != basis.n() || named.values.ncols() != basis.n() {
        bail!(CoreError::DimensionMismatch {
            context: "denoise inputs vs basis dimension".into(),
            expected: basis.n(),
            found: c_hat.nrows().min(named.values.ncols()),
        });
    }
    let warm: Option<VarianceParams> = read_json::<VbarRecord>(&args.fit.join("vbar.json"))
        .ok()
        .map(|rec| VarianceParams::new(rec.theta));
    let genotypes = read_matrix_tsv(&args.genotypes)?;
    let design: Option<DesignSpec> = match &args.design {
        Some(path) => Some(read_json(path)?),
        None => None,
    };

    // Parse the gene-to-SNP map.
    let map_text = fs::read_to_string(&args.map)?;
    let mut lines = map_text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "gene\tsnp" {
        bail!(CoreError::Parse {
            path: args.map.display().to_string(),
            reason: "expected header 'gene\\tsnp'".into(),
        });
    }
    let pairs: Vec<(String, String)> = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut parts = l.split('\t');
            (
                parts.next().unwrap_or_default().to_string(),
                parts.next().unwrap_or_default().to_string(),
            )
        })
        .collect();

    let gene_index: HashMap<&str, usize> = named
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let snp_index: HashMap<&str, usize> = genotypes
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut unmatched: Vec<String> = Vec::new();
    for (gene, snp) in &pairs {
        if !gene_index.contains_key(gene.as_str()) {
            unmatched.push(format!("gene:{gene}"));
        }
        if !snp_index.contains_key(snp.as_str()) {
            unmatched.push(format!("snp:{snp}"));
        }
    }
    if !unmatched.is_empty() {
        unmatched.truncate(10);
        bail!(CoreError::UnmatchedIds {
            context: "gene-to-SNP map".into(),
            ids: unmatched,
        });
    }

    let header = "gene\ts_hat\twald\tp_value\tq_value\tflags\n";
    if pairs.is_empty() {
        fs::write(&args.out, header)?;
        println!("empty map: wrote header-only results to {}", args.out.display());
        return Ok(());
    }

    // Expand genotype rows into rotated per-sample covariates.
    let q_z: Option<DMatrix<f64>> = design.as_ref().map(|d| {
        DMatrix::from_fn(d.q_z.len(), d.q_z[0].len(), |i, j| d.q_z[i][j])
    });
    let n = basis.n();
    let mut sub_y = DMatrix::zeros(pairs.len(), n);
    let mut covariates = Vec::with_capacity(pairs.len());
    let mut ids = Vec::with_capacity(pairs.len());
    for (row, (gene, snp)) in pairs.iter().enumerate() {
        let g = gene_index[gene.as_str()];
        let s = snp_index[snp.as_str()];
        sub_y.row_mut(row).copy_from(&named.values.row(g));
        let x = match (&design, &q_z) {
            (Some(d), Some(q)) => {
                if genotypes.values.ncols() != d.n_individuals {
                    bail!(CoreError::DimensionMismatch {
                        context: "genotype columns vs design individuals".into(),
                        expected: d.n_individuals,
                        found: genotypes.values.ncols(),
                    });
                }
                let raw = DVector::from_fn(d.n_individuals * d.n_conditions, |i, _| {
                    genotypes.values[(s, i / d.n_conditions)]
                });
                let rotated = q.transpose() * raw;
                DMatrix::from_column_slice(rotated.len(), 1, rotated.as_slice())
            }
            _ => {
                if genotypes.values.ncols() != n {
                    bail!(CoreError::DimensionMismatch {
                        context: "genotype columns vs sample count (no design given)".into(),
                        expected: n,
                        found: genotypes.values.ncols(),
                    });
                }
                DMatrix::from_fn(n, 1, |i, _| genotypes.values[(s, i)])
            }
        };
        covariates.push(x);
        ids.push(gene.clone());
    }

    let opts = RemlOptions::default();
    let tests = denoise_genes(&sub_y, &c_hat, &covariates, &ids, &basis, warm.as_ref(), &opts)?;
    let p_values: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let q_values = bh_adjust(&p_values);
    if !(0.0 < args.q && args.q < 1.0) {
        bail!(CoreError::InvalidConfig(format!("q = {} not in (0, 1)", args.q)));
    }

    let mut text = String::from(header);
    for (test, q_val) in tests.iter().zip(&q_values) {
        let mut flags: Vec<&str> = Vec::new();
        if test.reml_degenerate {
            flags.push("degenerate");
        }
        if !test.reml_converged {
            flags.push("no_convergence");
        }
        if *q_val <= args.q {
            flags.push("significant");
        }
        let flag_text = if flags.is_empty() { "ok".to_string() } else { flags.join(";") };
        let s_text = test
            .s_hat
            .iter()
            .map(|v| falco_core::io::format_float(*v))
            .collect::<Vec<_>>()
            .join(",");
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            test.gene,
            s_text,
            falco_core::io::format_float(test.wald),
            falco_core::io::format_float(test.p_value),
            falco_core::io::format_float(*q_val),
            flag_text,
        ));
    }
    fs::write(&args.out, text)?;
    let rejected = q_values.iter().filter(|&&q| q <= args.q).count();
    println!(
        "tested {} genes, {} significant at q = {} ({})",
        tests.len(),
        rejected,
        args.q,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

pub fn metrics(args: &MetricsArgs) -> anyhow::Result<()> {
    let c_hat = read_matrix_tsv(&args.fit.join("C_hat.tsv"))?;
    let truth_c = read_matrix_tsv(&args.truth.join("C_oracle.tsv"))?;
    let truth: TruthSummary = read_json(&args.truth.join("truth.json"))?;
    let lambda = read_matrix_tsv(&args.fit.join("lambda.tsv")).ok();

    let k_fit = c_hat.values.ncols();
    let k_truth = truth_c.values.ncols();
    let k = k_fit.min(k_truth);
    if k_fit != k_truth {
        eprintln!(
            "warning: fit rank {k_fit} differs from oracle rank {k_truth}; scoring the first {k} factors"
        );
    }
    if k == 0 {
        bail!(CoreError::InvalidConfig(
            "no overlapping factors to score".into()
        ));
    }

    let pca = if args.pca_baseline {
        let data_path = args.data.as_ref().ok_or_else(|| {
            CoreError::InvalidConfig("--pca-baseline needs --data".into())
        })?;
        let y = read_matrix_tsv(data_path)?;
        let (c_pca, _) = pca_fit(&y.values, k)?;
        Some(c_pca)
    } else {
        None
    };

    let mut text = String::from("factor\tfactor_correlation\tlambda_hat\tlambda_oracle\tlambda_ratio");
    if pca.is_some() {
        text.push_str("\tpca_correlation");
    }
    text.push('\n');
    for r in 0..k {
        let corr = factor_correlation(
            &c_hat.values.column(r).into_owned(),
            &truth_c.values.column(r).into_owned(),
        )?;
        let (l_hat, l_oracle, ratio) = match (&lambda, truth.lambda_oracle.get(r)) {
            (Some(l), Some(&lo)) if r < l.values.nrows() => {
                let lh = l.values[(r, 0)];
                (lh, lo, lh / lo)
            }
            _ => (f64::NAN, f64::NAN, f64::NAN),
        };
        text.push_str(&format!(
            "f{}\t{}\t{}\t{}\t{}",
            r + 1,
            falco_core::io::format_float(corr),
            falco_core::io::format_float(l_hat),
            falco_core::io::format_float(l_oracle),
            falco_core::io::format_float(ratio),
        ));
        if let Some(c_pca) = &pca {
            let pc = factor_correlation(
                &c_pca.column(r).into_owned(),
                &truth_c.values.column(r).into_owned(),
            )?;
            text.push_str(&format!("\t{}", falco_core::io::format_float(pc)));
        }
        text.push('\n');
    }
    let sub = subspace_correlation(
        &c_hat.values.columns(0, k).into_owned(),
        &truth_c.values.columns(0, k).into_owned(),
    )?;
    text.push_str(&format!(
        "subspace\t{}\tnan\tnan\tnan",
        falco_core::io::format_float(sub)
    ));
    if pca.is_some() {
        text.push_str("\tnan");
    }
    text.push('\n');
    fs::write(&args.out, text)?;
    println!(
        "scored {k} factors (subspace correlation {:.4}) into {}",
        sub,
        args.out.display()
    );
    Ok(())
}
