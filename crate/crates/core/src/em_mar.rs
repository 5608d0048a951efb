//! Maximum-likelihood EM for a Gaussian mixture on a masked dataset under
//! MAR, integrating missing coordinates analytically, plus BIC scoring of
//! the clustering, regression, and independence blocks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CovForm, GammaForm, GmmParams, MaskedDataset, OmegaForm};
use crate::error::{Error, Result};
use crate::gauss::{self, BlockIndex};
use crate::rng::derive_seed;

/// Missing fraction below which block fits take the complete-case shortcut.
const COMPLETE_CASE_CUTOFF: f64 = 0.05;
/// Responsibility mass below `EMPTY_MASS_FRAC * N` marks a dead component.
const EMPTY_MASS_FRAC: f64 = 1e-10;
/// Component covariance eigenvalues are clamped at this fraction of the
/// pooled data variance, keeping the likelihood bounded (no component may
/// collapse onto a handful of points).
const EIG_FLOOR_FRAC: f64 = 1e-6;

/// Initialization strategy for the EM starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    /// Lloyd-style assignment (10 iterations) on mean-imputed rows, used
    /// only to seed the first E-step.
    KmeansLike,
    /// Jittered global moments; the first E-step randomizes membership.
    RandomResp,
    /// Random data rows as centers with the pooled covariance, no Lloyd
    /// refinement.
    RawRows,
}

/// EM driver settings.
#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub init: InitMethod,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            n_starts: 5,
            seed: 0,
            init: InitMethod::KmeansLike,
        }
    }
}

impl EmConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Outcome of one EM fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: GmmParams,
    /// Observed-data log-likelihood after each iteration (index 0 is the
    /// starting point).
    pub loglik_trace: Vec<f64>,
    /// N x K posterior membership matrix.
    pub responsibilities: DMatrix<f64>,
    pub converged: bool,
    pub n_iter: usize,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("nonempty trace")
    }

    /// Most probable component per row.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.responsibilities.nrows())
            .map(|n| {
                let row = self.responsibilities.row(n);
                (0..row.ncols())
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap()
            })
            .collect()
    }
}

/// Rows grouped by identical missingness pattern so per-pattern Cholesky
/// factors are shared across the E- and M-steps.
pub(crate) struct PatternGroups {
    /// (block split, rows with that pattern); fully missing rows land in a
    /// group without an observed block.
    groups: Vec<(Option<BlockIndex>, Vec<usize>)>,
}

impl PatternGroups {
    pub(crate) fn new(data: &MaskedDataset) -> Self {
        let mut by_pattern: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
        for n in 0..data.n_rows() {
            let key: Vec<u8> = (0..data.n_cols())
                .map(|d| data.is_missing(n, d) as u8)
                .collect();
            by_pattern.entry(key).or_default().push(n);
        }
        let d = data.n_cols();
        let groups = by_pattern
            .into_iter()
            .map(|(key, rows)| {
                let observed: Vec<usize> = (0..d).filter(|&j| key[j] == 0).collect();
                let idx = if observed.is_empty() {
                    None
                } else {
                    Some(BlockIndex::from_observed(observed, d).expect("valid block"))
                };
                (idx, rows)
            })
            .collect();
        Self { groups }
    }
}

fn observed_vector(data: &MaskedDataset, n: usize, obs: &[usize]) -> DVector<f64> {
    DVector::from_fn(obs.len(), |i, _| data.value(n, obs[i]))
}

/// Observed-data log-likelihood of the mixture: each row contributes the
/// marginal density of its observed block. Fully missing rows contribute 0.
pub fn observed_loglik(data: &MaskedDataset, params: &GmmParams) -> Result<f64> {
    let groups = PatternGroups::new(data);
    Ok(e_step_grouped(data, params, &groups, None)?.1)
}

fn check_dims(data: &MaskedDataset, params: &GmmParams) -> Result<()> {
    if params.dim() != data.n_cols() {
        return Err(Error::DimensionMismatch(format!(
            "params dimension {} vs data {}",
            params.dim(),
            data.n_cols()
        )));
    }
    Ok(())
}

/// Posterior membership probabilities; each row sums to 1.
pub fn e_step(data: &MaskedDataset, params: &GmmParams) -> Result<DMatrix<f64>> {
    let groups = PatternGroups::new(data);
    Ok(e_step_grouped(data, params, &groups, None)?.0)
}

/// E-step returning (responsibilities, observed log-likelihood).
///
/// `extra_row_logfactors`, when given, adds a per-(row, component) log term
/// to the component weights; the class-dependent mask mechanism plugs in
/// here.
pub(crate) fn e_step_grouped(
    data: &MaskedDataset,
    params: &GmmParams,
    groups: &PatternGroups,
    extra_row_logfactors: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, f64)> {
    check_dims(data, params)?;
    let (n_rows, k) = (data.n_rows(), params.n_components());
    let ln_pi: Vec<f64> = params.pi.iter().map(|p| p.ln()).collect();
    let mut resp = DMatrix::zeros(n_rows, k);
    let mut loglik = 0.0;
    let mut terms = vec![0.0; k];
    for (idx, rows) in &groups.groups {
        let factors: Option<Vec<_>> = match idx {
            Some(idx) => {
                let mut f = Vec::with_capacity(k);
                for comp in 0..k {
                    let (mu_o, sig_oo) =
                        gauss::marginal_block(&params.mu[comp], &params.sigma[comp], idx);
                    let (chol, _) = gauss::spd_cholesky(&sig_oo)?;
                    f.push((mu_o, chol));
                }
                Some(f)
            }
            None => None,
        };
        for &n in rows {
            match (&factors, idx) {
                (Some(factors), Some(idx)) => {
                    let y_o = observed_vector(data, n, &idx.observed);
                    for comp in 0..k {
                        terms[comp] = ln_pi[comp]
                            + gauss::log_mvn_pdf_prefactored(
                                &y_o,
                                &factors[comp].0,
                                &factors[comp].1,
                            );
                    }
                }
                _ => {
                    terms[..k].copy_from_slice(&ln_pi);
                }
            }
            if let Some(extra) = extra_row_logfactors {
                for comp in 0..k {
                    terms[comp] += extra[(n, comp)];
                }
            }
            let lse = gauss::log_sum_exp(&terms)?;
            loglik += lse;
            for comp in 0..k {
                resp[(n, comp)] = (terms[comp] - lse).exp();
            }
        }
    }
    Ok((resp, loglik))
}

/// M-step with missing-data sufficient statistics: missing coordinates are
/// replaced by their conditional means under `params_prev` and the scatter
/// is augmented by the conditional covariance, then projected to form `m`.
pub fn m_step(
    data: &MaskedDataset,
    resp: &DMatrix<f64>,
    params_prev: &GmmParams,
    m: CovForm,
) -> Result<GmmParams> {
    let groups = PatternGroups::new(data);
    let eig_floor = EIG_FLOOR_FRAC * pooled_variance_scale(data);
    m_step_grouped(data, resp, params_prev, m, &groups, eig_floor)
}

pub(crate) fn m_step_grouped(
    data: &MaskedDataset,
    resp: &DMatrix<f64>,
    params_prev: &GmmParams,
    m: CovForm,
    groups: &PatternGroups,
    eig_floor: f64,
) -> Result<GmmParams> {
    check_dims(data, params_prev)?;
    let (n_rows, d) = (data.n_rows(), data.n_cols());
    let k = params_prev.n_components();
    if resp.nrows() != n_rows || resp.ncols() != k {
        return Err(Error::DimensionMismatch("responsibility matrix".into()));
    }

    let mut pi = Vec::with_capacity(k);
    let mut mu_out = Vec::with_capacity(k);
    let mut sigma_out = Vec::with_capacity(k);

    for comp in 0..k {
        let weight: f64 = (0..n_rows).map(|n| resp[(n, comp)]).sum();
        if weight < EMPTY_MASS_FRAC * n_rows as f64 {
            return Err(Error::EmptyComponent(comp));
        }

        // completed rows (observed values + conditional means); the
        // conditional covariance is accumulated per pattern
        let mut xhat = DMatrix::zeros(n_rows, d);
        let mut cond_cov_sum = DMatrix::zeros(d, d);
        for (idx, rows) in &groups.groups {
            match idx {
                Some(idx) if idx.missing.is_empty() => {
                    for &n in rows {
                        for j in 0..d {
                            xhat[(n, j)] = data.value(n, j);
                        }
                    }
                }
                Some(idx) => {
                    let (mu_o, sig_oo) =
                        gauss::marginal_block(&params_prev.mu[comp], &params_prev.sigma[comp], idx);
                    let (chol_oo, _) = gauss::spd_cholesky(&sig_oo)?;
                    let (o, mm) = (&idx.observed, &idx.missing);
                    let sigma_mo = DMatrix::from_fn(mm.len(), o.len(), |i, j| {
                        params_prev.sigma[comp][(mm[i], o[j])]
                    });
                    let sigma_mm = DMatrix::from_fn(mm.len(), mm.len(), |i, j| {
                        params_prev.sigma[comp][(mm[i], mm[j])]
                    });
                    // gain = Sigma_mo Sigma_oo^{-1}, shared across the group
                    let gain = chol_oo.solve(&sigma_mo.transpose()).transpose();
                    let cond_cov = &sigma_mm - &gain * sigma_mo.transpose();
                    let mu_m = DVector::from_fn(mm.len(), |i, _| params_prev.mu[comp][mm[i]]);
                    let mut group_weight = 0.0;
                    for &n in rows {
                        let y_o = observed_vector(data, n, o);
                        let cond_mean = &mu_m + &gain * (&y_o - &mu_o);
                        for (i, &j) in o.iter().enumerate() {
                            xhat[(n, j)] = y_o[i];
                        }
                        for (i, &j) in mm.iter().enumerate() {
                            xhat[(n, j)] = cond_mean[i];
                        }
                        group_weight += resp[(n, comp)];
                    }
                    for (a, &ja) in mm.iter().enumerate() {
                        for (b, &jb) in mm.iter().enumerate() {
                            cond_cov_sum[(ja, jb)] += group_weight * cond_cov[(a, b)];
                        }
                    }
                }
                None => {
                    // fully missing row: conditional stats are the prior moments
                    let mut group_weight = 0.0;
                    for &n in rows {
                        for j in 0..d {
                            xhat[(n, j)] = params_prev.mu[comp][j];
                        }
                        group_weight += resp[(n, comp)];
                    }
                    cond_cov_sum += &params_prev.sigma[comp] * group_weight;
                }
            }
        }

        let mut mean = DVector::zeros(d);
        for n in 0..n_rows {
            let t = resp[(n, comp)];
            for j in 0..d {
                mean[j] += t * xhat[(n, j)];
            }
        }
        mean /= weight;

        let mut scatter = DMatrix::zeros(d, d);
        for n in 0..n_rows {
            let t = resp[(n, comp)];
            if t == 0.0 {
                continue;
            }
            for a in 0..d {
                let da = xhat[(n, a)] - mean[a];
                for b in a..d {
                    scatter[(a, b)] += t * da * (xhat[(n, b)] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                scatter[(a, b)] = scatter[(b, a)];
            }
        }
        scatter += &cond_cov_sum;
        scatter /= weight;

        if m == CovForm::DiagFree {
            let diag = scatter.diagonal();
            scatter = DMatrix::from_diagonal(&diag);
        }
        let clamped = clamp_eigenvalues(&scatter, eig_floor);
        let (floored, engaged) = gauss::floor_spd(&clamped);
        if engaged {
            log::debug!("covariance floor engaged for component {comp}");
        }

        pi.push(weight / n_rows as f64);
        mu_out.push(mean);
        sigma_out.push(floored);
    }

    GmmParams::new(pi, mu_out, sigma_out)
}

/// One distance-weighted seeding plus 10 Lloyd iterations; returns the
/// centers, assignments, and within-cluster sum of squares.
fn lloyd_run(
    imputed: &DMatrix<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<DVector<f64>>, Vec<usize>, f64) {
    let n = imputed.nrows();
    let mut centers: Vec<DVector<f64>> = vec![imputed.row(rng.random_range(0..n)).transpose()];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| (imputed.row(i).transpose() - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let center = imputed.row(next).transpose();
        for i in 0..n {
            let dist = (imputed.row(i).transpose() - &center).norm_squared();
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
        centers.push(center);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, a) in assign.iter_mut().enumerate() {
            let row = imputed.row(i).transpose();
            *a = (0..k)
                .min_by(|&x, &y| {
                    let dx = (&row - &centers[x]).norm_squared();
                    let dy = (&row - &centers[y]).norm_squared();
                    dx.partial_cmp(&dy).unwrap()
                })
                .unwrap();
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                *center = imputed.row(rng.random_range(0..n)).transpose();
                continue;
            }
            let mut mean = DVector::zeros(imputed.ncols());
            for &i in &members {
                mean += imputed.row(i).transpose();
            }
            *center = mean / members.len() as f64;
        }
    }
    let wss: f64 = (0..n)
        .map(|i| (imputed.row(i).transpose() - &centers[assign[i]]).norm_squared())
        .sum();
    (centers, assign, wss)
}

/// Seeded initialization, exposed for diagnostics and the Python layer.
pub fn init_params_public(
    data: &MaskedDataset,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GmmParams> {
    init_params(data, k, rng, InitMethod::KmeansLike)
}

/// M-step eigenvalue floor for a dataset.
pub(crate) fn eig_floor_for(data: &MaskedDataset) -> f64 {
    EIG_FLOOR_FRAC * pooled_variance_scale(data)
}

/// Pooled observed variance averaged over coordinates; sets the eigenvalue
/// floor scale of the M-step.
fn pooled_variance_scale(data: &MaskedDataset) -> f64 {
    let d = data.n_cols();
    let means = data.observed_col_means();
    let mut total = 0.0;
    let mut cells = 0usize;
    for j in 0..d {
        for i in 0..data.n_rows() {
            if !data.is_missing(i, j) {
                let diff = data.value(i, j) - means[j];
                total += diff * diff;
                cells += 1;
            }
        }
    }
    if cells == 0 {
        1.0
    } else {
        (total / cells as f64).max(1e-300)
    }
}

/// Projection onto the compact covariance family: eigenvalues below the
/// floor are raised to it.
fn clamp_eigenvalues(scatter: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = scatter.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&e| e >= floor) {
        return scatter.clone();
    }
    let clamped = DVector::from_fn(eig.eigenvalues.len(), |i, _| eig.eigenvalues[i].max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

fn global_moments(imputed: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = imputed.nrows() as f64;
    let mean = imputed.row_mean().transpose();
    let d = imputed.ncols();
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..imputed.nrows() {
        let diff = imputed.row(i).transpose() - &mean;
        cov += &diff * diff.transpose();
    }
    cov /= n;
    let (floored, _) = gauss::floor_spd(&cov);
    (mean, floored)
}

pub(crate) fn init_params(
    data: &MaskedDataset,
    k: usize,
    rng: &mut ChaCha8Rng,
    method: InitMethod,
) -> Result<GmmParams> {
    let imputed = data.mean_imputed();
    let (gmean, gcov) = global_moments(&imputed);
    let n = imputed.nrows();
    match method {
        InitMethod::KmeansLike => {
            // one distance-weighted seeding refined by 10 Lloyd
            // iterations; diversity across starts comes from the seeding,
            // basin choice from the short-run likelihood race in `fit`
            let (centers, assign, _) = lloyd_run(&imputed, k, rng);
            let counts: Vec<usize> = (0..k)
                .map(|c| assign.iter().filter(|&&a| a == c).count())
                .collect();
            let total: f64 = counts.iter().map(|&c| c as f64 + 1.0).sum();
            let pi = counts.iter().map(|&c| (c as f64 + 1.0) / total).collect();
            GmmParams::new(pi, centers, vec![gcov.clone(); k])
        }
        InitMethod::RandomResp => {
            let sds: Vec<f64> = (0..imputed.ncols())
                .map(|j| gcov[(j, j)].sqrt().max(1e-6))
                .collect();
            let mu = (0..k)
                .map(|_| {
                    DVector::from_fn(imputed.ncols(), |j, _| {
                        gmean[j] + sds[j] * (rng.random::<f64>() * 2.0 - 1.0)
                    })
                })
                .collect();
            GmmParams::new(vec![1.0 / k as f64; k], mu, vec![gcov.clone(); k])
        }
        InitMethod::RawRows => {
            let mu = (0..k)
                .map(|_| imputed.row(rng.random_range(0..n)).transpose())
                .collect();
            GmmParams::new(vec![1.0 / k as f64; k], mu, vec![gcov.clone(); k])
        }
    }
}

/// Iteration budget of one exploratory short run.
const SHORT_RUN_ITERS: usize = 40;
/// Short runs per configured start.
const SHORT_RUNS_PER_START: usize = 4;
/// Relative likelihood gap to the leading short run within which a run is
/// still continued to convergence.
const SHORT_RACE_GAP: f64 = 3e-3;
/// Bounds on how many short runs are continued.
const MIN_CONTINUED: usize = 2;
const MAX_CONTINUED: usize = 5;

/// Best-of-starts EM fit under MAR.
///
/// Each configured start spawns several short exploratory runs from
/// diverse seedings; the best short run by likelihood is continued to
/// convergence. Mixture basins separate within a few iterations, so the
/// race finds the dominant one far more reliably than the same budget
/// spent on full runs.
pub fn fit(data: &MaskedDataset, k: usize, m: CovForm, cfg: &EmConfig) -> Result<FitResult> {
    if k == 0 {
        return Err(Error::ConfigParse("K must be at least 1".into()));
    }
    let groups = PatternGroups::new(data);
    let eig_floor = EIG_FLOOR_FRAC * pooled_variance_scale(data);
    if k == 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
        let init = init_params(data, k, &mut rng, cfg.init)?;
        return run_single(data, init, m, cfg, &groups, eig_floor, cfg.max_iter, Vec::new());
    }
    let n_short = SHORT_RUNS_PER_START * cfg.n_starts.max(1);
    let short_cfg = EmConfig {
        max_iter: SHORT_RUN_ITERS,
        ..*cfg
    };
    let mut short_runs: Vec<FitResult> = Vec::new();
    let mut degenerate = 0usize;
    for start in 0..n_short {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, start as u64));
        // alternate Lloyd-refined and raw-row seedings: Lloyd sharpens well
        // separated structure, raw rows keep basin diversity where the
        // within-cluster objective prefers a wrong configuration
        let style = if start % 2 == 0 {
            cfg.init
        } else {
            InitMethod::RawRows
        };
        let init = match init_params(data, k, &mut rng, style) {
            Ok(p) => p,
            Err(_) => {
                degenerate += 1;
                continue;
            }
        };
        match run_single(
            data,
            init,
            m,
            &short_cfg,
            &groups,
            eig_floor,
            SHORT_RUN_ITERS,
            Vec::new(),
        ) {
            Ok(fit) => short_runs.push(fit),
            Err(Error::EmptyComponent(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    short_runs.sort_by(|a, b| b.final_loglik().partial_cmp(&a.final_loglik()).unwrap());

    // continue every short run within the race gap of the leader (bounded)
    let cutoff = short_runs
        .first()
        .map(|f| f.final_loglik() - SHORT_RACE_GAP * f.final_loglik().abs().max(1.0))
        .unwrap_or(f64::NEG_INFINITY);
    let n_continue = short_runs
        .iter()
        .take(MAX_CONTINUED)
        .filter(|f| f.final_loglik() >= cutoff)
        .count()
        .max(MIN_CONTINUED.min(short_runs.len()));
    let mut best: Option<FitResult> = None;
    for short in short_runs.into_iter().take(n_continue) {
        if short.converged {
            if best
                .as_ref()
                .map_or(true, |b| short.final_loglik() > b.final_loglik())
            {
                best = Some(short);
            }
            continue;
        }
        let mut trace = short.loglik_trace.clone();
        trace.pop(); // the continuation recomputes the same starting value
        match run_single(
            data,
            short.params,
            m,
            cfg,
            &groups,
            eig_floor,
            cfg.max_iter.saturating_sub(SHORT_RUN_ITERS).max(1),
            trace,
        ) {
            Ok(fit) => {
                if best
                    .as_ref()
                    .map_or(true, |b| fit.final_loglik() > b.final_loglik())
                {
                    best = Some(fit);
                }
            }
            Err(Error::EmptyComponent(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    best.ok_or(Error::AllStartsDegenerate(degenerate))
}

#[allow(clippy::too_many_arguments)]
fn run_single(
    data: &MaskedDataset,
    init: GmmParams,
    m: CovForm,
    cfg: &EmConfig,
    groups: &PatternGroups,
    eig_floor: f64,
    iter_budget: usize,
    prior_trace: Vec<f64>,
) -> Result<FitResult> {
    let mut params = init;
    let (mut resp, mut loglik) = e_step_grouped(data, &params, groups, None)?;
    let mut trace = prior_trace;
    trace.push(loglik);
    let mut converged = false;
    for _ in 0..iter_budget {
        params = m_step_grouped(data, &resp, &params, m, groups, eig_floor)?;
        let (new_resp, new_loglik) = e_step_grouped(data, &params, groups, None)?;
        resp = new_resp;
        let rel = (new_loglik - loglik).abs() / loglik.abs().max(1.0);
        loglik = new_loglik;
        trace.push(loglik);
        if rel < cfg.tol {
            converged = true;
            break;
        }
    }
    let n_iter = trace.len() - 1;
    Ok(FitResult {
        params,
        loglik_trace: trace,
        responsibilities: resp,
        converged,
        n_iter,
    })
}

/// Free-parameter count of the clustering block.
pub fn clust_param_count(k: usize, d: usize, m: CovForm) -> usize {
    (k - 1) + k * d + k * m.df(d)
}

/// BIC of a K-component mixture on the given block:
/// `2 * max loglik - nu * ln N`.
pub fn bic_clust(data_s: &MaskedDataset, k: usize, m: CovForm, cfg: &EmConfig) -> Result<f64> {
    Ok(bic_clust_with_fit(data_s, k, m, cfg)?.0)
}

pub fn bic_clust_with_fit(
    data_s: &MaskedDataset,
    k: usize,
    m: CovForm,
    cfg: &EmConfig,
) -> Result<(f64, FitResult)> {
    let fit = fit(data_s, k, m, cfg)?;
    let nu = clust_param_count(k, data_s.n_cols(), m) as f64;
    let bic = 2.0 * fit.final_loglik() - nu * (data_s.n_rows() as f64).ln();
    Ok((bic, fit))
}

/// Gaussian linear-regression fit of a U block on an R block.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub intercept: DVector<f64>,
    pub coefficients: DMatrix<f64>,
    pub residual_cov: DMatrix<f64>,
    pub loglik: f64,
    pub n_used: usize,
}

pub(crate) fn project_omega(cov: &DMatrix<f64>, r: OmegaForm) -> DMatrix<f64> {
    let d = cov.nrows();
    match r {
        OmegaForm::LC => cov.clone(),
        OmegaForm::LB => DMatrix::from_diagonal(&cov.diagonal()),
        OmegaForm::LI => DMatrix::identity(d, d) * (cov.trace() / d as f64),
    }
}

fn gaussian_loglik_complete(
    y: &DMatrix<f64>,
    mean: &DMatrix<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let (n, d) = (y.nrows(), y.ncols());
    let (chol, _) = gauss::spd_cholesky(cov)?;
    let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut quad_sum = 0.0;
    for i in 0..n {
        let diff = (y.row(i) - mean.row(i)).transpose();
        let z = chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("nonsingular L");
        quad_sum += z.norm_squared();
    }
    Ok(-0.5 * (n as f64 * d as f64 * gauss::LN_2PI + n as f64 * ln_det + quad_sum))
}

/// Missing fraction among the given columns.
fn missing_fraction(data: &MaskedDataset, cols: &[usize]) -> f64 {
    let mut miss = 0usize;
    for &c in cols {
        for n in 0..data.n_rows() {
            if data.is_missing(n, c) {
                miss += 1;
            }
        }
    }
    miss as f64 / (cols.len() * data.n_rows()).max(1) as f64
}

/// Fits `y^U = a + y^R beta + eps`, `eps ~ N(0, Omega_r)`.
///
/// Rows complete in the needed columns are used directly when the block
/// missingness is below 5%; otherwise a single-Gaussian EM on the joint
/// (R, U) block supplies the moments and the conditional likelihood is
/// evaluated on every observed cell.
pub fn fit_regression(
    data: &MaskedDataset,
    u_cols: &[usize],
    r_cols: &[usize],
    r_form: OmegaForm,
    cfg: &EmConfig,
) -> Result<RegressionFit> {
    if u_cols.is_empty() {
        return Err(Error::EmptyData);
    }
    let needed: Vec<usize> = r_cols.iter().chain(u_cols).copied().collect();
    let frac = missing_fraction(data, &needed);
    if frac < COMPLETE_CASE_CUTOFF {
        fit_regression_complete_case(data, u_cols, r_cols, r_form)
    } else {
        fit_regression_em(data, u_cols, r_cols, r_form, cfg)
    }
}

fn fit_regression_complete_case(
    data: &MaskedDataset,
    u_cols: &[usize],
    r_cols: &[usize],
    r_form: OmegaForm,
) -> Result<RegressionFit> {
    let rows: Vec<usize> = (0..data.n_rows())
        .filter(|&n| r_cols.iter().chain(u_cols).all(|&c| !data.is_missing(n, c)))
        .collect();
    let n = rows.len();
    if n <= r_cols.len() + 1 {
        return Err(Error::RankDeficient);
    }
    let p = r_cols.len() + 1;
    let q = u_cols.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DMatrix::zeros(n, q);
    for (i, &row) in rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, &c) in r_cols.iter().enumerate() {
            x[(i, j + 1)] = data.value(row, c);
        }
        for (j, &c) in u_cols.iter().enumerate() {
            y[(i, j)] = data.value(row, c);
        }
    }
    let xtx = x.transpose() * &x;
    let chol = nalgebra::Cholesky::new(xtx).ok_or(Error::RankDeficient)?;
    let coef = chol.solve(&(x.transpose() * &y)); // p x q, row 0 = intercept
    let fitted = &x * &coef;
    let resid = &y - &fitted;
    let omega_full = (resid.transpose() * &resid) / n as f64;
    let (omega, _) = gauss::floor_spd(&project_omega(&omega_full, r_form));
    let loglik = gaussian_loglik_complete(&y, &fitted, &omega)?;
    Ok(RegressionFit {
        intercept: coef.row(0).transpose(),
        coefficients: coef.rows(1, p - 1).into_owned(),
        residual_cov: omega,
        loglik,
        n_used: n,
    })
}

fn fit_regression_em(
    data: &MaskedDataset,
    u_cols: &[usize],
    r_cols: &[usize],
    r_form: OmegaForm,
    cfg: &EmConfig,
) -> Result<RegressionFit> {
    let joint_cols: Vec<usize> = r_cols.iter().chain(u_cols).copied().collect();
    let joint = data.restrict_columns(&joint_cols)?;
    let joint_fit = fit(&joint, 1, CovForm::FullFree, cfg)?;
    let mu = &joint_fit.params.mu[0];
    let sigma = &joint_fit.params.sigma[0];
    let (nr, nu) = (r_cols.len(), u_cols.len());

    let mu_r = mu.rows(0, nr).into_owned();
    let mu_u = mu.rows(nr, nu).into_owned();
    let sig_rr = sigma.view((0, 0), (nr, nr)).into_owned();
    let sig_ru = sigma.view((0, nr), (nr, nu)).into_owned();
    let sig_uu = sigma.view((nr, nr), (nu, nu)).into_owned();

    let (coefficients, omega_full, intercept) = if nr > 0 {
        let eig = sig_rr.clone().symmetric_eigen();
        let max_e = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let min_e = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_e <= 1e-12 * max_e.max(1e-300) {
            return Err(Error::RankDeficient);
        }
        let chol = nalgebra::Cholesky::new(sig_rr.clone()).ok_or(Error::RankDeficient)?;
        let beta = chol.solve(&sig_ru); // nr x nu
        let omega = &sig_uu - sig_ru.transpose() * &beta;
        let a = &mu_u - beta.transpose() * &mu_r;
        (beta, omega, a)
    } else {
        (DMatrix::zeros(0, nu), sig_uu.clone(), mu_u.clone())
    };
    let (omega, _) = gauss::floor_spd(&project_omega(&omega_full, r_form));

    // conditional observed-data log-likelihood under the implied joint:
    // ln f(obs of R and U) - ln f(obs of R)
    let mut joint_cov = DMatrix::zeros(nr + nu, nr + nu);
    joint_cov.view_mut((0, 0), (nr, nr)).copy_from(&sig_rr);
    let cross = &sig_rr * &coefficients;
    joint_cov.view_mut((0, nr), (nr, nu)).copy_from(&cross);
    joint_cov
        .view_mut((nr, 0), (nu, nr))
        .copy_from(&cross.transpose());
    let uu = coefficients.transpose() * &sig_rr * &coefficients + &omega;
    joint_cov.view_mut((nr, nr), (nu, nu)).copy_from(&uu);
    let mut joint_mu = DVector::zeros(nr + nu);
    joint_mu.rows_mut(0, nr).copy_from(&mu_r);
    let mean_u = &intercept + coefficients.transpose() * &mu_r;
    joint_mu.rows_mut(nr, nu).copy_from(&mean_u);

    let mut loglik = 0.0;
    for n in 0..joint.n_rows() {
        let obs_all = joint.observed_cols(n);
        if obs_all.is_empty() {
            continue;
        }
        let idx = BlockIndex::from_observed(obs_all.clone(), nr + nu)?;
        let y_o = observed_vector(&joint, n, &idx.observed);
        let (m_o, s_oo) = gauss::marginal_block(&joint_mu, &joint_cov, &idx);
        loglik += gauss::log_mvn_pdf(&y_o, &m_o, &s_oo)?;
        let obs_r: Vec<usize> = obs_all.iter().copied().filter(|&c| c < nr).collect();
        if !obs_r.is_empty() {
            let idx_r = BlockIndex::from_observed(obs_r, nr + nu)?;
            let y_r = observed_vector(&joint, n, &idx_r.observed);
            let (m_r, s_rr) = gauss::marginal_block(&joint_mu, &joint_cov, &idx_r);
            loglik -= gauss::log_mvn_pdf(&y_r, &m_r, &s_rr)?;
        }
    }

    Ok(RegressionFit {
        intercept,
        coefficients,
        residual_cov: omega,
        loglik,
        n_used: joint.n_rows(),
    })
}

/// BIC of the U-on-R regression block:
/// `2 * loglik - (|U| + |R||U| + df(Omega; r)) * ln n`.
pub fn bic_reg(
    data: &MaskedDataset,
    u_cols: &[usize],
    r_cols: &[usize],
    r_form: OmegaForm,
    cfg: &EmConfig,
) -> Result<f64> {
    let reg = fit_regression(data, u_cols, r_cols, r_form, cfg)?;
    let nu_params = (u_cols.len() + r_cols.len() * u_cols.len() + r_form.df(u_cols.len())) as f64;
    Ok(2.0 * reg.loglik - nu_params * (reg.n_used as f64).ln())
}

/// Gaussian fit of the independent block.
#[derive(Debug, Clone)]
pub struct IndepFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub n_used: usize,
}

pub(crate) fn project_gamma(cov: &DMatrix<f64>, l: GammaForm) -> DMatrix<f64> {
    let d = cov.nrows();
    match l {
        GammaForm::LB => DMatrix::from_diagonal(&cov.diagonal()),
        GammaForm::LI => DMatrix::identity(d, d) * (cov.trace() / d as f64),
    }
}

/// Fits `y^W ~ N(gamma, Gamma_l)` with the same dual complete-case/EM path
/// as the regression block.
pub fn fit_indep(
    data: &MaskedDataset,
    w_cols: &[usize],
    l_form: GammaForm,
    cfg: &EmConfig,
) -> Result<IndepFit> {
    if w_cols.is_empty() {
        return Err(Error::EmptyData);
    }
    let frac = missing_fraction(data, w_cols);
    let block = data.restrict_columns(w_cols)?;
    if frac < COMPLETE_CASE_CUTOFF {
        let rows: Vec<usize> = (0..block.n_rows())
            .filter(|&n| (0..block.n_cols()).all(|c| !block.is_missing(n, c)))
            .collect();
        if rows.len() < 2 {
            return Err(Error::RankDeficient);
        }
        let q = w_cols.len();
        let mut y = DMatrix::zeros(rows.len(), q);
        for (i, &row) in rows.iter().enumerate() {
            for c in 0..q {
                y[(i, c)] = block.value(row, c);
            }
        }
        let mean = y.row_mean().transpose();
        let mut cov = DMatrix::zeros(q, q);
        for i in 0..rows.len() {
            let diff = y.row(i).transpose() - &mean;
            cov += &diff * diff.transpose();
        }
        cov /= rows.len() as f64;
        let (gamma_cov, _) = gauss::floor_spd(&project_gamma(&cov, l_form));
        let mean_mat = DMatrix::from_fn(rows.len(), q, |_, j| mean[j]);
        let loglik = gaussian_loglik_complete(&y, &mean_mat, &gamma_cov)?;
        Ok(IndepFit {
            mean,
            cov: gamma_cov,
            loglik,
            n_used: rows.len(),
        })
    } else {
        let block_fit = fit(&block, 1, CovForm::DiagFree, cfg)?;
        let mean = block_fit.params.mu[0].clone();
        let (gamma_cov, _) = gauss::floor_spd(&project_gamma(&block_fit.params.sigma[0], l_form));
        let params = GmmParams::new(vec![1.0], vec![mean.clone()], vec![gamma_cov.clone()])?;
        let loglik = observed_loglik(&block, &params)?;
        Ok(IndepFit {
            mean,
            cov: gamma_cov,
            loglik,
            n_used: block.n_rows(),
        })
    }
}

/// BIC of the independent block: `2 * loglik - (|W| + df(Gamma; l)) * ln n`.
pub fn bic_indep(
    data: &MaskedDataset,
    w_cols: &[usize],
    l_form: GammaForm,
    cfg: &EmConfig,
) -> Result<f64> {
    let ind = fit_indep(data, w_cols, l_form, cfg)?;
    let nu_params = (w_cols.len() + l_form.df(w_cols.len())) as f64;
    Ok(2.0 * ind.loglik - nu_params * (ind.n_used as f64).ln())
}
