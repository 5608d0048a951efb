//! Penalized mixture estimator: L1-shrunk means and adaptively weighted
//! L1-shrunk precision matrices, with spectral Laplacian penalty weights.
//!
//! The objective maximized here is
//!
//! ```text
//! sum_n ln sum_k pi_k N(x_n | mu_k, Sigma_k)
//!   - lambda * sum_k |mu_k|_1
//!   - rho * sum_k sum_{d<d'} P_k[d,d'] |Psi_k[d,d']|
//! ```
//!
//! on centered-and-scaled data (each unordered off-diagonal pair of the
//! precision counted once). Missing cells are mean-imputed for this stage
//! only; the selection stage handles missingness in full.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{GmmParams, MaskedDataset};
use crate::em_mar::{EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::gauss;
use crate::rng::derive_seed;

const MEAN_SWEEP_TOL: f64 = 1e-8;
const MEAN_MAX_SWEEPS: usize = 10_000;
const GLASSO_SWEEP_TOL: f64 = 1e-7;
const GLASSO_MAX_SWEEPS: usize = 10_000;

/// Grids of regularization parameters, strictly increasing and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyGrid {
    pub lambdas: Vec<f64>,
    pub rhos: Vec<f64>,
}

impl PenaltyGrid {
    pub fn new(lambdas: Vec<f64>, rhos: Vec<f64>) -> Result<Self> {
        for grid in [&lambdas, &rhos] {
            if grid.is_empty() {
                return Err(Error::Empty);
            }
            for w in grid.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::ConfigParse(
                        "penalty grid must be strictly increasing".into(),
                    ));
                }
            }
            if grid[0] <= 0.0 {
                return Err(Error::ConfigParse("penalty grid values must be positive".into()));
            }
        }
        Ok(Self { lambdas, rhos })
    }

    pub fn len(&self) -> usize {
        self.lambdas.len() * self.rhos.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-component penalty weight matrices: symmetric, nonnegative, zero
/// diagonal.
#[derive(Debug, Clone)]
pub struct PenaltyWeights {
    pub p: Vec<DMatrix<f64>>,
}

impl PenaltyWeights {
    /// Uniform weights (all off-diagonal entries 1).
    pub fn uniform(k: usize, d: usize) -> Self {
        let mut m = DMatrix::from_element(d, d, 1.0);
        m.fill_diagonal(0.0);
        Self { p: vec![m; k] }
    }
}

/// Spectral penalty weights from initial precision matrices.
///
/// Per component: build the conditional-independence graph with an edge
/// where the partial correlation magnitude exceeds `gamma_adj`, form the
/// symmetrically normalized Laplacian (isolated nodes get a zero row), take
/// the Euclidean norm of its spectrum, and set every off-diagonal weight to
/// `1 / (norm + eps)`.
pub fn spectral_weights(
    psi0: &[DMatrix<f64>],
    gamma_adj: f64,
    eps: f64,
) -> Result<PenaltyWeights> {
    if psi0.is_empty() {
        return Err(Error::Empty);
    }
    if gamma_adj <= 0.0 || eps <= 0.0 {
        return Err(Error::ConfigParse(
            "gamma_adj and eps must be positive".into(),
        ));
    }
    let mut weights = Vec::with_capacity(psi0.len());
    for psi in psi0 {
        let d = psi.nrows();
        let dist = laplacian_spectral_norm(psi, gamma_adj);
        let w = 1.0 / (dist + eps);
        let mut m = DMatrix::from_element(d, d, w);
        m.fill_diagonal(0.0);
        weights.push(m);
    }
    Ok(PenaltyWeights { p: weights })
}

/// Euclidean norm of the normalized-Laplacian spectrum of the thresholded
/// partial-correlation graph.
pub fn laplacian_spectral_norm(psi: &DMatrix<f64>, gamma_adj: f64) -> f64 {
    let d = psi.nrows();
    let mut adj = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let denom = (psi[(i, i)] * psi[(j, j)]).sqrt();
            let pc = if denom > 0.0 { -psi[(i, j)] / denom } else { 0.0 };
            if pc.abs() > gamma_adj {
                adj[(i, j)] = 1.0;
            }
        }
    }
    let degrees: Vec<f64> = (0..d).map(|i| adj.row(i).sum()).collect();
    let mut lap = DMatrix::zeros(d, d);
    for i in 0..d {
        if degrees[i] > 0.0 {
            lap[(i, i)] = 1.0; // isolated nodes keep a zero row
        }
        for j in 0..d {
            if i != j && adj[(i, j)] > 0.0 {
                lap[(i, j)] = -1.0 / (degrees[i] * degrees[j]).sqrt();
            }
        }
    }
    let eig = lap.symmetric_eigen();
    eig.eigenvalues.iter().map(|e| e * e).sum::<f64>().sqrt()
}

/// Centers and scales every column by its observed-data mean and standard
/// deviation (sample sd, denominator n-1); the mask is unchanged.
pub fn standardize(data: &MaskedDataset) -> Result<(MaskedDataset, DVector<f64>, DVector<f64>)> {
    let (n, d) = (data.n_rows(), data.n_cols());
    let mut centers = DVector::zeros(d);
    let mut scales = DVector::zeros(d);
    for c in 0..d {
        let obs: Vec<f64> = (0..n)
            .filter(|&i| !data.is_missing(i, c))
            .map(|i| data.value(i, c))
            .collect();
        if obs.len() < 2 {
            return Err(Error::ZeroVarianceColumn(c));
        }
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (obs.len() - 1) as f64;
        if var <= 0.0 {
            return Err(Error::ZeroVarianceColumn(c));
        }
        centers[c] = mean;
        scales[c] = var.sqrt();
    }
    let mut values = data.values_with_sentinel().clone();
    for i in 0..n {
        for c in 0..d {
            if !data.is_missing(i, c) {
                values[(i, c)] = (values[(i, c)] - centers[c]) / scales[c];
            }
        }
    }
    let out = MaskedDataset::new(values, data.mask().clone(), data.var_names().to_vec())?;
    Ok((out, centers, scales))
}

/// Responsibility-weighted sufficient statistics of one component.
#[derive(Debug, Clone)]
pub struct WeightedStats {
    /// Total responsibility mass.
    pub weight: f64,
    /// Responsibility-weighted mean.
    pub mean: DVector<f64>,
}

/// Penalty part of the objective (means plus precision off-diagonals).
fn penalty_value(params: &GmmParams, lambda: f64, rho: f64, p: &PenaltyWeights) -> f64 {
    let d = params.dim();
    let mut total = 0.0;
    for k in 0..params.n_components() {
        total += lambda * params.mu[k].iter().map(|v| v.abs()).sum::<f64>();
        for i in 0..d {
            for j in (i + 1)..d {
                total += rho * p.p[k][(i, j)] * params.psi[k][(i, j)].abs();
            }
        }
    }
    total
}

/// Penalized log-likelihood on standardized (mean-imputed) data.
pub fn penalized_objective(
    data: &MaskedDataset,
    params: &GmmParams,
    lambda: f64,
    rho: f64,
    p: &PenaltyWeights,
) -> Result<f64> {
    let x = data.mean_imputed();
    Ok(complete_loglik(&x, params)? - penalty_value(params, lambda, rho, p))
}

fn complete_loglik(x: &DMatrix<f64>, params: &GmmParams) -> Result<f64> {
    let (n, k) = (x.nrows(), params.n_components());
    let ln_pi: Vec<f64> = params.pi.iter().map(|v| v.ln()).collect();
    let mut factors = Vec::with_capacity(k);
    for c in 0..k {
        let (chol, _) = gauss::spd_cholesky(&params.sigma[c])?;
        factors.push(chol);
    }
    let mut terms = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        let y = x.row(i).transpose();
        for c in 0..k {
            terms[c] = ln_pi[c] + gauss::log_mvn_pdf_prefactored(&y, &params.mu[c], &factors[c]);
        }
        total += gauss::log_sum_exp(&terms)?;
    }
    Ok(total)
}

fn complete_e_step(x: &DMatrix<f64>, params: &GmmParams) -> Result<(DMatrix<f64>, f64)> {
    let (n, k) = (x.nrows(), params.n_components());
    let ln_pi: Vec<f64> = params.pi.iter().map(|v| v.ln()).collect();
    let mut factors = Vec::with_capacity(k);
    for c in 0..k {
        let (chol, _) = gauss::spd_cholesky(&params.sigma[c])?;
        factors.push(chol);
    }
    let mut resp = DMatrix::zeros(n, k);
    let mut terms = vec![0.0; k];
    let mut loglik = 0.0;
    for i in 0..n {
        let y = x.row(i).transpose();
        for c in 0..k {
            terms[c] = ln_pi[c] + gauss::log_mvn_pdf_prefactored(&y, &params.mu[c], &factors[c]);
        }
        let lse = gauss::log_sum_exp(&terms)?;
        loglik += lse;
        for c in 0..k {
            resp[(i, c)] = (terms[c] - lse).exp();
        }
    }
    Ok((resp, loglik))
}

/// Coordinate-wise minimizer of the penalized Q-function in one component's
/// mean: soft-thresholding of the responsibility-weighted,
/// precision-coupled score, cycled to a fixed point.
pub fn mean_update_soft_threshold(
    stats: &WeightedStats,
    lambda: f64,
    psi: &DMatrix<f64>,
    start: &DVector<f64>,
) -> Result<DVector<f64>> {
    if stats.weight <= 0.0 {
        return Err(Error::EmptyComponent(0));
    }
    let d = stats.mean.len();
    let w = stats.weight;
    let psi_xbar = psi * &stats.mean;
    let mut mu = start.clone();
    for _ in 0..MEAN_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for j in 0..d {
            // c_j = (Psi xbar)_j - sum_{l != j} Psi_jl mu_l
            let mut cross = 0.0;
            for l in 0..d {
                if l != j {
                    cross += psi[(j, l)] * mu[l];
                }
            }
            let c_j = psi_xbar[j] - cross;
            let z = w * c_j;
            let new = soft_threshold(z, lambda) / (w * psi[(j, j)]);
            max_change = max_change.max((new - mu[j]).abs());
            mu[j] = new;
        }
        if max_change < MEAN_SWEEP_TOL {
            return Ok(mu);
        }
    }
    Err(Error::NoConvergence("mean soft-threshold update"))
}

/// Penalized Q-value of one component's precision update,
/// `(w/2)(ln det Psi - tr(S Psi)) - rho * sum_{i<j} P_ij |Psi_ij|`.
fn subproblem_value(psi: &DMatrix<f64>, s: &DMatrix<f64>, weight: f64, rho: f64, p: &DMatrix<f64>) -> f64 {
    let d = psi.nrows();
    let chol = match nalgebra::Cholesky::new(psi.clone()) {
        Some(c) => c,
        None => return f64::NEG_INFINITY,
    };
    let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut pen = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            pen += p[(i, j)] * psi[(i, j)].abs();
        }
    }
    0.5 * weight * (ln_det - (s * psi).trace()) - rho * pen
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Weighted graphical-lasso update of one component's precision matrix:
/// maximizes `ln det Psi - tr(S Psi) - (rho/w) sum_{d != d'} P[d,d'] |Psi[d,d']|`
/// by block coordinate descent on the covariance, one weighted lasso
/// subproblem per column; the diagonal is unpenalized.
pub fn precision_update_weighted_glasso(
    s: &DMatrix<f64>,
    rho: f64,
    weight: f64,
    p: &DMatrix<f64>,
    psi_init: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = s.nrows();
    if s.ncols() != d || p.shape() != (d, d) || psi_init.shape() != (d, d) {
        return Err(Error::DimensionMismatch("glasso inputs".into()));
    }
    if rho < 0.0 || weight <= 0.0 {
        return Err(Error::ConfigParse("rho must be >= 0 and weight > 0".into()));
    }
    // reject genuinely indefinite scatter, floor the merely singular
    let sym_err = (s - s.transpose()).abs().max();
    if sym_err > 1e-8 * s.abs().max().max(1.0) {
        return Err(Error::NotPsdInput);
    }
    let eig = s.clone().symmetric_eigen();
    let max_e = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_e = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_e < -1e-8 * max_e.max(1.0) {
        return Err(Error::NotPsdInput);
    }
    let (s, _) = gauss::floor_spd(s);

    let lam = rho / weight;
    let all_zero = lam == 0.0 || p.iter().all(|&v| v == 0.0);
    if all_zero || d == 1 {
        let (chol, _) = gauss::spd_cholesky(&s)?;
        return Ok(chol.inverse());
    }

    // warm regression vectors from the provided precision
    let warm_betas: Vec<DVector<f64>> = (0..d)
        .map(|j| {
            let rest: Vec<usize> = (0..d).filter(|&i| i != j).collect();
            if psi_init[(j, j)] > 0.0 {
                DVector::from_fn(d - 1, |a, _| -psi_init[(rest[a], j)] / psi_init[(j, j)])
            } else {
                DVector::zeros(d - 1)
            }
        })
        .collect();

    // pathologically conditioned scatters get an escalating ridge
    let scale = (s.trace() / d as f64).max(1e-12);
    for ridge in [0.0, 1e-8, 1e-6, 1e-4] {
        let mut s_try = s.clone();
        for i in 0..d {
            s_try[(i, i)] += ridge * scale;
        }
        match glasso_block_cd(&s_try, lam, p, &warm_betas) {
            Ok(psi) => return Ok(psi),
            Err(Error::NotSpd) | Err(Error::NoConvergence(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoConvergence("graphical-lasso update"))
}

fn glasso_block_cd(
    s: &DMatrix<f64>,
    lam: f64,
    p: &DMatrix<f64>,
    warm_betas: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    let d = s.nrows();
    // W tracks the working covariance (the solution's inverse); its
    // diagonal is pinned to S's because the diagonal is unpenalized
    let mut w = s.clone();
    let mut betas = warm_betas.to_vec();

    for _ in 0..GLASSO_MAX_SWEEPS {
        let mut w_change = 0.0f64;
        for j in 0..d {
            let rest: Vec<usize> = (0..d).filter(|&i| i != j).collect();
            let w11 = DMatrix::from_fn(d - 1, d - 1, |a, b| w[(rest[a], rest[b])]);
            let s12 = DVector::from_fn(d - 1, |a, _| s[(rest[a], j)]);
            let lams = DVector::from_fn(d - 1, |a, _| lam * p[(rest[a], j)]);
            let mut beta = betas[j].clone();
            weighted_lasso(&w11, &s12, &lams, &mut beta);
            let w12 = &w11 * &beta;
            for (a, &i) in rest.iter().enumerate() {
                w_change = w_change.max((w[(i, j)] - w12[a]).abs());
                w[(i, j)] = w12[a];
                w[(j, i)] = w12[a];
            }
            betas[j] = beta;
        }
        if w_change < GLASSO_SWEEP_TOL {
            return assemble_precision(s, &w, &betas, d);
        }
    }
    Err(Error::NoConvergence("graphical-lasso update"))
}

/// Precision assembly from the per-column lasso solutions:
/// `psi_jj = 1 / (s_jj - w_12' beta)`, `psi_12 = -beta * psi_jj`, keeping
/// the lasso zeros exact and symmetrizing the rest.
fn assemble_precision(
    s: &DMatrix<f64>,
    w: &DMatrix<f64>,
    betas: &[DVector<f64>],
    d: usize,
) -> Result<DMatrix<f64>> {
    let mut psi = DMatrix::zeros(d, d);
    for j in 0..d {
        let rest: Vec<usize> = (0..d).filter(|&i| i != j).collect();
        let mut quad = 0.0;
        for (a, &i) in rest.iter().enumerate() {
            quad += w[(i, j)] * betas[j][a];
        }
        let denom = s[(j, j)] - quad;
        if denom <= 0.0 {
            return Err(Error::NotSpd);
        }
        let psi_jj = 1.0 / denom;
        psi[(j, j)] = psi_jj;
        for (a, &i) in rest.iter().enumerate() {
            let val = -betas[j][a] * psi_jj;
            if i > j {
                psi[(i, j)] = val;
            } else {
                // symmetrize; an entry is zero only when both column
                // solves agree on it
                let other = psi[(j, i)];
                let merged = if val == 0.0 && other == 0.0 {
                    0.0
                } else {
                    0.5 * (val + other)
                };
                psi[(j, i)] = merged;
                psi[(i, j)] = merged;
            }
        }
    }
    for j in 0..d {
        for i in (j + 1)..d {
            psi[(i, j)] = psi[(j, i)];
        }
    }
    Ok(psi)
}

/// Coordinate-descent weighted lasso:
/// `min 0.5 beta' Q beta - b' beta + sum_i lam_i |beta_i|`.
///
/// Monotone from any start; a hit of the sweep cap leaves a partial solve,
/// which the outer loop detects through its own convergence check.
fn weighted_lasso(q: &DMatrix<f64>, b: &DVector<f64>, lams: &DVector<f64>, beta: &mut DVector<f64>) {
    let d = b.len();
    let scale = b.abs().max().max(1.0);
    for _ in 0..GLASSO_MAX_SWEEPS {
        let mut change = 0.0f64;
        for i in 0..d {
            let mut resid = b[i];
            for l in 0..d {
                if l != i {
                    resid -= q[(i, l)] * beta[l];
                }
            }
            let new = soft_threshold(resid, lams[i]) / q[(i, i)];
            change = change.max((new - beta[i]).abs());
            beta[i] = new;
        }
        if change < 1e-10 * scale {
            return;
        }
    }
}

/// One penalized EM run from explicit initial parameters.
pub fn fit_penalized_from(
    data: &MaskedDataset,
    lambda: f64,
    rho: f64,
    p: &PenaltyWeights,
    cfg: &EmConfig,
    init: &GmmParams,
) -> Result<FitResult> {
    let x = data.mean_imputed();
    run_penalized_inner(&x, init.clone(), lambda, rho, p, cfg.max_iter, cfg.tol, None, false)
}

/// Tied-precision variant: one penalized EM run where every component
/// shares a single precision matrix (pooled-scatter graphical lasso).
pub fn fit_penalized_tied_from(
    data: &MaskedDataset,
    lambda: f64,
    rho: f64,
    p: &PenaltyWeights,
    cfg: &EmConfig,
    init: &GmmParams,
) -> Result<FitResult> {
    let x = data.mean_imputed();
    run_penalized_inner(&x, init.clone(), lambda, rho, p, cfg.max_iter, cfg.tol, None, true)
}

/// Best-of-starts penalized EM fit on standardized data.
pub fn fit_penalized(
    data: &MaskedDataset,
    k: usize,
    lambda: f64,
    rho: f64,
    p: &PenaltyWeights,
    cfg: &EmConfig,
) -> Result<FitResult> {
    fit_penalized_impl(data, k, lambda, rho, p, cfg, false)
}

/// Best-of-starts tied-precision penalized fit (a single shared precision
/// across components).
pub fn fit_penalized_tied(
    data: &MaskedDataset,
    k: usize,
    lambda: f64,
    rho: f64,
    p: &PenaltyWeights,
    cfg: &EmConfig,
) -> Result<FitResult> {
    fit_penalized_impl(data, k, lambda, rho, p, cfg, true)
}

fn fit_penalized_impl(
    data: &MaskedDataset,
    k: usize,
    lambda: f64,
    rho: f64,
    p: &PenaltyWeights,
    cfg: &EmConfig,
    tied: bool,
) -> Result<FitResult> {
    if k == 0 {
        return Err(Error::ConfigParse("K must be at least 1".into()));
    }
    let x = data.mean_imputed();
    let complete = MaskedDataset::from_complete(x.clone())?;
    let n_starts = if k == 1 { 1 } else { cfg.n_starts.max(1) };
    let mut best: Option<FitResult> = None;
    let mut degenerate = 0usize;
    for start in 0..n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, start as u64));
        let init = match crate::em_mar::init_params(&complete, k, &mut rng, cfg.init) {
            Ok(p) => p,
            Err(_) => {
                degenerate += 1;
                continue;
            }
        };
        match run_penalized_inner(&x, init, lambda, rho, p, cfg.max_iter, cfg.tol, None, tied) {
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

/// Continues penalized EM from the given parameters until the largest
/// parameter movement per iteration drops below `param_tol`, so KKT
/// stationarity can be certified at the returned point.
pub fn polish_to_stationarity(
    data: &MaskedDataset,
    init: &GmmParams,
    lambda: f64,
    rho: f64,
    p: &PenaltyWeights,
    max_iter: usize,
    param_tol: f64,
) -> Result<FitResult> {
    let x = data.mean_imputed();
    run_penalized_inner(
        &x,
        init.clone(),
        lambda,
        rho,
        p,
        max_iter,
        0.0,
        Some(param_tol),
        false,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_penalized_inner(
    x: &DMatrix<f64>,
    init: GmmParams,
    lambda: f64,
    rho: f64,
    p: &PenaltyWeights,
    max_iter: usize,
    tol: f64,
    param_tol: Option<f64>,
    tied: bool,
) -> Result<FitResult> {
    let (n, d) = (x.nrows(), x.ncols());
    let k = init.n_components();
    if init.dim() != d || p.p.len() != k {
        return Err(Error::DimensionMismatch("penalized fit inputs".into()));
    }
    let mut params = init;
    let (mut resp, mut loglik) = complete_e_step(x, &params)?;
    let mut objective = loglik - penalty_value(&params, lambda, rho, p);
    let mut trace = vec![objective];
    let mut converged = false;

    for _ in 0..max_iter {
        let mut pi = Vec::with_capacity(k);
        let mut mu_new = Vec::with_capacity(k);
        let mut sigma_new = Vec::with_capacity(k);
        let mut psi_new = Vec::with_capacity(k);
        let mut scatters: Vec<(f64, DMatrix<f64>)> = Vec::with_capacity(k);
        let mut param_change = 0.0f64;
        for c in 0..k {
            let weight: f64 = (0..n).map(|i| resp[(i, c)]).sum();
            if weight < 1e-10 * n as f64 {
                return Err(Error::EmptyComponent(c));
            }
            let mut mean = DVector::zeros(d);
            for i in 0..n {
                let t = resp[(i, c)];
                for j in 0..d {
                    mean[j] += t * x[(i, j)];
                }
            }
            mean /= weight;
            let stats = WeightedStats { weight, mean };
            let mu = mean_update_soft_threshold(&stats, lambda, &params.psi[c], &params.mu[c])?;

            let mut scatter = DMatrix::zeros(d, d);
            for i in 0..n {
                let t = resp[(i, c)];
                if t == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let da = x[(i, a)] - mu[a];
                    for b in a..d {
                        scatter[(a, b)] += t * da * (x[(i, b)] - mu[b]);
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    scatter[(a, b)] = scatter[(b, a)];
                }
            }
            scatter /= weight;

            param_change = param_change.max((&mu - &params.mu[c]).abs().max());
            pi.push(weight / n as f64);
            mu_new.push(mu);
            scatters.push((weight, scatter));
        }
        if tied {
            // pooled diagonal scatter, one shared precision update: the
            // mean-selection model of the ranking stage, where coordinate
            // deaths must follow the marginal signal and not the
            // conditional couplings
            let total: f64 = scatters.iter().map(|(w, _)| w).sum();
            let mut pooled = DMatrix::zeros(d, d);
            for (w, s) in &scatters {
                pooled += s * *w;
            }
            pooled /= total;
            pooled = DMatrix::from_diagonal(&pooled.diagonal());
            let mut p_avg = DMatrix::zeros(d, d);
            for pc in &p.p {
                p_avg += pc;
            }
            p_avg /= k as f64;
            let mut psi =
                precision_update_weighted_glasso(&pooled, rho, total, &p_avg, &params.psi[0])?;
            if subproblem_value(&params.psi[0], &pooled, total, rho, &p_avg)
                > subproblem_value(&psi, &pooled, total, rho, &p_avg)
            {
                psi = params.psi[0].clone();
            }
            let sigma = {
                let inv = nalgebra::Cholesky::new(psi.clone())
                    .ok_or(Error::NotSpd)?
                    .inverse();
                crate::data::refine_inverse(&psi, &inv)
            };
            param_change = param_change.max((&psi - &params.psi[0]).abs().max());
            for _ in 0..k {
                sigma_new.push(sigma.clone());
                psi_new.push(psi.clone());
            }
        } else {
            for (c, (weight, scatter)) in scatters.iter().enumerate() {
                let mut psi = precision_update_weighted_glasso(
                    scatter,
                    rho,
                    *weight,
                    &p.p[c],
                    &params.psi[c],
                )?;
                // keep the previous precision when an inexact subproblem
                // solve would lower the Q-function
                if subproblem_value(&params.psi[c], scatter, *weight, rho, &p.p[c])
                    > subproblem_value(&psi, scatter, *weight, rho, &p.p[c])
                {
                    psi = params.psi[c].clone();
                }
                let sigma = {
                    let inv = nalgebra::Cholesky::new(psi.clone())
                        .ok_or(Error::NotSpd)?
                        .inverse();
                    crate::data::refine_inverse(&psi, &inv)
                };
                param_change = param_change.max((&psi - &params.psi[c]).abs().max());
                sigma_new.push(sigma);
                psi_new.push(psi);
            }
        }
        params = GmmParams::with_precision(pi, mu_new, sigma_new, psi_new)?;

        let (new_resp, new_loglik) = complete_e_step(x, &params)?;
        resp = new_resp;
        loglik = new_loglik;
        let new_objective = loglik - penalty_value(&params, lambda, rho, p);
        let rel = (new_objective - objective).abs() / objective.abs().max(1.0);
        objective = new_objective;
        trace.push(objective);
        let stop = match param_tol {
            Some(pt) => param_change < pt,
            None => rel < tol,
        };
        if stop {
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

/// Lambda above which every mean coordinate of the anchored solution is
/// zeroed: the responsibility-weighted diagonal-model score
/// `max_{k,j} N pi_k |mu_kj| / sigma2_j` at the anchor's within-variances.
pub fn lambda_max_anchored(data: &MaskedDataset, anchor: &GmmParams) -> Result<f64> {
    let n = data.n_rows() as f64;
    let d = anchor.dim();
    if d != data.n_cols() {
        return Err(Error::DimensionMismatch("anchor dimension".into()));
    }
    let k = anchor.n_components();
    // pooled within-variance per coordinate
    let mut within = vec![0.0f64; d];
    for c in 0..k {
        for j in 0..d {
            within[j] += anchor.pi[c] * anchor.sigma[c][(j, j)];
        }
    }
    let mut lmax = 0.0f64;
    for c in 0..k {
        for j in 0..d {
            let score = n * anchor.pi[c] * anchor.mu[c][j].abs() / within[j].max(1e-12);
            lmax = lmax.max(score);
        }
    }
    Ok(lmax.max(0.02) * 1.1)
}

/// Smallest lambda that zeroes every mean coordinate in the first M-step,
/// computed from the responsibility-weighted score at `mu = 0` under the
/// seed initialization.
pub fn lambda_max(data: &MaskedDataset, k: usize, cfg: &EmConfig) -> Result<f64> {
    let x = data.mean_imputed();
    let complete = MaskedDataset::from_complete(x.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let init = crate::em_mar::init_params(&complete, k, &mut rng, cfg.init)?;
    let (resp, _) = complete_e_step(&x, &init)?;
    let (n, d) = (x.nrows(), x.ncols());
    let mut max_score = 0.0f64;
    for c in 0..k {
        let weight: f64 = (0..n).map(|i| resp[(i, c)]).sum();
        if weight == 0.0 {
            continue;
        }
        let mut mean = DVector::zeros(d);
        for i in 0..n {
            let t = resp[(i, c)];
            for j in 0..d {
                mean[j] += t * x[(i, j)];
            }
        }
        mean /= weight;
        let score = &init.psi[c] * &mean * weight;
        max_score = max_score.max(score.abs().max());
    }
    Ok(max_score)
}

/// Default grids: 20 log-spaced lambdas ending at `lambda_max`, and
/// `rho in {0.1, 0.3, 1.0}` scaled by the per-component sample size.
///
/// The objective sums the likelihood over all n observations while the
/// penalties enter once, so both grids live on the responsibility-mass
/// scale: the lambda grid spans the top 1.3 decades below `lambda_max`
/// (mean coordinates die within a factor of a few of it, and a lower
/// endpoint far below that wastes every grid point), and the rho values
/// grow like n/K so the precision penalty bites at the normalized-scatter
/// scale.
pub fn default_grid(data: &MaskedDataset, k: usize, cfg: &EmConfig) -> Result<PenaltyGrid> {
    let lmax = lambda_max(data, k, cfg)?.max(0.02);
    grid_from_lambda_max(data.n_rows(), k, lmax)
}

/// Default grid with the top anchored at the converged-solution score.
pub fn default_grid_anchored(
    data: &MaskedDataset,
    k: usize,
    anchor: &GmmParams,
) -> Result<PenaltyGrid> {
    let lmax = lambda_max_anchored(data, anchor)?;
    grid_from_lambda_max(data.n_rows(), k, lmax)
}

fn grid_from_lambda_max(n: usize, k: usize, lmax: f64) -> Result<PenaltyGrid> {
    let lmin = (lmax / 100.0).max(1e-6);
    let count = 20;
    let lambdas: Vec<f64> = (0..count)
        .map(|i| {
            let t = i as f64 / (count - 1) as f64;
            (lmin.ln() + t * (lmax.ln() - lmin.ln())).exp()
        })
        .collect();
    let mass = n as f64 / k as f64;
    PenaltyGrid::new(lambdas, vec![0.1 * mass, 0.3 * mass, 1.0 * mass])
}

pub const DEFAULT_GAMMA_ADJ: f64 = 0.01;
pub const DEFAULT_EPS: f64 = 1e-3;
