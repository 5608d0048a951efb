//! Class-dependent missingness (MNARz): mask likelihood, EM that couples
//! the data model with per-class missingness rates, the mixed MAR/MNARz
//! likelihood, the augmented-data reformulation, and mask-aware model
//! selection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    CovForm, GmmParams, MaskedDataset, MnarzParams, ModelSpec, SruwParams, VariablePartition,
};
use crate::em_mar::{self, EmConfig, PatternGroups};
use crate::error::{Error, Result};
use crate::penalized;
use crate::rng::derive_seed;
use crate::sruw::{self, ClustBic, SelectionConfig};

/// Clipping bounds for the per-class missingness rate.
pub const RHO_FLOOR: f64 = 1e-6;
pub const RHO_CEIL: f64 = 1.0 - 1e-6;

/// Joint fit of the data model and the mask mechanism.
#[derive(Debug, Clone)]
pub struct MnarzFit {
    /// Data-model parameters; a pure clustering fit uses S = all variables
    /// with empty regression and independence blocks.
    pub theta: SruwParams,
    pub mnarz: MnarzParams,
    pub responsibilities: DMatrix<f64>,
    /// Observed-data log-likelihood (data and mask factors) per iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
}

impl MnarzFit {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("nonempty trace")
    }

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

/// Bernoulli-product log-likelihood of one mask row under a class rate.
pub fn mask_loglik(c_row: &[bool], rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::RhoOutOfRange(rho));
    }
    let miss = c_row.iter().filter(|&&c| c).count() as f64;
    let obs = c_row.len() as f64 - miss;
    Ok(miss * rho.ln() + obs * (1.0 - rho).ln())
}

/// Per-(row, component) mask log-factors over the given variable subset.
fn mask_logfactors(
    data: &MaskedDataset,
    rho: &[f64],
    cols: &[usize],
) -> Result<DMatrix<f64>> {
    for &r in rho {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::RhoOutOfRange(r));
        }
    }
    let n = data.n_rows();
    let k = rho.len();
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        let miss = cols.iter().filter(|&&d| data.is_missing(i, d)).count() as f64;
        let obs = cols.len() as f64 - miss;
        for (c, &r) in rho.iter().enumerate() {
            out[(i, c)] = miss * r.ln() + obs * (1.0 - r).ln();
        }
    }
    Ok(out)
}

/// Observed-data log-likelihood under the pure class-dependent mechanism:
/// every variable's mask carries the class rate.
pub fn observed_loglik_mnarz(
    data: &MaskedDataset,
    gmm: &GmmParams,
    mnarz: &MnarzParams,
) -> Result<f64> {
    mnarz.validate(data.n_cols())?;
    if !mnarz.d_mar.is_empty() {
        return Err(Error::ConfigParse(
            "pure MNARz likelihood requires every variable in the MNAR set".into(),
        ));
    }
    let extra = mask_logfactors(data, &mnarz.rho, &mnarz.d_mnar)?;
    let groups = PatternGroups::new(data);
    Ok(em_mar::e_step_grouped(data, gmm, &groups, Some(&extra))?.1)
}

/// Same likelihood with the data model given in block form.
pub fn observed_loglik_mnarz_sruw(
    data: &MaskedDataset,
    theta: &SruwParams,
    part: &VariablePartition,
    mnarz: &MnarzParams,
) -> Result<f64> {
    let gmm = sruw::sruw_to_global_gmm(theta, part)?;
    observed_loglik_mnarz(data, &gmm, mnarz)
}

/// Mixed-mechanism likelihood: the MNAR-set mask factor multiplies the
/// component densities; the MAR-set factor is ignorable for estimation and
/// is added only when a reporting model is supplied (a per-(row, variable)
/// missingness probability).
pub fn observed_loglik_mixed(
    data: &MaskedDataset,
    gmm: &GmmParams,
    mnarz: &MnarzParams,
    mar_model: Option<&dyn Fn(usize, usize) -> f64>,
) -> Result<f64> {
    mnarz.validate(data.n_cols())?;
    let extra = mask_logfactors(data, &mnarz.rho, &mnarz.d_mnar)?;
    let groups = PatternGroups::new(data);
    let mut total = em_mar::e_step_grouped(data, gmm, &groups, Some(&extra))?.1;
    if let Some(model) = mar_model {
        for i in 0..data.n_rows() {
            for &d in &mnarz.d_mar {
                let p = model(i, d);
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::RhoOutOfRange(p));
                }
                total += if data.is_missing(i, d) {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                };
            }
        }
    }
    Ok(total)
}

/// Augmented dataset pairing the original masked values with the fully
/// observed binary mask block: N x 2D, mask columns named `c_<name>`.
pub fn augment(data: &MaskedDataset) -> Result<MaskedDataset> {
    let (n, d) = (data.n_rows(), data.n_cols());
    let mut values = DMatrix::zeros(n, 2 * d);
    let mut mask = DMatrix::zeros(n, 2 * d);
    for i in 0..n {
        for j in 0..d {
            if data.is_missing(i, j) {
                values[(i, j)] = f64::NAN;
                mask[(i, j)] = 1;
                values[(i, d + j)] = 1.0;
            } else {
                values[(i, j)] = data.value(i, j);
                values[(i, d + j)] = 0.0;
            }
        }
    }
    let mut names = data.var_names().to_vec();
    names.extend(data.var_names().iter().map(|v| format!("c_{v}")));
    MaskedDataset::new(values, mask, names)
}

/// EM for a K-component mixture with a per-class mask rate on all columns
/// of `data`.
pub fn em_fit_mnarz(
    data: &MaskedDataset,
    k: usize,
    m: CovForm,
    cfg: &EmConfig,
) -> Result<MnarzFit> {
    if k == 0 {
        return Err(Error::ConfigParse("K must be at least 1".into()));
    }
    let groups = PatternGroups::new(data);
    let eig_floor = em_mar::eig_floor_for(data);
    let (n, d) = (data.n_rows(), data.n_cols());
    let row_miss: Vec<f64> = (0..n)
        .map(|i| (0..d).filter(|&j| data.is_missing(i, j)).count() as f64)
        .collect();
    let pooled_rate = (row_miss.iter().sum::<f64>() / (n * d) as f64).clamp(RHO_FLOOR, RHO_CEIL);

    let n_starts = if k == 1 { 1 } else { cfg.n_starts.max(1) };
    let mut best: Option<MnarzFit> = None;
    let mut degenerate = 0usize;
    for start in 0..n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, start as u64));
        let init = match em_mar::init_params(data, k, &mut rng, cfg.init) {
            Ok(p) => p,
            Err(_) => {
                degenerate += 1;
                continue;
            }
        };
        match run_single_mnarz(
            data,
            init,
            vec![pooled_rate; k],
            m,
            cfg,
            &groups,
            &row_miss,
            eig_floor,
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

fn rho_logfactors(row_miss: &[f64], d: usize, rho: &[f64]) -> DMatrix<f64> {
    let n = row_miss.len();
    let k = rho.len();
    DMatrix::from_fn(n, k, |i, c| {
        row_miss[i] * rho[c].ln() + (d as f64 - row_miss[i]) * (1.0 - rho[c]).ln()
    })
}

#[allow(clippy::too_many_arguments)]
fn run_single_mnarz(
    data: &MaskedDataset,
    init: GmmParams,
    init_rho: Vec<f64>,
    m: CovForm,
    cfg: &EmConfig,
    groups: &PatternGroups,
    row_miss: &[f64],
    eig_floor: f64,
) -> Result<MnarzFit> {
    let (n, d) = (data.n_rows(), data.n_cols());
    let k = init.n_components();
    let mut params = init;
    let mut rho = init_rho;

    let extra = rho_logfactors(row_miss, d, &rho);
    let (mut resp, mut loglik) = em_mar::e_step_grouped(data, &params, groups, Some(&extra))?;
    let mut trace = vec![loglik];
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        params = em_mar::m_step_grouped(data, &resp, &params, m, groups, eig_floor)?;
        for c in 0..k {
            let mass: f64 = (0..n).map(|i| resp[(i, c)]).sum();
            let miss_mass: f64 = (0..n).map(|i| resp[(i, c)] * row_miss[i]).sum();
            rho[c] = (miss_mass / (d as f64 * mass)).clamp(RHO_FLOOR, RHO_CEIL);
        }
        let extra = rho_logfactors(row_miss, d, &rho);
        let (new_resp, new_loglik) = em_mar::e_step_grouped(data, &params, groups, Some(&extra))?;
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
    let theta = SruwParams {
        alpha: params,
        intercept: DVector::zeros(0),
        coefficients: DMatrix::zeros(0, 0),
        residual_cov: DMatrix::zeros(0, 0),
        indep_mean: DVector::zeros(0),
        indep_cov: DMatrix::zeros(0, 0),
    };
    Ok(MnarzFit {
        theta,
        mnarz: MnarzParams::pure(rho, d)?,
        responsibilities: resp,
        loglik_trace: trace,
        converged,
        n_iter,
    })
}

/// Closed-form mask-rate update for one component.
pub fn rho_update(resp_col: &[f64], row_miss: &[f64], d: usize) -> f64 {
    let mass: f64 = resp_col.iter().sum();
    let miss_mass: f64 = resp_col
        .iter()
        .zip(row_miss)
        .map(|(t, m)| t * m)
        .sum();
    (miss_mass / (d as f64 * mass)).clamp(RHO_FLOOR, RHO_CEIL)
}

/// Mask-aware clustering BIC: `2 * loglik - (nu + K) * ln N`, the extra K
/// parameters being the class rates.
pub fn bic_clust_mnarz(data: &MaskedDataset, k: usize, m: CovForm, cfg: &EmConfig) -> Result<f64> {
    let fit = em_fit_mnarz(data, k, m, cfg)?;
    let nu = (em_mar::clust_param_count(k, data.n_cols(), m) + k) as f64;
    Ok(2.0 * fit.final_loglik() - nu * (data.n_rows() as f64).ln())
}

/// Clustering scorer that multiplies the block mask factor into every fit.
pub struct MnarzClustBic {
    pub m: CovForm,
    pub cfg: EmConfig,
    cache: BTreeMap<(Vec<usize>, usize), f64>,
}

impl MnarzClustBic {
    pub fn new(m: CovForm, cfg: EmConfig) -> Self {
        Self {
            m,
            cfg,
            cache: BTreeMap::new(),
        }
    }
}

impl ClustBic for MnarzClustBic {
    fn bic(&mut self, data: &MaskedDataset, cols: &[usize], k: usize) -> Result<f64> {
        let key = (cols.to_vec(), k);
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let block = data.restrict_columns(cols)?;
        let v = bic_clust_mnarz(&block, k, self.m, &self.cfg)?;
        self.cache.insert(key, v);
        Ok(v)
    }

    fn extra_param_count(&self, k: usize) -> usize {
        k
    }
}

/// Model selection with every clustering-block fit and criterion carrying
/// the class-dependent mask factor; regression and independence blocks are
/// scored as under MAR.
pub fn select_model_mnarz(
    data: &MaskedDataset,
    ks: &[usize],
    forms: &[CovForm],
    grid: Option<&penalized::PenaltyGrid>,
    sel: &SelectionConfig,
    cfg: &EmConfig,
) -> Result<(ModelSpec, VariablePartition, MnarzFit)> {
    if ks.is_empty() || forms.is_empty() {
        return Err(Error::NoValidModel);
    }
    let (std_data, _, _) = penalized::standardize(data)?;
    let mut outcomes = Vec::new();
    for (idx, (&k, &m)) in ks
        .iter()
        .flat_map(|k| forms.iter().map(move |m| (k, m)))
        .enumerate()
    {
        let cand_cfg = EmConfig {
            seed: derive_seed(cfg.seed, idx as u64),
            ..*cfg
        };
        let mut scorer = MnarzClustBic::new(m, cand_cfg);
        match sruw::evaluate_candidate(data, &std_data, k, m, grid, sel, &cand_cfg, &mut scorer) {
            Ok(out) => outcomes.push(out),
            Err(Error::EmptyS) | Err(Error::AllStartsDegenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let best = sruw::pick_best(outcomes)?;

    // final fit: mask-aware mixture on the clustering block, MAR fits for
    // the other blocks
    let s_block = data.restrict_columns(&best.partition.s)?;
    let s_fit = em_fit_mnarz(&s_block, best.spec.k, best.spec.m, cfg)?;
    let theta = sruw::sruw_from_alpha(
        data,
        &best.partition,
        &best.spec,
        cfg,
        s_fit.theta.alpha.clone(),
    )?;
    let fit = MnarzFit {
        theta,
        mnarz: MnarzParams::pure(s_fit.mnarz.rho.clone(), data.n_cols())?,
        responsibilities: s_fit.responsibilities,
        loglik_trace: s_fit.loglik_trace,
        converged: s_fit.converged,
        n_iter: s_fit.n_iter,
    };
    Ok((best.spec, best.partition, fit))
}
