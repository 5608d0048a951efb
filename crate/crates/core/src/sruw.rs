//! Stage-two role assignment: forward relevance scan with a
//! consecutive-failure stopping rule, reverse independence scan, stepwise
//! regressor determination, full block-model fitting, the additive BIC
//! criterion, and the global-mixture embedding of the block model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::data::{
    validate_partition, CovForm, GammaForm, GmmParams, MaskedDataset, ModelSpec, OmegaForm,
    SruwParams, VariablePartition,
};
use crate::em_mar::{self, EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::gauss;
use crate::penalized::{self, PenaltyGrid};
use crate::ranking::{rank_variables_anchored, RankResult};
use crate::rng::derive_seed;

/// Scan settings: the consecutive-failure stopping count and the BIC
/// improvement required to admit a regressor.
#[derive(Debug, Clone, Copy)]
pub struct SelectionConfig {
    pub c: usize,
    pub reg_entry_threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            c: 3,
            reg_entry_threshold: 0.0,
        }
    }
}

/// One step of a relevance scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanStep {
    pub variable: usize,
    pub bic_diff: f64,
    pub entered: bool,
}

/// Clustering-block BIC provider. The MAR implementation lives here; the
/// class-dependent-mask variant implements the same trait, and tests can
/// inject stubs.
pub trait ClustBic {
    fn bic(&mut self, data: &MaskedDataset, cols: &[usize], k: usize) -> Result<f64>;
    /// Extra mechanism parameters counted by the selection criterion
    /// (zero under MAR).
    fn extra_param_count(&self, k: usize) -> usize {
        let _ = k;
        0
    }
}

/// MAR clustering BIC with memoization over column subsets.
pub struct MarClustBic {
    pub m: CovForm,
    pub cfg: EmConfig,
    cache: BTreeMap<(Vec<usize>, usize), f64>,
}

impl MarClustBic {
    pub fn new(m: CovForm, cfg: EmConfig) -> Self {
        Self {
            m,
            cfg,
            cache: BTreeMap::new(),
        }
    }
}

impl ClustBic for MarClustBic {
    fn bic(&mut self, data: &MaskedDataset, cols: &[usize], k: usize) -> Result<f64> {
        let key = (cols.to_vec(), k);
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let block = data.restrict_columns(cols)?;
        let v = em_mar::bic_clust(&block, k, self.m, &self.cfg)?;
        self.cache.insert(key, v);
        Ok(v)
    }
}

/// Relevance difference for adding variable `j` to the current relevant
/// set: clustering BIC gain minus the best regression explanation of `j`
/// from within the current set.
///
/// The empty-set base case scores multimodality of `j` alone:
/// `BIC_clust({j}, K) - BIC_clust({j}, 1)`.
pub fn bic_diff_relevance(
    data: &MaskedDataset,
    j: usize,
    s_cur: &[usize],
    k: usize,
    scorer: &mut dyn ClustBic,
    r_form: OmegaForm,
    cfg: &EmConfig,
    sel: &SelectionConfig,
) -> Result<f64> {
    if s_cur.contains(&j) {
        return Err(Error::ConfigParse(format!("variable {j} already in S")));
    }
    if s_cur.is_empty() {
        let with = scorer.bic(data, &[j], k)?;
        let without = scorer.bic(data, &[j], 1)?;
        return Ok(with - without);
    }
    let mut extended: Vec<usize> = s_cur.to_vec();
    extended.push(j);
    extended.sort_unstable();
    let bic_with = scorer.bic(data, &extended, k)?;
    let bic_without = scorer.bic(data, s_cur, k)?;
    let r_hat = stepwise_regress_r(data, j, s_cur, r_form, cfg, sel)?;
    let bic_regression = em_mar::bic_reg(data, &[j], &r_hat, r_form, cfg)?;
    Ok(bic_with - (bic_without + bic_regression))
}

/// Generic forward scan over `order`: enter a variable when its difference
/// is positive, reset the failure counter on success, stop after `c`
/// consecutive non-positive differences (or when `order` is exhausted).
pub fn scan_forward(
    order: &[usize],
    c: usize,
    mut diff: impl FnMut(usize, &[usize]) -> Result<f64>,
) -> Result<Vec<ScanStep>> {
    let mut steps = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut failures = 0usize;
    for &j in order {
        let d = diff(j, &current)?;
        let entered = d > 0.0;
        steps.push(ScanStep {
            variable: j,
            bic_diff: d,
            entered,
        });
        if entered {
            current.push(j);
            current.sort_unstable();
            failures = 0;
        } else {
            failures += 1;
            if failures >= c {
                break;
            }
        }
    }
    Ok(steps)
}

/// Replays a full-scan trajectory under stopping parameter `c`.
///
/// The scan decisions depend only on the accumulated set, never on `c`, so
/// the stopped scan is a prefix of the full trajectory.
pub fn s_from_trajectory(steps: &[ScanStep], c: usize) -> Vec<usize> {
    let mut s = Vec::new();
    let mut failures = 0usize;
    for step in steps {
        if step.entered {
            s.push(step.variable);
            failures = 0;
        } else {
            failures += 1;
            if failures >= c {
                break;
            }
        }
    }
    s.sort_unstable();
    s
}

/// Forward relevance scan in ranked order with the configured stopping
/// rule. Errors with `EmptyS` when no variable enters.
pub fn select_s(
    data: &MaskedDataset,
    ranked: &RankResult,
    k: usize,
    scorer: &mut dyn ClustBic,
    cfg: &EmConfig,
    sel: &SelectionConfig,
) -> Result<Vec<usize>> {
    let steps = scan_forward(&ranked.order, sel.c, |j, s_cur| {
        bic_diff_relevance(data, j, s_cur, k, scorer, OmegaForm::LC, cfg, sel)
    })?;
    let s = s_from_trajectory(&steps, sel.c);
    if s.is_empty() {
        return Err(Error::EmptyS);
    }
    Ok(s)
}

/// Full relevance-scan trajectory (no early stop), for stopping-parameter
/// sensitivity studies: every variable is visited and its decision
/// recorded.
pub fn select_s_trajectory(
    data: &MaskedDataset,
    ranked: &RankResult,
    k: usize,
    scorer: &mut dyn ClustBic,
    cfg: &EmConfig,
    sel: &SelectionConfig,
) -> Result<Vec<ScanStep>> {
    scan_forward(&ranked.order, usize::MAX, |j, s_cur| {
        bic_diff_relevance(data, j, s_cur, k, scorer, OmegaForm::LC, cfg, sel)
    })
}

/// Forward stepwise regressor choice for one target variable: repeatedly
/// add the candidate from `s` that improves the regression BIC the most,
/// while the improvement exceeds the entry threshold. Ties break to the
/// lower index.
pub fn stepwise_regress_r(
    data: &MaskedDataset,
    target: usize,
    s: &[usize],
    r_form: OmegaForm,
    cfg: &EmConfig,
    sel: &SelectionConfig,
) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Err(Error::EmptyS);
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut current_bic = em_mar::bic_reg(data, &[target], &[], r_form, cfg)?;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for &cand in s {
            if chosen.contains(&cand) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(cand);
            trial.sort_unstable();
            let bic = match em_mar::bic_reg(data, &[target], &trial, r_form, cfg) {
                Ok(b) => b,
                Err(Error::RankDeficient) => continue,
                Err(e) => return Err(e),
            };
            if best.as_ref().map_or(true, |&(_, b)| bic > b) {
                best = Some((cand, bic));
            }
        }
        match best {
            Some((cand, bic)) if bic - current_bic > sel.reg_entry_threshold => {
                chosen.push(cand);
                chosen.sort_unstable();
                current_bic = bic;
            }
            _ => break,
        }
    }
    Ok(chosen)
}

/// Reverse scan over the non-relevant variables: a variable joins W when
/// its stepwise regressor set is empty; the same consecutive-failure rule
/// (`c` variables in a row with nonempty regressors) ends the scan, and
/// everything not scanned joins U.
pub fn select_w_and_u(
    data: &MaskedDataset,
    s: &[usize],
    ranked: &RankResult,
    sel: &SelectionConfig,
    r_form: OmegaForm,
    cfg: &EmConfig,
) -> Result<(Vec<usize>, Vec<usize>, BTreeMap<usize, Vec<usize>>)> {
    let mut w = Vec::new();
    let mut u = Vec::new();
    let mut r_map = BTreeMap::new();
    let scan_order: Vec<usize> = ranked
        .order
        .iter()
        .rev()
        .copied()
        .filter(|j| !s.contains(j))
        .collect();
    let mut failures = 0usize;
    let mut stopped_at = scan_order.len();
    for (pos, &j) in scan_order.iter().enumerate() {
        let r_hat = stepwise_regress_r(data, j, s, r_form, cfg, sel)?;
        if r_hat.is_empty() {
            w.push(j);
            failures = 0;
        } else {
            u.push(j);
            r_map.insert(j, r_hat);
            failures += 1;
            if failures >= sel.c {
                stopped_at = pos + 1;
                break;
            }
        }
    }
    for &j in &scan_order[stopped_at..] {
        let r_hat = stepwise_regress_r(data, j, s, r_form, cfg, sel)?;
        u.push(j);
        r_map.insert(j, r_hat);
    }
    u.sort_unstable();
    w.sort_unstable();
    Ok((u, w, r_map))
}

fn union_of_regressors(r_map: &BTreeMap<usize, Vec<usize>>) -> Vec<usize> {
    let mut r: Vec<usize> = r_map.values().flatten().copied().collect();
    r.sort_unstable();
    r.dedup();
    r
}

/// Builds the full partition from scan outputs.
pub fn assemble_partition(
    d: usize,
    s: &[usize],
    u: &[usize],
    w: &[usize],
    r_map: &BTreeMap<usize, Vec<usize>>,
) -> Result<VariablePartition> {
    let part = VariablePartition::new(
        s.to_vec(),
        union_of_regressors(r_map),
        u.to_vec(),
        w.to_vec(),
    );
    validate_partition(&part, d)?;
    Ok(part)
}

/// Fits all three blocks independently: the mixture on S, the regression
/// of U on R, and the Gaussian on W.
pub fn fit_sruw(
    data: &MaskedDataset,
    part: &VariablePartition,
    spec: &ModelSpec,
    cfg: &EmConfig,
) -> Result<SruwParams> {
    validate_partition(part, data.n_cols())?;
    let s_block = data.restrict_columns(&part.s)?;
    let alpha = em_mar::fit(&s_block, spec.k, spec.m, cfg)?.params;
    sruw_from_alpha(data, part, spec, cfg, alpha)
}

/// Completes the regression and independence blocks around an
/// already-fitted clustering block.
pub(crate) fn sruw_from_alpha(
    data: &MaskedDataset,
    part: &VariablePartition,
    spec: &ModelSpec,
    cfg: &EmConfig,
    alpha: GmmParams,
) -> Result<SruwParams> {
    let (nu, nw) = (part.u.len(), part.w.len());
    let (intercept, coefficients, residual_cov) = if nu > 0 {
        let reg = em_mar::fit_regression(data, &part.u, &part.r, spec.r, cfg)?;
        (reg.intercept, reg.coefficients, reg.residual_cov)
    } else {
        (DVector::zeros(0), DMatrix::zeros(part.r.len(), 0), DMatrix::zeros(0, 0))
    };
    let (indep_mean, indep_cov) = if nw > 0 {
        let ind = em_mar::fit_indep(data, &part.w, spec.l, cfg)?;
        (ind.mean, ind.cov)
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    };
    let params = SruwParams {
        alpha,
        intercept,
        coefficients,
        residual_cov,
        indep_mean,
        indep_cov,
    };
    params.check_dims(part)?;
    Ok(params)
}

/// Additive selection criterion: clustering BIC plus regression BIC plus
/// independence BIC on the partition's blocks.
pub fn crit_bic(
    data: &MaskedDataset,
    part: &VariablePartition,
    spec: &ModelSpec,
    cfg: &EmConfig,
) -> Result<f64> {
    let mut scorer = MarClustBic::new(spec.m, *cfg);
    crit_bic_with(data, part, spec, cfg, &mut scorer)
}

/// Criterion with a caller-supplied clustering scorer (shared cache or
/// mask-aware variant).
pub fn crit_bic_with(
    data: &MaskedDataset,
    part: &VariablePartition,
    spec: &ModelSpec,
    cfg: &EmConfig,
    scorer: &mut dyn ClustBic,
) -> Result<f64> {
    validate_partition(part, data.n_cols())?;
    let mut total = scorer.bic(data, &part.s, spec.k)?;
    if !part.u.is_empty() {
        total += em_mar::bic_reg(data, &part.u, &part.r, spec.r, cfg)?;
    }
    if !part.w.is_empty() {
        total += em_mar::bic_indep(data, &part.w, spec.l, cfg)?;
    }
    Ok(total)
}

/// Log-density of the block model at a complete observation, straight from
/// the product form: mixture on S times regression on U times Gaussian
/// on W.
pub fn sruw_log_density(
    params: &SruwParams,
    part: &VariablePartition,
    y: &DVector<f64>,
) -> Result<f64> {
    params.check_dims(part)?;
    let y_s = DVector::from_fn(part.s.len(), |i, _| y[part.s[i]]);
    let mut terms = Vec::with_capacity(params.alpha.n_components());
    for k in 0..params.alpha.n_components() {
        terms.push(
            params.alpha.pi[k].ln()
                + gauss::log_mvn_pdf(&y_s, &params.alpha.mu[k], &params.alpha.sigma[k])?,
        );
    }
    let mut total = gauss::log_sum_exp(&terms)?;
    if !part.u.is_empty() {
        let y_u = DVector::from_fn(part.u.len(), |i, _| y[part.u[i]]);
        let y_r = DVector::from_fn(part.r.len(), |i, _| y[part.r[i]]);
        let mean = &params.intercept + params.coefficients.transpose() * y_r;
        total += gauss::log_mvn_pdf(&y_u, &mean, &params.residual_cov)?;
    }
    if !part.w.is_empty() {
        let y_w = DVector::from_fn(part.w.len(), |i, _| y[part.w[i]]);
        total += gauss::log_mvn_pdf(&y_w, &params.indep_mean, &params.indep_cov)?;
    }
    Ok(total)
}

/// Embeds the block model as a K-component Gaussian mixture over all D
/// variables (original variable order).
///
/// The regression coefficients are zero-padded from R-positions to
/// S-positions; each component's mean and covariance then follow the
/// conditional-Gaussian composition rules, with the W block independent.
pub fn sruw_to_global_gmm(params: &SruwParams, part: &VariablePartition) -> Result<GmmParams> {
    params.check_dims(part)?;
    let (ns, nu, nw) = (part.s.len(), part.u.len(), part.w.len());
    let d = ns + nu + nw;
    validate_partition(part, d)?;

    // Lambda: |S| x |U|, rows of beta scattered to the R positions in S
    let mut lambda = DMatrix::zeros(ns, nu);
    for (r_idx, &r_var) in part.r.iter().enumerate() {
        let s_idx = part
            .s
            .iter()
            .position(|&v| v == r_var)
            .ok_or(Error::RNotInS)?;
        for u_idx in 0..nu {
            lambda[(s_idx, u_idx)] = params.coefficients[(r_idx, u_idx)];
        }
    }

    // original-position lookup: where each block coordinate lands in [D]
    let mut position = vec![0usize; d];
    for (i, &v) in part.s.iter().enumerate() {
        position[v] = i;
    }
    for (i, &v) in part.u.iter().enumerate() {
        position[v] = ns + i;
    }
    for (i, &v) in part.w.iter().enumerate() {
        position[v] = ns + nu + i;
    }

    let k = params.alpha.n_components();
    let mut mu_out = Vec::with_capacity(k);
    let mut sigma_out = Vec::with_capacity(k);
    for c in 0..k {
        let mu_s = &params.alpha.mu[c];
        let sigma_s = &params.alpha.sigma[c];
        let mu_u = &params.intercept + lambda.transpose() * mu_s;
        let sigma_su = sigma_s * &lambda;
        let sigma_uu = &params.residual_cov + lambda.transpose() * sigma_s * &lambda;

        let mut mean_block = DVector::zeros(d);
        mean_block.rows_mut(0, ns).copy_from(mu_s);
        mean_block.rows_mut(ns, nu).copy_from(&mu_u);
        mean_block.rows_mut(ns + nu, nw).copy_from(&params.indep_mean);

        let mut cov_block = DMatrix::zeros(d, d);
        cov_block.view_mut((0, 0), (ns, ns)).copy_from(sigma_s);
        cov_block.view_mut((0, ns), (ns, nu)).copy_from(&sigma_su);
        cov_block
            .view_mut((ns, 0), (nu, ns))
            .copy_from(&sigma_su.transpose());
        cov_block.view_mut((ns, ns), (nu, nu)).copy_from(&sigma_uu);
        cov_block
            .view_mut((ns + nu, ns + nu), (nw, nw))
            .copy_from(&params.indep_cov);

        // permute from block order back to the original variable order
        let mean = DVector::from_fn(d, |j, _| mean_block[position[j]]);
        let cov = DMatrix::from_fn(d, d, |a, b| cov_block[(position[a], position[b])]);
        mu_out.push(mean);
        sigma_out.push(cov);
    }
    GmmParams::new(params.alpha.pi.clone(), mu_out, sigma_out)
}

/// Outcome of the whole selection pipeline.
#[derive(Debug, Clone)]
pub struct SelectedModel {
    pub spec: ModelSpec,
    pub partition: VariablePartition,
    pub params: SruwParams,
    pub crit: f64,
    /// Ranking scores of the winning (K, m) candidate.
    pub scores: Vec<usize>,
    pub fit: FitResult,
}

pub(crate) struct CandidateOutcome {
    pub spec: ModelSpec,
    pub partition: VariablePartition,
    pub crit: f64,
    pub scores: Vec<usize>,
}

/// Total free parameters of a specification on a partition, used only for
/// tie-breaking.
pub(crate) fn total_param_count(spec: &ModelSpec, part: &VariablePartition, extra: usize) -> usize {
    em_mar::clust_param_count(spec.k, part.s.len(), spec.m)
        + if part.u.is_empty() {
            0
        } else {
            part.u.len() + part.r.len() * part.u.len() + spec.r.df(part.u.len())
        }
        + if part.w.is_empty() {
            0
        } else {
            part.w.len() + spec.l.df(part.w.len())
        }
        + extra
}

/// Shared pipeline: rank, scan, and score one (K, m) candidate.
pub(crate) fn evaluate_candidate(
    data: &MaskedDataset,
    std_data: &MaskedDataset,
    k: usize,
    m: CovForm,
    grid: Option<&PenaltyGrid>,
    sel: &SelectionConfig,
    cfg: &EmConfig,
    scorer: &mut dyn ClustBic,
) -> Result<CandidateOutcome> {
    let d = data.n_cols();
    if k == 1 {
        // single-cluster baseline: no ranking signal, every variable kept
        let part = VariablePartition::all_relevant(d);
        let (spec, crit) = best_forms(data, &part, k, m, cfg, scorer)?;
        return Ok(CandidateOutcome {
            spec,
            partition: part,
            crit,
            scores: vec![0; d],
        });
    }
    let anchor = em_mar::fit(
        &MaskedDataset::from_complete(std_data.mean_imputed())?,
        k,
        CovForm::FullFree,
        cfg,
    )?
    .params;
    let weights = penalized::spectral_weights(
        &anchor.psi,
        penalized::DEFAULT_GAMMA_ADJ,
        penalized::DEFAULT_EPS,
    )?;
    let owned_grid;
    let grid = match grid {
        Some(g) => g,
        None => {
            owned_grid = penalized::default_grid_anchored(std_data, k, &anchor)?;
            &owned_grid
        }
    };
    let ranked = rank_variables_anchored(std_data, k, grid, &weights, cfg, Some(&anchor))?;
    let s = select_s(data, &ranked, k, scorer, cfg, sel)?;
    let (u, w, r_map) = select_w_and_u(data, &s, &ranked, sel, OmegaForm::LC, cfg)?;
    let part = assemble_partition(d, &s, &u, &w, &r_map)?;
    let (spec, crit) = best_forms(data, &part, k, m, cfg, scorer)?;
    Ok(CandidateOutcome {
        spec,
        partition: part,
        crit,
        scores: ranked.scores,
    })
}

/// Evaluates the residual/independence form menu at a fixed partition and
/// returns the best specification with its criterion value.
fn best_forms(
    data: &MaskedDataset,
    part: &VariablePartition,
    k: usize,
    m: CovForm,
    cfg: &EmConfig,
    scorer: &mut dyn ClustBic,
) -> Result<(ModelSpec, f64)> {
    let mut best: Option<(ModelSpec, f64)> = None;
    for r_form in [OmegaForm::LI, OmegaForm::LB, OmegaForm::LC] {
        for l_form in [GammaForm::LI, GammaForm::LB] {
            let spec = ModelSpec::new(k, m, r_form, l_form)?;
            let crit = crit_bic_with(data, part, &spec, cfg, scorer)?;
            let better = match &best {
                None => true,
                Some((b_spec, b_crit)) => {
                    crit > *b_crit
                        || (crit == *b_crit
                            && total_param_count(&spec, part, 0)
                                < total_param_count(b_spec, part, 0))
                }
            };
            if better {
                best = Some((spec, crit));
            }
        }
    }
    best.ok_or(Error::NoValidModel)
}

/// Full selection over candidate component counts and clustering
/// covariance forms; returns the criterion-maximizing model with ties
/// broken toward fewer components, then fewer free parameters.
pub fn select_model(
    data: &MaskedDataset,
    ks: &[usize],
    forms: &[CovForm],
    grid: Option<&PenaltyGrid>,
    sel: &SelectionConfig,
    cfg: &EmConfig,
) -> Result<SelectedModel> {
    if ks.is_empty() || forms.is_empty() {
        return Err(Error::NoValidModel);
    }
    let (std_data, _, _) = penalized::standardize(data)?;
    let mut outcomes: Vec<CandidateOutcome> = Vec::new();
    for (idx, (&k, &m)) in ks
        .iter()
        .flat_map(|k| forms.iter().map(move |m| (k, m)))
        .enumerate()
    {
        let cand_cfg = EmConfig {
            seed: derive_seed(cfg.seed, idx as u64),
            ..*cfg
        };
        let mut scorer = MarClustBic::new(m, cand_cfg);
        match evaluate_candidate(data, &std_data, k, m, grid, sel, &cand_cfg, &mut scorer) {
            Ok(out) => {
                if std::env::var_os("MIXSEL_SELECT_TRACE").is_some() {
                    eprintln!(
                        "candidate K={k} m={m}: crit {:.1} partition {}",
                        out.crit, out.partition
                    );
                }
                outcomes.push(out);
            }
            Err(Error::EmptyS) | Err(Error::AllStartsDegenerate(_)) => {
                if std::env::var_os("MIXSEL_SELECT_TRACE").is_some() {
                    eprintln!("candidate K={k} m={m}: no relevant variables");
                }
                continue;
            }
            Err(e) => return Err(e),
        }
    }
    let best = pick_best(outcomes)?;
    let params = fit_sruw(data, &best.partition, &best.spec, cfg)?;
    let s_block = data.restrict_columns(&best.partition.s)?;
    let fit = em_mar::fit(&s_block, best.spec.k, best.spec.m, cfg)?;
    Ok(SelectedModel {
        spec: best.spec,
        partition: best.partition,
        params,
        crit: best.crit,
        scores: best.scores,
        fit,
    })
}

pub(crate) fn pick_best(outcomes: Vec<CandidateOutcome>) -> Result<CandidateOutcome> {
    outcomes
        .into_iter()
        .min_by(|a, b| {
            b.crit
                .partial_cmp(&a.crit)
                .unwrap()
                .then(a.spec.k.cmp(&b.spec.k))
                .then(
                    total_param_count(&a.spec, &a.partition, 0)
                        .cmp(&total_param_count(&b.spec, &b.partition, 0)),
                )
        })
        .ok_or(Error::NoValidModel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn quick_cfg(seed: u64) -> EmConfig {
        EmConfig {
            max_iter: 200,
            tol: 1e-7,
            n_starts: 2,
            seed,
            init: em_mar::InitMethod::KmeansLike,
        }
    }

    #[test]
    fn scan_enters_on_positive_and_stops_after_c_failures() {
        // synthetic difference sequences through a stub scorer
        let diffs = [1.0, -1.0, 2.0, -1.0, -1.0, 5.0, 1.0];
        let order: Vec<usize> = (0..7).collect();
        let steps = scan_forward(&order, 2, |j, _| Ok(diffs[j])).unwrap();
        // stops after the two consecutive failures at 3 and 4
        assert_eq!(steps.len(), 5);
        assert_eq!(s_from_trajectory(&steps, 2), vec![0, 2]);
    }

    #[test]
    fn scan_with_c_equal_d_visits_everything() {
        let diffs = [1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 2.0];
        let order: Vec<usize> = (0..7).collect();
        let steps = scan_forward(&order, 7, |j, _| Ok(diffs[j])).unwrap();
        assert_eq!(steps.len(), 7);
        assert_eq!(s_from_trajectory(&steps, 7), vec![0, 6]);
        // a smaller c truncates the same trajectory
        assert_eq!(s_from_trajectory(&steps, 3), vec![0]);
    }

    #[test]
    fn scan_counter_resets_on_success() {
        let diffs = [-1.0, 1.0, -1.0, 1.0, -1.0, -1.0];
        let order: Vec<usize> = (0..6).collect();
        let steps = scan_forward(&order, 2, |j, _| Ok(diffs[j])).unwrap();
        assert_eq!(steps.len(), 6);
        assert_eq!(s_from_trajectory(&steps, 2), vec![1, 3]);
    }

    /// Two separated clusters in variables 0 and 1; variable 2 is a copy of
    /// 0 plus noise (redundant); variable 3 is pure noise.
    fn toy_dataset(rng: &mut ChaCha8Rng, n: usize) -> MaskedDataset {
        let mut values = DMatrix::zeros(n, 4);
        for i in 0..n {
            let c = if i % 2 == 0 { -3.0 } else { 3.0 };
            values[(i, 0)] = c + rng.sample::<f64, _>(StandardNormal);
            values[(i, 1)] = 0.5 * c + rng.sample::<f64, _>(StandardNormal);
            values[(i, 2)] = 1.0 + 2.0 * values[(i, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal);
            values[(i, 3)] = rng.sample::<f64, _>(StandardNormal);
        }
        MaskedDataset::from_complete(values).unwrap()
    }

    #[test]
    fn redundant_copy_loses_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let data = toy_dataset(&mut rng, 400);
        let cfg = quick_cfg(1);
        let sel = SelectionConfig::default();
        let mut scorer = MarClustBic::new(CovForm::FullFree, cfg);
        // variable 2 is linearly explained by S = {0}: relevance must lose
        let diff =
            bic_diff_relevance(&data, 2, &[0], 2, &mut scorer, OmegaForm::LC, &cfg, &sel).unwrap();
        assert!(diff < 0.0, "redundant variable should not join S ({diff})");
    }

    #[test]
    fn informative_variable_wins_relevance() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let data = toy_dataset(&mut rng, 400);
        let cfg = quick_cfg(2);
        let sel = SelectionConfig::default();
        let mut scorer = MarClustBic::new(CovForm::FullFree, cfg);
        // base case: variable 0 is strongly bimodal
        let diff =
            bic_diff_relevance(&data, 0, &[], 2, &mut scorer, OmegaForm::LC, &cfg, &sel).unwrap();
        assert!(diff > 0.0, "bimodal variable should enter S ({diff})");
    }

    #[test]
    fn stepwise_finds_true_regressor() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let data = toy_dataset(&mut rng, 400);
        let cfg = quick_cfg(3);
        let sel = SelectionConfig::default();
        // target 2 = linear in variable 0 only
        let r = stepwise_regress_r(&data, 2, &[0, 1], OmegaForm::LC, &cfg, &sel).unwrap();
        assert_eq!(r, vec![0]);
        // target 3 is noise: no regressors survive
        let r3 = stepwise_regress_r(&data, 3, &[0, 1], OmegaForm::LC, &cfg, &sel).unwrap();
        assert!(r3.is_empty(), "noise target admitted {r3:?}");
    }

    #[test]
    fn stepwise_breaks_ties_to_lower_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let n = 300;
        let mut values = DMatrix::zeros(n, 3);
        for i in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            values[(i, 0)] = x;
            values[(i, 1)] = x; // exact copy
            values[(i, 2)] = x + 1e-6 * rng.sample::<f64, _>(StandardNormal);
        }
        let data = MaskedDataset::from_complete(values).unwrap();
        let cfg = quick_cfg(4);
        let sel = SelectionConfig::default();
        let r = stepwise_regress_r(&data, 2, &[0, 1], OmegaForm::LC, &cfg, &sel).unwrap();
        assert_eq!(r, vec![0]);
    }

    #[test]
    fn w_scan_splits_redundant_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let data = toy_dataset(&mut rng, 500);
        let cfg = quick_cfg(5);
        let sel = SelectionConfig::default();
        let ranked = RankResult::from_scores(vec![3, 2, 1, 0]);
        let (u, w, r_map) =
            select_w_and_u(&data, &[0, 1], &ranked, &sel, OmegaForm::LC, &cfg).unwrap();
        assert_eq!(u, vec![2]);
        assert_eq!(w, vec![3]);
        assert_eq!(r_map.get(&2).unwrap(), &vec![0]);
    }

    fn random_sruw_params(
        rng: &mut ChaCha8Rng,
        part: &VariablePartition,
        k: usize,
    ) -> SruwParams {
        let (ns, nr, nu, nw) = (part.s.len(), part.r.len(), part.u.len(), part.w.len());
        let spd = |rng: &mut ChaCha8Rng, d: usize| -> DMatrix<f64> {
            if d == 0 {
                return DMatrix::zeros(0, 0);
            }
            let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            &a * a.transpose() + DMatrix::identity(d, d) * 0.7
        };
        let pi_raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
        let total: f64 = pi_raw.iter().sum();
        let pi: Vec<f64> = pi_raw.iter().map(|p| p / total).collect();
        let mu = (0..k)
            .map(|_| DVector::from_fn(ns, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let sigma = (0..k).map(|_| spd(rng, ns)).collect();
        SruwParams {
            alpha: GmmParams::new(pi, mu, sigma).unwrap(),
            intercept: DVector::from_fn(nu, |_, _| rng.sample::<f64, _>(StandardNormal)),
            coefficients: DMatrix::from_fn(nr, nu, |_, _| rng.sample::<f64, _>(StandardNormal)),
            residual_cov: spd(rng, nu),
            indep_mean: DVector::from_fn(nw, |_, _| rng.sample::<f64, _>(StandardNormal)),
            indep_cov: spd(rng, nw),
        }
    }

    #[test]
    fn embedding_identity_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let part = VariablePartition::new(vec![0, 2], vec![0], vec![1, 4], vec![3, 5]);
        for _ in 0..20 {
            let params = random_sruw_params(&mut rng, &part, 3);
            let gmm = sruw_to_global_gmm(&params, &part).unwrap();
            for _ in 0..50 {
                let y = DVector::from_fn(6, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
                let direct = sruw_log_density(&params, &part, &y).unwrap();
                let mut terms = Vec::new();
                for c in 0..3 {
                    terms.push(
                        gmm.pi[c].ln() + gauss::log_mvn_pdf(&y, &gmm.mu[c], &gmm.sigma[c]).unwrap(),
                    );
                }
                let embedded = gauss::log_sum_exp(&terms).unwrap();
                assert_abs_diff_eq!(direct, embedded, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn embedding_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        // U and W empty: identity embedding
        let part = VariablePartition::new(vec![0, 1], vec![], vec![], vec![]);
        let params = random_sruw_params(&mut rng, &part, 2);
        let gmm = sruw_to_global_gmm(&params, &part).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!((&gmm.mu[k] - &params.alpha.mu[k]).norm(), 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(
                (&gmm.sigma[k] - &params.alpha.sigma[k]).abs().max(),
                0.0,
                epsilon = 1e-14
            );
        }

        // beta = 0 decouples the blocks
        let part2 = VariablePartition::new(vec![0], vec![], vec![1], vec![2]);
        let mut params2 = random_sruw_params(&mut rng, &part2, 2);
        params2.coefficients = DMatrix::zeros(0, 1);
        let gmm2 = sruw_to_global_gmm(&params2, &part2).unwrap();
        for k in 0..2 {
            assert_eq!(gmm2.sigma[k][(0, 1)], 0.0);
            assert_eq!(gmm2.sigma[k][(1, 2)], 0.0);
            assert_abs_diff_eq!(gmm2.mu[k][1], params2.intercept[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn crit_bic_reduces_to_clustering_when_blocks_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let data = toy_dataset(&mut rng, 200).restrict_columns(&[0, 1]).unwrap();
        let cfg = quick_cfg(6);
        let part = VariablePartition::all_relevant(2);
        let spec = ModelSpec::new(2, CovForm::FullFree, OmegaForm::LC, GammaForm::LB).unwrap();
        let crit = crit_bic(&data, &part, &spec, &cfg).unwrap();
        let clust = em_mar::bic_clust(&data, 2, CovForm::FullFree, &cfg).unwrap();
        assert_abs_diff_eq!(crit, clust, epsilon = 1e-9);
    }

    #[test]
    fn crit_bic_is_local_in_block_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let data = toy_dataset(&mut rng, 300);
        let cfg = quick_cfg(7);
        let spec = ModelSpec::new(2, CovForm::FullFree, OmegaForm::LC, GammaForm::LB).unwrap();
        // variable 3 as W vs as U (regressed on R = {0})
        let part_w = VariablePartition::new(vec![0, 1], vec![0], vec![2], vec![3]);
        let part_u = VariablePartition::new(vec![0, 1], vec![0], vec![2, 3], vec![]);
        let crit_w = crit_bic(&data, &part_w, &spec, &cfg).unwrap();
        let crit_u = crit_bic(&data, &part_u, &spec, &cfg).unwrap();
        let reg_w = em_mar::bic_reg(&data, &[2], &[0], OmegaForm::LC, &cfg).unwrap()
            + em_mar::bic_indep(&data, &[3], GammaForm::LB, &cfg).unwrap();
        let reg_u = em_mar::bic_reg(&data, &[2, 3], &[0], OmegaForm::LC, &cfg).unwrap();
        assert_abs_diff_eq!(crit_w - crit_u, reg_w - reg_u, epsilon = 1e-9);
    }

    #[test]
    fn crit_bic_is_label_permutation_invariant() {
        // permuting component labels leaves the clustering BIC unchanged
        // because the fit searches over starts; check at the loglik level
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let data = toy_dataset(&mut rng, 150).restrict_columns(&[0, 1]).unwrap();
        let params = GmmParams::new(
            vec![0.4, 0.6],
            vec![DVector::from_vec(vec![-3.0, -1.5]), DVector::from_vec(vec![3.0, 1.5])],
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        )
        .unwrap();
        let swapped = GmmParams::new(
            vec![0.6, 0.4],
            vec![params.mu[1].clone(), params.mu[0].clone()],
            vec![params.sigma[1].clone(), params.sigma[0].clone()],
        )
        .unwrap();
        let a = em_mar::observed_loglik(&data, &params).unwrap();
        let b = em_mar::observed_loglik(&data, &swapped).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_sruw_assembles_consistent_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let data = toy_dataset(&mut rng, 500);
        let cfg = quick_cfg(8);
        let part = VariablePartition::new(vec![0, 1], vec![0], vec![2], vec![3]);
        let spec = ModelSpec::new(2, CovForm::FullFree, OmegaForm::LC, GammaForm::LB).unwrap();
        let params = fit_sruw(&data, &part, &spec, &cfg).unwrap();
        params.check_dims(&part).unwrap();
        assert!((params.coefficients[(0, 0)] - 2.0).abs() < 0.2);
        // factorization: joint density equals the sum of block densities
        for i in 0..20 {
            let y = DVector::from_fn(4, |j, _| data.value(i, j));
            let direct = sruw_log_density(&params, &part, &y).unwrap();
            let gmm = sruw_to_global_gmm(&params, &part).unwrap();
            let mut terms = Vec::new();
            for c in 0..2 {
                terms.push(
                    gmm.pi[c].ln() + gauss::log_mvn_pdf(&y, &gmm.mu[c], &gmm.sigma[c]).unwrap(),
                );
            }
            let embedded = gauss::log_sum_exp(&terms).unwrap();
            assert_abs_diff_eq!(direct, embedded, epsilon = 1e-10);
        }
    }

    #[test]
    fn select_model_k1_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let data = toy_dataset(&mut rng, 120);
        let cfg = quick_cfg(9);
        let sel = SelectionConfig::default();
        let out = select_model(&data, &[1], &[CovForm::FullFree], None, &sel, &cfg).unwrap();
        assert_eq!(out.spec.k, 1);
        assert_eq!(out.partition.s, vec![0, 1, 2, 3]);
    }

    #[test]
    fn select_model_recovers_toy_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let data = toy_dataset(&mut rng, 600);
        let cfg = quick_cfg(10);
        let sel = SelectionConfig { c: 2, ..Default::default() };
        let out = select_model(&data, &[1, 2], &[CovForm::FullFree], None, &sel, &cfg).unwrap();
        assert_eq!(out.spec.k, 2, "chose K = {}", out.spec.k);
        assert!(
            out.partition.s.contains(&0),
            "partition: {}",
            out.partition
        );
        assert!(!out.partition.s.contains(&3), "noise entered S: {}", out.partition);
        validate_partition(&out.partition, 4).unwrap();
    }
}
