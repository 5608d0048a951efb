//! Stage-one variable ranking: count, per variable, at how many
//! regularization-grid points the penalized fit keeps its mean nonzero,
//! then order variables by that score.

use crate::data::{GmmParams, MaskedDataset};
use crate::em_mar::EmConfig;
use crate::error::{Error, Result};
use crate::penalized::{fit_penalized_tied, fit_penalized_tied_from, PenaltyGrid, PenaltyWeights};

/// Mean coordinates with absolute value above this count as nonzero
/// (standardized scale).
pub const NONZERO_TOL: f64 = 1e-10;

/// Ranking outcome: per-variable scores and the descending-score order
/// (ties broken by ascending variable index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankResult {
    pub scores: Vec<usize>,
    pub order: Vec<usize>,
}

impl RankResult {
    pub(crate) fn from_scores(scores: Vec<usize>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by_key(|&d| (std::cmp::Reverse(scores[d]), d));
        Self { scores, order }
    }
}

/// Marks variables whose mean is nonzero in any component.
fn support(params: &GmmParams) -> Vec<bool> {
    let d = params.dim();
    (0..d)
        .map(|j| params.mu.iter().any(|mu| mu[j].abs() > NONZERO_TOL))
        .collect()
}

/// Scores every variable over the full `(lambda, rho)` grid.
///
/// Per `rho`, one warm-started path over increasing `lambda`: the first
/// point uses the configured multi-start, later points continue from the
/// previous solution. A grid point whose warm continuation degenerates
/// (a component dies under heavy shrinkage) is retried fresh; if that also
/// degenerates the point contributes no score and the path restarts.
pub fn rank_variables(
    data: &MaskedDataset,
    k: usize,
    grid: &PenaltyGrid,
    p: &PenaltyWeights,
    cfg: &EmConfig,
) -> Result<RankResult> {
    // unpenalized mixture solution used to anchor each path start, so the
    // warm path anneals away from the full structure instead of whatever
    // local optimum a shrunk init lands in
    let anchor = crate::em_mar::fit(
        &MaskedDataset::from_complete(data.mean_imputed())?,
        k,
        crate::data::CovForm::FullFree,
        cfg,
    )
    .ok()
    .map(|f| f.params);
    rank_variables_anchored(data, k, grid, p, cfg, anchor.as_ref())
}

/// Ranking with a caller-supplied unpenalized anchor solution.
pub fn rank_variables_anchored(
    data: &MaskedDataset,
    k: usize,
    grid: &PenaltyGrid,
    p: &PenaltyWeights,
    cfg: &EmConfig,
    anchor: Option<&crate::data::GmmParams>,
) -> Result<RankResult> {
    let d = data.n_cols();
    let mut scores = vec![0usize; d];
    for &rho in &grid.rhos {
        let mut warm: Option<GmmParams> = None;
        for &lambda in &grid.lambdas {
            let attempt = match &warm {
                None => match anchor {
                    // the path anneals away from the unpenalized solution:
                    // basin continuity is the point of the warm path
                    Some(a) => match fit_penalized_tied_from(data, lambda, rho, p, cfg, a) {
                        Err(Error::EmptyComponent(_)) => {
                            fit_penalized_tied(data, k, lambda, rho, p, cfg)
                        }
                        other => other,
                    },
                    None => fit_penalized_tied(data, k, lambda, rho, p, cfg),
                },
                Some(init) => match fit_penalized_tied_from(data, lambda, rho, p, cfg, init) {
                    Err(Error::EmptyComponent(_)) => {
                        fit_penalized_tied(data, k, lambda, rho, p, cfg)
                    }
                    other => other,
                },
            };
            match attempt {
                Ok(fit) => {
                    for (j, &nonzero) in support(&fit.params).iter().enumerate() {
                        if nonzero {
                            scores[j] += 1;
                        }
                    }
                    warm = Some(fit.params);
                }
                Err(Error::EmptyComponent(_)) | Err(Error::AllStartsDegenerate(_)) => {
                    warm = None;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(RankResult::from_scores(scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalized::standardize;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_scores_keep_identity_order() {
        let r = RankResult::from_scores(vec![0, 0, 0, 0]);
        assert_eq!(r.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_nonzero_leads() {
        let r = RankResult::from_scores(vec![0, 0, 3, 0]);
        assert_eq!(r.order[0], 2);
        assert_eq!(r.order[1..], [0, 1, 3]);
    }

    #[test]
    fn ties_break_by_index() {
        let r = RankResult::from_scores(vec![2, 5, 5, 2]);
        assert_eq!(r.order, vec![1, 2, 0, 3]);
    }

    fn separated_in_third_var(rng: &mut ChaCha8Rng, n: usize) -> MaskedDataset {
        let mut values = DMatrix::zeros(n, 3);
        for i in 0..n {
            let c = if i % 2 == 0 { -4.0 } else { 4.0 };
            values[(i, 0)] = rng.sample::<f64, _>(StandardNormal);
            values[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
            values[(i, 2)] = c + rng.sample::<f64, _>(StandardNormal);
        }
        MaskedDataset::from_complete(values).unwrap()
    }

    #[test]
    fn informative_variable_wins_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let raw = separated_in_third_var(&mut rng, 400);
        let (data, _, _) = standardize(&raw).unwrap();
        let cfg = EmConfig {
            n_starts: 2,
            max_iter: 200,
            ..EmConfig::default().with_seed(3)
        };
        let grid = PenaltyGrid::new(vec![1.0, 10.0, 60.0], vec![0.3]).unwrap();
        let p = PenaltyWeights::uniform(2, 3);
        let ranked = rank_variables(&data, 2, &grid, &p, &cfg).unwrap();
        assert_eq!(ranked.order[0], 2, "scores: {:?}", ranked.scores);
        assert!(ranked.scores[2] > ranked.scores[0]);
        assert!(ranked.scores[2] > ranked.scores[1]);
        for &s in &ranked.scores {
            assert!(s <= grid.len());
        }
    }

    #[test]
    fn ranking_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let raw = separated_in_third_var(&mut rng, 300);
        let (data, _, _) = standardize(&raw).unwrap();
        let cfg = EmConfig {
            n_starts: 2,
            max_iter: 150,
            ..EmConfig::default().with_seed(9)
        };
        let grid = PenaltyGrid::new(vec![0.5, 5.0], vec![0.1, 1.0]).unwrap();
        let p = PenaltyWeights::uniform(2, 3);
        let r1 = rank_variables(&data, 2, &grid, &p, &cfg).unwrap();
        let r2 = rank_variables(&data, 2, &grid, &p, &cfg).unwrap();
        assert_eq!(r1, r2);
    }
}
