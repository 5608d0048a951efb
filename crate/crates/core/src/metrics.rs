//! Evaluation metrics: adjusted Rand index, normalized imputation errors,
//! the composite imputation/similarity score, and selection-accuracy flags.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Clustering and imputation summary for one fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ari: f64,
    pub nrmse: f64,
    pub wnrmse: f64,
    pub ciie: Option<f64>,
    pub correct_k: bool,
    pub correct_s: bool,
}

/// Adjusted Rand index via the contingency-table closed form.
///
/// Returns 0 when the adjustment denominator vanishes (both partitions
/// trivial). The value can be negative for worse-than-chance agreement,
/// even though the index is usually quoted on [0, 1].
pub fn ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(Error::Empty);
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_insert(0) += 1;
        *rows.entry(a).or_insert(0) += 1;
        *cols.entry(b).or_insert(0) += 1;
    }
    let choose2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let sum_cells: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((sum_cells - expected) / denom)
}

/// Root-mean-square error over the masked cells divided by `sigma`, the
/// standard deviation of the true values at those cells.
pub fn nrmse(truth: &[f64], imputed: &[f64], sigma: f64) -> Result<f64> {
    if truth.len() != imputed.len() {
        return Err(Error::LengthMismatch(truth.len(), imputed.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty);
    }
    if sigma <= 0.0 {
        return Err(Error::ZeroSigma);
    }
    let mse = truth
        .iter()
        .zip(imputed)
        .map(|(t, i)| (t - i) * (t - i))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(mse.sqrt() / sigma)
}

/// Population standard deviation of the true values at the masked cells,
/// the normalizer used by [`nrmse`].
pub fn nrmse_sigma(truth: &[f64]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Empty);
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let var = truth.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / truth.len() as f64;
    if var <= 0.0 {
        return Err(Error::ZeroSigma);
    }
    Ok(var.sqrt())
}

/// Weighted average of per-group NRMSE values; the weights are the missing
/// cell counts of the groups.
pub fn wnrmse(per_group: &[f64], weights: &[f64]) -> Result<f64> {
    if per_group.len() != weights.len() {
        return Err(Error::LengthMismatch(per_group.len(), weights.len()));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::BadWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    Ok(per_group
        .iter()
        .zip(weights)
        .map(|(v, w)| v * w)
        .sum::<f64>()
        / total)
}

/// Composite score `alpha * (1 - nrmse) + beta * similarity`, clamped to
/// [0, 1]. Report-only; never used for selection.
pub fn ciie(nrmse: f64, similarity: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 || (alpha + beta - 1.0).abs() > 1e-12 {
        return Err(Error::BadWeights);
    }
    Ok((alpha * (1.0 - nrmse) + beta * similarity).clamp(0.0, 1.0))
}

/// Exact-match flags for the chosen component count and relevant set.
pub fn selection_accuracy(
    chosen_k: usize,
    chosen_s: &[usize],
    truth_k: usize,
    truth_s: &[usize],
) -> (bool, bool) {
    let mut a = chosen_s.to_vec();
    let mut b = truth_s.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (chosen_k == truth_k, a == b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Pair-enumeration oracle: agreement counts over all unordered pairs.
    fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut n11, mut n00, mut n10, mut n01) = (0f64, 0f64, 0f64, 0f64);
        for i in 0..n {
            for j in (i + 1)..n {
                let same_a = a[i] == a[j];
                let same_b = b[i] == b[j];
                match (same_a, same_b) {
                    (true, true) => n11 += 1.0,
                    (false, false) => n00 += 1.0,
                    (true, false) => n10 += 1.0,
                    (false, true) => n01 += 1.0,
                }
            }
        }
        let total = n11 + n00 + n10 + n01;
        let expected = (n11 + n10) * (n11 + n01) / total;
        let max_index = 0.5 * ((n11 + n10) + (n11 + n01));
        let denom = max_index - expected;
        if denom == 0.0 {
            0.0
        } else {
            (n11 - expected) / denom
        }
    }

    #[test]
    fn ari_identical_is_one() {
        let labels = vec![0, 0, 1, 2, 1, 0];
        assert_abs_diff_eq!(ari(&labels, &labels).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn ari_degenerate_denominator_is_zero() {
        let a = vec![0, 0, 0, 0];
        let b = vec![0, 1, 2, 3];
        assert_eq!(ari(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn ari_matches_pair_enumeration() {
        let a = vec![0, 0, 1, 1];
        let b = vec![0, 1, 1, 1];
        assert_abs_diff_eq!(ari(&a, &b).unwrap(), ari_pairs(&a, &b), epsilon = 1e-14);
    }

    #[test]
    fn ari_exhaustive_small_partitions() {
        // all label vectors on up to 6 elements with up to 3 blocks
        for n in 2..=6usize {
            let combos = 3usize.pow(n as u32);
            for ca in 0..combos {
                let a: Vec<usize> = (0..n).map(|i| ca / 3usize.pow(i as u32) % 3).collect();
                for cb in 0..combos {
                    let b: Vec<usize> = (0..n).map(|i| cb / 3usize.pow(i as u32) % 3).collect();
                    let got = ari(&a, &b).unwrap();
                    let want = ari_pairs(&a, &b);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "n = {n}: {a:?} vs {b:?}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn ari_symmetry_and_relabeling() {
        let a = vec![0, 1, 1, 2, 0, 2, 1];
        let b = vec![1, 1, 0, 2, 2, 0, 0];
        assert_eq!(ari(&a, &b).unwrap(), ari(&b, &a).unwrap());
        // relabel b: 0 -> 5, 1 -> 9, 2 -> 7
        let relabeled: Vec<usize> = b.iter().map(|&x| [5, 9, 7][x]).collect();
        assert_eq!(ari(&a, &b).unwrap(), ari(&a, &relabeled).unwrap());
    }

    #[test]
    fn ari_length_mismatch() {
        assert!(matches!(
            ari(&[0, 1], &[0, 1, 2]),
            Err(Error::LengthMismatch(2, 3))
        ));
    }

    #[test]
    fn nrmse_basics() {
        let truth = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(nrmse(&truth, &truth, 1.0).unwrap(), 0.0);
        // constant-mean imputation scores exactly 1 with the population sd
        let sigma = nrmse_sigma(&truth).unwrap();
        let mean = 2.5;
        let imputed = vec![mean; 4];
        assert_abs_diff_eq!(nrmse(&truth, &imputed, sigma).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn nrmse_matches_direct_formula() {
        let truth = vec![0.3, -1.2, 2.5, 0.0, 1.1];
        let imputed = vec![0.1, -1.0, 2.0, 0.3, 1.4];
        let sigma = 0.77;
        let direct = (truth
            .iter()
            .zip(&imputed)
            .map(|(t, i)| (t - i) * (t - i))
            .sum::<f64>()
            / 5.0)
            .sqrt()
            / sigma;
        assert_abs_diff_eq!(
            nrmse(&truth, &imputed, sigma).unwrap(),
            direct,
            epsilon = 1e-14
        );
    }

    #[test]
    fn nrmse_errors() {
        assert!(matches!(nrmse(&[], &[], 1.0), Err(Error::Empty)));
        assert!(matches!(nrmse(&[1.0], &[1.0], 0.0), Err(Error::ZeroSigma)));
    }

    #[test]
    fn wnrmse_cases() {
        assert_abs_diff_eq!(wnrmse(&[0.4], &[3.0]).unwrap(), 0.4, epsilon = 1e-15);
        // equal values are a fixed point for any weights
        assert_abs_diff_eq!(
            wnrmse(&[0.3, 0.3, 0.3], &[1.0, 5.0, 2.0]).unwrap(),
            0.3,
            epsilon = 1e-15
        );
        // hand arithmetic: (1*0.1 + 2*0.2 + 3*0.3) / 6 = 7/30
        assert_abs_diff_eq!(
            wnrmse(&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0]).unwrap(),
            7.0 / 30.0,
            epsilon = 1e-14
        );
        assert!(matches!(
            wnrmse(&[0.1], &[0.0]),
            Err(Error::ZeroWeightSum)
        ));
    }

    #[test]
    fn wnrmse_bounded_by_extremes() {
        let vals = [0.15, 0.6, 0.31];
        let weights = [2.0, 1.0, 4.0];
        let w = wnrmse(&vals, &weights).unwrap();
        assert!(w >= 0.15 && w <= 0.6);
    }

    #[test]
    fn ciie_cases() {
        assert_abs_diff_eq!(ciie(0.0, 1.0, 0.5, 0.5).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ciie(0.2, 0.9, 1.0, 0.0).unwrap(), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(ciie(0.2, 0.6, 0.5, 0.5).unwrap(), 0.7, epsilon = 1e-15);
        // clamped at zero for terrible imputations
        assert_eq!(ciie(5.0, 0.0, 1.0, 0.0).unwrap(), 0.0);
        assert!(matches!(ciie(0.1, 0.2, 0.6, 0.6), Err(Error::BadWeights)));
    }

    #[test]
    fn selection_accuracy_flags() {
        assert_eq!(selection_accuracy(4, &[0, 1, 2], 4, &[2, 1, 0]), (true, true));
        assert_eq!(selection_accuracy(4, &[0, 1], 4, &[0, 1, 2]), (true, false));
        assert_eq!(selection_accuracy(3, &[0, 1, 2], 4, &[0, 1, 2]), (false, true));
    }
}
