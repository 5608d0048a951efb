//! Gaussian density algebra: Cholesky-based log-densities, observed-block
//! marginals, conditionals for missing blocks, and a stable log-sum-exp.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Relative eigenvalue threshold below which a covariance is floored.
const EIG_RATIO_FLOOR: f64 = 1e-10;
/// Ridge added to near-singular covariances, scaled by trace/d.
const RIDGE_SCALE: f64 = 1e-8;

/// Split of `[d]` into observed and missing index lists, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndex {
    pub observed: Vec<usize>,
    pub missing: Vec<usize>,
}

impl BlockIndex {
    /// Builds the block split from the observed indices; the missing part is
    /// the complement in `[d]`. The observed part must be nonempty.
    pub fn from_observed(mut observed: Vec<usize>, d: usize) -> Result<Self> {
        observed.sort_unstable();
        observed.dedup();
        if observed.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(&last) = observed.last() {
            if last >= d {
                return Err(Error::IndexOutOfRange(last, d));
            }
        }
        let missing = (0..d).filter(|i| !observed.contains(i)).collect();
        Ok(Self { observed, missing })
    }

    pub fn dim(&self) -> usize {
        self.observed.len() + self.missing.len()
    }
}

/// Symmetrizes and, when the smallest eigenvalue falls below
/// `1e-10 * max eigenvalue`, adds `1e-8 * trace/d` to the diagonal.
///
/// Returns the (possibly floored) matrix and whether the floor engaged.
pub fn floor_spd(sigma: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let d = sigma.nrows();
    let mut sym = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            sym[(i, j)] = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
        }
    }
    let eig = sym.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig >= EIG_RATIO_FLOOR * max_eig.max(0.0) && min_eig > 0.0 {
        return (sym, false);
    }
    let mut scale = sym.trace() / d as f64;
    if scale <= 0.0 {
        scale = 1.0;
    }
    let ridge = RIDGE_SCALE * scale;
    for i in 0..d {
        sym[(i, i)] += ridge;
    }
    (sym, true)
}

/// Cholesky factorization with the degeneracy floor applied first.
pub fn spd_cholesky(sigma: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    let (floored, regularized) = floor_spd(sigma);
    match Cholesky::new(floored) {
        Some(c) => Ok((c, regularized)),
        None => Err(Error::NotSpd),
    }
}

/// Log-density of the multivariate normal at `y`, computed through the
/// Cholesky factor of `sigma`.
pub fn log_mvn_pdf(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let (chol, _) = spd_cholesky(sigma)?;
    Ok(log_mvn_pdf_prefactored(y, mu, &chol))
}

/// Log-density using a precomputed Cholesky factor.
pub fn log_mvn_pdf_prefactored(
    y: &DVector<f64>,
    mu: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let d = y.len() as f64;
    let diff = y - mu;
    // solve L z = diff, then the quadratic form is |z|^2
    let z = chol.l_dirty().solve_lower_triangular(&diff).expect("nonsingular L");
    let quad = z.norm_squared();
    let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (d * LN_2PI + ln_det + quad)
}

/// Sub-vector and principal submatrix at the observed indices.
pub fn marginal_block(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    idx: &BlockIndex,
) -> (DVector<f64>, DMatrix<f64>) {
    let o = &idx.observed;
    let mu_o = DVector::from_fn(o.len(), |i, _| mu[o[i]]);
    let sigma_oo = DMatrix::from_fn(o.len(), o.len(), |i, j| sigma[(o[i], o[j])]);
    (mu_o, sigma_oo)
}

/// Conditional mean and covariance of the missing block given the observed
/// values: the Schur-complement identities
/// `mu_m + Sigma_mo Sigma_oo^{-1} (y_o - mu_o)` and
/// `Sigma_mm - Sigma_mo Sigma_oo^{-1} Sigma_om`.
pub fn conditional_block(
    y_o: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    idx: &BlockIndex,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (o, m) = (&idx.observed, &idx.missing);
    if y_o.len() != o.len() {
        return Err(Error::DimensionMismatch(format!(
            "observed vector has {} entries, index has {}",
            y_o.len(),
            o.len()
        )));
    }
    let mu_m = DVector::from_fn(m.len(), |i, _| mu[m[i]]);
    if m.is_empty() {
        return Ok((mu_m, DMatrix::zeros(0, 0)));
    }
    let (mu_o, sigma_oo) = marginal_block(mu, sigma, idx);
    let sigma_mo = DMatrix::from_fn(m.len(), o.len(), |i, j| sigma[(m[i], o[j])]);
    let sigma_mm = DMatrix::from_fn(m.len(), m.len(), |i, j| sigma[(m[i], m[j])]);
    let (chol_oo, _) = spd_cholesky(&sigma_oo)?;
    let solved = chol_oo.solve(&(y_o - &mu_o));
    let mu_cond = &mu_m + &sigma_mo * solved;
    let cross = chol_oo.solve(&sigma_mo.transpose());
    let sigma_cond = &sigma_mm - &sigma_mo * cross;
    Ok((mu_cond, sigma_cond))
}

/// `ln sum exp(xs)` with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty);
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Direct determinant/inverse evaluation, independent of the Cholesky
    /// path.
    fn dense_log_mvn(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
        let d = y.len() as f64;
        let det = sigma.determinant();
        let inv = sigma.clone().try_inverse().unwrap();
        let diff = y - mu;
        let quad = (diff.transpose() * inv * &diff)[(0, 0)];
        -0.5 * (d * LN_2PI + det.ln() + quad)
    }

    #[test]
    fn standard_normal_at_mode() {
        let y = DVector::zeros(1);
        let mu = DVector::zeros(1);
        let sigma = DMatrix::identity(1, 1);
        let v = log_mvn_pdf(&y, &mu, &sigma).unwrap();
        assert_abs_diff_eq!(v, -0.5 * LN_2PI, epsilon = 1e-12);
        assert_abs_diff_eq!(v, -0.9189385, epsilon = 1e-7);
    }

    #[test]
    fn identity_covariance_mode() {
        for d in 1..=5 {
            let y = DVector::from_element(d, 0.7);
            let sigma = DMatrix::identity(d, d);
            let v = log_mvn_pdf(&y, &y, &sigma).unwrap();
            assert_abs_diff_eq!(v, -(d as f64 / 2.0) * LN_2PI, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let sigma = random_spd(&mut rng, 3);
            let mu = random_vec(&mut rng, 3);
            let y = random_vec(&mut rng, 3);
            let a = log_mvn_pdf(&y, &mu, &sigma).unwrap();
            let b = dense_log_mvn(&y, &mu, &sigma);
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn not_spd_is_reported() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let y = DVector::zeros(2);
        assert!(matches!(
            log_mvn_pdf(&y, &y, &sigma),
            Err(Error::NotSpd)
        ));
    }

    #[test]
    fn floor_engages_on_singular_scatter() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (floored, engaged) = floor_spd(&sigma);
        assert!(engaged);
        assert!(Cholesky::new(floored).is_some());
        let (_, engaged_zero) = floor_spd(&DMatrix::zeros(2, 2));
        assert!(engaged_zero);
    }

    #[test]
    fn marginal_scalar_and_identity() {
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let idx = BlockIndex::from_observed(vec![0], 2).unwrap();
        let (mu_o, sig_oo) = marginal_block(&mu, &sigma, &idx);
        assert_eq!(mu_o[0], 1.0);
        assert_eq!(sig_oo[(0, 0)], 4.0);

        let idx_full = BlockIndex::from_observed(vec![0, 1], 2).unwrap();
        let (mu_f, sig_f) = marginal_block(&mu, &sigma, &idx_full);
        assert_eq!(mu_f, mu);
        assert_eq!(sig_f, sigma);
    }

    #[test]
    fn marginal_stays_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let sigma = random_spd(&mut rng, 3);
            let idx = BlockIndex::from_observed(vec![0, 2], 3).unwrap();
            let (_, sub) = marginal_block(&DVector::zeros(3), &sigma, &idx);
            let eig = sub.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn conditional_diagonal_is_marginal() {
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let idx = BlockIndex::from_observed(vec![0], 3).unwrap();
        let y_o = DVector::from_vec(vec![5.0]);
        let (mu_c, sig_c) = conditional_block(&y_o, &mu, &sigma, &idx).unwrap();
        assert_abs_diff_eq!(mu_c[0], -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(mu_c[1], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(sig_c[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sig_c[(1, 1)], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sig_c[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn conditional_bivariate_textbook() {
        let rho = 0.6;
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let idx = BlockIndex::from_observed(vec![0], 2).unwrap();
        let y0 = 1.8;
        let (mu_c, sig_c) =
            conditional_block(&DVector::from_vec(vec![y0]), &mu, &sigma, &idx).unwrap();
        assert_abs_diff_eq!(mu_c[0], 2.0 + rho * (y0 - 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(sig_c[(0, 0)], 1.0 - rho * rho, epsilon = 1e-12);
    }

    #[test]
    fn conditional_matches_rejection_sampling() {
        // windowed rejection sampler around a fixed observed value
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let sigma = random_spd(&mut rng, d);
        let mu = random_vec(&mut rng, d);
        let idx = BlockIndex::from_observed(vec![0, 2], d).unwrap();
        let chol = Cholesky::new(sigma.clone()).unwrap();
        let y_target = DVector::from_vec(vec![mu[0] + 0.4, mu[2] - 0.3]);
        let window = [0.15 * sigma[(0, 0)].sqrt(), 0.15 * sigma[(2, 2)].sqrt()];

        let mut kept: Vec<[f64; 2]> = Vec::new();
        for _ in 0..1_000_000 {
            let z = random_vec(&mut rng, d);
            let x = &mu + chol.l() * z;
            if (x[0] - y_target[0]).abs() < window[0] && (x[2] - y_target[1]).abs() < window[1] {
                kept.push([x[1], x[3]]);
            }
        }
        assert!(kept.len() > 2_000, "rejection sampler starved: {}", kept.len());
        let m = kept.len() as f64;
        let mean: [f64; 2] = [
            kept.iter().map(|k| k[0]).sum::<f64>() / m,
            kept.iter().map(|k| k[1]).sum::<f64>() / m,
        ];
        let var: [f64; 2] = [
            kept.iter().map(|k| (k[0] - mean[0]).powi(2)).sum::<f64>() / m,
            kept.iter().map(|k| (k[1] - mean[1]).powi(2)).sum::<f64>() / m,
        ];

        let (mu_c, sig_c) = conditional_block(&y_target, &mu, &sigma, &idx).unwrap();
        for j in 0..2 {
            let se = (var[j] / m).sqrt();
            // 3 standard errors plus a window-bias allowance
            let tol = 3.0 * se + 0.05 * sig_c[(j, j)].sqrt();
            assert!(
                (mean[j] - mu_c[j]).abs() < tol,
                "moment {j}: {} vs {} (tol {tol})",
                mean[j],
                mu_c[j]
            );
        }
    }

    #[test]
    fn joint_density_factorizes_through_conditional() {
        // ln N(y) = ln N(y_o) + ln N(y_m | y_o) on random instances
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let d = rng.random_range(2..=6);
            let n_obs = rng.random_range(1..d);
            let mut obs: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                let j = rng.random_range(0..=i);
                obs.swap(i, j);
            }
            obs.truncate(n_obs);
            let idx = BlockIndex::from_observed(obs, d).unwrap();

            let sigma = random_spd(&mut rng, d);
            let mu = random_vec(&mut rng, d);
            let y = random_vec(&mut rng, d);

            let y_o = DVector::from_fn(idx.observed.len(), |i, _| y[idx.observed[i]]);
            let y_m = DVector::from_fn(idx.missing.len(), |i, _| y[idx.missing[i]]);

            let joint = log_mvn_pdf(&y, &mu, &sigma).unwrap();
            let (mu_o, sig_oo) = marginal_block(&mu, &sigma, &idx);
            let marg = log_mvn_pdf(&y_o, &mu_o, &sig_oo).unwrap();
            let (mu_c, sig_c) = conditional_block(&y_o, &mu, &sigma, &idx).unwrap();
            let cond = log_mvn_pdf(&y_m, &mu_c, &sig_c).unwrap();
            assert_abs_diff_eq!(joint, marg + cond, epsilon = 1e-10);
        }
    }

    #[test]
    fn density_integrates_to_one_1d() {
        let mu = DVector::from_vec(vec![0.3]);
        let sigma = DMatrix::<f64>::from_element(1, 1, 1.7);
        let sd = sigma[(0, 0)].sqrt();
        let (lo, hi, steps) = (mu[0] - 10.0 * sd, mu[0] + 10.0 * sd, 20_000usize);
        let h = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for i in 0..=steps {
            let x = DVector::from_vec(vec![lo + i as f64 * h]);
            let f = log_mvn_pdf(&x, &mu, &sigma).unwrap().exp();
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            total += w * f * h;
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn density_integrates_to_one_3d_importance_sampling() {
        // proposal density computed by hand from the sampling construction,
        // independent of log_mvn_pdf
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma = random_spd(&mut rng, 3);
        let mu = random_vec(&mut rng, 3);
        let scale = 1.25;
        let l = Cholesky::new(sigma.clone()).unwrap().l();
        let ln_det_l: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        let mut total = 0.0;
        let samples = 2_000_000;
        for _ in 0..samples {
            let z = random_vec(&mut rng, 3);
            // antithetic pair
            for z in [z.clone(), -z] {
                let x = &mu + scale * &l * &z;
                let ln_q =
                    -0.5 * (3.0 * LN_2PI + z.norm_squared()) - 3.0 * scale.ln() - ln_det_l;
                let ln_f = log_mvn_pdf(&x, &mu, &sigma).unwrap();
                total += (ln_f - ln_q).exp();
            }
        }
        assert_abs_diff_eq!(total / (2 * samples) as f64, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let v = log_sum_exp(&[-1000.0, -1000.5]).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, -1000.0 + (1.0 + (-0.5f64).exp()).ln(), epsilon = 1e-12);
        assert!(matches!(log_sum_exp(&[]), Err(Error::Empty)));
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_sum_exp_matches_compensated_sum() {
        // double-double accumulation of the shifted exponentials
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let xs: Vec<f64> = (0..100)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 50.0)
                .collect();
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (mut hi, mut lo) = (0.0f64, 0.0f64);
            for &x in &xs {
                let term = (x - max).exp();
                // two-sum
                let s = hi + term;
                let bb = s - hi;
                let err = (hi - (s - bb)) + (term - bb);
                hi = s;
                lo += err;
            }
            let oracle = max + (hi + lo).ln();
            let got = log_sum_exp(&xs).unwrap();
            assert!(
                (got - oracle).abs() <= 1e-13 * oracle.abs().max(1.0),
                "{got} vs {oracle}"
            );
        }
    }
}
