//! Reproducible generators for the synthetic benchmark designs and the
//! missingness mechanisms applied to them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{MaskedDataset, VariablePartition};
use crate::error::{Error, Result};

/// Fixed internal seed for the scenario coefficient tables of the second
/// design, so scenarios 2-7 are reproducible across runs and machines.
const SCENARIO_COEF_SEED: u64 = 0x5eed_0d52;

/// Retry bound when a row's mask redraw keeps it fully missing.
const MASK_RETRIES: usize = 100;

/// Synthetic design selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    Dataset1,
    Dataset2,
    MnarzAppendix,
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dataset1" => Ok(Design::Dataset1),
            "dataset2" => Ok(Design::Dataset2),
            "mnarz_appendix" | "appendix" => Ok(Design::MnarzAppendix),
            other => Err(Error::ConfigParse(format!("unknown design '{other}'"))),
        }
    }
}

/// Simulation request: design, sample size, scenario (second design only),
/// clustering-noise scale (first design only), and seed.
#[derive(Debug, Clone, Copy)]
pub struct SimSpec {
    pub design: Design,
    pub n: usize,
    pub scenario: usize,
    pub sigma_scale: f64,
    pub seed: u64,
}

fn planar_rotation(theta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
}

/// Seven-variable design: a four-component mixture on the first three
/// variables, two variables regressed on the first two, and two pure-noise
/// variables.
///
/// Returns the complete dataset, the ground-truth labels, and the true
/// partition `S = {1,2,3}, R = {1,2}, U = {4,5}, W = {6,7}` (1-based).
pub fn gen_dataset1(
    n: usize,
    sigma_scale: f64,
    seed: u64,
) -> Result<(MaskedDataset, Vec<usize>, VariablePartition)> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = [
        [0.0, 0.0, 0.0],
        [-6.0, 6.0, 0.0],
        [0.0, 0.0, 6.0],
        [-6.0, 6.0, 6.0],
    ];
    let s2 = sigma_scale * sigma_scale;
    let vars = [6.0 * 2f64.sqrt() * s2, 1.0 * s2, 2.0 * s2];
    // intercept (-1, 2); coefficient rows (0.5, 2) for y1 and (1, 0) for y2
    let intercept = [-1.0, 2.0];
    let beta = [[0.5, 2.0], [1.0, 0.0]];
    // eps ~ N(0, R(pi/6) diag(1,3) R(pi/6)')
    let rot = planar_rotation(std::f64::consts::PI / 6.0);
    let eps_chol = {
        let cov = &rot * DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0])) * rot.transpose();
        nalgebra::Cholesky::new(cov).expect("SPD epsilon covariance").l()
    };

    let mut values = DMatrix::zeros(n, 7);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let z = rng.random_range(0..4usize);
        labels.push(z);
        for j in 0..3 {
            let e: f64 = rng.sample(StandardNormal);
            values[(i, j)] = means[z][j] + vars[j].sqrt() * e;
        }
        let raw = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eps = &eps_chol * raw;
        for u in 0..2 {
            values[(i, 3 + u)] = intercept[u]
                + values[(i, 0)] * beta[0][u]
                + values[(i, 1)] * beta[1][u]
                + eps[u];
        }
        for w in 0..2 {
            values[(i, 5 + w)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let data = MaskedDataset::from_complete(values)?;
    let truth = VariablePartition::new(vec![0, 1, 2], vec![0, 1], vec![3, 4], vec![5, 6]);
    Ok((data, labels, truth))
}

/// Scenario coefficient table of the fourteen-variable design: per
/// redundant column, (intercept, beta on y1, beta on y2). Drawn once from a
/// fixed seed so the table is identical on every run.
fn dataset2_coefficients(scenario: usize) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(SCENARIO_COEF_SEED);
    let mut table = Vec::with_capacity(12);
    for _ in 0..12 {
        let sign1 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let sign2 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let b1 = sign1 * (0.5 + rng.random::<f64>());
        let b2 = sign2 * (0.5 + rng.random::<f64>());
        let shift_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let shift = shift_sign * (1.0 + 2.0 * rng.random::<f64>());
        table.push((shift, b1, b2));
    }
    if scenario < 8 {
        // intercept shifts appear only in scenario 8
        for entry in &mut table {
            entry.0 = 0.0;
        }
    }
    table
}

/// Fourteen-variable design: a four-component mixture on `(y1, y2)` and
/// eight sub-scenarios for the remaining twelve variables. Scenario 1 is
/// pure noise; scenarios `s` in 2-7 regress columns `y3..y(s+2)` on the
/// clustering pair; scenario 8 adds intercept shifts on `y3..y11` plus
/// three pure-noise variables `y12..y14`.
pub fn gen_dataset2(
    n: usize,
    scenario: usize,
    seed: u64,
) -> Result<(MaskedDataset, Vec<usize>, VariablePartition)> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if !(1..=8).contains(&scenario) {
        return Err(Error::BadScenario(scenario));
    }
    let n_reg = match scenario {
        1 => 0,
        s @ 2..=7 => s,
        _ => 9,
    };
    let coef = dataset2_coefficients(scenario);
    let means = [[0.0, 0.0], [4.0, 0.0], [0.0, 2.0], [4.0, 2.0]];
    let sd = 0.5f64.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = DMatrix::zeros(n, 14);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let z = rng.random_range(0..4usize);
        labels.push(z);
        for j in 0..2 {
            let e: f64 = rng.sample(StandardNormal);
            values[(i, j)] = means[z][j] + sd * e;
        }
        for c in 0..12 {
            let e: f64 = rng.sample(StandardNormal);
            values[(i, 2 + c)] = if c < n_reg {
                let (a, b1, b2) = coef[c];
                a + b1 * values[(i, 0)] + b2 * values[(i, 1)] + e
            } else {
                e
            };
        }
    }
    let data = MaskedDataset::from_complete(values)?;
    let u: Vec<usize> = (2..2 + n_reg).collect();
    let w: Vec<usize> = (2 + n_reg..14).collect();
    let r = if n_reg > 0 { vec![0, 1] } else { vec![] };
    let truth = VariablePartition::new(vec![0, 1], r, u, w);
    Ok((data, labels, truth))
}

/// Three-cluster mean-shift design with a value-dependent probit mask:
/// `P(missing) = Phi(psi_d * y)` with slopes `(1.45, 0.2, -3)` repeated.
///
/// Supports `d` in {6, 9}; cluster proportions are (0.5, 0.25, 0.25) and
/// the shifted coordinates carry signal strength 2.31.
pub fn gen_mnarz_appendix(
    n: usize,
    d: usize,
    seed: u64,
) -> Result<(MaskedDataset, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if d != 6 && d != 9 {
        return Err(Error::BadD(d));
    }
    let tau = 2.31;
    // delta[k][j]: shifts at (1,1), (1,4), (2,2), (2,5), (3,3), (3,6) 1-based
    let mut delta = vec![vec![0.0; d]; 3];
    for k in 0..3 {
        delta[k][k] = tau;
        if k + 3 < d {
            delta[k][k + 3] = tau;
        }
    }
    let base_slopes = [1.45, 0.2, -3.0, 1.45, 0.2, -3.0];
    let slopes: Vec<f64> = (0..d).map(|j| base_slopes[j % 6]).collect();
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = DMatrix::zeros(n, d);
    let mut mask = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random();
        let z = if u < 0.5 {
            0
        } else if u < 0.75 {
            1
        } else {
            2
        };
        labels.push(z);
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            values[(i, j)] = delta[z][j] + e;
        }
        let mut ok = false;
        for _ in 0..MASK_RETRIES {
            let mut any_observed = false;
            for j in 0..d {
                let p = std_normal.cdf(slopes[j] * values[(i, j)]);
                let missing = rng.random::<f64>() < p;
                mask[(i, j)] = missing as u8;
                any_observed |= !missing;
            }
            if any_observed {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::MaskRetryExhausted(i, MASK_RETRIES));
        }
    }
    let data = MaskedDataset::new(values, mask, crate::data::default_names(d))?;
    Ok((data, labels))
}

/// Missingness mechanism applied to a complete dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum MissingMech {
    /// Cellwise i.i.d. Bernoulli(p).
    Mcar(f64),
    /// Logistic in a designated always-observed anchor column:
    /// `P(missing) = sigmoid(intercept + slope * y_anchor)`.
    Mar {
        anchor: usize,
        intercept: f64,
        slope: f64,
    },
    /// Class-dependent cell rate `rho[z_n]`.
    Mnarz(Vec<f64>),
    /// Value-dependent probit rate `Phi(psi_d * y)` (slopes cycled).
    Mnary(Vec<f64>),
}

/// Applies the mechanism; rows that would become fully missing have their
/// mask redrawn (bounded retries).
pub fn apply_missingness(
    data: &MaskedDataset,
    labels: &[usize],
    mech: &MissingMech,
    seed: u64,
) -> Result<MaskedDataset> {
    if !data.is_complete() {
        return Err(Error::ConfigParse(
            "missingness mechanisms apply to complete data".into(),
        ));
    }
    let (n, d) = (data.n_rows(), data.n_cols());
    if labels.len() != n {
        return Err(Error::LengthMismatch(labels.len(), n));
    }
    match mech {
        MissingMech::Mcar(p) => {
            if !(0.0..1.0).contains(p) {
                return Err(Error::RhoOutOfRange(*p));
            }
        }
        MissingMech::Mar { anchor, .. } => {
            if *anchor >= d {
                return Err(Error::IndexOutOfRange(*anchor, d));
            }
        }
        MissingMech::Mnarz(rhos) => {
            for &r in rhos {
                if !(r > 0.0 && r < 1.0) && r != 0.0 {
                    return Err(Error::RhoOutOfRange(r));
                }
            }
            if let Some(&max_label) = labels.iter().max() {
                if max_label >= rhos.len() {
                    return Err(Error::IndexOutOfRange(max_label, rhos.len()));
                }
            }
        }
        MissingMech::Mnary(psi) => {
            if psi.is_empty() {
                return Err(Error::Empty);
            }
        }
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = DMatrix::zeros(n, d);
    for i in 0..n {
        let mut ok = false;
        for _ in 0..MASK_RETRIES {
            let mut any_observed = false;
            for j in 0..d {
                let p = match mech {
                    MissingMech::Mcar(p) => *p,
                    MissingMech::Mar {
                        anchor,
                        intercept,
                        slope,
                    } => {
                        if j == *anchor {
                            0.0
                        } else {
                            let x = intercept + slope * data.value(i, *anchor);
                            1.0 / (1.0 + (-x).exp())
                        }
                    }
                    MissingMech::Mnarz(rhos) => rhos[labels[i]],
                    MissingMech::Mnary(psi) => std_normal.cdf(psi[j % psi.len()] * data.value(i, j)),
                };
                let missing = rng.random::<f64>() < p;
                mask[(i, j)] = missing as u8;
                any_observed |= !missing;
            }
            if any_observed {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::MaskRetryExhausted(i, MASK_RETRIES));
        }
    }
    MaskedDataset::new(
        data.values_with_sentinel().clone(),
        mask,
        data.var_names().to_vec(),
    )
}

/// Bisection on the intercept so the expected MAR missingness over the
/// non-anchor cells matches `target_rate`.
pub fn calibrate_mar_intercept(
    data: &MaskedDataset,
    anchor: usize,
    slope: f64,
    target_rate: f64,
) -> Result<f64> {
    if anchor >= data.n_cols() {
        return Err(Error::IndexOutOfRange(anchor, data.n_cols()));
    }
    if !(0.0..1.0).contains(&target_rate) {
        return Err(Error::RhoOutOfRange(target_rate));
    }
    let xs: Vec<f64> = (0..data.n_rows()).map(|i| data.value(i, anchor)).collect();
    let mean_rate = |b: f64| -> f64 {
        xs.iter()
            .map(|&x| 1.0 / (1.0 + (-(b + slope * x)).exp()))
            .sum::<f64>()
            / xs.len() as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-class rates spread around a target overall rate, so the class label
/// is genuinely informative for the mask. The spread factors average 1.
pub fn mnarz_rhos(k: usize, rate: f64) -> Vec<f64> {
    if k <= 1 {
        return vec![rate.clamp(1e-3, 0.95)];
    }
    (0..k)
        .map(|c| {
            let factor = 0.4 + 1.2 * c as f64 / (k - 1) as f64;
            (rate * factor).clamp(1e-3, 0.95)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dataset1_component_means_match_design() {
        let (data, labels, truth) = gen_dataset1(100_000, 1.0, 7).unwrap();
        assert_eq!(truth.s, vec![0, 1, 2]);
        assert_eq!(truth.r, vec![0, 1]);
        let means = [
            [0.0, 0.0, 0.0],
            [-6.0, 6.0, 0.0],
            [0.0, 0.0, 6.0],
            [-6.0, 6.0, 6.0],
        ];
        for k in 0..4 {
            let rows: Vec<usize> = (0..data.n_rows()).filter(|&i| labels[i] == k).collect();
            assert!(rows.len() > 20_000);
            for j in 0..3 {
                let avg: f64 =
                    rows.iter().map(|&i| data.value(i, j)).sum::<f64>() / rows.len() as f64;
                assert!(
                    (avg - means[k][j]).abs() < 0.05,
                    "component {k} mean {j}: {avg}"
                );
            }
        }
    }

    #[test]
    fn dataset1_residual_covariance_matches_rotation() {
        let (data, _, _) = gen_dataset1(100_000, 1.0, 11).unwrap();
        // residuals of the regression block against the generating line
        let beta = [[0.5, 2.0], [1.0, 0.0]];
        let intercept = [-1.0, 2.0];
        let n = data.n_rows();
        let mut resid = DMatrix::zeros(n, 2);
        for i in 0..n {
            for u in 0..2 {
                resid[(i, u)] = data.value(i, 3 + u)
                    - intercept[u]
                    - beta[0][u] * data.value(i, 0)
                    - beta[1][u] * data.value(i, 1);
            }
        }
        let mean = resid.row_mean();
        let mut cov = DMatrix::zeros(2, 2);
        for i in 0..n {
            let d = resid.row(i) - &mean;
            cov += d.transpose() * d;
        }
        cov /= n as f64;
        let rot = planar_rotation(std::f64::consts::PI / 6.0);
        let expect = &rot * DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0])) * rot.transpose();
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (cov[(a, b)] - expect[(a, b)]).abs() < 0.05,
                    "cov[{a},{b}] = {} vs {}",
                    cov[(a, b)],
                    expect[(a, b)]
                );
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let (a1, l1, _) = gen_dataset1(200, 1.0, 42).unwrap();
        let (a2, l2, _) = gen_dataset1(200, 1.0, 42).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(l1, l2);
        let (b1, m1, _) = gen_dataset2(200, 8, 42).unwrap();
        let (b2, m2, _) = gen_dataset2(200, 8, 42).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(m1, m2);
        let (c1, k1) = gen_mnarz_appendix(200, 6, 42).unwrap();
        let (c2, k2) = gen_mnarz_appendix(200, 6, 42).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(k1, k2);
    }

    #[test]
    fn dataset2_scenario_structure() {
        let (_, _, t1) = gen_dataset2(10, 1, 1).unwrap();
        assert!(t1.u.is_empty());
        assert_eq!(t1.w, (2..14).collect::<Vec<_>>());
        assert!(t1.r.is_empty());

        let (_, _, t8) = gen_dataset2(10, 8, 1).unwrap();
        assert_eq!(t8.u, (2..11).collect::<Vec<_>>());
        assert_eq!(t8.w, vec![11, 12, 13]);
        assert_eq!(t8.r, vec![0, 1]);

        assert!(matches!(gen_dataset2(10, 0, 1), Err(Error::BadScenario(0))));
        assert!(matches!(gen_dataset2(10, 9, 1), Err(Error::BadScenario(9))));
    }

    #[test]
    fn dataset2_scenario1_is_noise() {
        let (data, _, _) = gen_dataset2(50_000, 1, 3).unwrap();
        // noise columns uncorrelated with y1
        for c in [2usize, 7, 13] {
            let mut sxy = 0.0;
            let (mut sx, mut sy) = (0.0, 0.0);
            let n = data.n_rows() as f64;
            for i in 0..data.n_rows() {
                sx += data.value(i, 0);
                sy += data.value(i, c);
            }
            let (mx, my) = (sx / n, sy / n);
            for i in 0..data.n_rows() {
                sxy += (data.value(i, 0) - mx) * (data.value(i, c) - my);
            }
            assert!((sxy / n).abs() < 0.05, "column {c} correlates with y1");
        }
    }

    #[test]
    fn appendix_class_frequencies() {
        let (_, labels) = gen_mnarz_appendix(100_000, 6, 5).unwrap();
        let n = labels.len() as f64;
        let freq: Vec<f64> = (0..3)
            .map(|k| labels.iter().filter(|&&l| l == k).count() as f64 / n)
            .collect();
        assert!((freq[0] - 0.5).abs() < 0.01);
        assert!((freq[1] - 0.25).abs() < 0.01);
        assert!((freq[2] - 0.25).abs() < 0.01);
    }

    #[test]
    fn appendix_missingness_monotone_in_value() {
        // probit rule: with slope -3, large positive values are essentially
        // never masked and large negative ones almost always are
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        assert!(std_normal.cdf(-3.0 * 2.0) < 1e-8);
        assert!(std_normal.cdf(-3.0 * -2.0) > 1.0 - 1e-8);
        // so the observed cells of the slope -3 column skew strongly positive
        let (data, _) = gen_mnarz_appendix(50_000, 6, 9).unwrap();
        let obs: Vec<f64> = (0..data.n_rows())
            .filter(|&i| !data.is_missing(i, 2))
            .map(|i| data.value(i, 2))
            .collect();
        assert!(!obs.is_empty());
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        assert!(mean > 0.3, "observed mean of the slope -3 column: {mean}");
        let neg = obs.iter().filter(|&&v| v < -1.0).count();
        assert!((neg as f64) < 0.02 * obs.len() as f64);
    }

    #[test]
    fn appendix_overall_missing_fraction_reasonable() {
        let (data, _) = gen_mnarz_appendix(20_000, 6, 13).unwrap();
        let frac = data.n_missing_cells() as f64 / (data.n_rows() * data.n_cols()) as f64;
        assert!(frac > 0.05 && frac < 0.95, "fraction {frac}");
        let (data9, _) = gen_mnarz_appendix(5_000, 9, 13).unwrap();
        assert_eq!(data9.n_cols(), 9);
    }

    #[test]
    fn mcar_rate_concentrates() {
        let values = DMatrix::from_fn(10_000, 100, |i, j| (i + j) as f64);
        let data = MaskedDataset::from_complete(values).unwrap();
        let labels = vec![0usize; 10_000];
        let masked = apply_missingness(&data, &labels, &MissingMech::Mcar(0.2), 3).unwrap();
        let rate = masked.n_missing_cells() as f64 / 1_000_000.0;
        assert_abs_diff_eq!(rate, 0.2, epsilon = 0.002);

        let zero = apply_missingness(&data, &labels, &MissingMech::Mcar(0.0), 3).unwrap();
        assert_eq!(zero.n_missing_cells(), 0);
    }

    #[test]
    fn mnarz_class_rates_match() {
        // enough columns that the fully-missing-row redraw bias (rho^D) is
        // negligible against the 0.01 tolerance
        let d = 10;
        let values = DMatrix::from_fn(100_000, d, |_, _| 0.0);
        let data = MaskedDataset::from_complete(values).unwrap();
        let labels: Vec<usize> = (0..100_000).map(|i| i % 3).collect();
        let rhos = vec![0.1, 0.4, 0.4];
        let masked =
            apply_missingness(&data, &labels, &MissingMech::Mnarz(rhos.clone()), 17).unwrap();
        for k in 0..3 {
            let rows: Vec<usize> = (0..100_000).filter(|&i| labels[i] == k).collect();
            let miss: usize = rows
                .iter()
                .map(|&i| (0..d).filter(|&j| masked.is_missing(i, j)).count())
                .sum();
            let rate = miss as f64 / (rows.len() * d) as f64;
            assert!(
                (rate - rhos[k]).abs() < 0.01,
                "class {k}: rate {rate} vs {}",
                rhos[k]
            );
        }
    }

    #[test]
    fn mar_calibration_hits_target() {
        let (data, labels, _) = gen_dataset1(5_000, 1.0, 21).unwrap();
        let b = calibrate_mar_intercept(&data, 0, 1.0, 0.3).unwrap();
        let masked = apply_missingness(
            &data,
            &labels,
            &MissingMech::Mar {
                anchor: 0,
                intercept: b,
                slope: 1.0,
            },
            5,
        )
        .unwrap();
        // anchor never missing
        for i in 0..masked.n_rows() {
            assert!(!masked.is_missing(i, 0));
        }
        let rate = masked.n_missing_cells() as f64 / (masked.n_rows() * 6) as f64;
        assert!((rate - 0.3).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn mask_is_deterministic_given_seed() {
        let (data, labels, _) = gen_dataset2(500, 8, 2).unwrap();
        let m1 = apply_missingness(&data, &labels, &MissingMech::Mcar(0.3), 7).unwrap();
        let m2 = apply_missingness(&data, &labels, &MissingMech::Mcar(0.3), 7).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn mnarz_rho_spread_averages_to_rate() {
        let rhos = mnarz_rhos(4, 0.1);
        let avg: f64 = rhos.iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(avg, 0.1, epsilon = 1e-12);
        assert!(rhos.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(mnarz_rhos(1, 0.2), vec![0.2]);
    }
}
