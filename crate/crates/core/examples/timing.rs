use mixsel::data::{CovForm, MaskedDataset};
use mixsel::em_mar::{self, EmConfig, InitMethod};
use mixsel::penalized::{self, fit_penalized_tied_from};
use mixsel::simgen;
use mixsel::rng::derive_seed;

fn main() {
    let (data, labels, _) = simgen::gen_dataset1(2000, 1.0, 1001).unwrap();
    let cfg = EmConfig { max_iter: 300, tol: 1e-6, n_starts: 4, seed: derive_seed(1, 2), init: InitMethod::KmeansLike };
    let (std_data, _, _) = penalized::standardize(&data).unwrap();
    let k = 4;
    let imputed = MaskedDataset::from_complete(std_data.mean_imputed()).unwrap();
    let anchor = em_mar::fit(&imputed, k, CovForm::FullFree, &cfg).unwrap();
    eprintln!("anchor ll {:.1} ari {:.2}", anchor.final_loglik(),
        mixsel::metrics::ari(&labels, &anchor.hard_labels()).unwrap());
    let weights = penalized::spectral_weights(&anchor.params.psi, 0.01, 1e-3).unwrap();
    let grid = penalized::default_grid_anchored(&std_data, k, &anchor.params).unwrap();
    eprintln!("lambda range [{:.1}, {:.1}]", grid.lambdas[0], grid.lambdas[19]);
    let rho = grid.rhos[0];
    let mut warm = anchor.params.clone();
    for &lambda in &grid.lambdas {
        let fit = fit_penalized_tied_from(&std_data, lambda, rho, &weights, &cfg, &warm).unwrap();
        let mu_max: Vec<f64> = (0..7)
            .map(|j| (0..k).map(|c| fit.params.mu[c][j].abs()).fold(0.0, f64::max))
            .collect();
        eprintln!("lambda {:7.0}: mu {:?} pi {:?}", lambda,
            mu_max.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            fit.params.pi.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>());
        warm = fit.params;
    }
}
