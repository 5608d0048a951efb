//! Data model: masked datasets, variable-role partitions, model
//! specifications, and the parameter containers shared by the estimation
//! modules.
//!
//! Missing cells are stored as a NaN sentinel next to an explicit binary
//! mask; dense kernels read the value matrix only after consulting the mask.

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// N x D real matrix paired with an N x D binary missingness mask.
///
/// `mask[(n, d)] == 1` means cell `(n, d)` is missing; the corresponding
/// value slot holds NaN and must never be read directly.
#[derive(Debug, Clone)]
pub struct MaskedDataset {
    values: DMatrix<f64>,
    mask: DMatrix<u8>,
    var_names: Vec<String>,
}

impl PartialEq for MaskedDataset {
    /// Masked cells compare by mask alone (the sentinel is NaN); observed
    /// cells compare exactly.
    fn eq(&self, other: &Self) -> bool {
        if self.mask != other.mask || self.var_names != other.var_names {
            return false;
        }
        for n in 0..self.n_rows() {
            for d in 0..self.n_cols() {
                if self.mask[(n, d)] == 0 && self.values[(n, d)] != other.values[(n, d)] {
                    return false;
                }
            }
        }
        true
    }
}

impl MaskedDataset {
    /// Builds a dataset from values and mask, overwriting masked cells with
    /// the NaN sentinel. Observed cells must be finite.
    ///
    /// Fully missing rows are accepted here (block-restricted views produce
    /// them); CSV ingestion rejects them via [`MaskedDataset::load_csv`].
    pub fn new(
        mut values: DMatrix<f64>,
        mask: DMatrix<u8>,
        var_names: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyData);
        }
        if mask.shape() != values.shape() || var_names.len() != values.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "values {:?}, mask {:?}, {} names",
                values.shape(),
                mask.shape(),
                var_names.len()
            )));
        }
        for n in 0..values.nrows() {
            for d in 0..values.ncols() {
                match mask[(n, d)] {
                    0 => {
                        if !values[(n, d)].is_finite() {
                            return Err(Error::Parse {
                                line: n + 1,
                                cell: values[(n, d)].to_string(),
                            });
                        }
                    }
                    1 => values[(n, d)] = f64::NAN,
                    other => {
                        return Err(Error::ConfigParse(format!(
                            "mask entry {other} at ({n}, {d}) not in {{0, 1}}"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            values,
            mask,
            var_names,
        })
    }

    /// Complete dataset (no missing cells) with default variable names
    /// `y1..yD`.
    pub fn from_complete(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::zeros(values.nrows(), values.ncols());
        let names = default_names(values.ncols());
        Self::new(values, mask, names)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn is_missing(&self, n: usize, d: usize) -> bool {
        self.mask[(n, d)] == 1
    }

    /// Observed value at `(n, d)`; panics if the cell is masked.
    pub fn value(&self, n: usize, d: usize) -> f64 {
        assert_eq!(self.mask[(n, d)], 0, "read of masked cell ({n}, {d})");
        self.values[(n, d)]
    }

    pub fn mask(&self) -> &DMatrix<u8> {
        &self.mask
    }

    /// Raw value matrix with NaN sentinels at masked cells.
    pub fn values_with_sentinel(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Ascending indices of observed columns in row `n`.
    pub fn observed_cols(&self, n: usize) -> Vec<usize> {
        (0..self.n_cols()).filter(|&d| !self.is_missing(n, d)).collect()
    }

    /// Ascending indices of missing columns in row `n`.
    pub fn missing_cols(&self, n: usize) -> Vec<usize> {
        (0..self.n_cols()).filter(|&d| self.is_missing(n, d)).collect()
    }

    pub fn n_missing_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_complete(&self) -> bool {
        self.n_missing_cells() == 0
    }

    /// Restriction to the given columns (order preserved). Rows may end up
    /// fully missing in the restricted view.
    pub fn restrict_columns(&self, cols: &[usize]) -> Result<Self> {
        for &c in cols {
            if c >= self.n_cols() {
                return Err(Error::IndexOutOfRange(c, self.n_cols()));
            }
        }
        if cols.is_empty() {
            return Err(Error::EmptyData);
        }
        let n = self.n_rows();
        let mut values = DMatrix::zeros(n, cols.len());
        let mut mask = DMatrix::zeros(n, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            for i in 0..n {
                values[(i, j)] = self.values[(i, c)];
                mask[(i, j)] = self.mask[(i, c)];
            }
        }
        let names = cols.iter().map(|&c| self.var_names[c].clone()).collect();
        Self::new(values, mask, names)
    }

    /// Per-column means over observed cells; columns with no observed cell
    /// get 0.
    pub fn observed_col_means(&self) -> DVector<f64> {
        let mut means = DVector::zeros(self.n_cols());
        for d in 0..self.n_cols() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for n in 0..self.n_rows() {
                if !self.is_missing(n, d) {
                    sum += self.values[(n, d)];
                    count += 1;
                }
            }
            if count > 0 {
                means[d] = sum / count as f64;
            }
        }
        means
    }

    /// Complete copy of the value matrix with masked cells replaced by the
    /// observed column means.
    pub fn mean_imputed(&self) -> DMatrix<f64> {
        let means = self.observed_col_means();
        let mut out = self.values.clone();
        for n in 0..self.n_rows() {
            for d in 0..self.n_cols() {
                if self.is_missing(n, d) {
                    out[(n, d)] = means[d];
                }
            }
        }
        out
    }

    /// Parses a headered CSV file; cells equal to `na_token` become missing.
    ///
    /// Rejects ragged rows, non-numeric cells, empty tables, and rows with
    /// every cell missing.
    pub fn load_csv(path: &Path, na_token: &str) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(h) => h?,
            None => return Err(Error::EmptyData),
        };
        let var_names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let d = var_names.len();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut masks: Vec<Vec<u8>> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d {
                return Err(Error::Ragged {
                    line: i + 2,
                    expected: d,
                    got: fields.len(),
                });
            }
            let mut row = Vec::with_capacity(d);
            let mut mrow = Vec::with_capacity(d);
            let mut all_missing = true;
            for f in &fields {
                let f = f.trim();
                if f == na_token {
                    row.push(f64::NAN);
                    mrow.push(1);
                } else {
                    let v: f64 = f.parse().map_err(|_| Error::Parse {
                        line: i + 2,
                        cell: f.to_string(),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            line: i + 2,
                            cell: f.to_string(),
                        });
                    }
                    row.push(v);
                    mrow.push(0);
                    all_missing = false;
                }
            }
            if all_missing {
                return Err(Error::AllMissingRow(i + 2));
            }
            rows.push(row);
            masks.push(mrow);
        }
        if rows.is_empty() || d == 0 {
            return Err(Error::EmptyData);
        }
        let n = rows.len();
        let values = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mask = DMatrix::from_fn(n, d, |i, j| masks[i][j]);
        Self::new(values, mask, var_names)
    }

    /// Writes the dataset back to CSV. Observed cells use Rust's shortest
    /// round-trip decimal formatting, so a save/load cycle reproduces the
    /// values bit-exactly; masked cells emit `na_token`.
    pub fn save_csv(&self, path: &Path, na_token: &str) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", self.var_names.join(","))?;
        for n in 0..self.n_rows() {
            let mut cells = Vec::with_capacity(self.n_cols());
            for d in 0..self.n_cols() {
                if self.is_missing(n, d) {
                    cells.push(na_token.to_string());
                } else {
                    cells.push(format!("{}", self.values[(n, d)]));
                }
            }
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("y{j}")).collect()
}

/// Disjoint variable-role sets over `[D]`: S (relevant), R ⊆ S (regressors),
/// U (redundant, explained by R), W (independent).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariablePartition {
    pub s: Vec<usize>,
    pub r: Vec<usize>,
    pub u: Vec<usize>,
    pub w: Vec<usize>,
}

impl VariablePartition {
    /// Stores the four sets sorted ascending; call
    /// [`validate_partition`] to check the role invariants.
    pub fn new(
        mut s: Vec<usize>,
        mut r: Vec<usize>,
        mut u: Vec<usize>,
        mut w: Vec<usize>,
    ) -> Self {
        s.sort_unstable();
        s.dedup();
        r.sort_unstable();
        r.dedup();
        u.sort_unstable();
        u.dedup();
        w.sort_unstable();
        w.dedup();
        Self { s, r, u, w }
    }

    /// Partition with every variable relevant (S = [D], R = U = W = empty).
    pub fn all_relevant(d: usize) -> Self {
        Self::new((0..d).collect(), vec![], vec![], vec![])
    }
}

impl fmt::Display for VariablePartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let j = |v: &[usize]| {
            v.iter()
                .map(|i| (i + 1).to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        write!(
            f,
            "S={{{}}} R={{{}}} U={{{}}} W={{{}}}",
            j(&self.s),
            j(&self.r),
            j(&self.u),
            j(&self.w)
        )
    }
}

/// Checks the role invariants of a partition against dimension `d`:
/// S, U, W disjoint and covering `[d]`, R ⊆ S, S nonempty, and R empty
/// whenever U is.
pub fn validate_partition(part: &VariablePartition, d: usize) -> Result<()> {
    for &i in part.s.iter().chain(&part.r).chain(&part.u).chain(&part.w) {
        if i >= d {
            return Err(Error::IndexOutOfRange(i, d));
        }
    }
    if part.s.is_empty() {
        return Err(Error::EmptyS);
    }
    let mut seen = vec![0usize; d];
    for &i in part.s.iter().chain(&part.u).chain(&part.w) {
        seen[i] += 1;
        if seen[i] > 1 {
            return Err(Error::Overlap(format!("variable {i} assigned twice")));
        }
    }
    if !part.r.iter().all(|i| part.s.contains(i)) {
        return Err(Error::RNotInS);
    }
    let covered = seen.iter().filter(|&&c| c == 1).count();
    if covered != d {
        return Err(Error::Incomplete {
            expected: d,
            got: covered,
        });
    }
    if part.u.is_empty() && !part.r.is_empty() {
        return Err(Error::UEmptyRNonempty);
    }
    Ok(())
}

/// Covariance form of the clustering-block GMM: per-component diagonal or
/// per-component full (the free "pkLC"-style family).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovForm {
    DiagFree,
    FullFree,
}

impl CovForm {
    /// Free covariance parameters per component in dimension `d`.
    pub fn df(self, d: usize) -> usize {
        match self {
            CovForm::DiagFree => d,
            CovForm::FullFree => d * (d + 1) / 2,
        }
    }
}

impl fmt::Display for CovForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovForm::DiagFree => write!(f, "diag"),
            CovForm::FullFree => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for CovForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diag" | "diag_free" => Ok(CovForm::DiagFree),
            "full" | "full_free" => Ok(CovForm::FullFree),
            other => Err(Error::ConfigParse(format!("unknown covariance form '{other}'"))),
        }
    }
}

/// Structure of the regression residual covariance Ω: scalar·I, diagonal,
/// or full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaForm {
    LI,
    LB,
    LC,
}

impl OmegaForm {
    pub fn df(self, d: usize) -> usize {
        match self {
            OmegaForm::LI => 1,
            OmegaForm::LB => d,
            OmegaForm::LC => d * (d + 1) / 2,
        }
    }
}

impl fmt::Display for OmegaForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OmegaForm::LI => write!(f, "LI"),
            OmegaForm::LB => write!(f, "LB"),
            OmegaForm::LC => write!(f, "LC"),
        }
    }
}

impl std::str::FromStr for OmegaForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LI" => Ok(OmegaForm::LI),
            "LB" => Ok(OmegaForm::LB),
            "LC" => Ok(OmegaForm::LC),
            other => Err(Error::ConfigParse(format!("unknown Omega form '{other}'"))),
        }
    }
}

/// Structure of the independent-block covariance Γ: scalar·I or diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaForm {
    LI,
    LB,
}

impl GammaForm {
    pub fn df(self, d: usize) -> usize {
        match self {
            GammaForm::LI => 1,
            GammaForm::LB => d,
        }
    }
}

impl fmt::Display for GammaForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaForm::LI => write!(f, "LI"),
            GammaForm::LB => write!(f, "LB"),
        }
    }
}

impl std::str::FromStr for GammaForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LI" => Ok(GammaForm::LI),
            "LB" => Ok(GammaForm::LB),
            other => Err(Error::ConfigParse(format!("unknown Gamma form '{other}'"))),
        }
    }
}

/// Full model specification: component count and the three covariance forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub k: usize,
    pub m: CovForm,
    pub r: OmegaForm,
    pub l: GammaForm,
}

impl ModelSpec {
    pub fn new(k: usize, m: CovForm, r: OmegaForm, l: GammaForm) -> Result<Self> {
        if k == 0 {
            return Err(Error::ConfigParse("K must be at least 1".into()));
        }
        Ok(Self { k, m, r, l })
    }
}

/// Parameters of a K-component Gaussian mixture: proportions, means, and
/// covariance/precision pairs.
#[derive(Debug, Clone)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub psi: Vec<DMatrix<f64>>,
}

/// One Newton refinement of an approximate inverse, `X <- X (2I - A X)`,
/// re-symmetrized. Squares the residual of ill-conditioned inversions.
pub(crate) fn refine_inverse(a: &DMatrix<f64>, inv: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let correction = DMatrix::identity(d, d) * 2.0 - a * inv;
    let refined = inv * correction;
    (&refined + refined.transpose()) * 0.5
}

impl GmmParams {
    /// Builds params from proportions, means, and covariances, deriving the
    /// precision matrices by Cholesky inversion (Newton-refined).
    pub fn new(pi: Vec<f64>, mu: Vec<DVector<f64>>, sigma: Vec<DMatrix<f64>>) -> Result<Self> {
        let psi = sigma
            .iter()
            .map(|s| {
                let inv = nalgebra::Cholesky::new(s.clone())
                    .map(|c| c.inverse())
                    .ok_or(Error::NotSpd)?;
                Ok(refine_inverse(s, &inv))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Self { pi, mu, sigma, psi };
        params.validate()?;
        Ok(params)
    }

    /// Builds params from an explicit covariance/precision pair (used where
    /// the precision is the estimated object and the covariance its
    /// inverse).
    pub fn with_precision(
        pi: Vec<f64>,
        mu: Vec<DVector<f64>>,
        sigma: Vec<DMatrix<f64>>,
        psi: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let params = Self { pi, mu, sigma, psi };
        params.validate()?;
        Ok(params)
    }

    pub fn n_components(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, |m| m.len())
    }

    /// Checks the structural invariants: positive proportions summing to 1,
    /// consistent dimensions, symmetric covariances, and Ψ·Σ ≈ I.
    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 || self.mu.len() != k || self.sigma.len() != k || self.psi.len() != k {
            return Err(Error::DimensionMismatch("component count mismatch".into()));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.pi.iter().any(|&p| p <= 0.0) {
            return Err(Error::ConfigParse(format!(
                "mixing proportions must be positive and sum to 1 (sum = {total})"
            )));
        }
        let d = self.dim();
        for k_i in 0..k {
            if self.mu[k_i].len() != d
                || self.sigma[k_i].shape() != (d, d)
                || self.psi[k_i].shape() != (d, d)
            {
                return Err(Error::DimensionMismatch(format!("component {k_i}")));
            }
            let sym_err = (&self.sigma[k_i] - self.sigma[k_i].transpose()).abs().max();
            if sym_err > 1e-9 {
                return Err(Error::NotSpd);
            }
            let prod = &self.psi[k_i] * &self.sigma[k_i];
            let id_err = (&prod - DMatrix::identity(d, d)).abs().max();
            // the attainable product residual in f64 scales with the
            // condition number, so the 1e-8 contract widens for
            // ill-conditioned pairs
            let allowed = 1e-8
                + 4096.0
                    * d as f64
                    * f64::EPSILON
                    * self.psi[k_i].abs().max()
                    * self.sigma[k_i].abs().max();
            if id_err > allowed {
                if std::env::var_os("MIXSEL_VALIDATE_TRACE").is_some() {
                    eprintln!(
                        "validate failure: err {id_err:.2e} allowed {allowed:.2e} maxPsi {:.3e} maxSigma {:.3e} sigma {:?} psi {:?}",
                        self.psi[k_i].abs().max(),
                        self.sigma[k_i].abs().max(),
                        self.sigma[k_i].as_slice(),
                        self.psi[k_i].as_slice(),
                    );
                }
                return Err(Error::DimensionMismatch(format!(
                    "Psi_{k_i} * Sigma_{k_i} deviates from identity by {id_err:.2e}"
                )));
            }
        }
        Ok(())
    }
}

/// SRUW block parameters: clustering GMM on S, linear regression of U on R,
/// and an independent Gaussian on W.
#[derive(Debug, Clone)]
pub struct SruwParams {
    /// GMM over the S block.
    pub alpha: GmmParams,
    /// Regression intercept, length |U|.
    pub intercept: DVector<f64>,
    /// Regression coefficients, |R| x |U| (row per regressor).
    pub coefficients: DMatrix<f64>,
    /// Residual covariance Ω, |U| x |U|.
    pub residual_cov: DMatrix<f64>,
    /// Mean of the independent block, length |W|.
    pub indep_mean: DVector<f64>,
    /// Covariance Γ of the independent block, |W| x |W|.
    pub indep_cov: DMatrix<f64>,
}

impl SruwParams {
    /// Checks block dimensions against a partition.
    pub fn check_dims(&self, part: &VariablePartition) -> Result<()> {
        let (s, r, u, w) = (part.s.len(), part.r.len(), part.u.len(), part.w.len());
        if self.alpha.dim() != s {
            return Err(Error::DimensionMismatch("alpha block".into()));
        }
        if self.intercept.len() != u
            || self.coefficients.shape() != (r, u)
            || self.residual_cov.shape() != (u, u)
        {
            return Err(Error::DimensionMismatch("regression block".into()));
        }
        if self.indep_mean.len() != w || self.indep_cov.shape() != (w, w) {
            return Err(Error::DimensionMismatch("independent block".into()));
        }
        Ok(())
    }
}

/// MNARz mechanism parameters: one missingness probability per class plus
/// the MAR/MNAR variable split.
#[derive(Debug, Clone, PartialEq)]
pub struct MnarzParams {
    pub rho: Vec<f64>,
    pub d_mar: Vec<usize>,
    pub d_mnar: Vec<usize>,
}

impl MnarzParams {
    /// Pure MNARz mechanism: every variable in the MNAR set.
    pub fn pure(rho: Vec<f64>, d: usize) -> Result<Self> {
        let p = Self {
            rho,
            d_mar: vec![],
            d_mnar: (0..d).collect(),
        };
        p.validate(d)?;
        Ok(p)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for &r in &self.rho {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::RhoOutOfRange(r));
            }
        }
        let mut seen = vec![false; d];
        for &i in self.d_mar.iter().chain(&self.d_mnar) {
            if i >= d {
                return Err(Error::IndexOutOfRange(i, d));
            }
            if seen[i] {
                return Err(Error::Overlap(format!("mechanism sets share variable {i}")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Incomplete {
                expected: d,
                got: seen.iter().filter(|&&s| s).count(),
            });
        }
        Ok(())
    }
}
