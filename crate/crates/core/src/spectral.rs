//! Cross-fitted residual covariance, factor-count selection and the
//! complement projector.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GhiveError, Result};
use crate::estimator::{CoefMatrix, Dataset, SplitPlan};
use crate::family::GlmFamily;
use crate::linalg::{serde_matrix, serde_vector, sym_eigen_desc, symmetrize};

/// Denominator clamp for eigenvalue ratios.
const RATIO_FLOOR: f64 = 1e-300;

/// Relative size of a negative eigenvalue that triggers a warning.
const NEGATIVE_EIGEN_TOL: f64 = 1e-10;

/// Weighted residuals, one row per observation. Row `i` is computed from
/// the coefficients fitted on the fold that does not contain `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    pub values: DMatrix<f64>,
    /// Fold (1 or 2) containing each observation.
    pub fold_of_row: Vec<u8>,
}

pub fn crossfit_residuals(
    data: &Dataset,
    family: GlmFamily,
    f_d1: &CoefMatrix,
    f_d2: &CoefMatrix,
    split: &SplitPlan,
) -> Result<ResidualMatrix> {
    for (name, f) in [("D1", f_d1), ("D2", f_d2)] {
        if f.m() != data.m() || f.p() != data.p() {
            return Err(GhiveError::Dimension(format!(
                "{name} coefficients are {}x{}, expected {}x{}",
                f.m(),
                f.p(),
                data.m(),
                data.p()
            )));
        }
    }
    if split.n() != data.n() {
        return Err(GhiveError::Dimension(format!(
            "split covers {} observations, dataset has {}",
            split.n(),
            data.n()
        )));
    }
    let fold_of_row = split.fold_labels();
    // Linear predictors under each fold's fit, n x M.
    let eta_from_d1 = data.x() * f_d1.values.transpose();
    let eta_from_d2 = data.x() * f_d2.values.transpose();
    let n = data.n();
    let columns: Vec<Vec<f64>> = (0..data.m())
        .into_par_iter()
        .map(|m| {
            (0..n)
                .map(|i| {
                    let eta = if fold_of_row[i] == 2 {
                        eta_from_d1[(i, m)]
                    } else {
                        eta_from_d2[(i, m)]
                    };
                    family.residual(data.y()[(i, m)], eta)
                })
                .collect()
        })
        .collect();
    let values = DMatrix::from_fn(n, data.m(), |i, m| columns[m][i]);
    Ok(ResidualMatrix { values, fold_of_row })
}

fn second_moment(resid: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let sub = resid.select_rows(rows);
    sub.tr_mul(&sub) / rows.len() as f64
}

/// Average of the two folds' residual second-moment matrices.
pub fn covariance_crossfit(resid: &ResidualMatrix, split: &SplitPlan) -> Result<DMatrix<f64>> {
    if split.d1.is_empty() || split.d2.is_empty() {
        return Err(GhiveError::InvalidInput("both folds must be non-empty".into()));
    }
    let s1 = second_moment(&resid.values, &split.d1);
    let s2 = second_moment(&resid.values, &split.d2);
    Ok(symmetrize(&((s1 + s2) * 0.5)))
}

/// Outcome of the eigenvalue-ratio rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    pub kbar: usize,
    /// `lambda_j / lambda_{j+1}` for `j = 1..=kbar`.
    pub ratios: Vec<f64>,
}

/// `floor(min(n, M) / 2)`
pub fn default_kbar(n: usize, m_dim: usize) -> usize {
    n.min(m_dim) / 2
}

/// Eigenvalue-ratio choice of the factor count over `1..=kbar`; ties go to
/// the smaller count.
pub fn select_k_bounded(eigvals: &[f64], kbar: usize) -> Result<KSelection> {
    if kbar < 1 {
        return Err(GhiveError::InvalidInput(
            "the eigenvalue ratio rule needs at least one candidate (kbar >= 1)".into(),
        ));
    }
    if eigvals.len() < kbar + 1 {
        return Err(GhiveError::InvalidInput(format!(
            "kbar = {kbar} needs {} eigenvalues, got {}",
            kbar + 1,
            eigvals.len()
        )));
    }
    if eigvals.iter().all(|&v| v <= 0.0) {
        return Err(GhiveError::DegenerateCovariance(
            "all eigenvalues of the residual covariance are non-positive".into(),
        ));
    }
    let ratios: Vec<f64> = (0..kbar)
        .map(|j| eigvals[j] / eigvals[j + 1].max(RATIO_FLOOR))
        .collect();
    let mut k = 1;
    for (j, r) in ratios.iter().enumerate() {
        if *r > ratios[k - 1] {
            k = j + 1;
        }
    }
    Ok(KSelection { k, kbar, ratios })
}

pub fn select_k(eigvals: &[f64], n: usize, m_dim: usize) -> Result<KSelection> {
    select_k_bounded(eigvals, default_kbar(n, m_dim))
}

/// `I - V_k V_k^T` for the first `k` columns of `eigvecs`.
pub fn projector_complement(eigvecs: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let m = eigvecs.nrows();
    if k > m || k > eigvecs.ncols() {
        return Err(GhiveError::InvalidInput(format!(
            "cannot take {k} eigenvectors in dimension {m}"
        )));
    }
    let v = eigvecs.columns(0, k);
    let p = DMatrix::identity(m, m) - v * v.transpose();
    Ok(symmetrize(&p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    #[serde(with = "serde_matrix")]
    pub sigma_hat: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub eigvals: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub eigvecs: DMatrix<f64>,
    pub k_hat: usize,
    /// Eigenvalue ratios examined by the selection rule (empty if not run).
    pub ratios: Vec<f64>,
    #[serde(with = "serde_matrix")]
    pub v_k: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub p_perp: DMatrix<f64>,
    /// Set when the covariance has an eigenvalue below `-1e-10 * lambda_1`.
    pub negative_eigenvalue: bool,
}

fn eigen_checked(sigma_hat: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>, bool)> {
    if !sigma_hat.is_square() {
        return Err(GhiveError::Dimension("covariance must be square".into()));
    }
    if !sigma_hat.iter().all(|v| v.is_finite()) {
        return Err(GhiveError::Numerical(
            "residual covariance has non-finite entries".into(),
        ));
    }
    let (eigvals, eigvecs) = sym_eigen_desc(sigma_hat);
    let top = eigvals.iter().copied().fold(0.0f64, f64::max);
    let negative = eigvals.iter().any(|&v| v < -NEGATIVE_EIGEN_TOL * top);
    if negative {
        log::warn!(
            "residual covariance has a negative eigenvalue {:.3e} (largest {:.3e})",
            eigvals.min(),
            top
        );
    }
    Ok((eigvals, eigvecs, negative))
}

/// PCA step: eigen-decomposes `sigma_hat` and removes the leading `k`
/// directions, choosing `k` by the eigenvalue-ratio rule when `None`.
pub fn spectral_decompose(sigma_hat: DMatrix<f64>, n: usize, k: Option<usize>) -> Result<SpectralResult> {
    let (eigvals, eigvecs, negative_eigenvalue) = eigen_checked(&sigma_hat)?;
    let m = eigvals.len();
    let (k_hat, ratios) = match k {
        Some(k) => {
            if k == 0 || k > m {
                return Err(GhiveError::InvalidInput(format!(
                    "factor count must lie in 1..={m}, got {k}"
                )));
            }
            (k, Vec::new())
        }
        None => {
            let sel = select_k(eigvals.as_slice(), n, m)?;
            (sel.k, sel.ratios)
        }
    };
    let p_perp = projector_complement(&eigvecs, k_hat)?;
    let v_k = eigvecs.columns(0, k_hat).into_owned();
    Ok(SpectralResult {
        sigma_hat,
        eigvals,
        eigvecs,
        k_hat,
        ratios,
        v_k,
        p_perp,
        negative_eigenvalue,
    })
}

/// Variant with a caller-supplied complement projector. The reported
/// factor count is the rank of `I - p_perp`.
pub fn spectral_with_projector(sigma_hat: DMatrix<f64>, n: usize, p_perp: &DMatrix<f64>) -> Result<SpectralResult> {
    let m = sigma_hat.nrows();
    if p_perp.nrows() != m || p_perp.ncols() != m {
        return Err(GhiveError::Dimension(format!(
            "projector is {}x{}, expected {m}x{m}",
            p_perp.nrows(),
            p_perp.ncols()
        )));
    }
    let (eigvals, eigvecs, negative_eigenvalue) = eigen_checked(&sigma_hat)?;
    let p_perp = symmetrize(p_perp);
    let complement = DMatrix::identity(m, m) - &p_perp;
    let (cvals, cvecs) = sym_eigen_desc(&complement);
    let k_hat = cvals.iter().filter(|&&v| v > 0.5).count();
    let ratios = match default_kbar(n, m) {
        0 => Vec::new(),
        kbar => select_k_bounded(eigvals.as_slice(), kbar)
            .map(|s| s.ratios)
            .unwrap_or_default(),
    };
    Ok(SpectralResult {
        sigma_hat,
        eigvals,
        eigvecs,
        k_hat,
        ratios,
        v_k: cvecs.columns(0, k_hat).into_owned(),
        p_perp,
        negative_eigenvalue,
    })
}
