//! End-to-end estimation: split, per-fold quasi-likelihood fits, residual
//! PCA and projection, giving `Theta_hat = P_hat^perp F_hat`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GhiveError, Result};
use crate::estimator::{fit_qml_all, make_split, CoefMatrix, CrossFitCoefs, Dataset, FitControl, SplitPlan};
use crate::family::GlmFamily;
use crate::linalg::serde_matrix;
use crate::spectral::{
    covariance_crossfit, crossfit_residuals, spectral_decompose, spectral_with_projector, SpectralResult,
};

/// How the projector is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum FitMode {
    /// Factor count from the eigenvalue-ratio rule.
    DataDriven,
    /// Known factor count.
    OracleK(usize),
    /// Known complement projector `P_B^perp` (M x M).
    OracleP(DMatrix<f64>),
}

/// Serialised form of [`FitMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeRecord {
    DataDriven,
    OracleK { k: usize },
    OracleP,
}

impl From<&FitMode> for ModeRecord {
    fn from(mode: &FitMode) -> Self {
        match mode {
            FitMode::DataDriven => ModeRecord::DataDriven,
            FitMode::OracleK(k) => ModeRecord::OracleK { k: *k },
            FitMode::OracleP(_) => ModeRecord::OracleP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDiagnostics {
    pub response: usize,
    pub converged_d1: bool,
    pub converged_d2: bool,
    pub grad_norm_d1: f64,
    pub grad_norm_d2: f64,
}

impl ResponseDiagnostics {
    pub fn converged(&self) -> bool {
        self.converged_d1 && self.converged_d2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhiveFit {
    pub family: GlmFamily,
    pub seed: u64,
    pub control: FitControl,
    pub mode: ModeRecord,
    /// `P_hat^perp F_hat`, M x p.
    #[serde(with = "serde_matrix")]
    pub theta_hat: DMatrix<f64>,
    /// Average of the two fold fits.
    pub f_hat: CoefMatrix,
    pub f_d1: CoefMatrix,
    pub f_d2: CoefMatrix,
    #[serde(flatten)]
    pub spectral: SpectralResult,
    pub split: SplitPlan,
    pub diagnostics: Vec<ResponseDiagnostics>,
    pub warnings: Vec<String>,
}

impl GhiveFit {
    pub fn m(&self) -> usize {
        self.theta_hat.nrows()
    }

    pub fn p(&self) -> usize {
        self.theta_hat.ncols()
    }

    pub fn k_hat(&self) -> usize {
        self.spectral.k_hat
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Everything up to (and including) the residual covariance. The
/// projection step is cheap, so several modes can share one of these.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitStage {
    pub family: GlmFamily,
    pub control: FitControl,
    pub split: SplitPlan,
    pub coefs: CrossFitCoefs,
    pub sigma_hat: DMatrix<f64>,
    pub n: usize,
}

/// Split, fit both folds and form the cross-fitted residual covariance.
pub fn crossfit_stage(data: &Dataset, family: GlmFamily, seed: u64, ctl: FitControl) -> Result<CrossFitStage> {
    data.validate_for(family)?;
    let split = make_split(data.n(), seed)?;
    let coefs = fit_qml_all(data, family, &split, ctl)?;
    let resid = crossfit_residuals(data, family, &coefs.f_d1, &coefs.f_d2, &split)?;
    let sigma_hat = covariance_crossfit(&resid, &split)?;
    Ok(CrossFitStage {
        family,
        control: ctl,
        split,
        coefs,
        sigma_hat,
        n: data.n(),
    })
}

impl CrossFitStage {
    /// PCA and projection under `mode`.
    pub fn finish(&self, mode: &FitMode) -> Result<GhiveFit> {
        let m = self.sigma_hat.nrows();
        let spectral = match mode {
            FitMode::DataDriven => spectral_decompose(self.sigma_hat.clone(), self.n, None)?,
            FitMode::OracleK(k) => spectral_decompose(self.sigma_hat.clone(), self.n, Some(*k))?,
            FitMode::OracleP(p) => {
                if p.shape() != (m, m) {
                    return Err(GhiveError::Dimension(format!(
                        "supplied projector is {}x{}, expected {m}x{m}",
                        p.nrows(),
                        p.ncols()
                    )));
                }
                spectral_with_projector(self.sigma_hat.clone(), self.n, p)?
            }
        };
        let f_hat = self.coefs.f_avg.clone();
        let theta_hat = &spectral.p_perp * &f_hat.values;

        let diagnostics: Vec<ResponseDiagnostics> = (0..m)
            .map(|r| ResponseDiagnostics {
                response: r,
                converged_d1: self.coefs.f_d1.converged[r],
                converged_d2: self.coefs.f_d2.converged[r],
                grad_norm_d1: self.coefs.f_d1.grad_norm[r],
                grad_norm_d2: self.coefs.f_d2.grad_norm[r],
            })
            .collect();
        let mut warnings = Vec::new();
        for d in diagnostics.iter().filter(|d| !d.converged()) {
            warnings.push(format!(
                "response {} did not converge (gradient sup-norm {:.3e} / {:.3e})",
                d.response, d.grad_norm_d1, d.grad_norm_d2
            ));
        }
        if spectral.negative_eigenvalue {
            warnings.push(format!(
                "residual covariance has a negative eigenvalue {:.3e}",
                spectral.eigvals.min()
            ));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(GhiveFit {
            family: self.family,
            seed: self.split.seed,
            control: self.control,
            mode: ModeRecord::from(mode),
            theta_hat,
            f_hat,
            f_d1: self.coefs.f_d1.clone(),
            f_d2: self.coefs.f_d2.clone(),
            spectral,
            split: self.split.clone(),
            diagnostics,
            warnings,
        })
    }
}

/// Full estimation pass.
pub fn ghive_fit(data: &Dataset, family: GlmFamily, seed: u64, mode: &FitMode, ctl: FitControl) -> Result<GhiveFit> {
    if let FitMode::OracleK(0) = mode {
        return Err(GhiveError::InvalidInput("oracle factor count must be positive".into()));
    }
    crossfit_stage(data, family, seed, ctl)?.finish(mode)
}
