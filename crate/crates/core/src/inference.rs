//! Approximate confidence intervals for `u^T (P_B^perp F*) v`.
//!
//! With `G_m = (1/n) sum_i (1 + zeta_m^(i)) x_i x_i^T` evaluated at the
//! averaged fit, the influence of observation `i` on response `m` is
//! `h_m^(i) = eps_m^(i) v^T G_m^{-1} x_i`, and
//! `s_hat^2 = sum_i (u^T P_hat^perp h^(i))^2`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GhiveError, Result};
use crate::estimator::{CoefMatrix, Dataset, Objective, Problem};
use crate::family::GlmFamily;
use crate::linalg::{inverse_spd, regularize_spd, serde_vector};
use crate::pipeline::GhiveFit;

/// Unit-norm pair `(u, v)` selecting `u^T Theta v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    #[serde(with = "serde_vector")]
    pub u: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub v: DVector<f64>,
}

impl Contrast {
    /// Normalises both vectors; the flag reports whether either input
    /// was off unit norm by more than `1e-8`.
    pub fn new(u: DVector<f64>, v: DVector<f64>) -> Result<(Self, bool)> {
        let nu = u.norm();
        let nv = v.norm();
        if !(nu > 0.0 && nu.is_finite() && nv > 0.0 && nv.is_finite()) {
            return Err(GhiveError::InvalidInput(
                "contrast vectors must be finite and non-zero".into(),
            ));
        }
        let renormalized = (nu - 1.0).abs() > 1e-8 || (nv - 1.0).abs() > 1e-8;
        if renormalized {
            log::warn!("contrast vectors rescaled to unit norm (|u| = {nu}, |v| = {nv})");
        }
        Ok((Contrast { u: u / nu, v: v / nv }, renormalized))
    }

    /// `u = e_m`, `v = e_j` (zero-based).
    pub fn unit(m_dim: usize, m: usize, p: usize, j: usize) -> Result<Self> {
        if m >= m_dim || j >= p {
            return Err(GhiveError::Dimension(format!(
                "unit contrast ({m}, {j}) outside {m_dim} x {p}"
            )));
        }
        let mut u = DVector::zeros(m_dim);
        let mut v = DVector::zeros(p);
        u[m] = 1.0;
        v[j] = 1.0;
        Ok(Contrast { u, v })
    }

    pub fn apply(&self, theta: &DMatrix<f64>) -> f64 {
        (self.u.transpose() * theta * &self.v)[0]
    }
}

/// Regularisation record for one `G_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GCondition {
    pub response: usize,
    pub min_eigenvalue: f64,
    pub regularized: bool,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GMatrix {
    pub g: DMatrix<f64>,
    pub condition: GCondition,
}

/// Estimated expected Hessians of the quasi-likelihood, one per response,
/// shifted by `delta * I` when close to singular.
pub fn g_matrices(data: &Dataset, family: GlmFamily, f_hat: &CoefMatrix) -> Result<Vec<GMatrix>> {
    if f_hat.m() != data.m() || f_hat.p() != data.p() {
        return Err(GhiveError::Dimension(format!(
            "coefficients are {}x{}, data has M={}, p={}",
            f_hat.m(),
            f_hat.p(),
            data.m(),
            data.p()
        )));
    }
    if !f_hat.values.iter().all(|v| v.is_finite()) {
        return Err(GhiveError::Numerical("coefficients are not finite".into()));
    }
    Ok((0..data.m())
        .into_par_iter()
        .map(|m| {
            let problem = Problem {
                x: data.x(),
                y: data.response(m),
                objective: Objective::Quasi(family),
            };
            let eta = problem.linear_predictor(&f_hat.row(m));
            let mut g = problem.neg_hessian_at(&eta);
            let min_eigenvalue = crate::linalg::min_eigenvalue(&g);
            let delta = regularize_spd(&mut g);
            GMatrix {
                g,
                condition: GCondition {
                    response: m,
                    min_eigenvalue,
                    regularized: delta.is_some(),
                    delta: delta.unwrap_or(0.0),
                },
            }
        })
        .collect())
}

/// Which standard error the interval half-width uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeScale {
    /// `s_hat / sqrt(n)` with `s_hat^2` the unnormalised sum.
    #[default]
    SumOverRootN,
    /// `s_hat / n`, the usual scale of an average of `n` influence terms.
    SumOverN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// `sum_i (u^T P_hat^perp h^(i))^2`
    pub s_hat_sq: f64,
    /// `sqrt(s_hat_sq / n)`
    pub se: f64,
    /// `sqrt(s_hat_sq) / n`
    pub se_over_n: f64,
    pub g_condition: Vec<GCondition>,
}

fn check_fit_against(fit: &GhiveFit, data: &Dataset, contrast: &Contrast) -> Result<()> {
    if fit.m() != data.m() || fit.p() != data.p() {
        return Err(GhiveError::Dimension(format!(
            "fit is for M={}, p={} but data has M={}, p={}",
            fit.m(),
            fit.p(),
            data.m(),
            data.p()
        )));
    }
    if contrast.u.len() != fit.m() || contrast.v.len() != fit.p() {
        return Err(GhiveError::Dimension(format!(
            "contrast has |u|={}, |v|={}, expected {} and {}",
            contrast.u.len(),
            contrast.v.len(),
            fit.m(),
            fit.p()
        )));
    }
    Ok(())
}

/// Influence matrix `H` (n x M) with `H[i, m] = eps_m^(i) v^T G_m^{-1} x_i`,
/// residuals taken at the averaged fit on all observations.
pub fn influence(
    data: &Dataset,
    family: GlmFamily,
    f_hat: &CoefMatrix,
    gs: &[GMatrix],
    v: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = data.n();
    let cols = (0..data.m())
        .into_par_iter()
        .map(|m| {
            let g_inv = inverse_spd(&gs[m].g)
                .ok_or_else(|| GhiveError::Numerical(format!("G matrix for response {m} is not invertible")))?;
            let a = g_inv * v;
            let xa = data.x() * &a;
            let eta = data.x() * f_hat.row(m);
            let y = data.response(m);
            Ok((0..n)
                .map(|i| family.residual(y[i], eta[i]) * xa[i])
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(n, data.m(), |i, m| cols[m][i]))
}

pub fn variance_estimate(data: &Dataset, fit: &GhiveFit, contrast: &Contrast) -> Result<VarianceEstimate> {
    check_fit_against(fit, data, contrast)?;
    let gs = g_matrices(data, fit.family, &fit.f_hat)?;
    let h = influence(data, fit.family, &fit.f_hat, &gs, &contrast.v)?;
    let w = &fit.spectral.p_perp * &contrast.u;
    let t = h * w;
    let s_hat_sq = t.norm_squared();
    let n = data.n() as f64;
    Ok(VarianceEstimate {
        s_hat_sq,
        se: (s_hat_sq / n).sqrt(),
        se_over_n: s_hat_sq.sqrt() / n,
        g_condition: gs.into_iter().map(|g| g.condition).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub contrast: Contrast,
    pub estimate: f64,
    /// Standard error used for the interval.
    pub se: f64,
    pub se_scale: SeScale,
    /// `sqrt(s_hat_sq / n)`
    pub se_sum_over_root_n: f64,
    /// `sqrt(s_hat_sq) / n`
    pub se_sum_over_n: f64,
    pub s_hat_sq: f64,
    pub alpha: f64,
    pub quantile: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub g_condition: Vec<GCondition>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(GhiveError::InvalidInput(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )))
    }
}

/// `u^T Theta_hat v -/+ q_{1-alpha/2} s_hat / sqrt(n)`
pub fn confidence_interval(fit: &GhiveFit, data: &Dataset, contrast: &Contrast, alpha: f64) -> Result<InferenceResult> {
    confidence_interval_scaled(fit, data, contrast, alpha, SeScale::default())
}

pub fn confidence_interval_scaled(
    fit: &GhiveFit,
    data: &Dataset,
    contrast: &Contrast,
    alpha: f64,
    scale: SeScale,
) -> Result<InferenceResult> {
    check_alpha(alpha)?;
    let var = variance_estimate(data, fit, contrast)?;
    let estimate = contrast.apply(&fit.theta_hat);
    let quantile = normal_quantile(1.0 - alpha / 2.0);
    let se = match scale {
        SeScale::SumOverRootN => var.se,
        SeScale::SumOverN => var.se_over_n,
    };
    let half = quantile * se;
    Ok(InferenceResult {
        contrast: contrast.clone(),
        estimate,
        se,
        se_scale: scale,
        se_sum_over_root_n: var.se,
        se_sum_over_n: var.se_over_n,
        s_hat_sq: var.s_hat_sq,
        alpha,
        quantile,
        ci_lo: estimate - half,
        ci_hi: estimate + half,
        g_condition: var.g_condition,
    })
}

/// Wald interval for `v^T F_m` from a naive per-response GLM fit, using the
/// model-based information `(1/n) sum_i b''(eta_i) x_i x_i^T`.
pub fn naive_wald_interval(
    data: &Dataset,
    family: GlmFamily,
    naive: &CoefMatrix,
    m: usize,
    v: &DVector<f64>,
    alpha: f64,
) -> Result<(f64, f64, f64)> {
    check_alpha(alpha)?;
    if m >= data.m() || v.len() != data.p() || naive.m() != data.m() {
        return Err(GhiveError::Dimension(
            "response index or contrast outside the fit".into(),
        ));
    }
    let problem = Problem {
        x: data.x(),
        y: data.response(m),
        objective: Objective::Loglik(family),
    };
    let coef = naive.row(m);
    let info = problem.neg_hessian_at(&problem.linear_predictor(&coef));
    let inv = inverse_spd(&info)
        .ok_or_else(|| GhiveError::Numerical(format!("Fisher information for response {m} is singular")))?;
    let se = ((v.transpose() * inv * v)[0] / data.n() as f64).sqrt();
    let estimate = v.dot(&coef);
    let half = normal_quantile(1.0 - alpha / 2.0) * se;
    Ok((estimate, estimate - half, estimate + half))
}

/// Standard normal quantile by Wichura's rational approximation
/// (algorithm AS 241), accurate to about 1e-16.
#[allow(clippy::inconsistent_digit_grouping, clippy::excessive_precision)]
pub fn normal_quantile(prob: f64) -> f64 {
    if prob.is_nan() || !(0.0..=1.0).contains(&prob) {
        return f64::NAN;
    }
    if prob == 0.0 {
        return f64::NEG_INFINITY;
    }
    if prob == 1.0 {
        return f64::INFINITY;
    }
    let q = prob - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((r * 2509.080_928_730_122_7 + 33430.575_583_588_128) * r + 67265.770_927_008_7) * r
            + 45921.953_931_549_87)
            * r
            + 13731.693_765_509_461)
            * r
            + 1971.590_950_306_551_4)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_6;
        let den = ((((((r * 5226.495_278_852_546 + 28729.085_735_721_943) * r + 39307.895_800_092_71) * r
            + 21213.794_301_586_596)
            * r
            + 5394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { prob } else { 1.0 - prob };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((r * 7.745_450_142_783_414e-4 + 0.022_723_844_989_269_184) * r + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((r * 1.050_750_071_644_416_8e-9 + 5.475_938_084_995_345e-4) * r + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num =
            ((((((r * 2.010_334_399_292_288e-7 + 2.711_555_568_743_487_6e-5) * r + 0.001_242_660_947_388_078_4) * r
                + 0.026_532_189_526_576_124)
                * r
                + 0.296_560_571_828_504_9)
                * r
                + 1.784_826_539_917_291_3)
                * r
                + 5.463_784_911_164_114)
                * r
                + 6.657_904_643_501_104;
        let den =
            ((((((r * 2.044_263_103_389_939_8e-15 + 1.421_511_758_316_446e-7) * r + 1.846_318_317_510_054_8e-5) * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_887_9)
                * r
                + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
