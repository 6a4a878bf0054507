//! Synthetic data from the hidden-variable GLM
//!
//! ```text
//! Z ~ N(0, Sigma_Z),  X = A Z + W,  W ~ N(0, I_p)
//! Y_m | X, Z  ~  family with natural parameter Theta_m X + B_m Z
//! ```
//!
//! together with the ground truth needed to score estimators: the
//! projector onto `col(B)`, the pseudo-true parameter `F*` (by large-sample
//! Monte Carlo), and the error metrics used in the simulation study.
//!
//! Draw order is fixed. `make_truth` draws `A` row by row, then `B`, then
//! `Theta`, all from the truth stream of `config.seed`. `sample_dataset`
//! draws, per observation, `K` normals for `Z`, `p` normals for `W`, then
//! the `M` responses in column order, from the sample stream of `rep_seed`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GhiveError, Result};
use crate::estimator::{fit_mle_one, fit_qml_one, CoefMatrix, Dataset, FitControl};
use crate::family::GlmFamily;
use crate::linalg::{column_space_projector, serde_matrix, sym_eigen_desc};
use crate::rng::{stream_rng, Stream};

/// Sign convention for the off-diagonal decay of the circulant `Sigma_Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CirculantDecay {
    /// Entries `(-0.5)^min(d, K-d)`.
    #[default]
    Negative,
    /// Entries `0.5^min(d, K-d)`.
    Positive,
}

fn default_reps() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub m_dim: usize,
    pub k: usize,
    /// Scale applied to the unit-norm rows of `B`.
    pub eta: f64,
    pub family: GlmFamily,
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub decay: CirculantDecay,
}

impl SimConfig {
    /// The simulation-study defaults: Bernoulli responses, `K = 3`.
    pub fn new(n: usize, p: usize, m_dim: usize, eta: f64) -> Self {
        SimConfig {
            n,
            p,
            m_dim,
            k: 3,
            eta,
            family: GlmFamily::Bernoulli,
            seed: 0,
            reps: 1,
            decay: CirculantDecay::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.m_dim || self.k > self.p {
            return Err(GhiveError::InvalidInput(format!(
                "need 1 <= K <= min(p, M); got K={}, p={}, M={}",
                self.k, self.p, self.m_dim
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(GhiveError::InvalidInput(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.n < 2 {
            return Err(GhiveError::InvalidInput(format!("n must be >= 2, got {}", self.n)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    /// p x K loadings of the covariates on the hidden variables.
    #[serde(with = "serde_matrix")]
    pub a: DMatrix<f64>,
    /// M x K hidden-variable coefficients, rows of norm `eta`.
    #[serde(with = "serde_matrix")]
    pub b: DMatrix<f64>,
    /// M x p target coefficients with `P_B Theta = 0`.
    #[serde(with = "serde_matrix")]
    pub theta: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub sigma_z: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub p_b: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub p_b_perp: DMatrix<f64>,
}

impl SimTruth {
    /// `A Sigma_Z A^T + I`
    pub fn sigma_x(&self) -> DMatrix<f64> {
        let p = self.a.nrows();
        &self.a * &self.sigma_z * self.a.transpose() + DMatrix::identity(p, p)
    }
}

/// Symmetric circulant `K x K` matrix with unit diagonal.
pub fn circulant_sigma_z(k: usize, decay: CirculantDecay) -> DMatrix<f64> {
    let rate = match decay {
        CirculantDecay::Negative => -0.5f64,
        CirculantDecay::Positive => 0.5,
    };
    DMatrix::from_fn(k, k, |i, j| {
        let d = i.abs_diff(j);
        rate.powi(d.min(k - d) as i32)
    })
}

/// Symmetric square root through the eigen-decomposition; tolerates
/// singular (PSD) input.
fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(s);
    let root = vals.map(|v| v.max(0.0).sqrt());
    &vecs * DMatrix::from_diagonal(&root) * vecs.transpose()
}

fn normal_matrix_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let row = DVector::from_fn(cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = row.norm();
        out.set_row(i, &(row / norm).transpose());
    }
    out
}

pub fn make_truth(config: &SimConfig) -> Result<SimTruth> {
    config.validate()?;
    let sigma_z = circulant_sigma_z(config.k, config.decay);
    let (vals, _) = sym_eigen_desc(&sigma_z);
    if vals.min() < -1e-10 {
        return Err(GhiveError::Numerical(format!(
            "circulant Sigma_Z is not PSD (smallest eigenvalue {:.3e}); try the other decay convention",
            vals.min()
        )));
    }
    let mut rng = stream_rng(config.seed, Stream::Truth);
    let a = normal_matrix_unit_rows(&mut rng, config.p, config.k);
    let b = normal_matrix_unit_rows(&mut rng, config.m_dim, config.k) * config.eta;
    let theta_raw = normal_matrix_unit_rows(&mut rng, config.m_dim, config.p);
    let p_b = column_space_projector(&b);
    let p_b_perp = DMatrix::identity(config.m_dim, config.m_dim) - &p_b;
    let theta = &p_b_perp * theta_raw;
    Ok(SimTruth {
        a,
        b,
        theta,
        sigma_z,
        p_b,
        p_b_perp,
    })
}

fn check_truth(truth: &SimTruth, p: usize, m: usize) -> Result<()> {
    if truth.a.nrows() != p || truth.theta.nrows() != m || truth.theta.ncols() != p || truth.b.nrows() != m {
        return Err(GhiveError::Dimension(format!(
            "truth is for p={}, M={} but the config says p={p}, M={m}",
            truth.a.nrows(),
            truth.theta.nrows()
        )));
    }
    Ok(())
}

fn draw_response(rng: &mut ChaCha8Rng, family: GlmFamily, eta: f64) -> f64 {
    match family {
        GlmFamily::Gaussian => eta + rng.sample::<f64, _>(StandardNormal),
        GlmFamily::Bernoulli => {
            let prob = family.cumulant(eta).b1;
            f64::from(u8::from(rng.random::<f64>() < prob))
        }
        GlmFamily::Poisson => match Poisson::new(eta.exp()) {
            Ok(dist) => dist.sample(rng),
            Err(_) => 0.0,
        },
    }
}

fn sample_from(
    truth: &SimTruth,
    family: GlmFamily,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (p, k) = truth.a.shape();
    let m = truth.theta.nrows();
    let root = psd_sqrt(&truth.sigma_z);
    let mut x = DMatrix::zeros(n, p);
    let mut y = DMatrix::zeros(n, m);
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        let g = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zi = &root * g;
        let w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = &truth.a * &zi + w;
        let eta = &truth.theta * &xi + &truth.b * &zi;
        for j in 0..m {
            y[(i, j)] = draw_response(rng, family, eta[j]);
        }
        x.set_row(i, &xi.transpose());
        z.set_row(i, &zi.transpose());
    }
    (x, y, z)
}

/// One replication of size `config.n`.
pub fn sample_dataset(truth: &SimTruth, config: &SimConfig, rep_seed: u64) -> Result<Dataset> {
    sample_dataset_with_latent(truth, config, rep_seed).map(|(d, _)| d)
}

/// As [`sample_dataset`], also returning the hidden variables (n x K).
pub fn sample_dataset_with_latent(
    truth: &SimTruth,
    config: &SimConfig,
    rep_seed: u64,
) -> Result<(Dataset, DMatrix<f64>)> {
    config.validate()?;
    check_truth(truth, config.p, config.m_dim)?;
    let mut rng = stream_rng(rep_seed, Stream::Sample);
    let (x, y, z) = sample_from(truth, config.family, config.n, &mut rng);
    Ok((Dataset::new(x, y)?, z))
}

/// Monte Carlo approximation of the pseudo-true parameter `F*`: the
/// quasi-likelihood maximiser on one sample of size `n_mc`, without
/// splitting.
pub fn fstar_oracle(truth: &SimTruth, config: &SimConfig, n_mc: usize, ctl: FitControl) -> Result<CoefMatrix> {
    if n_mc < 10_000 {
        return Err(GhiveError::InvalidInput(format!(
            "the F* oracle needs at least 10000 draws, got {n_mc}"
        )));
    }
    config.validate()?;
    check_truth(truth, config.p, config.m_dim)?;
    let family = config.family;
    let mut rng = stream_rng(config.seed, Stream::Oracle);
    let (x, y, _) = sample_from(truth, family, n_mc, &mut rng);
    let fits = (0..config.m_dim)
        .into_par_iter()
        .map(|m| {
            let ym = &y.as_slice()[m * n_mc..(m + 1) * n_mc];
            let warm = fit_mle_one(&x, ym, family, ctl)?.coef;
            fit_qml_one(&x, ym, family, &[DVector::zeros(config.p), warm], ctl)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = DMatrix::zeros(config.m_dim, config.p);
    for (m, f) in fits.iter().enumerate() {
        values.set_row(m, &f.coef.transpose());
    }
    Ok(CoefMatrix {
        values,
        converged: fits.iter().map(|f| f.converged).collect(),
        grad_norm: fits.iter().map(|f| f.grad_norm).collect(),
    })
}

/// Error summaries against the generator's truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `||Theta_hat - Theta||_F^2 / sqrt(pM)`
    pub frob_err: f64,
    /// `||Theta_hat - Theta||_F / sqrt(pM)`
    pub frob_err_unsquared: f64,
    /// `||F* - Theta||_F / sqrt(M)`
    pub bias1: Option<f64>,
    /// `||P_B^perp F* - Theta||_F / sqrt(M)`
    pub bias2: Option<f64>,
    /// `||P_hat^perp - P_B^perp||_F`
    pub proj_err: Option<f64>,
}

fn same_shape(name: &str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(GhiveError::Dimension(format!(
            "{name} is {:?}, expected {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

pub fn metrics(
    theta_hat: &DMatrix<f64>,
    truth: &SimTruth,
    f_star: Option<&DMatrix<f64>>,
    p_perp_hat: Option<&DMatrix<f64>>,
) -> Result<Metrics> {
    same_shape("theta_hat", theta_hat, &truth.theta)?;
    let (m, p) = truth.theta.shape();
    let err = (theta_hat - &truth.theta).norm();
    let scale = ((p * m) as f64).sqrt();
    let sqrt_m = (m as f64).sqrt();
    let (bias1, bias2) = match f_star {
        Some(f) => {
            same_shape("f_star", f, &truth.theta)?;
            let b1 = (f - &truth.theta).norm() / sqrt_m;
            let b2 = (&truth.p_b_perp * f - &truth.theta).norm() / sqrt_m;
            (Some(b1), Some(b2))
        }
        None => (None, None),
    };
    let proj_err = match p_perp_hat {
        Some(ph) => {
            same_shape("projector", ph, &truth.p_b_perp)?;
            Some((ph - &truth.p_b_perp).norm())
        }
        None => None,
    };
    Ok(Metrics {
        frob_err: err * err / scale,
        frob_err_unsquared: err / scale,
        bias1,
        bias2,
        proj_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circulant_k3_is_singular() {
        let s = circulant_sigma_z(3, CirculantDecay::Negative);
        assert_eq!(
            s,
            DMatrix::from_row_slice(3, 3, &[1.0, -0.5, -0.5, -0.5, 1.0, -0.5, -0.5, -0.5, 1.0])
        );
        // direct 3x3 eigen computation: {1.5, 1.5, 0}
        let (vals, _) = sym_eigen_desc(&s);
        assert!((vals[0] - 1.5).abs() < 1e-12);
        assert!((vals[1] - 1.5).abs() < 1e-12);
        assert!(vals[2].abs() < 1e-12);
        let pos = circulant_sigma_z(3, CirculantDecay::Positive);
        let (vals, _) = sym_eigen_desc(&pos);
        assert!((vals[0] - 2.0).abs() < 1e-12 && (vals[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn truth_satisfies_construction() {
        let cfg = SimConfig::new(100, 6, 5, 3.0).with_seed(4);
        let t = make_truth(&cfg).unwrap();
        assert!((&t.p_b * &t.theta).norm() < 1e-10);
        for i in 0..6 {
            assert!((t.a.row(i).norm() - 1.0).abs() < 1e-10);
        }
        for i in 0..5 {
            assert!((t.b.row(i).norm() / 3.0 - 1.0).abs() < 1e-10);
        }
        assert_eq!(t, make_truth(&cfg).unwrap());
        assert_ne!(t, make_truth(&cfg.clone().with_seed(5)).unwrap());
    }

    #[test]
    fn projector_ignores_eta_scale() {
        let t1 = make_truth(&SimConfig::new(10, 4, 6, 1.0)).unwrap();
        let t8 = make_truth(&SimConfig::new(10, 4, 6, 8.0)).unwrap();
        assert!((&t1.p_b - &t8.p_b).amax() < 1e-12);
        assert!((&t1.theta - &t8.theta).amax() < 1e-12);
    }

    #[test]
    fn zero_eta_removes_hidden_effect() {
        let cfg = SimConfig::new(50, 4, 4, 0.0);
        let t = make_truth(&cfg).unwrap();
        assert_eq!(t.b, DMatrix::zeros(4, 3));
        assert_eq!(t.p_b_perp, DMatrix::identity(4, 4));
    }

    #[test]
    fn samples_are_binary_and_reproducible() {
        let cfg = SimConfig::new(200, 4, 4, 4.0).with_seed(2);
        let t = make_truth(&cfg).unwrap();
        let d = sample_dataset(&t, &cfg, 17).unwrap();
        assert!(d.y().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(d, sample_dataset(&t, &cfg, 17).unwrap());
        assert_ne!(d, sample_dataset(&t, &cfg, 18).unwrap());
    }

    #[test]
    fn invalid_configs() {
        assert!(make_truth(&SimConfig {
            k: 5,
            ..SimConfig::new(10, 4, 8, 1.0)
        })
        .is_err());
        assert!(make_truth(&SimConfig::new(10, 4, 4, -1.0)).is_err());
        let t = make_truth(&SimConfig::new(10, 4, 4, 1.0)).unwrap();
        assert!(sample_dataset(&t, &SimConfig::new(10, 5, 4, 1.0), 0).is_err());
        assert!(fstar_oracle(&t, &SimConfig::new(10, 4, 4, 1.0), 500, FitControl::default()).is_err());
    }

    #[test]
    fn metric_definitions() {
        let cfg = SimConfig::new(10, 4, 4, 2.0);
        let t = make_truth(&cfg).unwrap();
        let m = metrics(&t.theta, &t, None, Some(&t.p_b_perp)).unwrap();
        assert_eq!(m.frob_err, 0.0);
        assert_eq!(m.proj_err, Some(0.0));
        assert!(m.bias1.is_none());
        let mut e = DMatrix::zeros(4, 4);
        e[(0, 1)] = 3.0;
        e[(2, 3)] = 4.0;
        let m = metrics(&(&t.theta + &e), &t, Some(&t.theta), None).unwrap();
        assert!((m.frob_err - 25.0 / 4.0).abs() < 1e-12);
        assert!((m.frob_err_unsquared - 5.0 / 4.0).abs() < 1e-12);
        assert!(m.bias1.unwrap().abs() < 1e-15);
        assert!(metrics(&DMatrix::zeros(3, 4), &t, None, None).is_err());
    }
}
