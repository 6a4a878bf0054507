//! Python bindings. Matrices cross the boundary as lists of rows, so numpy
//! arrays work as inputs.

use ghive::{FitControl, FitMode, GhiveError, GhiveFit, GlmFamily, SeScale, SimConfig, DEFAULT_SEED};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: GhiveError) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn family(name: &str) -> PyResult<GlmFamily> {
    name.parse::<GlmFamily>().map_err(to_py)
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(PyValueError::new_err(format!("{what} is empty")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!(
            "{what}: row {i} has {} entries, expected {ncols}",
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.into_iter().flatten(),
    ))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<ghive::Dataset> {
    ghive::Dataset::new(matrix(x, "x")?, matrix(y, "y")?).map_err(to_py)
}

/// `(b, b', b'')` at `eta`.
#[pyfunction]
fn cumulant(family_name: &str, eta: f64) -> PyResult<(f64, f64, f64)> {
    let c = family(family_name)?.b_derivs(eta).map_err(to_py)?;
    Ok((c.b, c.b1, c.b2))
}

#[pyfunction]
fn quasi_loglik_term(family_name: &str, y: f64, eta: f64) -> PyResult<f64> {
    family(family_name)?.quasi_loglik_term(y, eta).map_err(to_py)
}

#[pyfunction]
fn weighted_residual(family_name: &str, y: f64, eta: f64) -> PyResult<f64> {
    family(family_name)?.weighted_residual(y, eta).map_err(to_py)
}

/// Two folds of `0..n` as sorted index lists.
#[pyfunction]
#[pyo3(signature = (n, seed = DEFAULT_SEED))]
fn make_split(n: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let s = ghive::make_split(n, seed).map_err(to_py)?;
    Ok((s.d1, s.d2))
}

/// Result of `ghive_fit`.
#[pyclass(name = "Fit", module = "ghive_py", frozen)]
struct Fit {
    inner: GhiveFit,
}

#[pymethods]
impl Fit {
    #[getter]
    fn theta_hat(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.theta_hat)
    }

    #[getter]
    fn f_hat(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.f_hat.values)
    }

    #[getter]
    fn p_perp(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.spectral.p_perp)
    }

    #[getter]
    fn sigma_hat(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.spectral.sigma_hat)
    }

    #[getter]
    fn eigvals(&self) -> Vec<f64> {
        self.inner.spectral.eigvals.iter().copied().collect()
    }

    #[getter]
    fn k_hat(&self) -> usize {
        self.inner.k_hat()
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.name()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Fit {
            inner: GhiveFit::from_json(text).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Fit(family={}, M={}, p={}, k_hat={})",
            self.inner.family.name(),
            self.inner.m(),
            self.inner.p(),
            self.inner.k_hat()
        )
    }
}

/// `k=None` selects the factor count from the data; `projector` supplies
/// the complement projector directly.
#[pyfunction]
#[pyo3(signature = (x, y, family_name, seed = DEFAULT_SEED, k = None, projector = None))]
fn ghive_fit(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    family_name: &str,
    seed: u64,
    k: Option<usize>,
    projector: Option<Vec<Vec<f64>>>,
) -> PyResult<Fit> {
    let fam = family(family_name)?;
    let data = dataset(x, y)?;
    let mode = match (k, projector) {
        (Some(_), Some(_)) => return Err(PyValueError::new_err("give either k or projector, not both")),
        (None, Some(p)) => FitMode::OracleP(matrix(p, "projector")?),
        (Some(k), None) => FitMode::OracleK(k),
        (None, None) => FitMode::DataDriven,
    };
    let inner = py
        .detach(|| ghive::ghive_fit(&data, fam, seed, &mode, FitControl::default()))
        .map_err(to_py)?;
    Ok(Fit { inner })
}

/// Interval for `u^T Theta v`; returns a dict.
#[pyfunction]
#[pyo3(signature = (fit, x, y, u, v, alpha = 0.05, se_scale = "sum-over-root-n"))]
#[allow(clippy::too_many_arguments)]
fn confidence_interval<'py>(
    py: Python<'py>,
    fit: &Fit,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    u: Vec<f64>,
    v: Vec<f64>,
    alpha: f64,
    se_scale: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let scale = match se_scale {
        "sum-over-root-n" => SeScale::SumOverRootN,
        "sum-over-n" => SeScale::SumOverN,
        other => return Err(PyValueError::new_err(format!("unknown se_scale {other:?}"))),
    };
    let data = dataset(x, y)?;
    let (contrast, renormalized) = ghive::Contrast::new(DVector::from_vec(u), DVector::from_vec(v)).map_err(to_py)?;
    let r = ghive::confidence_interval_scaled(&fit.inner, &data, &contrast, alpha, scale).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("estimate", r.estimate)?;
    d.set_item("se", r.se)?;
    d.set_item("se_sum_over_root_n", r.se_sum_over_root_n)?;
    d.set_item("se_sum_over_n", r.se_sum_over_n)?;
    d.set_item("s_hat_sq", r.s_hat_sq)?;
    d.set_item("alpha", r.alpha)?;
    d.set_item("quantile", r.quantile)?;
    d.set_item("ci_lo", r.ci_lo)?;
    d.set_item("ci_hi", r.ci_hi)?;
    d.set_item("renormalized", renormalized)?;
    d.set_item("g_regularized", r.g_condition.iter().any(|g| g.regularized))?;
    Ok(d)
}

/// Naive per-response maximum likelihood, M x p.
#[pyfunction]
fn fit_naive_mle(py: Python<'_>, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, family_name: &str) -> PyResult<Vec<Vec<f64>>> {
    let fam = family(family_name)?;
    let data = dataset(x, y)?;
    let coefs = py
        .detach(|| ghive::fit_naive_mle(&data, fam, FitControl::default()))
        .map_err(to_py)?;
    Ok(rows(&coefs.values))
}

/// One synthetic dataset and its ground truth. Returns `(x, y, truth)`
/// where `truth` holds `theta`, `b`, `a`, `p_b_perp`.
#[pyfunction]
#[pyo3(signature = (n, p, m, k, eta, family_name = "bernoulli", seed = DEFAULT_SEED, rep = 0))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn simulate<'py>(
    py: Python<'py>,
    n: usize,
    p: usize,
    m: usize,
    k: usize,
    eta: f64,
    family_name: &str,
    seed: u64,
    rep: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Bound<'py, PyDict>)> {
    let mut cfg = SimConfig::new(n, p, m, eta).with_seed(seed);
    cfg.k = k;
    cfg.family = family(family_name)?;
    let truth = ghive::make_truth(&cfg).map_err(to_py)?;
    let data = ghive::sample_dataset(&truth, &cfg, ghive::rep_seed(seed, rep)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("theta", rows(&truth.theta))?;
    d.set_item("b", rows(&truth.b))?;
    d.set_item("a", rows(&truth.a))?;
    d.set_item("p_b_perp", rows(&truth.p_b_perp))?;
    Ok((rows(data.x()), rows(data.y()), d))
}

#[pymodule]
fn ghive_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DEFAULT_SEED", DEFAULT_SEED)?;
    m.add_class::<Fit>()?;
    m.add_function(wrap_pyfunction!(cumulant, m)?)?;
    m.add_function(wrap_pyfunction!(quasi_loglik_term, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_residual, m)?)?;
    m.add_function(wrap_pyfunction!(make_split, m)?)?;
    m.add_function(wrap_pyfunction!(ghive_fit, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_interval, m)?)?;
    m.add_function(wrap_pyfunction!(fit_naive_mle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
