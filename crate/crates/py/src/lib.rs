//! Python bindings for the certkit certification harness.
//!
//! Exposes the probability primitives, calibration and dispersion tests,
//! OLS-based disentanglement checks, the model head with its OOD rule,
//! Lipschitz bound calculators, and the synthetic scenario generators.
//! Vectors are plain Python lists of floats; test outcomes come back as
//! dictionaries.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use certkit::calibration as cal;
use certkit::data::{LatentGaussian, OperatingRange};
use certkit::dist::{self, PredictiveDistribution};
use certkit::elbo;
use certkit::head;
use certkit::lipschitz::{self, LayerSpec};
use certkit::report::TestOutcome;
use certkit::simstudy;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A univariate predictive distribution: normal, uniform, or an
/// equal-weight mixture of normals.
#[pyclass(name = "PredictiveDistribution", from_py_object)]
#[derive(Clone)]
struct PyPredictive {
    inner: PredictiveDistribution,
}

#[pymethods]
impl PyPredictive {
    #[staticmethod]
    fn normal(mu: f64, sigma: f64) -> PyResult<Self> {
        Ok(PyPredictive { inner: PredictiveDistribution::normal(mu, sigma).map_err(err)? })
    }

    #[staticmethod]
    fn uniform(lo: f64, hi: f64) -> PyResult<Self> {
        Ok(PyPredictive { inner: PredictiveDistribution::uniform(lo, hi).map_err(err)? })
    }

    #[staticmethod]
    fn mixture(members: Vec<(f64, f64)>) -> PyResult<Self> {
        let members = members
            .into_iter()
            .map(|(mu, sigma)| dist::Normal { mu, sigma })
            .collect();
        Ok(PyPredictive { inner: PredictiveDistribution::mixture(members).map_err(err)? })
    }

    fn cdf(&self, x: f64) -> f64 {
        self.inner.cdf(x)
    }

    fn pdf(&self, x: f64) -> f64 {
        self.inner.pdf(x)
    }

    fn invcdf(&self, p: f64) -> PyResult<f64> {
        self.inner.invcdf(p).map_err(err)
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    /// Central interval [invcdf(0.5 - p/2), invcdf(0.5 + p/2)].
    fn central_interval(&self, p: f64) -> PyResult<(f64, f64)> {
        let iv = self.inner.central_interval(p).map_err(err)?;
        Ok((iv.lo, iv.hi))
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

fn outcome_to_dict<'py>(py: Python<'py>, o: &TestOutcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", &o.name)?;
    d.set_item("passed", o.passed)?;
    d.set_item("skipped", o.skipped)?;
    let stats = PyDict::new(py);
    for (k, v) in &o.statistics {
        stats.set_item(k, v)?;
    }
    d.set_item("statistics", stats)?;
    if let Some(detail) = &o.detail {
        d.set_item("detail", detail)?;
    }
    Ok(d)
}

#[pyfunction]
fn normal_cdf(mu: f64, sigma: f64, x: f64) -> PyResult<f64> {
    dist::normal_cdf(mu, sigma, x).map_err(err)
}

#[pyfunction]
fn normal_invcdf(mu: f64, sigma: f64, p: f64) -> PyResult<f64> {
    dist::normal_invcdf(mu, sigma, p).map_err(err)
}

#[pyfunction]
fn student_t_p_value(t_stat: f64, dof: u64) -> PyResult<f64> {
    dist::student_t_p_value(t_stat, dof).map_err(err)
}

#[pyfunction]
fn binomial_pmf(n: u64, p_fail: f64, k: u64) -> PyResult<f64> {
    dist::binomial_pmf(n, p_fail, k).map_err(err)
}

fn to_preds(preds: Vec<PyRef<'_, PyPredictive>>) -> Vec<PredictiveDistribution> {
    preds.iter().map(|p| p.inner.clone()).collect()
}

/// Observed coverage over the probability grid; returns (ps, frequencies).
#[pyfunction]
fn compute_calibration_curve(
    preds: Vec<PyRef<'_, PyPredictive>>,
    obs: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let curve = cal::compute_calibration_curve(&to_preds(preds), &obs).map_err(err)?;
    Ok((curve.ps, curve.observed_frequencies))
}

#[pyfunction]
#[pyo3(signature = (preds, obs, eps = 0.10))]
fn test_calibration_curve<'py>(
    py: Python<'py>,
    preds: Vec<PyRef<'py, PyPredictive>>,
    obs: Vec<f64>,
    eps: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let o = cal::test_calibration_curve(&to_preds(preds), &obs, eps).map_err(err)?;
    outcome_to_dict(py, &o)
}

#[pyfunction]
fn pit_values(preds: Vec<PyRef<'_, PyPredictive>>, obs: Vec<f64>) -> PyResult<Vec<f64>> {
    cal::pit_values(&to_preds(preds), &obs).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (preds, obs, eps = 0.10))]
fn test_dispersion<'py>(
    py: Python<'py>,
    preds: Vec<PyRef<'py, PyPredictive>>,
    obs: Vec<f64>,
    eps: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let o = cal::test_dispersion(&to_preds(preds), &obs, eps).map_err(err)?;
    outcome_to_dict(py, &o)
}

#[pyfunction]
#[pyo3(signature = (n_tests, n_fail, p_fail = 0.01, thresh = 0.001))]
fn test_probability_n_fails<'py>(
    py: Python<'py>,
    n_tests: u64,
    n_fail: u64,
    p_fail: f64,
    thresh: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let o = cal::test_probability_n_fails(n_tests, n_fail, p_fail, thresh).map_err(err)?;
    outcome_to_dict(py, &o)
}

/// OLS fit of target ~ design + intercept; returns a dict with betas
/// (intercept last), t_stats, p_values, sigma2_hat and dof.
#[pyfunction]
fn fit_ols<'py>(
    py: Python<'py>,
    design: Vec<Vec<f64>>,
    target: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let n = design.len();
    let p = design.first().map_or(0, |r| r.len());
    let x = nalgebra::DMatrix::from_fn(n, p, |i, j| design[i][j]);
    let y = nalgebra::DVector::from_column_slice(&target);
    let fit = certkit::linear::fit_ols(&x, &y).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("betas", fit.betas)?;
    d.set_item("t_stats", fit.t_stats)?;
    d.set_item("p_values", fit.p_values)?;
    d.set_item("sigma2_hat", fit.sigma2_hat)?;
    d.set_item("dof", fit.dof)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (latents, v_content, significance_level = 0.05))]
fn test_1_to_1_mapping<'py>(
    py: Python<'py>,
    latents: Vec<Vec<f64>>,
    v_content: Vec<Vec<f64>>,
    significance_level: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let n = latents.len();
    let d_lat = latents.first().map_or(0, |r| r.len());
    let k = v_content.first().map_or(0, |r| r.len());
    let z = nalgebra::DMatrix::from_fn(n, d_lat, |i, j| latents[i][j]);
    let v = nalgebra::DMatrix::from_fn(v_content.len(), k, |i, j| v_content[i][j]);
    let res = certkit::linear::test_1_to_1_mapping(&z, &v, significance_level).map_err(err)?;
    let d = outcome_to_dict(py, &res.outcome)?;
    d.set_item(
        "assignment",
        res.assignment.iter().map(|a| a.map(|v| v as i64).unwrap_or(-1)).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Transforms a latent Gaussian through the parameter-free model head;
/// returns (y, sigma_y).
#[pyfunction]
#[pyo3(signature = (mu, sigma, a, b, flip = false))]
fn head_transform(mu: f64, sigma: f64, a: f64, b: f64, flip: bool) -> PyResult<(f64, f64)> {
    let n = head::head_transform(LatentGaussian { mu, sigma }, a, b, flip).map_err(err)?;
    Ok((n.mu, n.sigma))
}

/// Index of the ensemble member whose mean is the (lower) median.
#[pyfunction]
fn ensemble_median_select(mus: Vec<f64>) -> PyResult<usize> {
    if mus.is_empty() {
        return Err(PyValueError::new_err("need at least one member"));
    }
    Ok(head::lower_median_index(&mus))
}

/// Gaussian-mixture OOD rule over per-member latent (mu, sigma) pairs for
/// one record; returns a dict with per-dimension outside mass and flags.
#[pyfunction]
#[pyo3(signature = (members, lo, hi, tau_ood = 0.15, flip = None))]
fn ood_detect<'py>(
    py: Python<'py>,
    members: Vec<Vec<(f64, f64)>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    tau_ood: f64,
    flip: Option<Vec<bool>>,
) -> PyResult<Bound<'py, PyDict>> {
    let range = OperatingRange::new(lo, hi).map_err(err)?;
    let flip = flip.unwrap_or_else(|| vec![false; range.dims()]);
    let config = head::HeadConfig::new(range, flip).map_err(err)?;
    let members: Vec<Vec<LatentGaussian>> = members
        .into_iter()
        .map(|m| m.into_iter().map(|(mu, sigma)| LatentGaussian { mu, sigma }).collect())
        .collect();
    let decision = head::ood_detect(&members, &config, tau_ood).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("outside_mass", decision.outside_mass)?;
    d.set_item("flagged_dims", decision.flagged_dims)?;
    d.set_item("is_ood", decision.is_ood)?;
    d.set_item(
        "selected",
        decision.selected.iter().map(|n| (n.mu, n.sigma)).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

#[pyfunction]
fn gaussian_kl(mu: Vec<f64>, sigma: Vec<f64>, lambda: f64) -> f64 {
    elbo::gaussian_kl(&mu, &sigma, lambda)
}

#[pyfunction]
fn bernoulli_recon_loss(logits: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    elbo::bernoulli_recon_loss(&logits, &target).map_err(err)
}

#[pyfunction]
fn average_normals(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> (f64, f64) {
    let n = elbo::average_normals(
        dist::Normal { mu: mu1, sigma: sigma1 },
        dist::Normal { mu: mu2, sigma: sigma2 },
    );
    (n.mu, n.sigma)
}

/// Bi-Lipschitz bounds of a residual stack: (lower, upper, vacuous_lower).
#[pyfunction]
fn residual_stack_bounds(alpha: f64, depth: usize) -> PyResult<(f64, f64, bool)> {
    let spec = LayerSpec::Composition {
        layers: vec![LayerSpec::Residual { alpha }; depth],
    };
    let b = lipschitz::bilipschitz_bounds(&spec).map_err(err)?;
    Ok((b.lower, b.upper, b.vacuous_lower))
}

/// Extreme singular values (sigma_min, sigma_max) of a dense matrix.
#[pyfunction]
fn singular_value_bounds(matrix: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let r = matrix.len();
    let c = matrix.first().map_or(0, |row| row.len());
    let m = nalgebra::DMatrix::from_fn(r, c, |i, j| matrix[i][j]);
    lipschitz::singular_value_bounds(&m).map_err(err)
}

/// Generates the perfectly calibrated scenario; returns (observations,
/// predictions) with every prediction N(0,1).
#[pyfunction]
fn gen_perfect_calibration(n: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<PyPredictive>)> {
    let ds = simstudy::gen_perfect_calibration(n, seed).map_err(err)?;
    let obs = ds.observations(0).map_err(err)?;
    let preds = ds
        .predictions(0)
        .map_err(err)?
        .into_iter()
        .map(|inner| PyPredictive { inner })
        .collect();
    Ok((obs, preds))
}

/// One trial of the sample-size study: True when the calibration test fails
/// on freshly generated perfectly calibrated data.
#[pyfunction]
fn run_failure_trial(n_samples: usize, eps: f64, seed: u64) -> PyResult<bool> {
    simstudy::run_failure_trial(n_samples, eps, seed).map_err(err)
}

#[pymodule]
#[pyo3(name = "certkit")]
fn certkit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPredictive>()?;
    m.add_function(wrap_pyfunction!(normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(normal_invcdf, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_p_value, m)?)?;
    m.add_function(wrap_pyfunction!(binomial_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(compute_calibration_curve, m)?)?;
    m.add_function(wrap_pyfunction!(test_calibration_curve, m)?)?;
    m.add_function(wrap_pyfunction!(pit_values, m)?)?;
    m.add_function(wrap_pyfunction!(test_dispersion, m)?)?;
    m.add_function(wrap_pyfunction!(test_probability_n_fails, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ols, m)?)?;
    m.add_function(wrap_pyfunction!(test_1_to_1_mapping, m)?)?;
    m.add_function(wrap_pyfunction!(head_transform, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_median_select, m)?)?;
    m.add_function(wrap_pyfunction!(ood_detect, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(bernoulli_recon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(average_normals, m)?)?;
    m.add_function(wrap_pyfunction!(residual_stack_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(singular_value_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(gen_perfect_calibration, m)?)?;
    m.add_function(wrap_pyfunction!(run_failure_trial, m)?)?;
    Ok(())
}
