//! Python bindings for `subspace-adapt`. Matrices cross the boundary as lists
//! of rows, vectors as flat lists.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use subspace_adapt::analysis::{self, verify};
use subspace_adapt::{
    moments, objective, optimizer, scm, stiefel, CovariateMoments, Environment, EnvironmentMoments,
    MomentPair, OptimizerOptions, RegParams, ScmParams, ScmParts, StiefelPoint,
};

type Rows = Vec<Vec<f64>>;

fn err(e: subspace_adapt::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &Rows, what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!(
            "{what}: row {i} has {} entries, expected {ncols}",
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn to_list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn environment(name: &str) -> PyResult<Environment> {
    match name {
        "source" => Ok(Environment::Source),
        "target" => Ok(Environment::Target),
        other => Err(PyValueError::new_err(format!(
            "environment must be 'source' or 'target', got '{other}'"
        ))),
    }
}

fn frame(v: &Rows) -> PyResult<StiefelPoint> {
    StiefelPoint::new(to_matrix(v, "v")?).map_err(err)
}

/// Uncentered second moments of one environment. `xy` and `y_sq` are absent
/// for unlabeled target moments.
#[pyclass(name = "Moments", module = "subspace_adapt_py", from_py_object)]
#[derive(Clone)]
struct PyMoments {
    sigma: DMatrix<f64>,
    labeled: Option<EnvironmentMoments>,
    n: Option<usize>,
}

impl PyMoments {
    fn from_labeled(m: EnvironmentMoments) -> Self {
        Self {
            sigma: m.sigma().clone(),
            n: m.n(),
            labeled: Some(m),
        }
    }

    fn labeled(&self) -> PyResult<&EnvironmentMoments> {
        self.labeled
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("these moments carry no response"))
    }

    fn covariates(&self) -> PyResult<CovariateMoments> {
        CovariateMoments::new(self.sigma.clone(), self.n).map_err(err)
    }
}

#[pymethods]
impl PyMoments {
    #[new]
    #[pyo3(signature = (sigma, xy=None, y_sq=None, n=None))]
    fn new(
        sigma: Rows,
        xy: Option<Vec<f64>>,
        y_sq: Option<f64>,
        n: Option<usize>,
    ) -> PyResult<Self> {
        let sigma = to_matrix(&sigma, "sigma")?;
        match (xy, y_sq) {
            (Some(xy), Some(y_sq)) => Ok(Self::from_labeled(
                EnvironmentMoments::new(sigma, to_vector(xy), y_sq, n).map_err(err)?,
            )),
            (None, None) => {
                CovariateMoments::new(sigma.clone(), n).map_err(err)?;
                Ok(Self {
                    sigma,
                    labeled: None,
                    n,
                })
            }
            _ => Err(PyValueError::new_err("give both xy and y_sq, or neither")),
        }
    }

    /// Empirical moments of a sample with rows `x` and responses `y`.
    #[staticmethod]
    fn from_sample(x: Rows, y: Vec<f64>) -> PyResult<Self> {
        let x = to_matrix(&x, "x")?;
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let data = scm::Dataset::new(x, to_vector(y), Environment::Source, names).map_err(err)?;
        Ok(Self::from_labeled(
            moments::estimate_moments(&data).map_err(err)?,
        ))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    #[getter]
    fn n(&self) -> Option<usize> {
        self.n
    }

    #[getter]
    fn sigma(&self) -> Rows {
        to_rows(&self.sigma)
    }

    #[getter]
    fn xy(&self) -> Option<Vec<f64>> {
        self.labeled.as_ref().map(|m| to_list(m.xy()))
    }

    #[getter]
    fn y_sq(&self) -> Option<f64> {
        self.labeled.as_ref().map(EnvironmentMoments::y_sq)
    }

    fn is_labeled(&self) -> bool {
        self.labeled.is_some()
    }

    fn risk(&self, beta: Vec<f64>) -> PyResult<f64> {
        self.labeled()?.risk(&to_vector(beta)).map_err(err)
    }

    fn best_linear(&self) -> PyResult<Vec<f64>> {
        Ok(to_list(&self.labeled()?.best_linear().map_err(err)?))
    }

    fn unlabeled(&self) -> Self {
        Self {
            sigma: self.sigma.clone(),
            labeled: None,
            n: self.n,
        }
    }
}

/// Linear structural causal model with source and target environments.
#[pyclass(name = "Scm", module = "subspace_adapt_py", from_py_object)]
#[derive(Clone)]
struct PyScm {
    inner: ScmParams,
}

#[pymethods]
impl PyScm {
    #[new]
    #[allow(clippy::too_many_arguments)]
    fn new(
        beta_star: Vec<f64>,
        gamma: Vec<f64>,
        theta: Rows,
        delta: Rows,
        cov_z: Rows,
        lambda_source: Rows,
        lambda_target: Rows,
        tau_sq: f64,
        sigma_u_sq: f64,
    ) -> PyResult<Self> {
        let parts = ScmParts {
            beta_star: to_vector(beta_star),
            gamma: to_vector(gamma),
            theta: to_matrix(&theta, "theta")?,
            delta: to_matrix(&delta, "delta")?,
            cov_z: to_matrix(&cov_z, "cov_z")?,
            lambda_source: to_matrix(&lambda_source, "lambda_source")?,
            lambda_target: to_matrix(&lambda_target, "lambda_target")?,
            tau_sq,
            sigma_u_sq,
        };
        Ok(Self {
            inner: ScmParams::new(parts).map_err(err)?,
        })
    }

    /// The four-dimensional instance used by the bound checks.
    #[staticmethod]
    fn canonical() -> Self {
        Self {
            inner: analysis::canonical_instance(),
        }
    }

    #[staticmethod]
    fn random(d: usize, k: usize, r: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: scm::random_params(d, k, r, seed).map_err(err)?,
        })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn r(&self) -> usize {
        self.inner.r()
    }

    #[getter]
    fn beta_star(&self) -> Vec<f64> {
        to_list(self.inner.beta_star())
    }

    fn population_moments(&self, env: &str) -> PyResult<PyMoments> {
        Ok(PyMoments::from_labeled(
            self.inner.population_moments(environment(env)?),
        ))
    }

    fn best_linear(&self, env: &str) -> PyResult<Vec<f64>> {
        Ok(to_list(
            &self.inner.best_linear_closed_form(environment(env)?),
        ))
    }

    fn subspace_oracle(&self) -> Vec<f64> {
        to_list(&self.inner.subspace_oracle())
    }

    fn covariance_shift(&self) -> Rows {
        to_rows(&self.inner.covariance_shift())
    }

    fn is_richer_target(&self) -> bool {
        self.inner.is_richer_target()
    }

    /// `(R_T(β) − R_S(β), quadratic form)`; the two agree on this model.
    fn risk_gap(&self, beta: Vec<f64>) -> PyResult<(f64, f64)> {
        let g = self
            .inner
            .risk_gap_identity(&to_vector(beta))
            .map_err(err)?;
        Ok((g.gap, g.quadratic_form))
    }

    /// `(improves, lhs, rhs)` of the scalar improvement condition.
    fn improvement(&self) -> PyResult<(bool, f64, f64)> {
        let c = self.inner.improvement_condition().map_err(err)?;
        Ok((c.improves, c.lhs, c.rhs))
    }

    /// Draws `n` rows; returns `(x, y)`.
    fn sample(&self, env: &str, n: usize, seed: u64) -> PyResult<(Rows, Vec<f64>)> {
        let data = self.inner.sample(environment(env)?, n, seed).map_err(err)?;
        Ok((to_rows(data.x()), to_list(data.y())))
    }
}

#[pyclass(
    name = "Fit",
    module = "subspace_adapt_py",
    get_all,
    skip_from_py_object
)]
struct PyFit {
    v: Rows,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    objective: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

#[pymethods]
impl PyFit {
    fn __repr__(&self) -> String {
        format!(
            "Fit(objective={:.6e}, grad_norm={:.3e}, iterations={}, converged={})",
            self.objective, self.grad_norm, self.iterations, self.converged
        )
    }
}

fn pair(source: &PyMoments, target: &PyMoments) -> PyResult<MomentPair> {
    MomentPair::new(source.labeled()?.clone(), target.covariates()?).map_err(err)
}

fn options(seed: u64, restarts: usize, max_iters: usize, grad_tol: f64) -> OptimizerOptions {
    OptimizerOptions {
        seed,
        restarts,
        max_iters,
        grad_tol,
        ..OptimizerOptions::default()
    }
}

/// Minimizes the penalized objective over `ℓ`-frames.
#[pyfunction]
#[pyo3(signature = (source, target, ell, upsilon, eta, seed=0, restarts=1, max_iters=10_000, grad_tol=1e-8))]
#[allow(clippy::too_many_arguments)]
fn fit(
    source: &PyMoments,
    target: &PyMoments,
    ell: usize,
    upsilon: f64,
    eta: f64,
    seed: u64,
    restarts: usize,
    max_iters: usize,
    grad_tol: f64,
) -> PyResult<PyFit> {
    let m = pair(source, target)?;
    let reg = RegParams::new(upsilon, eta).map_err(err)?;
    let opts = options(seed, restarts, max_iters, grad_tol);
    let r = optimizer::minimize_multistart(&m, &reg, ell, &[], &opts).map_err(err)?;
    Ok(PyFit {
        v: to_rows(r.v.matrix()),
        alpha: to_list(&r.alpha),
        beta: to_list(&r.beta),
        objective: r.objective,
        grad_norm: r.grad_norm,
        iterations: r.iterations,
        converged: r.converged,
    })
}

/// `Φ(V)` with the inner ridge solved exactly.
#[pyfunction]
fn objective_value(
    v: Rows,
    source: &PyMoments,
    target: &PyMoments,
    upsilon: f64,
    eta: f64,
) -> PyResult<f64> {
    let reg = RegParams::new(upsilon, eta).map_err(err)?;
    objective::reduced_objective(&frame(&v)?, &pair(source, target)?, &reg).map_err(err)
}

#[pyfunction]
fn riemannian_gradient(
    v: Rows,
    source: &PyMoments,
    target: &PyMoments,
    upsilon: f64,
    eta: f64,
) -> PyResult<Rows> {
    let reg = RegParams::new(upsilon, eta).map_err(err)?;
    let p = frame(&v)?;
    let g = objective::riemannian_gradient(&p, &pair(source, target)?, &reg).map_err(err)?;
    Ok(to_rows(g.matrix()))
}

#[pyfunction]
fn random_frame(d: usize, ell: usize, seed: u64) -> PyResult<Rows> {
    Ok(to_rows(
        stiefel::random_point(d, ell, seed).map_err(err)?.matrix(),
    ))
}

#[pyfunction]
fn project_tangent(v: Rows, xi: Rows) -> PyResult<Rows> {
    let p = frame(&v)?;
    Ok(to_rows(
        stiefel::project_tangent(&p, &to_matrix(&xi, "xi")?)
            .map_err(err)?
            .matrix(),
    ))
}

/// Polar retraction of a tangent vector at `v`.
#[pyfunction]
fn retract(v: Rows, xi: Rows) -> PyResult<Rows> {
    let p = frame(&v)?;
    let t =
        stiefel::TangentVector::new(&p, to_matrix(&xi, "xi")?, scm::DEFAULT_TOL).map_err(err)?;
    Ok(to_rows(
        stiefel::retract_polar(&p, &t).map_err(err)?.matrix(),
    ))
}

/// Runs the `(υ, η)` grid and returns the result as a JSON string.
#[pyfunction]
#[pyo3(signature = (source, target, ell, upsilon_grid, eta_grid, seed=0, restarts=1, target_eval=None))]
#[allow(clippy::too_many_arguments)]
fn sweep(
    source: &PyMoments,
    target: &PyMoments,
    ell: usize,
    upsilon_grid: Vec<f64>,
    eta_grid: Vec<f64>,
    seed: u64,
    restarts: usize,
    target_eval: Option<&PyMoments>,
) -> PyResult<String> {
    let m = pair(source, target)?;
    let eval = target_eval.map(PyMoments::labeled).transpose()?;
    let opts = options(seed, restarts, 10_000, 1e-8);
    let r = analysis::sweep(&m, ell, &upsilon_grid, &eta_grid, &opts, eval).map_err(err)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the numerical check suite and returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=100))]
fn verify_suite(seed: u64, instances: usize) -> PyResult<String> {
    let cfg = verify::VerifyConfig {
        seed,
        instances,
        ..verify::VerifyConfig::default()
    };
    let report = verify::run_suite(&cfg).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn subspace_adapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMoments>()?;
    m.add_class::<PyScm>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(objective_value, m)?)?;
    m.add_function(wrap_pyfunction!(riemannian_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(random_frame, m)?)?;
    m.add_function(wrap_pyfunction!(project_tangent, m)?)?;
    m.add_function(wrap_pyfunction!(retract, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let m = to_matrix(&rows, "m").unwrap();
        assert_eq!((m.nrows(), m.ncols()), (3, 2));
        assert_eq!(m[(2, 0)], 5.0);
        assert_eq!(to_rows(&m), rows);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(to_matrix(&vec![vec![1.0], vec![1.0, 2.0]], "m").is_err());
    }
}
