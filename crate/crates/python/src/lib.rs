//! Python bindings. Vectors and matrices cross the boundary as lists and
//! lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sparsevi::model::{GammaHyperprior, LinearProblem, NoiseCovariance};
use sparsevi::problems::Meta;
use sparsevi::select::{InitPolicy, SelectionGrid};
use sparsevi::special::{self, GigParams};
use sparsevi::stop::StopRule;
use sparsevi::{ias, oracle, select, uq, vias};

fn py_err(e: sparsevi::Error) -> PyErr {
    match e {
        sparsevi::Error::Convergence(_) | sparsevi::Error::NotPositiveDefinite(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err("matrix must be non-empty".into());
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err("matrix rows have different lengths".into());
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Linear problem `y = A u + η` with `η ~ N(0, noise_var · I)`.
#[pyclass(frozen)]
struct Problem {
    inner: LinearProblem,
}

#[pymethods]
impl Problem {
    #[new]
    fn new(a: Vec<Vec<f64>>, y: Vec<f64>, noise_var: f64) -> PyResult<Self> {
        let a = matrix_from_rows(&a).map_err(PyValueError::new_err)?;
        let inner = LinearProblem::new(a, DVector::from_vec(y), NoiseCovariance::Scalar(noise_var)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.forward())
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.data().iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("Problem(n={}, d={})", self.inner.n(), self.inner.d())
    }
}

#[pyclass(frozen, get_all)]
struct IasResult {
    u: Vec<f64>,
    theta: Vec<f64>,
    /// Energy `J` after each iteration.
    energy: Vec<f64>,
    iterations: usize,
    converged: bool,
    /// 95% Laplace credible bounds for `u`.
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[pyclass(frozen, get_all)]
struct ViasResult {
    m: Vec<f64>,
    cov: Vec<Vec<f64>>,
    r: Vec<f64>,
    /// ELBO after each sweep.
    elbo: Vec<f64>,
    iterations: usize,
    converged: bool,
    /// 95% credible bounds for `u`.
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn stop_rule(default: StopRule, max_iter: usize, iterations: Option<usize>) -> StopRule {
    match iterations {
        Some(k) => StopRule::fixed(k),
        None => default.with_max_iter(max_iter),
    }
}

/// IAS with a gamma(shape `beta`, scale `alpha`) hyperprior; requires `beta > 3/2`.
#[pyfunction]
#[pyo3(signature = (problem, alpha, beta, max_iter = 1000, iterations = None))]
fn ias_solve(problem: &Problem, alpha: f64, beta: f64, max_iter: usize, iterations: Option<usize>) -> PyResult<IasResult> {
    let p = &problem.inner;
    let prior = GammaHyperprior::uniform(p.d(), alpha, beta).map_err(py_err)?;
    let stop = stop_rule(StopRule::ias_default(), max_iter, iterations);
    let res = ias::solve(p, &prior, &ias::default_theta0(p.d()), &stop, ias::Method::Auto).map_err(py_err)?;
    let approx = ias::laplace(p, &prior, &res.point).map_err(py_err)?;
    let set = uq::laplace_intervals_u(&approx, 0.95).map_err(py_err)?;
    Ok(IasResult {
        u: res.point.u.iter().copied().collect(),
        theta: res.point.theta.iter().copied().collect(),
        energy: res.energy_trace.iter().map(|r| r.total).collect(),
        iterations: res.iterations,
        converged: res.converged(),
        lo: set.lo,
        hi: set.hi,
    })
}

/// VIAS with a gamma(shape `alpha`, rate `beta`) hyperprior, started from
/// `m = 1`, `C = init_scale · I`.
#[pyfunction]
#[pyo3(signature = (problem, alpha, beta, max_iter = 1000, iterations = None, init_scale = 1.0))]
fn vias_solve(
    problem: &Problem,
    alpha: f64,
    beta: f64,
    max_iter: usize,
    iterations: Option<usize>,
    init_scale: f64,
) -> PyResult<ViasResult> {
    let p = &problem.inner;
    let prior = GammaHyperprior::uniform(p.d(), alpha, beta).map_err(py_err)?;
    let (m0, c0) = vias::default_init(p.d(), init_scale);
    let stop = stop_rule(StopRule::vias_default(), max_iter, iterations);
    let res = vias::solve(p, &prior, &m0, &c0, &stop, vias::Method::Auto).map_err(py_err)?;
    let set = uq::intervals_u(&res.state.m, &res.state.c, 0.95).map_err(py_err)?;
    Ok(ViasResult {
        m: res.state.m.iter().copied().collect(),
        cov: rows_of(&res.state.c),
        r: res.state.r.iter().copied().collect(),
        elbo: res.elbo_trace.iter().map(|r| r.elbo).collect(),
        iterations: res.iterations,
        converged: res.converged(),
        lo: set.lo,
        hi: set.hi,
    })
}

/// Best `(alpha, beta, elbo)` over the grid; defaults to the standard 5 × 20 grid.
#[pyfunction]
#[pyo3(signature = (problem, alphas = None, betas = None, iters_per_cell = 300))]
fn select_hyperparameters(
    problem: &Problem,
    alphas: Option<Vec<f64>>,
    betas: Option<Vec<f64>>,
    iters_per_cell: usize,
) -> PyResult<(f64, f64, f64)> {
    let default = SelectionGrid::default();
    let grid = SelectionGrid::new(
        alphas.unwrap_or(default.alpha_values),
        betas.unwrap_or(default.beta_values),
        iters_per_cell,
    )
    .map_err(py_err)?;
    let res = select::grid_search(&problem.inner, &grid, InitPolicy::default()).map_err(py_err)?;
    Ok((res.best.alpha, res.best.beta, res.best.elbo))
}

/// Regenerates a synthetic problem from a JSON object with a `"generator"`
/// key (`hierarchical`, `fixed-sparse`, `deconvolution`, `lorenz63`) and a
/// `"seed"`; returns the problem and the true `u`.
#[pyfunction]
fn generate(config_json: &str) -> PyResult<(Problem, Vec<f64>)> {
    let meta: Meta = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let bundle = meta.regenerate().map_err(py_err)?;
    Ok((Problem { inner: bundle.problem }, bundle.truth_u.iter().copied().collect()))
}

/// `(mean, variance, inverse mean)` of GIG with density ∝ θ^{s−1} e^{−(bθ + r/θ)/2}.
#[pyfunction]
fn gig_moments(b: f64, r: f64, s: f64) -> PyResult<(f64, f64, f64)> {
    let g = GigParams::new(b, r, s).map_err(py_err)?;
    Ok((special::gig_mean(&g), special::gig_var(&g), special::gig_inv_mean(&g)))
}

#[pyfunction]
fn log_bessel_k(order: f64, x: f64) -> PyResult<f64> {
    special::log_bessel_k(order, x).map_err(py_err)
}

/// Componentwise `(lo, hi)` credible bounds for a Gaussian.
#[pyfunction]
#[pyo3(signature = (mean, cov, level = 0.95))]
fn credible_intervals(mean: Vec<f64>, cov: Vec<Vec<f64>>, level: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let c = matrix_from_rows(&cov).map_err(PyValueError::new_err)?;
    let set = uq::intervals_u(&DVector::from_vec(mean), &c, level).map_err(py_err)?;
    Ok((set.lo, set.hi))
}

/// Local maxima `(c, value)` of the one-dimensional ELBO along its stationary manifold.
#[pyfunction]
#[pyo3(signature = (ata, ya, s, b = 1.0, mesh = 1e-5))]
fn landscape_maxima(ata: f64, ya: f64, s: f64, b: f64, mesh: f64) -> PyResult<Vec<(f64, f64)>> {
    let (report, _) = oracle::landscape_scan(ata, ya, s, b, 0.0, 1.0, mesh).map_err(py_err)?;
    Ok(report.maxima)
}

#[pymodule]
#[pyo3(name = "sparsevi")]
fn sparsevi_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<IasResult>()?;
    m.add_class::<ViasResult>()?;
    m.add_function(wrap_pyfunction!(ias_solve, m)?)?;
    m.add_function(wrap_pyfunction!(vias_solve, m)?)?;
    m.add_function(wrap_pyfunction!(select_hyperparameters, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(gig_moments, m)?)?;
    m.add_function(wrap_pyfunction!(log_bessel_k, m)?)?;
    m.add_function(wrap_pyfunction!(credible_intervals, m)?)?;
    m.add_function(wrap_pyfunction!(landscape_maxima, m)?)?;
    m.add("__version__", sparsevi::VERSION)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let m = matrix_from_rows(&rows).unwrap();
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(rows_of(&m), rows);
    }

    #[test]
    fn ragged_and_empty_rejected() {
        assert!(matrix_from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(matrix_from_rows(&[]).is_err());
        assert!(matrix_from_rows(&[vec![]]).is_err());
    }

    #[test]
    fn fixed_iterations_override_cap() {
        let s = stop_rule(StopRule::vias_default(), 50, Some(3));
        assert_eq!(s, StopRule::fixed(3));
        assert_eq!(stop_rule(StopRule::vias_default(), 50, None).max_iter, 50);
    }
}
