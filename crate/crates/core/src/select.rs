//! Hyperparameter selection by maximizing the final VIAS ELBO over an `(α, β)` grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GammaHyperprior, LinearProblem};
use crate::stop::StopRule;
use crate::vias::{self, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub alpha_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    #[serde(default = "default_iters")]
    pub iters_per_cell: usize,
}

fn default_iters() -> usize {
    300
}

impl Default for SelectionGrid {
    /// Five α values from 1e-4 to 0.5 and twenty log-spaced β values on `[1e-2, 1e4]`.
    fn default() -> Self {
        let beta_values = (0..20)
            .map(|k| 10f64.powf(-2.0 + 6.0 * k as f64 / 19.0))
            .collect();
        Self {
            alpha_values: vec![1e-4, 1e-3, 1e-2, 1e-1, 0.5],
            beta_values,
            iters_per_cell: default_iters(),
        }
    }
}

impl SelectionGrid {
    pub fn new(alpha_values: Vec<f64>, beta_values: Vec<f64>, iters_per_cell: usize) -> Result<Self> {
        let grid = Self {
            alpha_values,
            beta_values,
            iters_per_cell,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in [("alpha", &self.alpha_values), ("beta", &self.beta_values)] {
            if values.is_empty() {
                return Err(Error::InvalidInput(format!("{name} grid is empty")));
            }
            if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidInput(format!("{name} grid has a non-positive value")));
            }
            if values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidInput(format!(
                    "{name} grid must be strictly increasing"
                )));
            }
        }
        if self.iters_per_cell == 0 {
            return Err(Error::InvalidInput("iters_per_cell must be at least 1".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.alpha_values.len() * self.beta_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Starting point for every cell: `m⁰ = 1`, `C⁰ = cov_scale · I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPolicy {
    pub cov_scale: f64,
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self { cov_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub alpha: f64,
    pub beta: f64,
    pub elbo: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub alpha: f64,
    pub beta: f64,
    pub elbo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub best: Best,
    /// Cells in α-major grid order.
    pub table: Vec<Cell>,
}

impl SelectionResult {
    /// `alpha,beta,elbo,converged` with one row per cell; failed cells have an empty ELBO.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,elbo,converged\n");
        for c in &self.table {
            let elbo = c.elbo.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", c.alpha, c.beta, elbo, c.converged));
        }
        out
    }
}

/// Final ELBO of a VIAS run at scalar `(α, β)` with a fixed sweep budget.
pub fn evaluate_cell(
    problem: &LinearProblem,
    alpha: f64,
    beta: f64,
    iters: usize,
    init: InitPolicy,
) -> Result<(f64, bool, usize)> {
    let prior = GammaHyperprior::uniform(problem.d(), alpha, beta)?;
    let (m0, c0) = vias::default_init(problem.d(), init.cov_scale);
    let res = vias::solve(problem, &prior, &m0, &c0, &StopRule::vias_default().with_max_iter(iters), Method::Auto)?;
    let elbo = res
        .final_elbo()
        .ok_or_else(|| Error::Convergence("no sweeps were run".into()))?;
    Ok((elbo, res.converged(), res.iterations))
}

/// Runs every cell and returns the ELBO maximizer. Ties go to the larger β,
/// then the larger α. Cells run on the current rayon pool; the result does
/// not depend on the number of threads.
pub fn grid_search(problem: &LinearProblem, grid: &SelectionGrid, init: InitPolicy) -> Result<SelectionResult> {
    grid.validate()?;
    let pairs: Vec<(f64, f64)> = grid
        .alpha_values
        .iter()
        .flat_map(|&a| grid.beta_values.iter().map(move |&b| (a, b)))
        .collect();
    let table: Vec<Cell> = pairs
        .par_iter()
        .map(|&(alpha, beta)| match evaluate_cell(problem, alpha, beta, grid.iters_per_cell, init) {
            Ok((elbo, converged, iterations)) => Cell {
                alpha,
                beta,
                elbo: Some(elbo),
                converged,
                iterations,
                error: None,
            },
            Err(e) => Cell {
                alpha,
                beta,
                elbo: None,
                converged: false,
                iterations: 0,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let mut best: Option<Best> = None;
    for c in &table {
        let Some(elbo) = c.elbo else { continue };
        let better = match best {
            None => true,
            Some(b) => (elbo, c.beta, c.alpha) > (b.elbo, b.beta, b.alpha),
        };
        if better {
            best = Some(Best {
                alpha: c.alpha,
                beta: c.beta,
                elbo,
            });
        }
    }
    let best = best.ok_or_else(|| {
        let first = table.iter().find_map(|c| c.error.clone()).unwrap_or_default();
        Error::Convergence(format!("every grid cell failed; first error: {first}"))
    })?;
    Ok(SelectionResult { best, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseCovariance;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem() -> LinearProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DMatrix::from_fn(8, 20, |_, _| rng.random::<f64>());
        let mut u = DVector::zeros(20);
        u[3] = 2.0;
        u[11] = -1.5;
        let y = &a * &u + DVector::from_fn(8, |_, _| 0.05 * (rng.random::<f64>() - 0.5));
        LinearProblem::new(a, y, NoiseCovariance::Scalar(0.01)).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let g = SelectionGrid::default();
        assert_eq!(g.len(), 100);
        assert!((g.beta_values[0] - 1e-2).abs() < 1e-16);
        assert!((g.beta_values[19] - 1e4).abs() < 1e-9);
        g.validate().unwrap();
    }

    #[test]
    fn invalid_grids() {
        assert!(SelectionGrid::new(vec![], vec![1.0], 10).is_err());
        assert!(SelectionGrid::new(vec![1.0, 0.5], vec![1.0], 10).is_err());
        assert!(SelectionGrid::new(vec![1.0], vec![-1.0], 10).is_err());
        assert!(SelectionGrid::new(vec![1.0], vec![1.0], 0).is_err());
    }

    #[test]
    fn single_cell_is_best() {
        let p = problem();
        let g = SelectionGrid::new(vec![0.1], vec![2.0], 20).unwrap();
        let res = grid_search(&p, &g, InitPolicy::default()).unwrap();
        assert_eq!((res.best.alpha, res.best.beta), (0.1, 2.0));
        assert_eq!(Some(res.best.elbo), res.table[0].elbo);
    }

    #[test]
    fn best_is_table_max_and_grid_growth_monotone() {
        let p = problem();
        let small = SelectionGrid::new(vec![0.01, 0.1], vec![0.1, 10.0], 30).unwrap();
        let big = SelectionGrid::new(vec![0.01, 0.1, 0.5], vec![0.1, 1.0, 10.0], 30).unwrap();
        let rs = grid_search(&p, &small, InitPolicy::default()).unwrap();
        let rb = grid_search(&p, &big, InitPolicy::default()).unwrap();
        let max = rb.table.iter().filter_map(|c| c.elbo).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rb.best.elbo, max);
        assert!(rb.best.elbo >= rs.best.elbo);
        assert_eq!(rb.to_csv().lines().count(), 10);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let p = problem();
        let g = SelectionGrid::new(vec![0.01, 0.1], vec![0.5, 5.0, 50.0], 25).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| grid_search(&p, &g, InitPolicy::default()).unwrap());
        let b = four.install(|| grid_search(&p, &g, InitPolicy::default()).unwrap());
        assert_eq!(a, b);
    }
}
