//! Linear inverse problem `y = A u + η`, `η ~ N(0, Γ)`, with the hierarchical
//! prior `u | θ ~ N(0, diag θ)` and gamma hyperprior on `θ`.
//!
//! The noise covariance is factored once at construction; the problem keeps the
//! whitened operator `Γ^{-1/2} A` and data `Γ^{-1/2} y`, and every Γ-weighted
//! quantity used by the solvers is computed from those.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Noise covariance `Γ`.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseCovariance {
    /// `γ² I`, stores the variance `γ²`.
    Scalar(f64),
    /// `diag(v)`, stores the variances.
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct LinearProblem {
    forward: DMatrix<f64>,
    data: DVector<f64>,
    noise: NoiseCovariance,
    white_forward: DMatrix<f64>,
    white_data: DVector<f64>,
    gram: OnceLock<DMatrix<f64>>,
    white_rhs: DVector<f64>,
}

const SYMMETRY_TOL: f64 = 1e-12;

impl LinearProblem {
    pub fn new(forward: DMatrix<f64>, data: DVector<f64>, noise: NoiseCovariance) -> Result<Self> {
        let (n, d) = forward.shape();
        if n == 0 || d == 0 {
            return Err(Error::Dimension(format!("forward matrix is {n}x{d}")));
        }
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "data has length {} but forward matrix has {n} rows",
                data.len()
            )));
        }
        if forward.iter().any(|v| !v.is_finite()) || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry in A or y".into()));
        }
        let (white_forward, white_data) = match &noise {
            NoiseCovariance::Scalar(var) => {
                if !(var.is_finite() && *var > 0.0) {
                    return Err(Error::NotPositiveDefinite(format!("noise variance {var}")));
                }
                let w = 1.0 / var.sqrt();
                (&forward * w, &data * w)
            }
            NoiseCovariance::Diagonal(vars) => {
                if vars.len() != n {
                    return Err(Error::Dimension(format!(
                        "noise diagonal has length {} but n = {n}",
                        vars.len()
                    )));
                }
                if vars.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::NotPositiveDefinite(
                        "noise diagonal has a non-positive entry".into(),
                    ));
                }
                let mut a = forward.clone();
                let mut y = data.clone();
                for i in 0..n {
                    let w = 1.0 / vars[i].sqrt();
                    a.row_mut(i).scale_mut(w);
                    y[i] *= w;
                }
                (a, y)
            }
            NoiseCovariance::Dense(cov) => {
                if cov.shape() != (n, n) {
                    return Err(Error::Dimension(format!(
                        "noise covariance is {:?}, expected {n}x{n}",
                        cov.shape()
                    )));
                }
                let scale = cov.amax().max(f64::MIN_POSITIVE);
                if (cov - cov.transpose()).amax() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidInput("noise covariance is not symmetric".into()));
                }
                let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
                    Error::NotPositiveDefinite("noise covariance factorization failed".into())
                })?;
                let l = chol.l();
                let a = l
                    .solve_lower_triangular(&forward)
                    .ok_or_else(|| Error::NotPositiveDefinite("singular noise factor".into()))?;
                let y = l
                    .solve_lower_triangular(&data)
                    .ok_or_else(|| Error::NotPositiveDefinite("singular noise factor".into()))?;
                (a, y)
            }
        };
        let white_rhs = white_forward.tr_mul(&white_data);
        Ok(Self {
            forward,
            data,
            noise,
            white_forward,
            white_data,
            gram: OnceLock::new(),
            white_rhs,
        })
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.forward.nrows()
    }

    /// Number of unknowns.
    pub fn d(&self) -> usize {
        self.forward.ncols()
    }

    pub fn forward(&self) -> &DMatrix<f64> {
        &self.forward
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn noise(&self) -> &NoiseCovariance {
        &self.noise
    }

    /// `Γ^{-1/2} A`.
    pub fn white_forward(&self) -> &DMatrix<f64> {
        &self.white_forward
    }

    /// `Γ^{-1/2} y`.
    pub fn white_data(&self) -> &DVector<f64> {
        &self.white_data
    }

    /// `Aᵀ Γ⁻¹ A`, computed on first use.
    pub fn gram(&self) -> &DMatrix<f64> {
        self.gram
            .get_or_init(|| self.white_forward.tr_mul(&self.white_forward))
    }

    /// `Aᵀ Γ⁻¹ y`.
    pub fn white_rhs(&self) -> &DVector<f64> {
        &self.white_rhs
    }

    /// `‖y − A u‖²_Γ`.
    pub fn misfit(&self, u: &DVector<f64>) -> f64 {
        (&self.white_data - &self.white_forward * u).norm_squared()
    }

    /// Replaces the data vector, keeping `A` and `Γ`.
    pub fn with_data(&self, data: DVector<f64>) -> Result<Self> {
        let p = Self::new(self.forward.clone(), data, self.noise.clone())?;
        if let Some(g) = self.gram.get() {
            let _ = p.gram.set(g.clone());
        }
        Ok(p)
    }
}

/// Gamma hyperprior parameters: per-component shapes `α_i` and a scalar `β`.
///
/// The variational solver reads them as `θ_i ~ Gamma(α_i, rate β)` (GIG
/// parameters `b = 2β`, `s_i = α_i − 1/2`); the MAP energy uses `β̃ = β − 3/2`
/// and `α_i` as the scale of `θ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaHyperprior {
    alpha: DVector<f64>,
    beta: f64,
}

impl GammaHyperprior {
    pub fn new(alpha: DVector<f64>, beta: f64) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Dimension("alpha is empty".into()));
        }
        if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return domain("all alpha_i must be positive and finite");
        }
        if !(beta.is_finite() && beta > 0.0) {
            return domain(format!("beta must be positive, got {beta}"));
        }
        Ok(Self { alpha, beta })
    }

    /// Same shape `alpha` on all `d` components.
    pub fn uniform(d: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(DVector::from_element(d, alpha), beta)
    }

    pub fn d(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `β̃ = β − 3/2`.
    pub fn beta_tilde(&self) -> f64 {
        self.beta - 1.5
    }

    /// GIG `b = 2β`.
    pub fn b(&self) -> f64 {
        2.0 * self.beta
    }

    /// GIG orders `s_i = α_i − 1/2`.
    pub fn s(&self) -> DVector<f64> {
        self.alpha.map(|a| a - 0.5)
    }
}

/// A point `z = (u, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub u: DVector<f64>,
    pub theta: DVector<f64>,
}

impl Point {
    pub fn new(u: DVector<f64>, theta: DVector<f64>) -> Result<Self> {
        if u.len() != theta.len() {
            return Err(Error::Dimension(format!(
                "u has length {}, theta has length {}",
                u.len(),
                theta.len()
            )));
        }
        check_theta(&theta)?;
        Ok(Self { u, theta })
    }
}

pub(crate) fn check_theta(theta: &DVector<f64>) -> Result<()> {
    if theta.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return domain("all theta_i must be positive and finite");
    }
    Ok(())
}

/// Energy `J(u, θ)` split into the quadratic part (a) and the θ part (b).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub total: f64,
    pub part_a: f64,
    pub part_b: f64,
}

fn check_dims(problem: &LinearProblem, prior: &GammaHyperprior, d: usize) -> Result<()> {
    if problem.d() != d || prior.d() != d {
        return Err(Error::Dimension(format!(
            "problem d = {}, prior d = {}, point d = {d}",
            problem.d(),
            prior.d()
        )));
    }
    Ok(())
}

/// `J(u,θ) = ½‖y−Au‖²_Γ + ½‖u‖²_{D_θ} + Σ_i [θ_i/α_i − (β−3/2) ln(θ_i/α_i)]`.
pub fn energy(problem: &LinearProblem, prior: &GammaHyperprior, z: &Point) -> Result<Energy> {
    check_dims(problem, prior, z.u.len())?;
    check_theta(&z.theta)?;
    let prior_quad: f64 = z
        .u
        .iter()
        .zip(z.theta.iter())
        .map(|(u, t)| u * u / t)
        .sum();
    let part_a = 0.5 * problem.misfit(&z.u) + 0.5 * prior_quad;
    let bt = prior.beta_tilde();
    let part_b: f64 = z
        .theta
        .iter()
        .zip(prior.alpha().iter())
        .map(|(t, a)| {
            let ratio = t / a;
            ratio - bt * ratio.ln()
        })
        .sum();
    Ok(Energy {
        total: part_a + part_b,
        part_a,
        part_b,
    })
}

/// `−J(u, θ)`: the log posterior up to an additive constant.
pub fn log_posterior_unnorm(
    problem: &LinearProblem,
    prior: &GammaHyperprior,
    z: &Point,
) -> Result<f64> {
    Ok(-energy(problem, prior, z)?.total)
}

/// Cholesky factorization of an SPD matrix after symmetric Jacobi
/// equilibration `M = S⁻¹ (S M S) S⁻¹`, `S = diag(M)^{-1/2}`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    scale: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!("matrix is {:?}", m.shape())));
        }
        let n = m.nrows();
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let dii = m[(i, i)];
            if !(dii.is_finite() && dii > 0.0) {
                return Err(Error::NotPositiveDefinite(format!(
                    "diagonal entry {i} is {dii}"
                )));
            }
            scale[i] = 1.0 / dii.sqrt();
        }
        let mut eq = m.clone();
        for j in 0..n {
            for i in 0..n {
                eq[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(eq)
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
        Ok(Self { scale, chol })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let scaled = b.component_mul(&self.scale);
        self.chol.solve(&scaled).component_mul(&self.scale)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.scale);
        }
        self.chol.solve_mut(&mut x);
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.scale);
        }
        x
    }

    /// Explicit symmetric inverse.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        let n = self.dim();
        for j in 0..n {
            for i in 0..n {
                inv[(i, j)] *= self.scale[i] * self.scale[j];
            }
        }
        symmetrize(&mut inv);
        inv
    }

    /// Diagonal of the inverse without forming it.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = self.dim();
        let mut out = DVector::zeros(n);
        let mut e = DVector::zeros(n);
        for i in 0..n {
            e.fill(0.0);
            e[i] = 1.0;
            // ‖L⁻¹ e_i‖²
            let w = l.solve_lower_triangular(&e).expect("nonsingular factor");
            out[i] = w.norm_squared() * self.scale[i] * self.scale[i];
        }
        out
    }

    /// `L⁻¹ S B` where `S M S = L Lᵀ`, so that `Bᵀ M⁻¹ B = (L⁻¹ S B)ᵀ (L⁻¹ S B)`.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.scale);
        }
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }

    /// `tr(M⁻¹)`.
    pub fn inverse_trace(&self) -> f64 {
        self.half_solve(&DMatrix::identity(self.dim(), self.dim()))
            .norm_squared()
    }

    /// `ln det M`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            acc += 2.0 * l[(i, i)].ln() - 2.0 * self.scale[i].ln();
        }
        acc
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `M⁻¹ B` for symmetric positive definite `M`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != m.nrows() {
        return Err(Error::Dimension(format!(
            "rhs has {} rows, matrix is {}x{}",
            b.nrows(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(SpdFactor::new(m)?.solve_mat(b))
}

/// Vector form of [`spd_solve`].
pub fn spd_solve_vec(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != m.nrows() {
        return Err(Error::Dimension(format!(
            "rhs has length {}, matrix is {}x{}",
            b.len(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(SpdFactor::new(m)?.solve_vec(b))
}

/// JSON form of the noise covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NoiseCovDocument {
    Scalar { variance: f64 },
    Diagonal { variances: Vec<f64> },
    /// Row-major `n × n`.
    Dense { matrix: Vec<f64> },
}

/// JSON document for a problem with an optional hyperprior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub n: usize,
    pub d: usize,
    /// Row-major `n × d`.
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub noise_cov: NoiseCovDocument,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl ProblemDocument {
    pub fn from_problem(problem: &LinearProblem, prior: Option<&GammaHyperprior>) -> Self {
        let noise_cov = match problem.noise() {
            NoiseCovariance::Scalar(v) => NoiseCovDocument::Scalar { variance: *v },
            NoiseCovariance::Diagonal(v) => NoiseCovDocument::Diagonal {
                variances: v.iter().copied().collect(),
            },
            NoiseCovariance::Dense(m) => NoiseCovDocument::Dense {
                matrix: row_major(m),
            },
        };
        Self {
            n: problem.n(),
            d: problem.d(),
            a: row_major(problem.forward()),
            y: problem.data().iter().copied().collect(),
            noise_cov,
            alpha: prior.map(|p| p.alpha().iter().copied().collect()),
            beta: prior.map(|p| p.beta()),
        }
    }

    pub fn to_problem(&self) -> Result<LinearProblem> {
        let a = from_row_major(self.n, self.d, &self.a)?;
        let y = DVector::from_column_slice(&self.y);
        let noise = match &self.noise_cov {
            NoiseCovDocument::Scalar { variance } => NoiseCovariance::Scalar(*variance),
            NoiseCovDocument::Diagonal { variances } => {
                NoiseCovariance::Diagonal(DVector::from_column_slice(variances))
            }
            NoiseCovDocument::Dense { matrix } => {
                NoiseCovariance::Dense(from_row_major(self.n, self.n, matrix)?)
            }
        };
        LinearProblem::new(a, y, noise)
    }

    /// The embedded hyperprior, if both `alpha` and `beta` are present.
    /// A single-entry `alpha` is broadcast to all `d` components.
    pub fn to_prior(&self) -> Result<Option<GammaHyperprior>> {
        match (&self.alpha, self.beta) {
            (Some(alpha), Some(beta)) => {
                let alpha = if alpha.len() == 1 {
                    DVector::from_element(self.d, alpha[0])
                } else {
                    DVector::from_column_slice(alpha)
                };
                if alpha.len() != self.d {
                    return Err(Error::Dimension(format!(
                        "alpha has length {}, d = {}",
                        alpha.len(),
                        self.d
                    )));
                }
                GammaHyperprior::new(alpha, beta).map(Some)
            }
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_problem(a: f64, y: f64, var: f64) -> LinearProblem {
        LinearProblem::new(
            DMatrix::from_element(1, 1, a),
            DVector::from_element(1, y),
            NoiseCovariance::Scalar(var),
        )
        .unwrap()
    }

    #[test]
    fn energy_scalar_example() {
        let p = scalar_problem(1.0, 1.0, 1.0);
        let prior = GammaHyperprior::uniform(1, 1.0, 2.5).unwrap();
        let z = Point::new(DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        let e = energy(&p, &prior, &z).unwrap();
        assert!((e.part_a - 0.5).abs() < 1e-15);
        assert!((e.part_b - 1.0).abs() < 1e-15);
        assert!((e.total - 1.5).abs() < 1e-15);
        assert_eq!(log_posterior_unnorm(&p, &prior, &z).unwrap(), -1.5);
    }

    #[test]
    fn energy_part_b_at_alpha_is_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 7;
        let a = DMatrix::from_fn(4, d, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(4, |_, _| rng.random::<f64>());
        let p = LinearProblem::new(a, y, NoiseCovariance::Scalar(0.3)).unwrap();
        let alpha = DVector::from_fn(d, |_, _| 0.5 + rng.random::<f64>());
        for beta in [0.1, 1.5, 7.0] {
            let prior = GammaHyperprior::new(alpha.clone(), beta).unwrap();
            let z = Point::new(DVector::zeros(d), alpha.clone()).unwrap();
            let e = energy(&p, &prior, &z).unwrap();
            assert!((e.part_b - d as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_rejects_nonpositive_theta() {
        let p = scalar_problem(1.0, 1.0, 1.0);
        let prior = GammaHyperprior::uniform(1, 1.0, 2.5).unwrap();
        let z = Point {
            u: DVector::from_element(1, 1.0),
            theta: DVector::from_element(1, 0.0),
        };
        assert!(energy(&p, &prior, &z).is_err());
        assert!(Point::new(DVector::zeros(1), DVector::from_element(1, -1.0)).is_err());
    }

    #[test]
    fn shifting_data_changes_only_the_misfit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(3, 4, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(3, |_, _| rng.random::<f64>());
        let p = LinearProblem::new(a.clone(), y.clone(), NoiseCovariance::Scalar(0.5)).unwrap();
        let shifted = p.with_data(y.add_scalar(2.0)).unwrap();
        let prior = GammaHyperprior::uniform(4, 1.0, 2.0).unwrap();
        let z = Point::new(
            DVector::from_fn(4, |_, _| rng.random::<f64>()),
            DVector::from_element(4, 0.7),
        )
        .unwrap();
        let diff = log_posterior_unnorm(&shifted, &prior, &z).unwrap()
            - log_posterior_unnorm(&p, &prior, &z).unwrap();
        let expected = -0.5 * ((y.add_scalar(2.0) - &a * &z.u).norm_squared()
            - (&y - &a * &z.u).norm_squared())
            / 0.5;
        assert!((diff - expected).abs() < 1e-12);
    }

    #[test]
    fn noise_variants_whiten_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(5, |_, _| rng.random::<f64>());
        let u = DVector::from_fn(3, |_, _| rng.random::<f64>());
        let scalar = LinearProblem::new(a.clone(), y.clone(), NoiseCovariance::Scalar(0.25)).unwrap();
        let diag = LinearProblem::new(
            a.clone(),
            y.clone(),
            NoiseCovariance::Diagonal(DVector::from_element(5, 0.25)),
        )
        .unwrap();
        let dense = LinearProblem::new(
            a.clone(),
            y.clone(),
            NoiseCovariance::Dense(DMatrix::identity(5, 5) * 0.25),
        )
        .unwrap();
        let m = scalar.misfit(&u);
        assert!((diag.misfit(&u) - m).abs() < 1e-12);
        assert!((dense.misfit(&u) - m).abs() < 1e-12);

        // general dense Γ: misfit = rᵀ Γ⁻¹ r
        let b = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>());
        let cov = &b * b.transpose() + DMatrix::identity(5, 5);
        let p = LinearProblem::new(a.clone(), y.clone(), NoiseCovariance::Dense(cov.clone())).unwrap();
        let r = &y - &a * &u;
        let direct = r.dot(&(cov.clone().try_inverse().unwrap() * &r));
        assert!((p.misfit(&u) - direct).abs() < 1e-10 * direct);
    }

    #[test]
    fn invalid_problems_rejected() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let y = DVector::from_element(2, 1.0);
        assert!(LinearProblem::new(a.clone(), DVector::zeros(3), NoiseCovariance::Scalar(1.0)).is_err());
        assert!(LinearProblem::new(a.clone(), y.clone(), NoiseCovariance::Scalar(0.0)).is_err());
        let nonsym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(LinearProblem::new(a.clone(), y.clone(), NoiseCovariance::Dense(nonsym)).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(LinearProblem::new(a.clone(), y.clone(), NoiseCovariance::Dense(indefinite)).is_err());
        let mut bad = a.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(LinearProblem::new(bad, y, NoiseCovariance::Scalar(1.0)).is_err());
    }

    #[test]
    fn spd_solve_examples() {
        let b = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        let x = spd_solve(&DMatrix::identity(3, 3), &b).unwrap();
        assert_eq!(x, b);
        let x = spd_solve_vec(&DMatrix::from_element(1, 1, 2.0), &DVector::from_element(1, 4.0)).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15);
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_solve(&indefinite, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn spd_solve_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = DMatrix::from_fn(20, 20, |_, _| rng.random::<f64>() - 0.5);
        let m = &g * g.transpose() + DMatrix::identity(20, 20) * 0.5;
        let b = DMatrix::from_fn(20, 3, |_, _| rng.random::<f64>());
        let x = spd_solve(&m, &b).unwrap();
        let oracle = m.clone().try_inverse().unwrap() * &b;
        assert!((&x - &oracle).amax() < 1e-8);
        assert!((&m * &x - &b).norm() <= 1e-10 * b.norm());

        let f = SpdFactor::new(&m).unwrap();
        let inv = m.clone().try_inverse().unwrap();
        assert!((f.inverse() - &inv).amax() < 1e-9);
        let diag = f.inverse_diagonal();
        for i in 0..20 {
            assert!((diag[i] - inv[(i, i)]).abs() < 1e-9 * inv[(i, i)]);
        }
        let det = m.clone().determinant();
        assert!((f.log_det() - det.ln()).abs() < 1e-9);
    }

    #[test]
    fn document_round_trip() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = DVector::from_vec(vec![0.5, -1.0]);
        let p = LinearProblem::new(a, y, NoiseCovariance::Diagonal(DVector::from_vec(vec![1.0, 2.0]))).unwrap();
        let prior = GammaHyperprior::uniform(3, 0.1, 4.0).unwrap();
        let doc = ProblemDocument::from_problem(&p, Some(&prior));
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.contains("\"A\":[1.0,2.0,3.0,4.0,5.0,6.0]"));
        let back: ProblemDocument = serde_json::from_str(&text).unwrap();
        let q = back.to_problem().unwrap();
        assert_eq!(q.forward(), p.forward());
        assert_eq!(q.noise(), p.noise());
        assert_eq!(back.to_prior().unwrap().unwrap(), prior);
    }
}
