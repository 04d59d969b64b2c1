//! Iterative Alternating Scheme for the MAP estimate, and the Laplace
//! approximation built from its iterates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{check_theta, energy, GammaHyperprior, LinearProblem, Point, SpdFactor};
use crate::stop::{relative_change, StopReason, StopRule};

/// How the `u` least-squares update is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Kalman form when `d > 2n`, direct otherwise.
    #[default]
    Auto,
    /// `(AᵀΓ⁻¹A + D_θ⁻¹)⁻¹ AᵀΓ⁻¹ y` in the d-dimensional space.
    Direct,
    /// `D_θAᵀ(AD_θAᵀ + Γ)⁻¹ y` in the n-dimensional space.
    Kalman,
}

impl Method {
    pub fn resolve(self, n: usize, d: usize) -> Method {
        match self {
            Method::Auto if d > 2 * n => Method::Kalman,
            Method::Auto => Method::Direct,
            m => m,
        }
    }
}

/// Minimizer of `J(·, θ)`.
pub fn update_u(problem: &LinearProblem, theta: &DVector<f64>, method: Method) -> Result<DVector<f64>> {
    if theta.len() != problem.d() {
        return Err(Error::Dimension(format!(
            "theta has length {}, d = {}",
            theta.len(),
            problem.d()
        )));
    }
    check_theta(theta)?;
    match method.resolve(problem.n(), problem.d()) {
        Method::Direct | Method::Auto => {
            let mut m = problem.gram().clone();
            for i in 0..theta.len() {
                m[(i, i)] += 1.0 / theta[i];
            }
            Ok(SpdFactor::new(&m)?.solve_vec(problem.white_rhs()))
        }
        Method::Kalman => {
            let a = problem.white_forward();
            let mut a_theta = a.clone();
            for (j, mut col) in a_theta.column_iter_mut().enumerate() {
                col *= theta[j];
            }
            let mut s = &a_theta * a.transpose();
            for i in 0..s.nrows() {
                s[(i, i)] += 1.0;
            }
            let w = SpdFactor::new(&s)?.solve_vec(problem.white_data());
            Ok(a_theta.tr_mul(&w))
        }
    }
}

/// Closed-form minimizer of `J(u, ·)`:
/// `θ_i = α_i (β̃/2 + √(β̃²/4 + u_i²/(2α_i)))`.
pub fn update_theta(prior: &GammaHyperprior, u: &DVector<f64>) -> Result<DVector<f64>> {
    if u.len() != prior.d() {
        return Err(Error::Dimension(format!(
            "u has length {}, prior d = {}",
            u.len(),
            prior.d()
        )));
    }
    let bt = prior.beta_tilde();
    let mut theta = DVector::zeros(u.len());
    for i in 0..u.len() {
        let a = prior.alpha()[i];
        let t = a * (0.5 * bt + (0.25 * bt * bt + u[i] * u[i] / (2.0 * a)).sqrt());
        if !(t > 0.0 && t.is_finite()) {
            return domain(format!(
                "theta update for component {i} is {t} (beta_tilde = {bt}, u_i = {})",
                u[i]
            ));
        }
        theta[i] = t;
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub iteration: usize,
    pub total: f64,
    pub part_a: f64,
    pub part_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IasResult {
    pub point: Point,
    pub energy_trace: Vec<EnergyRecord>,
    pub iterations: usize,
    pub reason: StopReason,
}

impl IasResult {
    pub fn converged(&self) -> bool {
        self.reason.converged()
    }

    pub fn to_document(&self) -> IasDocument {
        IasDocument {
            u: self.point.u.iter().copied().collect(),
            theta: self.point.theta.iter().copied().collect(),
            energy_trace: self.energy_trace.clone(),
            iterations: self.iterations,
            converged: self.converged(),
            stop_reason: self.reason,
        }
    }
}

/// JSON form of [`IasResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IasDocument {
    pub u: Vec<f64>,
    pub theta: Vec<f64>,
    pub energy_trace: Vec<EnergyRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
}

/// Runs IAS from `theta0` until `stop` fires. Requires `β > 3/2`.
pub fn solve(
    problem: &LinearProblem,
    prior: &GammaHyperprior,
    theta0: &DVector<f64>,
    stop: &StopRule,
    method: Method,
) -> Result<IasResult> {
    if prior.beta() <= 1.5 {
        return domain(format!(
            "IAS requires beta > 3/2, got {}",
            prior.beta()
        ));
    }
    if prior.d() != problem.d() || theta0.len() != problem.d() {
        return Err(Error::Dimension(format!(
            "problem d = {}, prior d = {}, theta0 length = {}",
            problem.d(),
            prior.d(),
            theta0.len()
        )));
    }
    check_theta(theta0)?;
    let method = method.resolve(problem.n(), problem.d());
    let mut theta = theta0.clone();
    let mut u = DVector::zeros(problem.d());
    let mut trace = Vec::new();
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;
    for k in 1..=stop.max_iter {
        let u_new = update_u(problem, &theta, method)?;
        let theta_new = update_theta(prior, &u_new)?;
        let change = if k == 1 {
            f64::INFINITY
        } else {
            relative_change(&u_new, &u).max(relative_change(&theta_new, &theta))
        };
        u = u_new;
        theta = theta_new;
        let z = Point {
            u: u.clone(),
            theta: theta.clone(),
        };
        let e = energy(problem, prior, &z)?;
        trace.push(EnergyRecord {
            iteration: k,
            total: e.total,
            part_a: e.part_a,
            part_b: e.part_b,
        });
        iterations = k;
        if change < stop.param_rel_tol {
            reason = StopReason::ParameterChange;
            break;
        }
    }
    Ok(IasResult {
        point: Point { u, theta },
        energy_trace: trace,
        iterations,
        reason,
    })
}

/// Default starting point: all-ones `θ⁰`.
pub fn default_theta0(d: usize) -> DVector<f64> {
    DVector::from_element(d, 1.0)
}

/// Relative fixed-point residuals `(u, θ)` at `z`:
/// `‖update_u(θ) − u‖∞/‖u‖∞` and `‖update_theta(u) − θ‖∞/‖θ‖∞`.
pub fn fixed_point_residuals(
    problem: &LinearProblem,
    prior: &GammaHyperprior,
    z: &Point,
) -> Result<(f64, f64)> {
    let u = update_u(problem, &z.theta, Method::Auto)?;
    let theta = update_theta(prior, &z.u)?;
    Ok((relative_change(&u, &z.u), relative_change(&theta, &z.theta)))
}

/// Hessian of `J` at `z`, ordered `(u, θ)`.
pub fn hessian(problem: &LinearProblem, prior: &GammaHyperprior, z: &Point) -> Result<DMatrix<f64>> {
    check_theta(&z.theta)?;
    let d = problem.d();
    if z.u.len() != d || prior.d() != d {
        return Err(Error::Dimension("hessian: inconsistent dimensions".into()));
    }
    let bt = prior.beta_tilde();
    let mut h = DMatrix::zeros(2 * d, 2 * d);
    h.view_mut((0, 0), (d, d)).copy_from(problem.gram());
    for i in 0..d {
        let (u, t) = (z.u[i], z.theta[i]);
        h[(i, i)] += 1.0 / t;
        let cross = -u / (t * t);
        h[(i, d + i)] = cross;
        h[(d + i, i)] = cross;
        h[(d + i, d + i)] = u * u / (t * t * t) + bt / (t * t);
    }
    Ok(h)
}

/// Gaussian `N(z, H(z)⁻¹)` on the stacked `(u, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceApprox {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LaplaceApprox {
    pub fn d(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn u_mean(&self) -> DVector<f64> {
        self.mean.rows(0, self.d()).into_owned()
    }

    /// u-block of the covariance (marginal covariance of `u`).
    pub fn u_cov(&self) -> DMatrix<f64> {
        let d = self.d();
        self.cov.view((0, 0), (d, d)).into_owned()
    }
}

pub fn laplace(problem: &LinearProblem, prior: &GammaHyperprior, z: &Point) -> Result<LaplaceApprox> {
    let h = hessian(problem, prior, z)?;
    let factor = SpdFactor::new(&h).map_err(|_| {
        Error::NotPositiveDefinite("Hessian is not positive definite at this point".into())
    })?;
    let mut mean = DVector::zeros(2 * problem.d());
    mean.rows_mut(0, problem.d()).copy_from(&z.u);
    mean.rows_mut(problem.d(), problem.d()).copy_from(&z.theta);
    Ok(LaplaceApprox {
        mean,
        cov: factor.inverse(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseCovariance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_problem(y: f64) -> LinearProblem {
        LinearProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, y),
            NoiseCovariance::Scalar(1.0),
        )
        .unwrap()
    }

    #[test]
    fn update_u_scalar() {
        let p = unit_problem(2.0);
        let theta = DVector::from_element(1, 1.0);
        assert!((update_u(&p, &theta, Method::Direct).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!((update_u(&p, &theta, Method::Kalman).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn update_u_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DMatrix::from_fn(30, 60, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(30, |_, _| rng.random::<f64>());
        let p = LinearProblem::new(a, y, NoiseCovariance::Scalar(0.04)).unwrap();
        let theta = DVector::from_fn(60, |_, _| 0.01 + rng.random::<f64>());
        let direct = update_u(&p, &theta, Method::Direct).unwrap();
        let kalman = update_u(&p, &theta, Method::Kalman).unwrap();
        assert!((&direct - &kalman).norm() <= 1e-8 * direct.norm());
        let mut m = p.gram().clone();
        for i in 0..60 {
            m[(i, i)] += 1.0 / theta[i];
        }
        for u in [&direct, &kalman] {
            let res = (&m * u - p.white_rhs()).norm();
            assert!(res <= 1e-8 * p.white_rhs().norm(), "residual {res}");
        }
    }

    #[test]
    fn update_theta_examples() {
        let prior = GammaHyperprior::uniform(1, 1.0, 2.5).unwrap();
        assert!((update_theta(&prior, &DVector::zeros(1)).unwrap()[0] - 1.0).abs() < 1e-15);
        let prior = GammaHyperprior::uniform(1, 2.0, 2.5).unwrap();
        let t = update_theta(&prior, &DVector::from_element(1, 2.0)).unwrap()[0];
        assert!((t - (1.0 + 5f64.sqrt())).abs() < 1e-14);
        assert!((t - 3.236_068_0).abs() < 1e-7);
        let prior = GammaHyperprior::uniform(1, 1.0, 1.5).unwrap();
        let t = update_theta(&prior, &DVector::from_element(1, 2f64.sqrt())).unwrap()[0];
        assert!((t - 1.0).abs() < 1e-15);
        assert!(update_theta(&prior, &DVector::zeros(1)).is_err());
    }

    #[test]
    fn solve_requires_beta_above_three_halves() {
        let p = unit_problem(1.0);
        let prior = GammaHyperprior::uniform(1, 1.0, 1.5).unwrap();
        let err = solve(&p, &prior, &default_theta0(1), &StopRule::ias_default(), Method::Auto);
        assert!(err.is_err());
    }

    #[test]
    fn zero_data_fixed_point() {
        let p = unit_problem(0.0);
        let prior = GammaHyperprior::uniform(1, 0.7, 3.0).unwrap();
        let res = solve(&p, &prior, &DVector::from_element(1, 5.0), &StopRule::ias_default(), Method::Auto).unwrap();
        assert_eq!(res.point.u[0], 0.0);
        assert!((res.point.theta[0] - 0.7 * 1.5).abs() < 1e-14);
        assert!(res.converged());
    }

    #[test]
    fn one_sweep_matches_hand_computation() {
        // A = 1, Γ = 1, y = 2, θ⁰ = 1: u¹ = 1; α = 1, β̃ = 1: θ¹ = ½ + √(¼ + ½)
        let p = unit_problem(2.0);
        let prior = GammaHyperprior::uniform(1, 1.0, 2.5).unwrap();
        let res = solve(&p, &prior, &default_theta0(1), &StopRule::fixed(1), Method::Auto).unwrap();
        assert!((res.point.u[0] - 1.0).abs() < 1e-15);
        assert!((res.point.theta[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.reason, StopReason::MaxIterations);
    }

    #[test]
    fn hessian_scalar_example_and_laplace() {
        let p = unit_problem(1.0);
        let prior = GammaHyperprior::uniform(1, 1.0, 2.5).unwrap();
        let z = Point::new(DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        let h = hessian(&p, &prior, &z).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]));
        let lp = laplace(&p, &prior, &z).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]) / 3.0;
        assert!((&lp.cov - expected).amax() < 1e-14);
        assert_eq!(lp.mean.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn hessian_off_diagonal_vanishes_at_zero_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(3, 4, |_, _| rng.random::<f64>());
        let p = LinearProblem::new(a, DVector::zeros(3), NoiseCovariance::Scalar(1.0)).unwrap();
        let prior = GammaHyperprior::uniform(4, 1.0, 2.0).unwrap();
        let z = Point::new(DVector::zeros(4), DVector::from_element(4, 0.3)).unwrap();
        let h = hessian(&p, &prior, &z).unwrap();
        assert_eq!(h.view((0, 4), (4, 4)).amax(), 0.0);
        assert_eq!(h.view((4, 0), (4, 4)).amax(), 0.0);
    }
}
