//! Variational Iterative Alternating Scheme: coordinate-ascent mean-field
//! inference with `q(u) = N(m, C)` and `q(θ_i) = GIG(b, r_i, s_i)`.
//!
//! One sweep updates `r_i = m_i² + C_ii`, sets the shrinkage weights
//! `ℓ_i = E_q[1/θ_i]`, and solves for the Gaussian factor
//! `C = (AᵀΓ⁻¹A + diag ℓ)⁻¹`, `m = C AᵀΓ⁻¹y`. The ELBO is evaluated after each
//! sweep with the terms that do not depend on `(m, C, r)` dropped.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{from_row_major, row_major, GammaHyperprior, LinearProblem, SpdFactor};
use crate::special::{gig_inv_mean, GigParams, R_FLOOR};
use crate::stop::{relative_change, Stall, StopReason, StopRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Woodbury form when `d > 2n`, direct otherwise.
    #[default]
    Auto,
    Direct,
    Woodbury,
}

impl Method {
    pub fn resolve(self, n: usize, d: usize) -> Method {
        match self {
            Method::Auto if d > 2 * n => Method::Woodbury,
            Method::Auto => Method::Direct,
            m => m,
        }
    }
}

/// Variational parameters `(m, C, r)` with the fixed GIG parameters `b`, `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub m: DVector<f64>,
    pub c: DMatrix<f64>,
    pub r: DVector<f64>,
    pub b: f64,
    pub s: DVector<f64>,
}

impl VariationalState {
    pub fn new(
        m: DVector<f64>,
        c: DMatrix<f64>,
        r: DVector<f64>,
        b: f64,
        s: DVector<f64>,
    ) -> Result<Self> {
        let d = m.len();
        if c.shape() != (d, d) || r.len() != d || s.len() != d {
            return Err(Error::Dimension(format!(
                "state: m {d}, C {:?}, r {}, s {}",
                c.shape(),
                r.len(),
                s.len()
            )));
        }
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::Domain(format!("b must be positive, got {b}")));
        }
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain("all r_i must be positive".into()));
        }
        if (0..d).any(|i| !(c[(i, i)] > 0.0)) {
            return Err(Error::NotPositiveDefinite("C has a non-positive diagonal".into()));
        }
        Ok(Self { m, c, r, b, s })
    }

    /// State for `(m, C)` with `r` set by [`update_r`], as after a sweep's first step.
    pub fn from_gaussian(m: DVector<f64>, c: DMatrix<f64>, prior: &GammaHyperprior) -> Result<Self> {
        let r = update_r(&m, &c)?;
        Self::new(m, c, r, prior.b(), prior.s())
    }

    pub fn d(&self) -> usize {
        self.m.len()
    }

    pub fn gig(&self, i: usize) -> Result<GigParams> {
        GigParams::new(self.b, self.r[i], self.s[i])
    }

    pub fn to_document(&self) -> StateDocument {
        StateDocument {
            m: self.m.iter().copied().collect(),
            c: row_major(&self.c),
            r: self.r.iter().copied().collect(),
            b: self.b,
            s: self.s.iter().copied().collect(),
        }
    }
}

/// `r_i = m_i² + C_ii`, floored at [`R_FLOOR`].
pub fn update_r(m: &DVector<f64>, c: &DMatrix<f64>) -> Result<DVector<f64>> {
    if c.shape() != (m.len(), m.len()) {
        return Err(Error::Dimension(format!(
            "m has length {}, C is {:?}",
            m.len(),
            c.shape()
        )));
    }
    r_from_diag(m, &c.diagonal())
}

fn r_from_diag(m: &DVector<f64>, diag_c: &DVector<f64>) -> Result<DVector<f64>> {
    let mut r = DVector::zeros(m.len());
    for i in 0..m.len() {
        let v = m[i] * m[i] + diag_c[i];
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite r_{i}")));
        }
        r[i] = v.max(R_FLOOR);
    }
    Ok(r)
}

fn weights(b: f64, r: &DVector<f64>, s: &DVector<f64>) -> Result<DVector<f64>> {
    let mut ell = DVector::zeros(r.len());
    for i in 0..r.len() {
        let p = GigParams::new(b, r[i], s[i])?;
        let l = gig_inv_mean(&p);
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::Domain(format!(
                "shrinkage weight {i} is {l} for {p:?}"
            )));
        }
        ell[i] = l;
    }
    Ok(ell)
}

/// `ℓ_i = E[1/θ_i] = K_{s−1}(√(r_i b))/K_s(√(r_i b)) · √(b/r_i)`.
pub fn shrinkage_weights(state: &VariationalState) -> Result<DVector<f64>> {
    weights(state.b, &state.r, &state.s)
}

/// Gaussian factor after one `(m, C)` update, with the quantities the ELBO needs.
struct GaussianFactor {
    m: DVector<f64>,
    diag_c: DVector<f64>,
    log_det_c: f64,
    /// `tr(Γ^{-1/2} A C Aᵀ Γ^{-1/2})`
    trace_term: f64,
    cov: Option<DMatrix<f64>>,
}

fn check_weights(problem: &LinearProblem, ell: &DVector<f64>) -> Result<()> {
    if ell.len() != problem.d() {
        return Err(Error::Dimension(format!(
            "weights have length {}, d = {}",
            ell.len(),
            problem.d()
        )));
    }
    if ell.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Domain("shrinkage weights must be positive".into()));
    }
    Ok(())
}

fn gaussian_update(
    problem: &LinearProblem,
    ell: &DVector<f64>,
    method: Method,
    full: bool,
) -> Result<GaussianFactor> {
    match method.resolve(problem.n(), problem.d()) {
        Method::Direct | Method::Auto => {
            let gram = problem.gram();
            let mut precision = gram.clone();
            for i in 0..ell.len() {
                precision[(i, i)] += ell[i];
            }
            let factor = SpdFactor::new(&precision)?;
            let cov = factor.inverse();
            let m = &cov * problem.white_rhs();
            let trace_term = cov.component_mul(gram).sum();
            Ok(GaussianFactor {
                m,
                diag_c: cov.diagonal(),
                log_det_c: -factor.log_det(),
                trace_term,
                cov: Some(cov),
            })
        }
        Method::Woodbury => {
            let a = problem.white_forward();
            let n = problem.n();
            let inv_ell = ell.map(|l| 1.0 / l);
            let mut a_scaled = a.clone();
            for (j, mut col) in a_scaled.column_iter_mut().enumerate() {
                col *= inv_ell[j];
            }
            // S = Ã L⁻¹ Ãᵀ + I
            let mut s = &a_scaled * a.transpose();
            for i in 0..n {
                s[(i, i)] += 1.0;
            }
            let factor = SpdFactor::new(&s)?;
            let w = factor.solve_vec(problem.white_data());
            let m = a_scaled.tr_mul(&w);
            // V = L_S⁻¹ D Ã L⁻¹, so C = L⁻¹ − VᵀV
            let v = factor.half_solve(&a_scaled);
            let mut diag_c = inv_ell.clone();
            for (j, col) in v.column_iter().enumerate() {
                diag_c[j] -= col.norm_squared();
            }
            let log_det_c = -(ell.iter().map(|l| l.ln()).sum::<f64>() + factor.log_det());
            let trace_term = n as f64 - factor.inverse_trace();
            let cov = if full {
                let mut c = -v.tr_mul(&v);
                for i in 0..ell.len() {
                    c[(i, i)] += inv_ell[i];
                }
                Some(c)
            } else {
                None
            };
            Ok(GaussianFactor {
                m,
                diag_c,
                log_det_c,
                trace_term,
                cov,
            })
        }
    }
}

/// `m = (AᵀΓ⁻¹A + L)⁻¹AᵀΓ⁻¹y`, `C = (AᵀΓ⁻¹A + L)⁻¹` with `L = diag ℓ`.
pub fn update_mc(
    problem: &LinearProblem,
    ell: &DVector<f64>,
    method: Method,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_weights(problem, ell)?;
    let g = gaussian_update(problem, ell, method, true)?;
    Ok((g.m, g.cov.expect("full covariance requested")))
}

/// Per-component θ contribution: `−(s/2) ln(b/r) + ln(2K_s(√(rb)))
/// + ½ (r − m² − C_ii) E[1/θ]`. The last term vanishes when `r = m² + C_ii`.
fn theta_terms(
    b: f64,
    r: &DVector<f64>,
    s: &DVector<f64>,
    m: &DVector<f64>,
    diag_c: &DVector<f64>,
    ell: Option<&DVector<f64>>,
) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..r.len() {
        let p = GigParams::new(b, r[i], s[i])?;
        acc -= p.log_normalizer();
        let mismatch = p.r() - m[i] * m[i] - diag_c[i];
        if mismatch != 0.0 {
            let l = match ell {
                Some(e) => e[i],
                None => gig_inv_mean(&p),
            };
            acc += 0.5 * mismatch * l;
        }
    }
    Ok(acc)
}

fn gaussian_terms(problem: &LinearProblem, g: &GaussianFactor) -> f64 {
    -0.5 * g.trace_term - 0.5 * problem.misfit(&g.m) + 0.5 * g.log_det_c
}

/// ELBO of `q = N(m, C) × Π GIG(b, r_i, s_i)` up to terms that do not depend
/// on `(m, C, r)`.
pub fn elbo(problem: &LinearProblem, prior: &GammaHyperprior, state: &VariationalState) -> Result<f64> {
    let d = problem.d();
    if state.d() != d || prior.d() != d {
        return Err(Error::Dimension(format!(
            "problem d = {d}, prior d = {}, state d = {}",
            prior.d(),
            state.d()
        )));
    }
    if (state.b - prior.b()).abs() > 1e-12 * prior.b()
        || (&state.s - prior.s()).amax() > 1e-12
    {
        return Err(Error::InvalidInput(
            "state GIG parameters do not match the hyperprior".into(),
        ));
    }
    let factor = SpdFactor::new(&state.c)?;
    let ac = problem.white_forward() * &state.c;
    let trace_term = ac.component_mul(problem.white_forward()).sum();
    let g = GaussianFactor {
        m: state.m.clone(),
        diag_c: state.c.diagonal(),
        log_det_c: factor.log_det(),
        trace_term,
        cov: None,
    };
    Ok(gaussian_terms(problem, &g)
        + theta_terms(state.b, &state.r, &state.s, &g.m, &g.diag_c, None)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboRecord {
    pub iteration: usize,
    pub elbo: f64,
    /// Relative max-norm change of `(m, r)` over the sweep; absent on the first.
    pub param_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViasResult {
    pub state: VariationalState,
    pub elbo_trace: Vec<ElboRecord>,
    pub iterations: usize,
    pub reason: StopReason,
}

impl ViasResult {
    pub fn converged(&self) -> bool {
        self.reason.converged()
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo_trace.last().map(|r| r.elbo)
    }

    pub fn to_document(&self) -> ViasDocument {
        let StateDocument { m, c, r, b, s } = self.state.to_document();
        ViasDocument {
            m,
            c,
            r,
            b,
            s,
            elbo_trace: self.elbo_trace.clone(),
            iterations: self.iterations,
            converged: self.converged(),
            stop_reason: self.reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDocument {
    pub m: Vec<f64>,
    /// Row-major `d × d`.
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    pub r: Vec<f64>,
    pub b: f64,
    pub s: Vec<f64>,
}

/// JSON form of [`ViasResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViasDocument {
    pub m: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    pub r: Vec<f64>,
    pub b: f64,
    pub s: Vec<f64>,
    pub elbo_trace: Vec<ElboRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
}

impl ViasDocument {
    pub fn to_state(&self) -> Result<VariationalState> {
        let d = self.m.len();
        VariationalState::new(
            DVector::from_column_slice(&self.m),
            from_row_major(d, d, &self.c)?,
            DVector::from_column_slice(&self.r),
            self.b,
            DVector::from_column_slice(&self.s),
        )
    }
}

/// All-ones `m⁰` and `C⁰ = scale · I`. Larger `scale` steers the iteration
/// toward the ELBO maximum farthest from zero covariance.
pub fn default_init(d: usize, scale: f64) -> (DVector<f64>, DMatrix<f64>) {
    (
        DVector::from_element(d, 1.0),
        DMatrix::identity(d, d) * scale,
    )
}

/// Runs VIAS from `(m0, C0)` until `stop` fires.
pub fn solve(
    problem: &LinearProblem,
    prior: &GammaHyperprior,
    m0: &DVector<f64>,
    c0: &DMatrix<f64>,
    stop: &StopRule,
    method: Method,
) -> Result<ViasResult> {
    let d = problem.d();
    if prior.d() != d || m0.len() != d || c0.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "problem d = {d}, prior d = {}, m0 {}, C0 {:?}",
            prior.d(),
            m0.len(),
            c0.shape()
        )));
    }
    SpdFactor::new(c0).map_err(|_| Error::NotPositiveDefinite("C0 is not positive definite".into()))?;
    let method = method.resolve(problem.n(), d);
    let b = prior.b();
    let s = prior.s();

    let mut m = m0.clone();
    let mut diag_c = c0.diagonal();
    let mut r = r_from_diag(&m, &diag_c)?;
    let mut last_ell = None;
    let mut cov = None;
    let mut trace = Vec::new();
    let mut stall = Stall::default();
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;

    for k in 1..=stop.max_iter {
        let r_new = r_from_diag(&m, &diag_c)?;
        let ell = weights(b, &r_new, &s)?;
        let g = gaussian_update(problem, &ell, method, false)?;
        let value = gaussian_terms(problem, &g)
            + theta_terms(b, &r_new, &s, &g.m, &g.diag_c, Some(&ell))?;
        if !value.is_finite() {
            return Err(Error::Convergence(format!("ELBO became {value} at sweep {k}")));
        }
        let change = (k > 1).then(|| relative_change(&g.m, &m).max(relative_change(&r_new, &r)));
        trace.push(ElboRecord {
            iteration: k,
            elbo: value,
            param_change: change,
        });
        m = g.m;
        diag_c = g.diag_c;
        r = r_new;
        cov = g.cov;
        last_ell = Some(ell);
        iterations = k;
        if change.is_some_and(|c| c < stop.param_rel_tol) {
            reason = StopReason::ParameterChange;
            break;
        }
        if stall.update(value, stop) {
            reason = StopReason::ObjectiveStalled;
            break;
        }
    }

    let c = match (cov, last_ell) {
        (Some(c), _) => c,
        (None, Some(ell)) => update_mc(problem, &ell, method)?.1,
        (None, None) => c0.clone(),
    };
    Ok(ViasResult {
        state: VariationalState { m, c, r, b, s },
        elbo_trace: trace,
        iterations,
        reason,
    })
}

/// One full sweep `(m, C) → r → ℓ → (m, C)` from `state`'s Gaussian factor.
pub fn sweep(problem: &LinearProblem, state: &VariationalState, method: Method) -> Result<VariationalState> {
    let r = update_r(&state.m, &state.c)?;
    let ell = weights(state.b, &r, &state.s)?;
    let (m, c) = update_mc(problem, &ell, method)?;
    Ok(VariationalState {
        m,
        c,
        r,
        b: state.b,
        s: state.s.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseCovariance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn update_r_examples() {
        let m = DVector::from_vec(vec![1.0, 0.0, 3.0]);
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.25]));
        assert_eq!(update_r(&m, &c).unwrap().as_slice(), &[2.0, 1.0, 9.25]);
        let r = update_r(&DVector::zeros(4), &DMatrix::identity(4, 4)).unwrap();
        assert_eq!(r, DVector::from_element(4, 1.0));
    }

    #[test]
    fn shrinkage_examples() {
        let state = |b: f64| {
            VariationalState::new(
                DVector::zeros(1),
                DMatrix::identity(1, 1),
                DVector::from_element(1, 1.0),
                b,
                DVector::from_element(1, 0.5),
            )
            .unwrap()
        };
        assert!((shrinkage_weights(&state(1.0)).unwrap()[0] - 1.0).abs() < 1e-13);
        assert!((shrinkage_weights(&state(4.0)).unwrap()[0] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn update_mc_identity() {
        let y = DVector::from_vec(vec![1.0, -2.0, 4.0]);
        let p = LinearProblem::new(DMatrix::identity(3, 3), y.clone(), NoiseCovariance::Scalar(1.0)).unwrap();
        let ell = DVector::from_element(3, 1.0);
        for method in [Method::Direct, Method::Woodbury] {
            let (m, c) = update_mc(&p, &ell, method).unwrap();
            assert!((&m - &y * 0.5).amax() < 1e-15);
            assert!((&c - DMatrix::identity(3, 3) * 0.5).amax() < 1e-15);
        }
    }

    #[test]
    fn update_mc_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(30, 80, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(30, |_, _| rng.random::<f64>());
        let p = LinearProblem::new(a, y, NoiseCovariance::Scalar(0.01)).unwrap();
        let ell = DVector::from_fn(80, |_, _| 0.1 + 10.0 * rng.random::<f64>());
        let (m1, c1) = update_mc(&p, &ell, Method::Direct).unwrap();
        let (m2, c2) = update_mc(&p, &ell, Method::Woodbury).unwrap();
        assert!((&m1 - &m2).norm() <= 1e-8 * m1.norm());
        assert!((&c1 - &c2).norm() <= 1e-8 * c1.norm());
    }

    #[test]
    fn huge_weights_shrink_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_fn(5, 8, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(5, |_, _| 1.0 + rng.random::<f64>());
        let p = LinearProblem::new(a, y, NoiseCovariance::Scalar(0.1)).unwrap();
        let (m, c) = update_mc(&p, &DVector::from_element(8, 1e12), Method::Auto).unwrap();
        assert!(m.amax() < 1e-10);
        assert!(c.diagonal().amax() < 1e-11);
    }

    #[test]
    fn zero_data_gives_zero_mean() {
        let p = LinearProblem::new(DMatrix::identity(4, 4), DVector::zeros(4), NoiseCovariance::Scalar(1.0)).unwrap();
        let prior = GammaHyperprior::uniform(4, 0.3, 1.0).unwrap();
        let (m0, c0) = default_init(4, 1.0);
        let res = solve(&p, &prior, &m0, &c0, &StopRule::vias_default(), Method::Auto).unwrap();
        assert_eq!(res.state.m.amax(), 0.0);
    }

    #[test]
    fn solver_elbo_matches_state_elbo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DMatrix::from_fn(6, 15, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(6, |_, _| rng.random::<f64>());
        let p = LinearProblem::new(a, y, NoiseCovariance::Scalar(0.05)).unwrap();
        let prior = GammaHyperprior::uniform(15, 0.2, 0.5).unwrap();
        let (m0, c0) = default_init(15, 1.0);
        for method in [Method::Direct, Method::Woodbury] {
            let res = solve(&p, &prior, &m0, &c0, &StopRule::fixed(7), method).unwrap();
            let direct = elbo(&p, &prior, &res.state).unwrap();
            let traced = res.final_elbo().unwrap();
            assert!((direct - traced).abs() < 1e-9 * direct.abs().max(1.0), "{direct} vs {traced}");
        }
    }

    #[test]
    fn elbo_rejects_mismatched_hyperprior() {
        let p = LinearProblem::new(DMatrix::identity(1, 1), DVector::zeros(1), NoiseCovariance::Scalar(1.0)).unwrap();
        let prior = GammaHyperprior::uniform(1, 0.3, 1.0).unwrap();
        let st = VariationalState::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DVector::from_element(1, 1.0),
            5.0,
            prior.s(),
        )
        .unwrap();
        assert!(elbo(&p, &prior, &st).is_err());
    }
}
