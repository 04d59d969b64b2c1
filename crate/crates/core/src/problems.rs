//! Seeded synthetic experiments: hierarchical truth, fixed sparse truth,
//! Airy-kernel deconvolution, and Lorenz-63 dictionary regression.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinearProblem, NoiseCovariance, ProblemDocument};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchicalConfig {
    pub d: usize,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub noise_frac: f64,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        Self {
            d: 200,
            n: 50,
            alpha: 0.005,
            beta: 0.05,
            noise_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedSparseConfig {
    pub d: usize,
    pub n: usize,
    pub support: usize,
    pub noise_frac: f64,
}

impl Default for FixedSparseConfig {
    fn default() -> Self {
        Self {
            d: 100,
            n: 50,
            support: 10,
            noise_frac: 0.02,
        }
    }
}

/// Piecewise constant `f` on `[0, 1]`: `f(t) = levels[j]` where `j` counts the
/// breakpoints `≤ t`. The first level is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSignal {
    pub breakpoints: Vec<f64>,
    pub levels: Vec<f64>,
}

impl Default for PiecewiseSignal {
    fn default() -> Self {
        Self {
            breakpoints: vec![0.13, 0.33, 0.50, 0.70, 0.85],
            levels: vec![0.0, 1.5, -0.5, 1.0, 2.0, 0.5],
        }
    }
}

impl PiecewiseSignal {
    pub fn new(breakpoints: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        let s = Self { breakpoints, levels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != self.breakpoints.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "{} breakpoints need {} levels, got {}",
                self.breakpoints.len(),
                self.breakpoints.len() + 1,
                self.levels.len()
            )));
        }
        if self.levels[0] != 0.0 {
            return Err(Error::InvalidInput("the first level must be 0".into()));
        }
        if self.breakpoints.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidInput("breakpoints must lie in (0, 1)".into()));
        }
        if self.breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("breakpoints must be strictly increasing".into()));
        }
        if self.levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("levels must be finite".into()));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let j = self.breakpoints.partition_point(|&b| b <= t);
        self.levels[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeconvolutionConfig {
    pub signal: PiecewiseSignal,
    pub d: usize,
    pub n: usize,
    pub kappa: f64,
    pub noise_frac: f64,
}

impl Default for DeconvolutionConfig {
    fn default() -> Self {
        Self {
            signal: PiecewiseSignal::default(),
            d: 500,
            n: 91,
            kappa: 40.0,
            noise_frac: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub zeta: f64,
    pub x0: [f64; 3],
    pub dt: f64,
    pub steps: usize,
    pub max_degree: usize,
    pub noise_var: f64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            zeta: 8.0 / 3.0,
            x0: [-8.0, 7.0, 27.0],
            dt: 0.02,
            steps: 2000,
            max_degree: 5,
            noise_var: 0.3,
        }
    }
}

/// Generator name and parameters; with the seed this regenerates a bundle bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum Experiment {
    Hierarchical(HierarchicalConfig),
    FixedSparse(FixedSparseConfig),
    Deconvolution(DeconvolutionConfig),
    /// One derivative component (0, 1, 2 for ẋ, ẏ, ż).
    Lorenz63 {
        #[serde(flatten)]
        config: LorenzConfig,
        component: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(flatten)]
    pub experiment: Experiment,
    pub seed: u64,
}

impl Meta {
    pub fn regenerate(&self) -> Result<ExperimentBundle> {
        match &self.experiment {
            Experiment::Hierarchical(c) => gen_hierarchical(self.seed, c),
            Experiment::FixedSparse(c) => gen_fixed_sparse(self.seed, c),
            Experiment::Deconvolution(c) => gen_deconvolution(self.seed, c),
            Experiment::Lorenz63 { config, component } => {
                if *component > 2 {
                    return Err(Error::InvalidInput(format!(
                        "Lorenz component must be 0, 1 or 2, got {component}"
                    )));
                }
                let mut all = gen_lorenz_problems(self.seed, config)?;
                Ok(all.swap_remove(*component))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentBundle {
    pub problem: LinearProblem,
    pub truth_u: DVector<f64>,
    pub truth_theta: Option<DVector<f64>>,
    pub meta: Meta,
}

/// JSON form: the problem document plus truths and generator metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleDocument {
    #[serde(flatten)]
    pub problem: ProblemDocument,
    pub truth_u: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_theta: Option<Vec<f64>>,
    pub meta: Meta,
}

impl ExperimentBundle {
    pub fn to_document(&self) -> BundleDocument {
        BundleDocument {
            problem: ProblemDocument::from_problem(&self.problem, None),
            truth_u: self.truth_u.iter().copied().collect(),
            truth_theta: self.truth_theta.as_ref().map(|t| t.iter().copied().collect()),
            meta: self.meta.clone(),
        }
    }
}

impl BundleDocument {
    pub fn to_bundle(&self) -> Result<ExperimentBundle> {
        let problem = self.problem.to_problem()?;
        if self.truth_u.len() != problem.d() {
            return Err(Error::Dimension("truth_u length differs from d".into()));
        }
        Ok(ExperimentBundle {
            problem,
            truth_u: DVector::from_column_slice(&self.truth_u),
            truth_theta: self.truth_theta.as_deref().map(DVector::from_column_slice),
            meta: self.meta.clone(),
        })
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be non-negative, got {v}")))
    }
}

fn dims(n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput(format!("dimensions must be positive, got n = {n}, d = {d}")));
    }
    Ok(())
}

fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    // Filled row by row so the draw order matches the row-major file layout.
    let mut a = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            a[(i, j)] = rng.random::<f64>();
        }
    }
    a
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Adds `N(0, γ²I)` noise with `γ = noise_frac · max|clean|` and builds the problem.
/// A zero noise level is replaced by the smallest positive variance so the
/// problem stays well defined.
fn noisy_problem(
    rng: &mut ChaCha8Rng,
    forward: DMatrix<f64>,
    clean: DVector<f64>,
    noise_frac: f64,
) -> Result<LinearProblem> {
    let gamma = noise_frac * clean.amax();
    let y = clean + normal_vector(rng, forward.nrows()) * gamma;
    let var = (gamma * gamma).max(f64::MIN_POSITIVE);
    LinearProblem::new(forward, y, NoiseCovariance::Scalar(var))
}

/// `θ_i ~ Gamma(α, rate β)`, `u_i ~ N(0, θ_i)`, `A_ij ~ U(0, 1)`, 5% noise by default.
pub fn gen_hierarchical(seed: u64, config: &HierarchicalConfig) -> Result<ExperimentBundle> {
    dims(config.n, config.d)?;
    positive("alpha", config.alpha)?;
    positive("beta", config.beta)?;
    nonnegative("noise_frac", config.noise_frac)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(config.alpha, 1.0 / config.beta)
        .map_err(|e| Error::InvalidInput(format!("gamma distribution: {e}")))?;
    let theta = DVector::from_fn(config.d, |_, _| gamma.sample(&mut rng));
    let u = DVector::from_fn(config.d, |i, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * theta[i].sqrt()
    });
    let a = uniform_matrix(&mut rng, config.n, config.d);
    let clean = &a * &u;
    let problem = noisy_problem(&mut rng, a, clean, config.noise_frac)?;
    Ok(ExperimentBundle {
        problem,
        truth_u: u,
        truth_theta: Some(theta),
        meta: Meta {
            experiment: Experiment::Hierarchical(*config),
            seed,
        },
    })
}

/// `support` nonzeros at seeded positions with magnitudes in `[1, 5]` and random signs.
pub fn gen_fixed_sparse(seed: u64, config: &FixedSparseConfig) -> Result<ExperimentBundle> {
    dims(config.n, config.d)?;
    nonnegative("noise_frac", config.noise_frac)?;
    if config.support > config.d {
        return Err(Error::InvalidInput(format!(
            "support {} exceeds d = {}",
            config.support, config.d
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = index::sample(&mut rng, config.d, config.support).into_vec();
    positions.sort_unstable();
    let mut u = DVector::zeros(config.d);
    for &p in &positions {
        let magnitude = 1.0 + 4.0 * rng.random::<f64>();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        u[p] = sign * magnitude;
    }
    let a = uniform_matrix(&mut rng, config.n, config.d);
    let clean = &a * &u;
    let problem = noisy_problem(&mut rng, a, clean, config.noise_frac)?;
    Ok(ExperimentBundle {
        problem,
        truth_u: u,
        truth_theta: None,
        meta: Meta {
            experiment: Experiment::FixedSparse(*config),
            seed,
        },
    })
}

/// Bessel function of the first kind of order one.
///
/// Miller's backward recurrence normalized by `J₀ + 2ΣJ_{2k} = 1` for
/// `|x| < 25`, and the Hankel asymptotic expansion beyond.
pub fn bessel_j1(x: f64) -> f64 {
    let ax = x.abs();
    let value = if ax == 0.0 {
        0.0
    } else if ax < 25.0 {
        j1_miller(ax)
    } else {
        j1_asymptotic(ax)
    };
    if x < 0.0 {
        -value
    } else {
        value
    }
}

fn j1_miller(x: f64) -> f64 {
    // Start well above x so the seed error decays below roundoff.
    let mut start = (x + 30.0 + 4.0 * x.sqrt()) as usize;
    start += start % 2;
    let mut next = 0.0; // J_{k+1}
    let mut cur = 1e-300; // J_k
    let mut sum = 0.0;
    let mut j1 = 0.0;
    for k in (1..=start).rev() {
        let prev = 2.0 * k as f64 / x * cur - next; // J_{k-1}
        next = cur;
        cur = prev;
        if cur.abs() > 1e250 {
            cur *= 1e-250;
            next *= 1e-250;
            sum *= 1e-250;
            j1 *= 1e-250;
        }
        // cur now holds J_{k-1}
        if k - 1 == 1 {
            j1 = cur;
        }
        if (k - 1) % 2 == 0 && k - 1 > 0 {
            sum += 2.0 * cur;
        }
    }
    sum += cur; // J_0
    j1 / sum
}

fn j1_asymptotic(x: f64) -> f64 {
    let mu = 4.0;
    let z = 8.0 * x;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut term = 1.0;
    let mut last = f64::INFINITY;
    for k in 1..60 {
        let kk = (2 * k - 1) as f64;
        term *= (mu - kk * kk) / (k as f64 * z);
        if term.abs() >= last || term.abs() < 1e-18 {
            break;
        }
        last = term.abs();
        // odd k feed Q, even k feed P, each with alternating signs
        match k % 4 {
            1 => q += term,
            2 => p -= term,
            3 => q -= term,
            _ => p += term,
        }
    }
    let chi = x - 0.75 * PI;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// `(J₁(κ|t|)/(κ|t|))²`, equal to 1/4 at `t = 0`.
pub fn airy_kernel(t: f64, kappa: f64) -> f64 {
    let x = kappa * t.abs();
    if x < 1e-4 {
        // J₁(x)/x = ½ − x²/16 + O(x⁴)
        let h = 0.5 - x * x / 16.0;
        return h * h;
    }
    let h = bessel_j1(x) / x;
    h * h
}

/// Grid `t_k = k/(d−1)`, `k = 0..d`.
pub fn deconvolution_grid(d: usize) -> DVector<f64> {
    if d == 1 {
        return DVector::zeros(1);
    }
    DVector::from_fn(d, |k, _| k as f64 / (d - 1) as f64)
}

/// Trapezoid-weighted kernel matrix `A_jk = w_k A(s_j − t_k)` with `s_j = (4 + j)/100`.
pub fn convolution_matrix(n: usize, d: usize, kappa: f64) -> DMatrix<f64> {
    let t = deconvolution_grid(d);
    let h = if d > 1 { 1.0 / (d - 1) as f64 } else { 1.0 };
    let mut a = DMatrix::zeros(n, d);
    for j in 0..n {
        let s = (5 + j) as f64 / 100.0;
        for k in 0..d {
            let w = if k == 0 || k == d - 1 { 0.5 * h } else { h };
            a[(j, k)] = w * airy_kernel(s - t[k], kappa);
        }
    }
    a
}

/// `B v`-style cumulative sum: `(Bu)_k = Σ_{l ≤ k} u_l`.
pub fn cumulative_sum(u: &DVector<f64>) -> DVector<f64> {
    let mut acc = 0.0;
    u.map(|x| {
        acc += x;
        acc
    })
}

/// `B⁻¹v`: first entry kept, then successive differences.
pub fn differences(v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |k, _| if k == 0 { v[0] } else { v[k] - v[k - 1] })
}

/// Right-multiplies by the lower-triangular all-ones matrix:
/// `(AB)_{jk} = Σ_{l ≥ k} A_{jl}`.
pub fn times_cumsum_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut ab = a.clone();
    for j in 0..a.nrows() {
        let mut acc = 0.0;
        for k in (0..a.ncols()).rev() {
            acc += a[(j, k)];
            ab[(j, k)] = acc;
        }
    }
    ab
}

/// Grid indices where the discretized signal changes value.
pub fn jump_indices(v: &DVector<f64>) -> Vec<usize> {
    differences(v)
        .iter()
        .enumerate()
        .filter(|(_, x)| **x != 0.0)
        .map(|(k, _)| k)
        .collect()
}

/// Deconvolution in the jump basis: the unknown is `u = B⁻¹v` and the forward map is `AB`.
pub fn gen_deconvolution(seed: u64, config: &DeconvolutionConfig) -> Result<ExperimentBundle> {
    dims(config.n, config.d)?;
    positive("kappa", config.kappa)?;
    nonnegative("noise_frac", config.noise_frac)?;
    config.signal.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = deconvolution_grid(config.d);
    let v = t.map(|tk| config.signal.eval(tk));
    let u = differences(&v);
    let ab = times_cumsum_basis(&convolution_matrix(config.n, config.d, config.kappa));
    let clean = &ab * &u;
    let problem = noisy_problem(&mut rng, ab, clean, config.noise_frac)?;
    Ok(ExperimentBundle {
        problem,
        truth_u: u,
        truth_theta: None,
        meta: Meta {
            experiment: Experiment::Deconvolution(config.clone()),
            seed,
        },
    })
}

pub fn lorenz_field(state: &[f64; 3], sigma: f64, rho: f64, zeta: f64) -> [f64; 3] {
    let [x, y, z] = *state;
    [sigma * (y - x), x * (rho - z) - y, x * y - zeta * z]
}

fn rk4_step<F: Fn(&[f64; 3]) -> [f64; 3]>(f: &F, s: &[f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: &[f64; 3], b: &[f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = f(s);
    let k2 = f(&add(s, &k1, 0.5 * dt));
    let k3 = f(&add(s, &k2, 0.5 * dt));
    let k4 = f(&add(s, &k3, dt));
    let mut out = *s;
    for i in 0..3 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Integrates `ds/dt = f(s)` by classical RK4, returning `steps` states
/// starting with `x0`. Stops early, returning the finite prefix and `false`,
/// if the state leaves `|s| < 1e12`.
pub fn integrate_rk4<F: Fn(&[f64; 3]) -> [f64; 3]>(f: &F, x0: [f64; 3], dt: f64, steps: usize) -> (Vec<[f64; 3]>, bool) {
    let mut out = Vec::with_capacity(steps);
    let mut s = x0;
    for k in 0..steps {
        if s.iter().any(|v| !(v.abs() < 1e12)) {
            return (out, false);
        }
        out.push(s);
        if k + 1 < steps {
            s = rk4_step(f, &s, dt);
        }
    }
    (out, true)
}

/// Lorenz-63 states at `t = 0, dt, …` and the exact vector field at each state,
/// both as `steps × 3` matrices.
pub fn lorenz63_trajectory(config: &LorenzConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    positive("dt", config.dt)?;
    let LorenzConfig { sigma, rho, zeta, .. } = *config;
    let field = |s: &[f64; 3]| lorenz_field(s, sigma, rho, zeta);
    let (states, finite) = integrate_rk4(&field, config.x0, config.dt, config.steps);
    if !finite {
        return Err(Error::Convergence(format!(
            "Lorenz trajectory left the finite range after {} steps (last state {:?})",
            states.len(),
            states.last()
        )));
    }
    let n = states.len();
    let x = DMatrix::from_fn(n, 3, |i, j| states[i][j]);
    let dx = DMatrix::from_fn(n, 3, |i, j| field(&states[i])[j]);
    Ok((x, dx))
}

/// Exponents `(a, b, c)` of the dictionary monomials `x^a y^b z^c` with
/// `1 ≤ a+b+c ≤ max_degree`: by degree, pure powers first, then mixed terms
/// in descending lexicographic exponent order.
pub fn dictionary_exponents(max_degree: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for deg in 1..=max_degree {
        out.extend([[deg, 0, 0], [0, deg, 0], [0, 0, deg]]);
        if deg == 1 {
            continue;
        }
        for a in (0..=deg).rev() {
            for b in (0..=deg - a).rev() {
                let c = deg - a - b;
                if a == deg || b == deg || c == deg {
                    continue;
                }
                out.push([a, b, c]);
            }
        }
    }
    out
}

pub fn monomial_label(e: &[usize; 3]) -> String {
    let mut s = String::new();
    for (name, p) in ["x", "y", "z"].iter().zip(e) {
        match p {
            0 => {}
            1 => s.push_str(name),
            p => s.push_str(&format!("{name}^{p}")),
        }
    }
    s
}

/// Evaluates the dictionary at one state.
pub fn dictionary_row(state: &[f64; 3], exponents: &[[usize; 3]]) -> Vec<f64> {
    exponents
        .iter()
        .map(|e| state[0].powi(e[0] as i32) * state[1].powi(e[1] as i32) * state[2].powi(e[2] as i32))
        .collect()
}

/// Polynomial dictionary with column labels such as `x`, `x^2`, `xy`, `xy^2z`.
pub fn build_dictionary(states: &DMatrix<f64>, max_degree: usize) -> Result<(DMatrix<f64>, Vec<String>)> {
    if max_degree == 0 {
        return Err(Error::InvalidInput("max_degree must be at least 1".into()));
    }
    if states.ncols() != 3 {
        return Err(Error::Dimension(format!("states need 3 columns, got {}", states.ncols())));
    }
    let exps = dictionary_exponents(max_degree);
    let mut a = DMatrix::zeros(states.nrows(), exps.len());
    for i in 0..states.nrows() {
        let row = dictionary_row(&[states[(i, 0)], states[(i, 1)], states[(i, 2)]], &exps);
        for (j, v) in row.into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    Ok((a, exps.iter().map(monomial_label).collect()))
}

/// True coefficient vectors of the three Lorenz equations in dictionary order.
pub fn lorenz_truth(config: &LorenzConfig) -> Result<[DVector<f64>; 3]> {
    let exps = dictionary_exponents(config.max_degree);
    let col = |e: [usize; 3]| {
        exps.iter()
            .position(|x| *x == e)
            .ok_or_else(|| Error::InvalidInput("max_degree must be at least 2 for Lorenz".into()))
    };
    let d = exps.len();
    let mut phi = [DVector::zeros(d), DVector::zeros(d), DVector::zeros(d)];
    phi[0][col([1, 0, 0])?] = -config.sigma;
    phi[0][col([0, 1, 0])?] = config.sigma;
    phi[1][col([1, 0, 0])?] = config.rho;
    phi[1][col([0, 1, 0])?] = -1.0;
    phi[1][col([1, 0, 1])?] = -1.0;
    phi[2][col([0, 0, 1])?] = -config.zeta;
    phi[2][col([1, 1, 0])?] = 1.0;
    Ok(phi)
}

/// Three regressions `ẋ_i = AΦ_i + η_i` on a shared polynomial dictionary
/// with independent `N(0, noise_var · I)` noise.
pub fn gen_lorenz_problems(seed: u64, config: &LorenzConfig) -> Result<Vec<ExperimentBundle>> {
    positive("noise_var", config.noise_var)?;
    let (states, derivs) = lorenz63_trajectory(config)?;
    let (a, _) = build_dictionary(&states, config.max_degree)?;
    let truth = lorenz_truth(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = config.noise_var.sqrt();
    let mut out = Vec::with_capacity(3);
    for (component, phi) in truth.into_iter().enumerate() {
        let y = derivs.column(component) + normal_vector(&mut rng, a.nrows()) * std;
        let problem = LinearProblem::new(a.clone(), y, NoiseCovariance::Scalar(config.noise_var))?;
        out.push(ExperimentBundle {
            problem,
            truth_u: phi,
            truth_theta: None,
            meta: Meta {
                experiment: Experiment::Lorenz63 {
                    config: *config,
                    component,
                },
                seed,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;

    fn j1_series(x: f64) -> f64 {
        let h = 0.5 * x;
        let mut term = h;
        let mut sum = term;
        for k in 1..200 {
            term *= -h * h / (k as f64 * (k + 1) as f64);
            sum += term;
            if term.abs() < 1e-20 * sum.abs() {
                break;
            }
        }
        sum
    }

    #[test]
    fn j1_matches_series() {
        for i in 1..=160 {
            let x = i as f64 * 0.05;
            let (a, b) = (bessel_j1(x), j1_series(x));
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3), "x={x}: {a} vs {b}");
        }
        assert!((bessel_j1(1.0) - 0.440_050_585_744_933_5).abs() < 1e-15);
        assert_eq!(bessel_j1(-2.0), -bessel_j1(2.0));
    }

    #[test]
    fn j1_matches_integral_representation() {
        // J₁(x) = (1/π) ∫₀^π cos(t − x sin t) dt
        for x in [5.0, 12.5, 24.9, 25.1, 31.0, 40.0, 77.7] {
            let v = integrate(&|t: f64| (t - x * t.sin()).cos(), 0.0, PI, 1e-15) / PI;
            assert!((bessel_j1(x) - v).abs() < 1e-13, "x={x}: {} vs {v}", bessel_j1(x));
        }
    }

    #[test]
    fn airy_kernel_shape() {
        assert_eq!(airy_kernel(0.0, 40.0), 0.25);
        for i in 0..=20000 {
            let t = -1.0 + i as f64 * 1e-4;
            let v = airy_kernel(t, 40.0);
            assert_eq!(v, airy_kernel(-t, 40.0));
            assert!((0.0..=0.25).contains(&v), "t={t}: {v}");
        }
        assert!((airy_kernel(1e-5, 40.0) - airy_kernel(2e-4, 40.0)).abs() < 1e-5);
    }

    #[test]
    fn gamma_sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Gamma::new(0.005, 1.0 / 0.05).unwrap();
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        // mean 0.1, variance 2
        assert!((mean - 0.1).abs() < 3.0 * (2.0 / n as f64).sqrt(), "{mean}");
        assert!(xs.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn hierarchical_shapes_and_determinism() {
        let c = HierarchicalConfig::default();
        let a = gen_hierarchical(3, &c).unwrap();
        let b = gen_hierarchical(3, &c).unwrap();
        assert_eq!(a.problem.forward().shape(), (50, 200));
        assert_eq!(a.problem.data().len(), 50);
        assert_eq!(a.to_document(), b.to_document());
        assert_ne!(a.to_document(), gen_hierarchical(4, &c).unwrap().to_document());
    }

    #[test]
    fn fixed_sparse_contract() {
        let b = gen_fixed_sparse(1, &FixedSparseConfig::default()).unwrap();
        assert_eq!(b.truth_u.iter().filter(|v| **v != 0.0).count(), 10);
        assert!(b.truth_u.iter().all(|v| *v == 0.0 || (1.0..=5.0).contains(&v.abs())));
        let clean = b.problem.forward() * &b.truth_u;
        let NoiseCovariance::Scalar(var) = b.problem.noise() else { panic!() };
        assert_eq!(var.sqrt(), 0.02 * clean.amax());

        let empty = gen_fixed_sparse(1, &FixedSparseConfig { support: 0, ..Default::default() }).unwrap();
        assert_eq!(empty.truth_u.amax(), 0.0);
        assert!(gen_fixed_sparse(1, &FixedSparseConfig { support: 101, ..Default::default() }).is_err());
    }

    #[test]
    fn cumsum_and_differences_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = DVector::from_fn(50, |_, _| rng.random::<f64>());
        assert!((cumulative_sum(&differences(&v)) - &v).amax() < 1e-14);
        let a = DMatrix::from_fn(3, 50, |_, _| rng.random::<f64>());
        let lower = DMatrix::from_fn(50, 50, |i, j| if i >= j { 1.0 } else { 0.0 });
        assert!((times_cumsum_basis(&a) - &a * lower).amax() < 1e-13);
    }

    #[test]
    fn single_step_signal_has_one_jump() {
        let signal = PiecewiseSignal::new(vec![0.4], vec![0.0, 1.3]).unwrap();
        let t = deconvolution_grid(101);
        let u = differences(&t.map(|x| signal.eval(x)));
        let nz: Vec<_> = u.iter().enumerate().filter(|(_, x)| **x != 0.0).collect();
        assert_eq!(nz.len(), 1);
        assert_eq!(*nz[0].1, 1.3);
        assert!(t[nz[0].0] >= 0.4 && t[nz[0].0 - 1] < 0.4);
        assert!(PiecewiseSignal::new(vec![0.4], vec![1.0, 1.3]).is_err());
        assert!(PiecewiseSignal::new(vec![0.4, 0.2], vec![0.0, 1.0, 1.3]).is_err());
    }

    #[test]
    fn deconvolution_shape_and_jumps() {
        let b = gen_deconvolution(0, &DeconvolutionConfig::default()).unwrap();
        assert_eq!(b.problem.forward().shape(), (91, 500));
        assert_eq!(jump_indices(&cumulative_sum(&b.truth_u)).len(), 5);
    }

    #[test]
    fn deconvolution_trapezoid_converges() {
        // Smooth test function: doubling d shrinks the quadrature error about fourfold.
        let f = |t: f64| (3.0 * t).sin();
        let exact: Vec<f64> = (0..5)
            .map(|j| {
                let s = (5 + 20 * j) as f64 / 100.0;
                integrate(&|t: f64| airy_kernel(s - t, 40.0) * f(t), 0.0, 1.0, 1e-14)
            })
            .collect();
        let err = |d: usize| {
            let a = convolution_matrix(91, d, 40.0);
            let v = deconvolution_grid(d).map(f);
            let y = a * v;
            (0..5).map(|j| (y[20 * j] - exact[j]).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(201), err(401));
        assert!(e1 / e2 > 3.0, "{e1} {e2}");
    }

    #[test]
    fn lorenz_field_and_equilibrium() {
        let f = lorenz_field(&[1.0, 1.0, 1.0], 10.0, 28.0, 8.0 / 3.0);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 26.0);
        assert!((f[2] + 5.0 / 3.0).abs() < 1e-15);
        let c = LorenzConfig {
            x0: [0.0; 3],
            ..Default::default()
        };
        let (x, _) = lorenz63_trajectory(&c).unwrap();
        assert_eq!(x.amax(), 0.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let field = |s: &[f64; 3]| lorenz_field(s, 10.0, 28.0, 8.0 / 3.0);
        let x0 = [-8.0, 7.0, 27.0];
        let t_end = 0.1;
        let reference = integrate_rk4(&field, x0, t_end / 1600.0, 1601).0[1600];
        let err = |n: usize| {
            let s = integrate_rk4(&field, x0, t_end / n as f64, n + 1).0[n];
            (0..3).map(|i| (s[i] - reference[i]).abs()).fold(0.0, f64::max)
        };
        let ratio = err(25) / err(50);
        assert!((13.0..19.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn dictionary_layout() {
        let exps = dictionary_exponents(5);
        assert_eq!(exps.len(), 55);
        let labels: Vec<_> = exps.iter().take(9).map(monomial_label).collect();
        assert_eq!(labels, ["x", "y", "z", "x^2", "y^2", "z^2", "xy", "xz", "yz"]);
        let states = DMatrix::from_row_slice(2, 3, &[2.0, 0.0, 0.0, 1.5, -2.0, 0.5]);
        let (a, labels) = build_dictionary(&states, 5).unwrap();
        for (j, l) in labels.iter().enumerate() {
            let expected = if l.contains('y') || l.contains('z') { 0.0 } else { a[(0, j)] };
            assert_eq!(a[(0, j)], expected);
        }
        assert_eq!(a[(0, 3)], 4.0);
        assert_eq!(a[(1, 6)], a[(1, 0)] * a[(1, 1)]);
        assert!(build_dictionary(&states, 0).is_err());
    }

    #[test]
    fn lorenz_truth_reproduces_derivatives() {
        let c = LorenzConfig::default();
        let truth = lorenz_truth(&c).unwrap();
        assert_eq!(truth[0][0], -10.0);
        assert_eq!(truth[0][1], 10.0);
        assert_eq!(truth[1].iter().filter(|v| **v != 0.0).count(), 3);
        let (x, dx) = lorenz63_trajectory(&c).unwrap();
        let (a, _) = build_dictionary(&x, 5).unwrap();
        for i in 0..3 {
            let r = &a * &truth[i] - dx.column(i);
            assert!(r.norm() < 1e-10 * dx.column(i).norm());
        }
    }

    #[test]
    fn meta_regenerates_bundles() {
        for meta in [
            gen_hierarchical(8, &HierarchicalConfig { d: 20, n: 5, ..Default::default() }).unwrap().meta,
            gen_fixed_sparse(8, &FixedSparseConfig::default()).unwrap().meta,
            gen_lorenz_problems(8, &LorenzConfig { steps: 100, ..Default::default() }).unwrap()[2].meta.clone(),
        ] {
            let json = serde_json::to_string(&meta).unwrap();
            let back: Meta = serde_json::from_str(&json).unwrap();
            assert_eq!(back, meta);
            let a = meta.regenerate().unwrap().to_document();
            let b = back.regenerate().unwrap().to_document();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            let doc: BundleDocument = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
            assert_eq!(doc, a);
            doc.to_bundle().unwrap();
        }
    }
}
