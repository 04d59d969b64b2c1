//! Brute-force references for tests: quadrature Bessel values and GIG
//! moments, the one-dimensional ELBO landscape, dense-grid posteriors,
//! finite-difference Hessians and Monte-Carlo ELBO differences.
//!
//! Nothing here calls into the solvers. GIG quantities are computed by
//! composite Simpson sums written out below, and the only shared kernel is
//! `special::log_bessel_k`, which is itself checked against
//! [`log_bessel_k_quad`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GammaHyperprior, LinearProblem, NoiseCovariance, Point};
use crate::quadrature::integrate;
use crate::special::log_bessel_k;
use crate::vias::VariationalState;

fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `ln K_s(x)` from `∫₀^∞ exp(−x cosh t) cosh(st) dt` by adaptive quadrature
/// on a peak-normalized integrand.
pub fn log_bessel_k_quad(s: f64, x: f64) -> f64 {
    let g = |t: f64| -x * t.cosh() + ln_cosh(s * t);
    // Locate the peak and a cut-off where the integrand is 60 nats down.
    let mut peak_t = 0.0;
    let mut peak = g(0.0);
    let mut t = 1e-3;
    while t < 800.0 {
        let v = g(t);
        if v > peak {
            peak = v;
            peak_t = t;
        }
        if v < peak - 60.0 && t > peak_t {
            break;
        }
        t *= 1.05;
    }
    let upper = t;
    let f = |t: f64| (g(t) - peak).exp();
    // Panels refined around the peak keep the adaptive rule honest.
    let mut edges = vec![0.0];
    let mut e = (peak_t * 0.5).max(1e-3);
    while e < upper {
        edges.push(e);
        e *= 1.5;
    }
    edges.push(upper);
    let total: f64 = edges.windows(2).map(|w| integrate(&f, w[0], w[1], 1e-15)).sum();
    peak + total.ln()
}

/// GIG(b, r, s) moments by composite Simpson sums in `t = ln θ`:
/// `(E[θ], Var[θ], E[1/θ])`.
pub fn gig_moments_quad(b: f64, r: f64, s: f64) -> (f64, f64, f64) {
    let m0 = log_moment(b, r, s, 0.0);
    let m1 = log_moment(b, r, s, 1.0);
    let m2 = log_moment(b, r, s, 2.0);
    let mi = log_moment(b, r, s, -1.0);
    let mean = (m1 - m0).exp();
    let second = (m2 - m0).exp();
    (mean, second - mean * mean, (mi - m0).exp())
}

/// `ln ∫ θ^{s+k−1} exp(−(bθ + r/θ)/2) dθ`.
fn log_moment(b: f64, r: f64, s: f64, k: f64) -> f64 {
    let p = s + k;
    let g = |t: f64| p * t - 0.5 * (b * t.exp() + r * (-t).exp());
    // Stationary point of g: b e^{2t} − 2p e^t − r = 0.
    let disc = (p * p + b * r).sqrt();
    let et = if p >= 0.0 { (p + disc) / b } else { r / (disc - p) };
    let t0 = if et > 0.0 { et.ln() } else { 0.0 };
    let peak = g(t0);
    let edge = |dir: f64| {
        let mut h = 1.0;
        while g(t0 + dir * h) > peak - 60.0 && h < 1e4 {
            h *= 1.5;
        }
        t0 + dir * h
    };
    let (lo, hi) = (edge(-1.0), edge(1.0));
    simpson(&|t| (g(t) - peak).exp(), lo, hi, 200_000).ln() + peak
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// ELBO restricted to `m = c·y_A`, `C = c`, `r = y_A²c² + c` for a scalar
/// problem with unit noise, where `y_A = Aᵀy`. Differs from the full ELBO by
/// the constant `−y²/2`.
pub fn elbo_manifold_1d(ata: f64, ya: f64, s: f64, c: f64, b: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Domain(format!("c must be positive, got {c}")));
    }
    let r = ya * ya * c * c + c;
    Ok(-0.5 * ata * (c + ya * ya * c * c)
        + ya * ya * c
        + 0.5 * c.ln()
        + 0.5 * s * (r / b).ln()
        + std::f64::consts::LN_2
        + log_bessel_k(s, (r * b).sqrt())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub lo: f64,
    pub hi: f64,
    pub mesh: f64,
    /// Strict interior grid peaks `(c, value)`, by increasing `c`.
    pub maxima: Vec<(f64, f64)>,
    pub global: (f64, f64),
}

/// Grid values `(c_k, f(c_k))` with `c_k = lo + k·mesh`, `c_k ≤ hi`, skipping `c = lo`.
pub fn scan_function<F: Fn(f64) -> f64 + Sync>(f: F, lo: f64, hi: f64, mesh: f64) -> Result<Vec<(f64, f64)>> {
    if !(mesh > 0.0) || !(hi > lo) {
        return Err(Error::InvalidInput(format!("bad scan: [{lo}, {hi}] mesh {mesh}")));
    }
    let n = ((hi - lo) / mesh * (1.0 + 1e-12)).floor() as usize;
    Ok((1..=n)
        .into_par_iter()
        .map(|k| {
            let c = lo + k as f64 * mesh;
            (c, f(c))
        })
        .collect())
}

pub fn local_maxima(values: &[(f64, f64)]) -> Vec<(f64, f64)> {
    values
        .windows(3)
        .filter(|w| w[1].1 > w[0].1 && w[1].1 > w[2].1)
        .map(|w| w[1])
        .collect()
}

fn report(values: &[(f64, f64)], lo: f64, hi: f64, mesh: f64) -> Result<LandscapeReport> {
    let maxima = local_maxima(values);
    let global = values
        .iter()
        .copied()
        .filter(|v| v.1.is_finite())
        .fold(None, |best: Option<(f64, f64)>, v| match best {
            Some(b) if b.1 >= v.1 => Some(b),
            _ => Some(v),
        })
        .ok_or_else(|| Error::Domain("no finite values in scan".into()))?;
    Ok(LandscapeReport {
        lo,
        hi,
        mesh,
        maxima,
        global,
    })
}

/// Scans [`elbo_manifold_1d`] over `(lo, hi]`; returns the report and the raw curve.
pub fn landscape_scan(
    ata: f64,
    ya: f64,
    s: f64,
    b: f64,
    lo: f64,
    hi: f64,
    mesh: f64,
) -> Result<(LandscapeReport, Vec<(f64, f64)>)> {
    let values = scan_function(
        |c| elbo_manifold_1d(ata, ya, s, c, b).unwrap_or(f64::NEG_INFINITY),
        lo,
        hi,
        mesh,
    )?;
    Ok((report(&values, lo, hi, mesh)?, values))
}

/// Landscape report for an arbitrary function, mainly for testing the scan itself.
pub fn scan_report<F: Fn(f64) -> f64 + Sync>(f: F, lo: f64, hi: f64, mesh: f64) -> Result<LandscapeReport> {
    report(&scan_function(f, lo, hi, mesh)?, lo, hi, mesh)
}

/// Axis of a dense grid: `points` cell centres spread evenly over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Axis {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.points as f64
    }

    pub fn at(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width()
    }
}

pub const MAX_GRID_CELLS: usize = 100_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    /// `u` axes then `θ` axes.
    pub axes: Vec<Axis>,
    /// Normalized so that the Riemann sum `Σ density · cell volume` is one;
    /// row-major over the axes.
    pub density: Vec<f64>,
    pub argmax: Point,
}

/// Energy written out independently of `model::energy`: explicit `Γ⁻¹` and
/// the IAS gamma term.
fn brute_energy(a: &DMatrix<f64>, y: &DVector<f64>, gamma_inv: &DMatrix<f64>, alpha: &DVector<f64>, bt: f64, u: &[f64], theta: &[f64]) -> f64 {
    let mut res = y.clone();
    for i in 0..a.nrows() {
        for j in 0..u.len() {
            res[i] -= a[(i, j)] * u[j];
        }
    }
    let mut total = 0.5 * res.dot(&(gamma_inv * &res));
    for i in 0..u.len() {
        total += 0.5 * u[i] * u[i] / theta[i] + theta[i] / alpha[i] - bt * (theta[i] / alpha[i]).ln();
    }
    total
}

fn gamma_inverse(problem: &LinearProblem) -> Result<DMatrix<f64>> {
    let n = problem.n();
    match problem.noise() {
        NoiseCovariance::Scalar(v) => Ok(DMatrix::identity(n, n) / *v),
        NoiseCovariance::Diagonal(v) => Ok(DMatrix::from_diagonal(&v.map(|x| 1.0 / x))),
        NoiseCovariance::Dense(m) => m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("noise covariance is singular".into())),
    }
}

/// `exp(−J)` on a dense `(u, θ)` grid for `d ≤ 2`.
pub fn dense_grid_posterior(
    problem: &LinearProblem,
    prior: &GammaHyperprior,
    u_axes: &[Axis],
    theta_axes: &[Axis],
) -> Result<GridPosterior> {
    let d = problem.d();
    if d > 2 || u_axes.len() != d || theta_axes.len() != d {
        return Err(Error::InvalidInput(format!(
            "dense grids need d ≤ 2 and one axis per coordinate (d = {d})"
        )));
    }
    if theta_axes.iter().any(|a| a.lo < 0.0) {
        return Err(Error::InvalidInput("theta axes must be non-negative".into()));
    }
    let axes: Vec<Axis> = u_axes.iter().chain(theta_axes).copied().collect();
    if axes.iter().any(|a| a.points == 0 || !(a.hi > a.lo)) {
        return Err(Error::InvalidInput("empty grid axis".into()));
    }
    let cells = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.points));
    match cells {
        Some(c) if c <= MAX_GRID_CELLS => {}
        _ => return Err(Error::InvalidInput(format!("grid exceeds {MAX_GRID_CELLS} cells"))),
    }
    let cells = cells.unwrap_or(0);
    let gamma_inv = gamma_inverse(problem)?;
    let bt = prior.beta_tilde();
    let coords = |mut idx: usize| -> Vec<f64> {
        let mut out = vec![0.0; axes.len()];
        for (k, a) in axes.iter().enumerate().rev() {
            out[k] = a.at(idx % a.points);
            idx /= a.points;
        }
        out
    };
    let energies: Vec<f64> = (0..cells)
        .into_par_iter()
        .map(|idx| {
            let z = coords(idx);
            brute_energy(problem.forward(), problem.data(), &gamma_inv, prior.alpha(), bt, &z[..d], &z[d..])
        })
        .collect();
    let (best, min) = energies
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    let volume: f64 = axes.iter().map(|a| a.width()).product();
    let mut density: Vec<f64> = energies.iter().map(|e| (min - e).exp()).collect();
    let mass: f64 = density.iter().sum::<f64>() * volume;
    density.iter_mut().for_each(|p| *p /= mass);
    let z = coords(best);
    Ok(GridPosterior {
        axes,
        density,
        argmax: Point {
            u: DVector::from_column_slice(&z[..d]),
            theta: DVector::from_column_slice(&z[d..]),
        },
    })
}

/// Central-difference Hessian of a scalar function given through increments
/// `delta(dx) = f(x + dx) − f(x)`, which callers can evaluate without cancellation.
pub fn finite_diff_hessian_by<F: Fn(&DVector<f64>) -> f64>(delta: F, dim: usize, step: f64) -> DMatrix<f64> {
    let e = |i: usize, h: f64| {
        let mut v = DVector::zeros(dim);
        v[i] = h;
        v
    };
    let mut h = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        h[(i, i)] = (delta(&e(i, step)) + delta(&e(i, -step))) / (step * step);
        for j in 0..i {
            let pp = delta(&(e(i, step) + e(j, step)));
            let pm = delta(&(e(i, step) + e(j, -step)));
            let mp = delta(&(e(i, -step) + e(j, step)));
            let mm = delta(&(e(i, -step) + e(j, -step)));
            let v = (pp - pm - mp + mm) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Finite-difference Hessian of `J` at `z`, ordered `(u, θ)`. Energy
/// increments are assembled term by term so the O(1) parts of `J` cancel exactly.
pub fn finite_diff_hessian(problem: &LinearProblem, prior: &GammaHyperprior, z: &Point, step: f64) -> Result<DMatrix<f64>> {
    let d = problem.d();
    if z.theta.iter().any(|t| !(*t > 10.0 * step)) {
        return Err(Error::Domain("finite differences need theta_i > 10 step".into()));
    }
    let gamma_inv = gamma_inverse(problem)?;
    let a = problem.forward();
    let res = problem.data() - a * &z.u;
    let g_res = &gamma_inv * &res;
    let alpha = prior.alpha();
    let bt = prior.beta_tilde();
    // Increment of u²/(2θ) + θ/α − β̃ ln(θ/α), written without cancellation.
    let comp_delta = |u: f64, t: f64, du: f64, dt: f64, i: usize| {
        0.5 * (du * (2.0 * u + du) * t - u * u * dt) / (t * (t + dt)) + dt / alpha[i]
            - bt * (dt / t).ln_1p()
    };
    let delta = |dz: &DVector<f64>| {
        let du = dz.rows(0, d);
        let adu = a * du;
        // ½(r − AΔu)ᵀΓ⁻¹(r − AΔu) − ½rᵀΓ⁻¹r
        let mut acc = -g_res.dot(&adu) + 0.5 * adu.dot(&(&gamma_inv * &adu));
        for i in 0..d {
            let (du, dt) = (dz[i], dz[d + i]);
            if du != 0.0 || dt != 0.0 {
                acc += comp_delta(z.u[i], z.theta[i], du, dt, i);
            }
        }
        acc
    };
    Ok(finite_diff_hessian_by(delta, 2 * d, step))
}

/// Tabulated inverse CDF of GIG(b, r, s) in `t = ln θ`.
struct GigSampler {
    t: Vec<f64>,
    cdf: Vec<f64>,
}

impl GigSampler {
    fn new(b: f64, r: f64, s: f64) -> Self {
        let g = |t: f64| s * t - 0.5 * (b * t.exp() + r * (-t).exp());
        let disc = (s * s + b * r).sqrt();
        let et = if s >= 0.0 { (s + disc) / b } else { r / (disc - s) };
        let t0 = et.ln();
        let peak = g(t0);
        let edge = |dir: f64| {
            let mut h = 1.0;
            while g(t0 + dir * h) > peak - 40.0 && h < 1e4 {
                h *= 1.5;
            }
            t0 + dir * h
        };
        let (lo, hi) = (edge(-1.0), edge(1.0));
        let n = 400_000;
        let dt = (hi - lo) / n as f64;
        let t: Vec<f64> = (0..=n).map(|k| lo + k as f64 * dt).collect();
        let f: Vec<f64> = t.iter().map(|&x| (g(x) - peak).exp()).collect();
        let mut cdf = vec![0.0; n + 1];
        for k in 1..=n {
            cdf[k] = cdf[k - 1] + 0.5 * dt * (f[k] + f[k - 1]);
        }
        let total = cdf[n];
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { t, cdf }
    }

    fn sample(&self, u: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        (self.t[k - 1] + w * (self.t[k] - self.t[k - 1])).exp()
    }
}

fn gig_log_density(b: f64, r: f64, s: f64, theta: f64) -> Result<f64> {
    let log_z = std::f64::consts::LN_2 + log_bessel_k(s, (r * b).sqrt())? + 0.5 * s * (r / b).ln();
    Ok((s - 1.0) * theta.ln() - 0.5 * (b * theta + r / theta) - log_z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Samples dropped because a log density was not finite.
    pub rejected: usize,
}

/// Monte-Carlo estimate of `ELBO(q₁) − ELBO(q₂)` under the gamma(shape α,
/// rate β) hyperprior, averaging `ln p(y, u, θ) − ln q(u, θ)` over independent
/// draws from each `q`.
pub fn elbo_mc_difference(
    problem: &LinearProblem,
    prior: &GammaHyperprior,
    q1: &VariationalState,
    q2: &VariationalState,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    let a = mc_log_ratio(problem, prior, q1, samples, seed, 0)?;
    let b = mc_log_ratio(problem, prior, q2, samples, seed, 1)?;
    Ok(McEstimate {
        estimate: a.0 - b.0,
        std_error: (a.1 + b.1).sqrt(),
        rejected: a.2 + b.2,
    })
}

/// `(mean, variance of the mean, rejected)` of `ln p(y, z) − ln q(z)`.
fn mc_log_ratio(
    problem: &LinearProblem,
    prior: &GammaHyperprior,
    q: &VariationalState,
    samples: usize,
    seed: u64,
    stream: u64,
) -> Result<(f64, f64, usize)> {
    let d = problem.d();
    if q.d() != d || prior.d() != d {
        return Err(Error::Dimension("state, prior and problem disagree on d".into()));
    }
    let gamma_inv = gamma_inverse(problem)?;
    let chol = q
        .c
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("C is not positive definite".into()))?;
    let l = chol.l();
    let log_det_c: f64 = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let samplers: Vec<GigSampler> = (0..d).map(|i| GigSampler::new(q.b, q.r[i], q.s[i])).collect();
    let alpha = prior.alpha();
    let beta = prior.beta();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (mut sum, mut sum_sq, mut count, mut rejected) = (0.0, 0.0, 0usize, 0usize);
    for _ in 0..samples {
        let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &q.m + &l * &xi;
        let theta: Vec<f64> = samplers.iter().map(|s| s.sample(rng.random::<f64>())).collect();
        let res = problem.data() - problem.forward() * &u;
        let mut log_p = -0.5 * res.dot(&(&gamma_inv * &res));
        let mut log_q = -0.5 * xi.norm_squared() - 0.5 * log_det_c;
        for i in 0..d {
            let t = theta[i];
            log_p += -0.5 * u[i] * u[i] / t - 0.5 * t.ln() + (alpha[i] - 1.0) * t.ln() - beta * t;
            log_q += gig_log_density(q.b, q.r[i], q.s[i], t)?;
        }
        let v = log_p - log_q;
        if v.is_finite() {
            sum += v;
            sum_sq += v * v;
            count += 1;
        } else {
            rejected += 1;
        }
    }
    if count < 2 {
        return Err(Error::Domain("too few finite Monte-Carlo samples".into()));
    }
    let mean = sum / count as f64;
    let var = (sum_sq / count as f64 - mean * mean) * count as f64 / (count - 1) as f64;
    Ok((mean, var / count as f64, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::{gig_inv_mean, gig_mean, gig_var, GigParams};

    #[test]
    fn bessel_quadrature_closed_forms() {
        // K_{1/2}(x) = √(π/(2x)) e^{−x}
        for x in [1e-6, 0.3, 1.0, 7.0, 300.0] {
            let exact = 0.5 * (std::f64::consts::PI / (2.0 * x)).ln() - x;
            assert!((log_bessel_k_quad(0.5, x) - exact).abs() < 1e-11 * exact.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn gig_quadrature_spot_values() {
        let (m, v, i) = gig_moments_quad(1.0, 1.0, 0.5);
        assert!((m - 2.0).abs() < 1e-9 && (v - 3.0).abs() < 1e-9 && (i - 1.0).abs() < 1e-9);
        let p = GigParams::new(0.3, 2.5, -0.2).unwrap();
        let (m, v, i) = gig_moments_quad(0.3, 2.5, -0.2);
        assert!((m / gig_mean(&p) - 1.0).abs() < 1e-9);
        assert!((v / gig_var(&p) - 1.0).abs() < 1e-9);
        assert!((i / gig_inv_mean(&p) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scan_finds_single_maximum_of_concave_function() {
        let r = scan_report(|c| -(c - 0.3) * (c - 0.3), 0.0, 1.0, 1e-3).unwrap();
        assert_eq!(r.maxima.len(), 1);
        assert!((r.maxima[0].0 - 0.3).abs() < 1e-9);
        assert_eq!(r.global, r.maxima[0]);
    }

    #[test]
    fn manifold_diverges_at_zero() {
        let near = elbo_manifold_1d(1.0, 3.0, -0.49, 1e-12, 1.0).unwrap();
        let far = elbo_manifold_1d(1.0, 3.0, -0.49, 1e-4, 1.0).unwrap();
        assert!(near < far);
        assert!(elbo_manifold_1d(1.0, 3.0, -0.49, 0.0, 1.0).is_err());
    }

    #[test]
    fn grid_density_normalized() {
        let p = LinearProblem::new(DMatrix::identity(1, 1), DVector::from_element(1, 1.0), NoiseCovariance::Scalar(0.5)).unwrap();
        let prior = GammaHyperprior::uniform(1, 1.0, 2.0).unwrap();
        let u = [Axis { lo: -1.0, hi: 3.0, points: 200 }];
        let t = [Axis { lo: 0.0, hi: 4.0, points: 200 }];
        let g = dense_grid_posterior(&p, &prior, &u, &t).unwrap();
        let vol = u[0].width() * t[0].width();
        assert!((g.density.iter().sum::<f64>() * vol - 1.0).abs() < 1e-12);
        assert!(g.density.iter().all(|x| *x >= 0.0));
        let huge = [Axis { lo: 0.0, hi: 1.0, points: 20_000 }];
        assert!(dense_grid_posterior(&p, &prior, &huge, &huge).is_err());
    }

    #[test]
    fn fd_hessian_of_quadratic_block() {
        let p = LinearProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, -1.0]),
            DVector::from_vec(vec![0.3, 0.7]),
            NoiseCovariance::Scalar(0.2),
        )
        .unwrap();
        let prior = GammaHyperprior::uniform(2, 1.0, 2.0).unwrap();
        let z = Point::new(DVector::from_vec(vec![0.4, -0.2]), DVector::from_vec(vec![0.5, 1.5])).unwrap();
        let h = finite_diff_hessian(&p, &prior, &z, 1e-5).unwrap();
        let mut uu = p.gram().clone();
        uu[(0, 0)] += 2.0;
        uu[(1, 1)] += 1.0 / 1.5;
        assert!((h.view((0, 0), (2, 2)) - &uu).amax() < 1e-6, "{h} {uu}");
        assert!((&h - h.transpose()).amax() == 0.0);
    }

    #[test]
    fn mc_difference_of_equal_states_is_small() {
        let p = LinearProblem::new(DMatrix::identity(1, 1), DVector::from_element(1, 1.2), NoiseCovariance::Scalar(1.0)).unwrap();
        let prior = GammaHyperprior::uniform(1, 0.3, 0.5).unwrap();
        let q = VariationalState::new(
            DVector::from_element(1, 0.8),
            DMatrix::from_element(1, 1, 0.4),
            DVector::from_element(1, 1.04),
            prior.b(),
            prior.s(),
        )
        .unwrap();
        let e = elbo_mc_difference(&p, &prior, &q, &q, 20_000, 3).unwrap();
        assert!(e.estimate.abs() < 3.0 * e.std_error, "{e:?}");
        assert_eq!(e.rejected, 0);
    }
}
