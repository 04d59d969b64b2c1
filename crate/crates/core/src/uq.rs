//! Credible intervals, repeated-noise coverage studies, covariance PCA and
//! Lorenz trajectory bands.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ias;
use crate::model::{GammaHyperprior, NoiseCovariance};
use crate::problems::{dictionary_row, integrate_rk4, Meta};
use crate::special::{gig_quantile, normal_quantile};
use crate::stop::StopRule;
use crate::vias::{self, VariationalState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalSource {
    Vias,
    Laplace,
}

/// Equal-tailed per-component intervals at `level`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub level: f64,
    pub source: IntervalSource,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl IntervalSet {
    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn contains(&self, i: usize, x: f64) -> bool {
        self.lo[i] <= x && x <= self.hi[i]
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn mean_width(&self) -> f64 {
        self.widths().iter().sum::<f64>() / self.len().max(1) as f64
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    /// `index,truth,estimate,lo,hi`; the truth column is empty when unknown.
    pub fn to_csv(&self, estimate: &[f64], truth: Option<&[f64]>) -> String {
        let mut out = String::from("index,truth,estimate,lo,hi\n");
        for i in 0..self.len() {
            let t = truth.map(|t| t[i].to_string()).unwrap_or_default();
            out.push_str(&format!("{i},{t},{},{},{}\n", estimate[i], self.lo[i], self.hi[i]));
        }
        out
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("level must lie in (0, 1), got {level}")))
    }
}

/// Two-sided standard normal quantile `z` with `P(|Z| ≤ z) = level`.
pub fn two_sided_z(level: f64) -> Result<f64> {
    check_level(level)?;
    normal_quantile(0.5 + 0.5 * level)
}

fn gaussian_intervals(mean: &DVector<f64>, var: &DVector<f64>, level: f64, source: IntervalSource) -> Result<IntervalSet> {
    if mean.len() != var.len() {
        return Err(Error::Dimension(format!(
            "mean has length {}, variances {}",
            mean.len(),
            var.len()
        )));
    }
    if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("variances must be positive".into()));
    }
    let z = two_sided_z(level)?;
    let half: Vec<f64> = var.iter().map(|v| z * v.sqrt()).collect();
    Ok(IntervalSet {
        level,
        source,
        lo: mean.iter().zip(&half).map(|(m, h)| m - h).collect(),
        hi: mean.iter().zip(&half).map(|(m, h)| m + h).collect(),
    })
}

/// `m_i ± z √C_ii` from a Gaussian variational factor.
pub fn intervals_u(mean: &DVector<f64>, cov: &DMatrix<f64>, level: f64) -> Result<IntervalSet> {
    if cov.shape() != (mean.len(), mean.len()) {
        return Err(Error::Dimension(format!(
            "mean has length {}, covariance is {:?}",
            mean.len(),
            cov.shape()
        )));
    }
    gaussian_intervals(mean, &cov.diagonal(), level, IntervalSource::Vias)
}

/// Intervals for `u` from the u-block marginals of a Laplace approximation.
pub fn laplace_intervals_u(approx: &ias::LaplaceApprox, level: f64) -> Result<IntervalSet> {
    let d = approx.d();
    let var = DVector::from_fn(d, |i, _| approx.cov[(i, i)]);
    gaussian_intervals(&approx.u_mean(), &var, level, IntervalSource::Laplace)
}

/// Intervals for the running sums `v = Bu` of a Gaussian `N(m, C)`, using the
/// diagonal of `BCBᵀ` (two-dimensional prefix sums of `C`).
pub fn cumulative_intervals(mean: &DVector<f64>, cov: &DMatrix<f64>, level: f64) -> Result<(DVector<f64>, IntervalSet)> {
    let d = mean.len();
    if cov.shape() != (d, d) {
        return Err(Error::Dimension("covariance shape differs from mean".into()));
    }
    let v = crate::problems::cumulative_sum(mean);
    // var_k = var_{k-1} + 2 Σ_{j<k} C_kj + C_kk
    let mut var = DVector::zeros(d);
    let mut acc = 0.0;
    for k in 0..d {
        let row: f64 = (0..k).map(|j| cov[(k, j)]).sum();
        acc += 2.0 * row + cov[(k, k)];
        var[k] = acc.max(f64::MIN_POSITIVE);
    }
    let set = gaussian_intervals(&v, &var, level, IntervalSource::Vias)?;
    Ok((v, set))
}

/// Equal-tailed GIG quantile intervals for each `θ_i`.
pub fn intervals_theta(state: &VariationalState, level: f64) -> Result<IntervalSet> {
    check_level(level)?;
    let tail = 0.5 * (1.0 - level);
    let mut lo = Vec::with_capacity(state.d());
    let mut hi = Vec::with_capacity(state.d());
    for i in 0..state.d() {
        let p = state.gig(i)?;
        lo.push(gig_quantile(&p, tail)?);
        hi.push(gig_quantile(&p, 1.0 - tail)?);
    }
    Ok(IntervalSet {
        level,
        source: IntervalSource::Vias,
        lo,
        hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageSolver {
    Vias,
    IasLaplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    /// Generator for the fixed `A` and truth; its noise level is reused for every rep.
    pub experiment: Meta,
    pub solver: CoverageSolver,
    pub reps: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Seed for the resampled noise; independent of the generator seed.
    pub seed: u64,
    /// Scalar `(α, β)` for the solver, in that solver's convention.
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_level() -> f64 {
    0.95
}

fn default_max_iter() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub solver: CoverageSolver,
    pub level: f64,
    pub reps: usize,
    pub failed_reps: usize,
    pub converged_reps: usize,
    /// Fraction of `(rep, component)` pairs whose interval contains the truth.
    pub coverage_rate: f64,
    pub mean_width: f64,
    /// Per successful rep: `(rep, covered count, mean width)`.
    pub per_rep: Vec<(usize, usize, f64)>,
}

struct RepOutcome {
    covered: usize,
    mean_width: f64,
    converged: bool,
}

/// Fixes `A` and the truth from the generator, resamples the noise `reps`
/// times, solves each replicate and counts componentwise containment. Rep `k`
/// draws from ChaCha stream `k` of `seed`, so results do not depend on the
/// thread count.
pub fn coverage_study(config: &CoverageConfig) -> Result<CoverageReport> {
    if config.reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    check_level(config.level)?;
    let bundle = config.experiment.regenerate()?;
    let base = bundle.problem;
    let truth = bundle.truth_u;
    let d = base.d();
    let prior = GammaHyperprior::uniform(d, config.alpha, config.beta)?;
    let clean = base.forward() * &truth;
    let noise_std = match base.noise() {
        NoiseCovariance::Scalar(v) => v.sqrt(),
        _ => {
            return Err(Error::InvalidInput(
                "coverage studies need a scalar noise covariance".into(),
            ))
        }
    };

    let run = |rep: usize| -> Result<RepOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(rep as u64);
        let noise = DVector::from_fn(base.n(), |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * noise_std
        });
        let problem = base.with_data(&clean + noise)?;
        let (set, converged) = match config.solver {
            CoverageSolver::Vias => {
                let (m0, c0) = vias::default_init(d, 1.0);
                let stop = StopRule::vias_default().with_max_iter(config.max_iter);
                let res = vias::solve(&problem, &prior, &m0, &c0, &stop, vias::Method::Auto)?;
                (intervals_u(&res.state.m, &res.state.c, config.level)?, res.converged())
            }
            CoverageSolver::IasLaplace => {
                let stop = StopRule::ias_default().with_max_iter(config.max_iter);
                let res = ias::solve(&problem, &prior, &ias::default_theta0(d), &stop, ias::Method::Auto)?;
                let approx = ias::laplace(&problem, &prior, &res.point)?;
                (laplace_intervals_u(&approx, config.level)?, res.converged())
            }
        };
        let covered = (0..d).filter(|&i| set.contains(i, truth[i])).count();
        Ok(RepOutcome {
            covered,
            mean_width: set.mean_width(),
            converged,
        })
    };

    let outcomes: Vec<Result<RepOutcome>> = (0..config.reps).into_par_iter().map(run).collect();
    let mut per_rep = Vec::new();
    let mut failed = 0;
    let mut converged_reps = 0;
    let mut first_error = None;
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                converged_reps += o.converged as usize;
                per_rep.push((rep, o.covered, o.mean_width));
            }
            Err(e) => {
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if failed * 10 > config.reps {
        return Err(Error::Convergence(format!(
            "{failed} of {} replicates failed; first error: {}",
            config.reps,
            first_error.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    let ok = per_rep.len();
    let covered: usize = per_rep.iter().map(|r| r.1).sum();
    let width: f64 = per_rep.iter().map(|r| r.2).sum();
    Ok(CoverageReport {
        solver: config.solver,
        level: config.level,
        reps: config.reps,
        failed_reps: failed,
        converged_reps,
        coverage_rate: covered as f64 / (ok * d) as f64,
        mean_width: width / ok as f64,
        per_rep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    /// All eigenvalues, descending, with roundoff negatives clamped to zero.
    pub eigenvalues: Vec<f64>,
    /// `λ_i / Σλ`.
    pub fractions: Vec<f64>,
    /// Top-`k` unit eigenvectors; each has its largest-magnitude entry positive.
    pub components: Vec<Vec<f64>>,
}

impl PcaReport {
    /// `component,eigenvalue,fraction` rows, then one `vector_<j>` row per
    /// returned component.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,eigenvalue,fraction\n");
        for (i, (l, f)) in self.eigenvalues.iter().zip(&self.fractions).enumerate() {
            out.push_str(&format!("{i},{l},{f}\n"));
        }
        for (j, v) in self.components.iter().enumerate() {
            out.push_str(&format!("vector_{j}"));
            for x in v {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn covariance_pca(c: &DMatrix<f64>, k: usize) -> Result<PcaReport> {
    let d = c.nrows();
    if c.ncols() != d {
        return Err(Error::Dimension(format!("covariance is {:?}", c.shape())));
    }
    if k > d {
        return Err(Error::InvalidInput(format!("k = {k} exceeds d = {d}")));
    }
    let scale = c.amax().max(f64::MIN_POSITIVE);
    if (c - c.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidInput("covariance is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(c.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let fractions = eigenvalues
        .iter()
        .map(|l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    let components = order[..k]
        .iter()
        .map(|&i| {
            let v = eig.eigenvectors.column(i);
            let imax = v.iamax();
            let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
            v.iter().map(|x| sign * x).collect()
        })
        .collect();
    Ok(PcaReport {
        eigenvalues,
        fractions,
        components,
    })
}

/// How interval endpoints are combined into trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandConvention {
    /// Two runs: every active coefficient at its lower endpoint, then every one at its upper.
    Paired,
    /// Every corner of the box spanned by the active coefficients' intervals.
    #[default]
    Corners,
}

/// Most active coefficients [`BandConvention::Corners`] will enumerate.
pub const MAX_CORNER_COEFFICIENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub x0: [f64; 3],
    pub dt: f64,
    pub steps: usize,
    pub max_degree: usize,
    #[serde(default)]
    pub convention: BandConvention,
    /// Coefficients whose interval midpoint has magnitude at most this are
    /// treated as absent and set to zero.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBand {
    pub times: Vec<f64>,
    /// Pointwise minimum and maximum of each state component.
    pub lo: Vec<[f64; 3]>,
    pub hi: Vec<[f64; 3]>,
    /// True when some run blew up; the band then ends at the last common step.
    pub truncated: bool,
    pub convention: BandConvention,
    pub threshold: f64,
    /// `(equation, dictionary column)` of the coefficients varied between runs.
    pub active: Vec<(usize, usize)>,
    pub runs: usize,
}

impl TrajectoryBand {
    pub fn contains(&self, k: usize, state: &[f64; 3]) -> bool {
        (0..3).all(|i| self.lo[k][i] <= state[i] && state[i] <= self.hi[k][i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x_lo,x_hi,y_lo,y_hi,z_lo,z_hi\n");
        for k in 0..self.times.len() {
            let (l, h) = (self.lo[k], self.hi[k]);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.times[k], l[0], h[0], l[1], h[1], l[2], h[2]
            ));
        }
        out
    }
}

/// Trajectory of the dictionary dynamics `ẋ_i = Σ_j Φ_i[j] ψ_j(x)`.
pub fn dictionary_trajectory(phi: [&[f64]; 3], config: &BandConfig) -> (Vec<[f64; 3]>, bool) {
    let exps = crate::problems::dictionary_exponents(config.max_degree);
    let field = |s: &[f64; 3]| {
        let row = dictionary_row(s, &exps);
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = row.iter().zip(phi[i]).map(|(a, b)| a * b).sum();
        }
        out
    };
    integrate_rk4(&field, config.x0, config.dt, config.steps)
}

/// Integrates the dictionary dynamics at interval-endpoint coefficients and
/// returns the pointwise envelope. Coefficients with `|midpoint| ≤ threshold`
/// are set to zero; the remaining ones with nonzero width are varied over
/// their endpoints according to the convention.
pub fn trajectory_band(phi_intervals: [&IntervalSet; 3], config: &BandConfig) -> Result<TrajectoryBand> {
    if !(config.dt > 0.0) {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    let d = crate::problems::dictionary_exponents(config.max_degree).len();
    if phi_intervals.iter().any(|s| s.len() != d) {
        return Err(Error::Dimension(format!("coefficient intervals must have length {d}")));
    }
    let mut base: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut active = Vec::new();
    for (eq, set) in phi_intervals.iter().enumerate() {
        let mid = set.midpoints();
        let mut row = vec![0.0; d];
        for j in 0..d {
            if mid[j].abs() > config.threshold {
                row[j] = mid[j];
                if set.hi[j] > set.lo[j] {
                    active.push((eq, j));
                }
            }
        }
        base.push(row);
    }
    let masks: Vec<u64> = match config.convention {
        BandConvention::Paired => vec![0, u64::MAX],
        BandConvention::Corners => {
            if active.len() > MAX_CORNER_COEFFICIENTS {
                return Err(Error::InvalidInput(format!(
                    "{} active coefficients exceed the corner limit of {MAX_CORNER_COEFFICIENTS}",
                    active.len()
                )));
            }
            (0..1u64 << active.len()).collect()
        }
    };
    let runs: Vec<(Vec<[f64; 3]>, bool)> = masks
        .par_iter()
        .map(|&mask| {
            let mut phi = base.clone();
            for (bit, &(eq, j)) in active.iter().enumerate() {
                let upper = (mask >> bit.min(63)) & 1 == 1;
                let set = phi_intervals[eq];
                phi[eq][j] = if upper { set.hi[j] } else { set.lo[j] };
            }
            dictionary_trajectory([&phi[0], &phi[1], &phi[2]], config)
        })
        .collect();
    let len = runs.iter().map(|r| r.0.len()).min().unwrap_or(0);
    let truncated = runs.iter().any(|r| !r.1);
    let mut lo = vec![[f64::INFINITY; 3]; len];
    let mut hi = vec![[f64::NEG_INFINITY; 3]; len];
    for (traj, _) in &runs {
        for k in 0..len {
            for i in 0..3 {
                lo[k][i] = lo[k][i].min(traj[k][i]);
                hi[k][i] = hi[k][i].max(traj[k][i]);
            }
        }
    }
    Ok(TrajectoryBand {
        times: (0..len).map(|k| k as f64 * config.dt).collect(),
        lo,
        hi,
        truncated,
        convention: config.convention,
        threshold: config.threshold,
        active,
        runs: masks.len(),
    })
}
