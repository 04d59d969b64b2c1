//! Command implementations. Each command runs from an [`Invocation`], which
//! the manifest stores with the fully resolved config so the run can be
//! replayed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sparsevi::model::{GammaHyperprior, LinearProblem, ProblemDocument};
use sparsevi::problems::{
    self, BundleDocument, DeconvolutionConfig, FixedSparseConfig, HierarchicalConfig, LorenzConfig,
};
use sparsevi::select::{self, InitPolicy, SelectionGrid};
use sparsevi::stop::StopRule;
use sparsevi::uq::{self, CoverageConfig, IntervalSet};
use sparsevi::vias::ViasDocument;
use sparsevi::{ias, oracle, vias};

use crate::config::{self, ConfigMap};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Hierarchical,
    FixedSparse,
    Deconvolution,
    Lorenz63,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Ias,
    Vias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Generate {
        experiment: ExperimentKind,
        config: ConfigMap,
    },
    Solve {
        method: SolverKind,
        problem: PathBuf,
        config: ConfigMap,
    },
    Select {
        problem: PathBuf,
        refit: bool,
        config: ConfigMap,
    },
    Coverage {
        config: ConfigMap,
    },
    Pca {
        result: PathBuf,
        config: ConfigMap,
    },
    Landscape {
        config: ConfigMap,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Replayable command with its fully resolved config.
    pub invocation: Invocation,
    pub seed: Option<u64>,
    pub threads: usize,
    pub versions: Versions,
    pub wall_seconds: f64,
    pub convergence: Value,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub sparsevi: String,
    pub sparsevi_cli: String,
}

impl Versions {
    fn current() -> Self {
        Self {
            sparsevi: sparsevi::VERSION.to_string(),
            sparsevi_cli: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// What a command produced, before the manifest is written.
struct Outcome {
    resolved: Invocation,
    seed: Option<u64>,
    convergence: Value,
    outputs: Vec<String>,
}

/// Runs the command, writes its outputs and `manifest.json` into `out`.
pub fn run(invocation: &Invocation, out: &Path, threads: usize) -> Result<RunManifest, CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::config(format!("cannot create output directory {}: {e}", out.display())))?;
    let start = Instant::now();
    let outcome = match invocation {
        Invocation::Generate { experiment, config } => generate(*experiment, config, out)?,
        Invocation::Solve { method, problem, config } => solve(*method, problem, config, out)?,
        Invocation::Select { problem, refit, config } => select(problem, *refit, config, out)?,
        Invocation::Coverage { config } => coverage(config, out)?,
        Invocation::Pca { result, config } => pca(result, config, out)?,
        Invocation::Landscape { config } => landscape(config, out)?,
    };
    let manifest = RunManifest {
        invocation: outcome.resolved,
        seed: outcome.seed,
        threads,
        versions: Versions::current(),
        wall_seconds: start.elapsed().as_secs_f64(),
        convergence: outcome.convergence,
        outputs: outcome.outputs,
    };
    write(out, "manifest.json", &json_string(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))
}

fn write(out: &Path, name: &str, contents: &str) -> Result<String, CliError> {
    fs::write(out.join(name), contents)?;
    Ok(name.to_string())
}

fn json_string<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn read_json(path: &Path, what: &str) -> Result<Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{what} {}: {e}", path.display())))
}

/// A problem file: either a bare problem document or a generated bundle with truth.
struct ProblemInput {
    problem: LinearProblem,
    prior: Option<(f64, f64)>,
    truth: Option<DVector<f64>>,
}

fn read_problem(path: &Path) -> Result<ProblemInput, CliError> {
    let value = read_json(path, "problem")?;
    let bad = |e: serde_json::Error| CliError::config(format!("problem {}: {e}", path.display()));
    let (doc, truth) = if value.get("truth_u").is_some() {
        let b: BundleDocument = serde_json::from_value(value).map_err(bad)?;
        (b.problem, Some(DVector::from_vec(b.truth_u)))
    } else {
        (serde_json::from_value::<ProblemDocument>(value).map_err(bad)?, None)
    };
    let prior = match (&doc.alpha, doc.beta) {
        (Some(a), Some(b)) if a.len() == 1 => Some((a[0], b)),
        _ => None,
    };
    let problem = doc.to_problem()?;
    if truth.as_ref().is_some_and(|t| t.len() != problem.d()) {
        return Err(CliError::config("truth_u length differs from d"));
    }
    Ok(ProblemInput { problem, prior, truth })
}

// ---- generate ----

#[derive(Debug, Serialize, Deserialize)]
struct WithSeed<C> {
    seed: u64,
    #[serde(flatten)]
    params: C,
}

fn generate(kind: ExperimentKind, config: &ConfigMap, out: &Path) -> Result<Outcome, CliError> {
    let (seed, resolved, bundles) = match kind {
        ExperimentKind::Hierarchical => {
            let c: WithSeed<HierarchicalConfig> = config::parse(config)?;
            (c.seed, config::to_map(&c), vec![problems::gen_hierarchical(c.seed, &c.params)?])
        }
        ExperimentKind::FixedSparse => {
            let c: WithSeed<FixedSparseConfig> = config::parse(config)?;
            (c.seed, config::to_map(&c), vec![problems::gen_fixed_sparse(c.seed, &c.params)?])
        }
        ExperimentKind::Deconvolution => {
            let c: WithSeed<DeconvolutionConfig> = config::parse(config)?;
            (c.seed, config::to_map(&c), vec![problems::gen_deconvolution(c.seed, &c.params)?])
        }
        ExperimentKind::Lorenz63 => {
            let c: WithSeed<LorenzConfig> = config::parse(config)?;
            (c.seed, config::to_map(&c), problems::gen_lorenz_problems(c.seed, &c.params)?)
        }
    };
    let mut outputs = Vec::new();
    let suffixes: Vec<&str> = if bundles.len() == 3 { vec!["_x", "_y", "_z"] } else { vec![""] };
    for (bundle, suffix) in bundles.iter().zip(suffixes) {
        outputs.push(write(out, &format!("problem{suffix}.json"), &json_string(&bundle.to_document())?)?);
        outputs.push(write(out, &format!("truth{suffix}.csv"), &truth_csv(&bundle.truth_u, bundle.truth_theta.as_ref()))?);
    }
    let shape = bundles.first().map(|b| (b.problem.n(), b.problem.d()));
    Ok(Outcome {
        resolved: Invocation::Generate { experiment: kind, config: resolved },
        seed: Some(seed),
        convergence: json!({ "n": shape.map(|s| s.0), "d": shape.map(|s| s.1), "problems": bundles.len() }),
        outputs,
    })
}

fn truth_csv(u: &DVector<f64>, theta: Option<&DVector<f64>>) -> String {
    let mut out = String::from(if theta.is_some() { "index,u,theta\n" } else { "index,u\n" });
    for i in 0..u.len() {
        match theta {
            Some(t) => out.push_str(&format!("{i},{},{}\n", u[i], t[i])),
            None => out.push_str(&format!("{i},{}\n", u[i])),
        }
    }
    out
}

// ---- solve ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveConfig {
    alpha: f64,
    beta: f64,
    /// Iteration cap for the default stopping rule.
    #[serde(default = "default_max_iter")]
    max_iter: usize,
    /// When set, runs exactly this many iterations instead.
    #[serde(default)]
    fixed_iterations: Option<usize>,
    #[serde(default)]
    method: String,
    /// `θ⁰` entries for IAS, `C⁰ = init_scale · I` for VIAS.
    #[serde(default = "one")]
    init_scale: f64,
}

fn default_max_iter() -> usize {
    1000
}

fn one() -> f64 {
    1.0
}

const LEVEL: f64 = 0.95;

fn solve(method: SolverKind, path: &Path, config: &ConfigMap, out: &Path) -> Result<Outcome, CliError> {
    let input = read_problem(path)?;
    let mut config = config.clone();
    if let Some((a, b)) = input.prior {
        config.entry("alpha").or_insert(json!(a));
        config.entry("beta").or_insert(json!(b));
    }
    let mut c: SolveConfig = config::parse(&config)?;
    if c.method.is_empty() {
        c.method = "auto".into();
    }
    if !(c.init_scale > 0.0) {
        return Err(CliError::config("init_scale must be positive"));
    }
    let d = input.problem.d();
    let prior = GammaHyperprior::uniform(d, c.alpha, c.beta)?;
    let method_value = json!(c.method);
    let (estimate, set, trace, result_json, convergence) = match method {
        SolverKind::Ias => {
            let m: ias::Method = serde_json::from_value(method_value)
                .map_err(|_| CliError::config(format!("unknown IAS method {:?}", c.method)))?;
            let stop = stop_rule(&c, StopRule::ias_default());
            let theta0 = DVector::from_element(d, c.init_scale);
            let res = ias::solve(&input.problem, &prior, &theta0, &stop, m)?;
            let approx = ias::laplace(&input.problem, &prior, &res.point)?;
            let set = uq::laplace_intervals_u(&approx, LEVEL)?;
            let mut trace = String::from("iteration,J\n");
            for r in &res.energy_trace {
                trace.push_str(&format!("{},{}\n", r.iteration, r.total));
            }
            let conv = json!({ "converged": res.converged(), "iterations": res.iterations, "stop_reason": res.reason });
            (res.point.u.clone(), set, trace, json_string(&res.to_document())?, conv)
        }
        SolverKind::Vias => {
            let m: vias::Method = serde_json::from_value(method_value)
                .map_err(|_| CliError::config(format!("unknown VIAS method {:?}", c.method)))?;
            let stop = stop_rule(&c, StopRule::vias_default());
            let (m0, c0) = vias::default_init(d, c.init_scale);
            let res = vias::solve(&input.problem, &prior, &m0, &c0, &stop, m)?;
            let set = uq::intervals_u(&res.state.m, &res.state.c, LEVEL)?;
            let trace = elbo_trace_csv(&res);
            let conv = json!({
                "converged": res.converged(),
                "iterations": res.iterations,
                "stop_reason": res.reason,
                "final_elbo": res.final_elbo(),
            });
            (res.state.m.clone(), set, trace, json_string(&res.to_document())?, conv)
        }
    };
    let outputs = vec![
        write(out, "result.json", &result_json)?,
        write(out, "reconstruction.csv", &reconstruction_csv(&estimate, &set, input.truth.as_ref()))?,
        write(out, "trace.csv", &trace)?,
    ];
    Ok(Outcome {
        resolved: Invocation::Solve {
            method,
            problem: path.to_path_buf(),
            config: config::to_map(&c),
        },
        seed: None,
        convergence,
        outputs,
    })
}

fn stop_rule(c: &SolveConfig, default: StopRule) -> StopRule {
    match c.fixed_iterations {
        Some(k) => StopRule::fixed(k),
        None => default.with_max_iter(c.max_iter),
    }
}

fn elbo_trace_csv(res: &vias::ViasResult) -> String {
    let mut trace = String::from("iteration,elbo\n");
    for r in &res.elbo_trace {
        trace.push_str(&format!("{},{}\n", r.iteration, r.elbo));
    }
    trace
}

/// `index,truth,estimate,std,lo95,hi95`; `std` is the half-width over the normal quantile.
fn reconstruction_csv(estimate: &DVector<f64>, set: &IntervalSet, truth: Option<&DVector<f64>>) -> String {
    let z = uq::two_sided_z(set.level).unwrap_or(f64::NAN);
    let mut out = String::from("index,truth,estimate,std,lo95,hi95\n");
    for i in 0..estimate.len() {
        let t = truth.map(|t| t[i].to_string()).unwrap_or_default();
        let std = (set.hi[i] - set.lo[i]) / (2.0 * z);
        out.push_str(&format!("{i},{t},{},{std},{},{}\n", estimate[i], set.lo[i], set.hi[i]));
    }
    out
}

// ---- select ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelectConfig {
    alpha_values: Vec<f64>,
    beta_values: Vec<f64>,
    iters_per_cell: usize,
    cov_scale: f64,
    /// Iteration cap for the `--refit` run.
    refit_max_iter: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        let g = SelectionGrid::default();
        Self {
            alpha_values: g.alpha_values,
            beta_values: g.beta_values,
            iters_per_cell: g.iters_per_cell,
            cov_scale: 1.0,
            refit_max_iter: default_max_iter(),
        }
    }
}

fn select(path: &Path, refit: bool, config: &ConfigMap, out: &Path) -> Result<Outcome, CliError> {
    let input = read_problem(path)?;
    let c: SelectConfig = config::parse(config)?;
    let grid = SelectionGrid::new(c.alpha_values.clone(), c.beta_values.clone(), c.iters_per_cell)?;
    let init = InitPolicy { cov_scale: c.cov_scale };
    let res = select::grid_search(&input.problem, &grid, init).map_err(CliError::runtime)?;
    let mut outputs = vec![
        write(out, "grid.csv", &res.to_csv())?,
        write(out, "selection.json", &json_string(&res)?)?,
    ];
    let mut convergence = json!({
        "best": res.best,
        "failed_cells": res.table.iter().filter(|c| c.elbo.is_none()).count(),
        "converged_cells": res.table.iter().filter(|c| c.converged).count(),
    });
    if refit {
        let d = input.problem.d();
        let prior = GammaHyperprior::uniform(d, res.best.alpha, res.best.beta)?;
        let (m0, c0) = vias::default_init(d, c.cov_scale);
        let stop = StopRule::vias_default().with_max_iter(c.refit_max_iter);
        let fit = vias::solve(&input.problem, &prior, &m0, &c0, &stop, vias::Method::Auto)?;
        let set = uq::intervals_u(&fit.state.m, &fit.state.c, LEVEL)?;
        outputs.push(write(out, "refit_result.json", &json_string(&fit.to_document())?)?);
        outputs.push(write(out, "refit_reconstruction.csv", &reconstruction_csv(&fit.state.m, &set, input.truth.as_ref()))?);
        outputs.push(write(out, "refit_trace.csv", &elbo_trace_csv(&fit))?);
        convergence["refit"] = json!({
            "converged": fit.converged(),
            "iterations": fit.iterations,
            "final_elbo": fit.final_elbo(),
        });
    }
    Ok(Outcome {
        resolved: Invocation::Select {
            problem: path.to_path_buf(),
            refit,
            config: config::to_map(&c),
        },
        seed: None,
        convergence,
        outputs,
    })
}

// ---- coverage ----

fn coverage(config: &ConfigMap, out: &Path) -> Result<Outcome, CliError> {
    let c: CoverageConfig = config::parse(config)?;
    // Surface generator parameter errors before the replicate loop.
    c.experiment.regenerate()?;
    let report = uq::coverage_study(&c).map_err(CliError::runtime)?;
    let mut csv = String::from("rep,covered,mean_width\n");
    for (rep, covered, width) in &report.per_rep {
        csv.push_str(&format!("{rep},{covered},{width}\n"));
    }
    let outputs = vec![
        write(out, "coverage.json", &json_string(&report)?)?,
        write(out, "coverage.csv", &csv)?,
    ];
    Ok(Outcome {
        resolved: Invocation::Coverage { config: config::to_map(&c) },
        seed: Some(c.seed),
        convergence: json!({
            "coverage_rate": report.coverage_rate,
            "failed_reps": report.failed_reps,
            "converged_reps": report.converged_reps,
        }),
        outputs,
    })
}

// ---- pca ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PcaConfig {
    k: usize,
}

fn pca(path: &Path, config: &ConfigMap, out: &Path) -> Result<Outcome, CliError> {
    let c: PcaConfig = config::parse(config)?;
    let doc: ViasDocument = serde_json::from_value(read_json(path, "result")?)
        .map_err(|e| CliError::config(format!("result {}: {e}", path.display())))?;
    let d = doc.m.len();
    if doc.c.len() != d * d {
        return Err(CliError::config(format!("result {}: C is not {d}x{d}", path.display())));
    }
    let cov = DMatrix::from_row_slice(d, d, &doc.c);
    let report = uq::covariance_pca(&cov, c.k)?;
    let outputs = vec![
        write(out, "pca.csv", &report.to_csv())?,
        write(out, "pca.json", &json_string(&report)?)?,
    ];
    Ok(Outcome {
        resolved: Invocation::Pca {
            result: path.to_path_buf(),
            config: config::to_map(&c),
        },
        seed: None,
        convergence: json!({ "top_fraction": report.fractions.first() }),
        outputs,
    })
}

// ---- landscape ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandscapeConfig {
    ata: f64,
    ya: f64,
    s: f64,
    #[serde(default = "one")]
    b: f64,
    #[serde(default)]
    lo: f64,
    #[serde(default = "one")]
    hi: f64,
    #[serde(default = "default_mesh")]
    mesh: f64,
}

fn default_mesh() -> f64 {
    1e-5
}

fn landscape(config: &ConfigMap, out: &Path) -> Result<Outcome, CliError> {
    let c: LandscapeConfig = config::parse(config)?;
    if !(c.b > 0.0 && c.lo >= 0.0 && c.hi > c.lo && c.mesh > 0.0) {
        return Err(CliError::config("landscape needs b > 0, 0 ≤ lo < hi and mesh > 0"));
    }
    let points = (c.hi - c.lo) / c.mesh;
    if points > 1e9 {
        return Err(CliError::config(format!("scan would take {points:.3e} points")));
    }
    let (report, values) = oracle::landscape_scan(c.ata, c.ya, c.s, c.b, c.lo, c.hi, c.mesh)?;
    let mut csv = String::with_capacity(values.len() * 40);
    csv.push_str("c,value\n");
    for (x, v) in &values {
        csv.push_str(&format!("{x},{v}\n"));
    }
    let outputs = vec![
        write(out, "landscape.csv", &csv)?,
        write(out, "landscape.json", &json_string(&report)?)?,
    ];
    Ok(Outcome {
        resolved: Invocation::Landscape { config: config::to_map(&c) },
        seed: None,
        convergence: json!({ "maxima": report.maxima.len(), "global": report.global }),
        outputs,
    })
}
