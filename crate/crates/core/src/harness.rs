//! Experiment orchestration: seeded multi-run comparisons, telemetry rows,
//! summary statistics, rate fits, sparsity tables and CSV/JSON/SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble, build_mesh, l2_error, solve_state, SampleXi};
use crate::hilbert::{wdot, wnorm, NodalField, Weights};
use crate::linsolve::CgConfig;
use crate::optimizer::{
    derive_convex_params, derive_strongly_convex_params, estimate_lipschitz, run_admm, run_baseline, AdmmParams,
    BatchRule, BatchSchedule, Method, Observation, Regime, StepsizePolicy,
};
use crate::oracle::{
    derive_seed, empirical_objective_split, evaluation_samples, label_hash, reference_optimum, EllipticInstance,
    QuadraticInstance, ReferenceOptimum, StochasticOracle,
};

/// Nonzero threshold used for sparsity telemetry.
pub const SPARSITY_TOL: f64 = 1e-12;

pub const CSV_HEADER: &str = "k,sfo_calls,wall_seconds,objective,feasibility,sparsity,method,run_seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Elliptic,
    Quadratic,
}

/// How `eta` is chosen in the convex regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexEtaRule {
    /// `min(mu rho / (1 - mu) + 1.01 L, rho)`
    PaperMin,
    /// `mu rho / (1 - mu) + 1.01 L`
    Theory,
}

/// Synthetic least-squares instance parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticSpec {
    pub n: usize,
    pub m: usize,
    pub instance_seed: u64,
    pub sigma: f64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        QuadraticSpec { n: 50, m: 100, instance_seed: 2024, sigma: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSteps {
    /// Overrides the `1/L` constant step of SPG.
    pub spg_eta: Option<f64>,
    pub ssg_c: f64,
    pub adasg_gamma: f64,
    pub adasg_eps: f64,
}

impl Default for BaselineSteps {
    fn default() -> Self {
        BaselineSteps { spg_eta: None, ssg_c: 1.0, adasg_gamma: 1.0, adasg_eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub regime: Regime,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub mesh_h: f64,
    #[serde(alias = "K")]
    pub iterations: usize,
    pub runs: usize,
    pub eval_samples: usize,
    /// Telemetry row interval; the final iterate is always recorded.
    pub eval_every: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub batch: BatchSchedule,
    pub u_min: f64,
    pub u_max: f64,
    pub convex_eta: ConvexEtaRule,
    pub lipschitz_calls: usize,
    pub steps: BaselineSteps,
    pub quadratic: QuadraticSpec,
    /// Inclusive iteration window of the rate fit; defaults to `[K/16, K]`.
    pub fit_range: Option<[usize; 2]>,
    pub sparsity_betas: Vec<f64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: ProblemKind::Elliptic,
            regime: Regime::StronglyConvex,
            alpha: 1e-5,
            beta: 1e-5,
            mu: 0.5,
            mesh_h: 1.0 / 32.0,
            iterations: 50,
            runs: 5,
            eval_samples: 200,
            eval_every: 1,
            seed: 0,
            methods: Method::ALL.to_vec(),
            batch: BatchSchedule::paper(),
            u_min: -6.0,
            u_max: 6.0,
            convex_eta: ConvexEtaRule::PaperMin,
            lipschitz_calls: 1000,
            steps: BaselineSteps::default(),
            quadratic: QuadraticSpec::default(),
            fit_range: None,
            sparsity_betas: vec![0.0, 2e-3, 5e-3, 8e-3, 1e-2, 2e-2, 3e-2],
            out_dir: None,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }

    /// 50 runs and `10^4` evaluation samples.
    pub fn paper_scale(mut self) -> Self {
        self.runs = 50;
        self.eval_samples = 10_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(cfg_err("iterations must be at least 1"));
        }
        if self.runs == 0 {
            return Err(cfg_err("runs must be at least 1"));
        }
        if self.eval_samples == 0 {
            return Err(cfg_err("eval_samples must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(cfg_err("eval_every must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(cfg_err("at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(cfg_err(format!("method '{m}' listed twice")));
            }
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(cfg_err(format!("mu = {} must lie in (0, 1)", self.mu)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(cfg_err("alpha and beta must be finite and nonnegative"));
        }
        if self.regime == Regime::StronglyConvex && self.alpha <= 0.0 {
            return Err(cfg_err("the strongly convex regime needs alpha > 0"));
        }
        if self.regime == Regime::Convex && self.methods.contains(&Method::Admm) && self.beta <= 0.0 {
            return Err(cfg_err("the convex regime sets rho = beta and needs beta > 0"));
        }
        if !(self.u_min <= 0.0 && 0.0 <= self.u_max) {
            return Err(cfg_err("the box [u_min, u_max] must contain the zero initial point"));
        }
        if self.problem == ProblemKind::Elliptic {
            let cells = 1.0 / self.mesh_h;
            if !(cells >= 2.0 && (cells - cells.round()).abs() < 1e-9) {
                return Err(cfg_err(format!("mesh_h = {} must be 1/N with N >= 2", self.mesh_h)));
            }
        } else if self.quadratic.n == 0 || self.quadratic.m == 0 || !(self.quadratic.sigma >= 0.0) {
            return Err(cfg_err("quadratic instance needs n, m >= 1 and sigma >= 0"));
        }
        if self.lipschitz_calls == 0 {
            return Err(cfg_err("lipschitz_calls must be at least 1"));
        }
        if let Some([lo, hi]) = self.fit_range {
            if lo == 0 || lo >= hi || hi > self.iterations {
                return Err(cfg_err(format!("fit_range [{lo}, {hi}] must satisfy 1 <= lo < hi <= iterations")));
            }
        }
        if self.steps.ssg_c <= 0.0 || self.steps.adasg_gamma <= 0.0 || self.steps.adasg_eps < 0.0 {
            return Err(cfg_err("baseline step constants must be positive"));
        }
        if matches!(self.steps.spg_eta, Some(e) if !(e > 0.0)) {
            return Err(cfg_err("spg_eta must be positive"));
        }
        self.batch.validate()
    }

    pub fn fit_window(&self) -> (usize, usize) {
        match self.fit_range {
            Some([lo, hi]) => (lo, hi),
            None => ((self.iterations / 16).max(1), self.iterations),
        }
    }

    pub fn run_seed(&self, method: Method, run: usize) -> u64 {
        derive_seed(&[self.seed, label_hash(method.name()), run as u64])
    }
}

/// Problem instance built from a config.
#[derive(Clone, Debug)]
pub enum Problem {
    Elliptic(EllipticInstance),
    Quadratic(QuadraticInstance),
}

impl Problem {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.problem {
            ProblemKind::Elliptic => {
                let mesh = Arc::new(build_mesh(cfg.mesh_h)?);
                let y_d = crate::oracle::checkerboard_target(&mesh);
                Ok(Problem::Elliptic(EllipticInstance::new(mesh, cfg.alpha, cfg.beta, y_d, cfg.u_min, cfg.u_max)?))
            }
            ProblemKind::Quadratic => {
                let q = &cfg.quadratic;
                let base = QuadraticInstance::random(q.n, q.m, q.instance_seed, cfg.alpha, cfg.beta, q.sigma, 1.0)?;
                Ok(Problem::Quadratic(QuadraticInstance::new(
                    base.matrix().clone(),
                    base.rhs().clone(),
                    cfg.alpha,
                    cfg.beta,
                    cfg.u_min,
                    cfg.u_max,
                    q.sigma,
                )?))
            }
        }
    }

    /// Exact constant for the quadratic problem, sampled gradient norm otherwise.
    pub fn lipschitz(&self, cfg: &ExperimentConfig) -> Result<f64> {
        match self {
            Problem::Quadratic(q) => Ok(q.lipschitz()),
            Problem::Elliptic(e) => estimate_lipschitz(e, &NodalField::zeros(e.dim()), cfg.lipschitz_calls, cfg.seed),
        }
    }
}

/// One telemetry row; also the CSV schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub k: usize,
    pub sfo_calls: usize,
    pub wall_seconds: f64,
    pub objective: f64,
    pub feasibility: f64,
    pub sparsity: f64,
    pub method: Method,
    pub run_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub run: usize,
    pub run_seed: u64,
    pub rows: Vec<RunRow>,
    /// Error message when the run stopped early.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn final_row(&self) -> Option<&RunRow> {
        self.rows.last()
    }
}

/// `sum_{|u_i| > tol} w_i / sum_i w_i`
pub fn sparsity_fraction(u: &NodalField, w: &Weights, tol: f64) -> Result<f64> {
    if !(tol >= 0.0) {
        return Err(cfg_err(format!("sparsity tolerance {tol} must be nonnegative")));
    }
    if u.len() != w.len() {
        return Err(crate::error::usage("sparsity_fraction: length mismatch"));
    }
    let nz = u.iter().zip(w.as_slice()).fold(0.0, |acc, (x, wi)| if x.abs() > tol { acc + wi } else { acc });
    Ok(nz / w.total())
}

struct Setup {
    admm: Option<AdmmParams>,
    spg: StepsizePolicy,
    ssg: StepsizePolicy,
    adasg: StepsizePolicy,
}

fn setup(cfg: &ExperimentConfig, problem: &Problem) -> Result<Setup> {
    let needs_l = cfg.methods.contains(&Method::Spg) && cfg.steps.spg_eta.is_none()
        || cfg.methods.contains(&Method::Admm) && cfg.regime == Regime::Convex;
    let l_hat = if needs_l { Some(problem.lipschitz(cfg)?) } else { None };
    if let Some(l) = l_hat {
        info!("Lipschitz estimate {l:.6e}");
    }
    let admm = if cfg.methods.contains(&Method::Admm) {
        Some(match cfg.regime {
            Regime::StronglyConvex => derive_strongly_convex_params(cfg.alpha, cfg.mu)?,
            Regime::Convex => {
                let l = l_hat.expect("computed above");
                match cfg.convex_eta {
                    ConvexEtaRule::PaperMin => derive_convex_params(cfg.beta, cfg.mu, l)?,
                    ConvexEtaRule::Theory => {
                        let rho = cfg.beta;
                        AdmmParams::convex(rho, cfg.mu * rho / (1.0 - cfg.mu) + 1.01 * l, cfg.mu, l)?
                    }
                }
            }
        })
    } else {
        None
    };
    let spg_eta = match (cfg.steps.spg_eta, l_hat) {
        (Some(e), _) => e,
        (None, Some(l)) if l > 0.0 => 1.0 / l,
        (None, Some(_)) => return Err(cfg_err("Lipschitz estimate is zero; set steps.spg_eta")),
        (None, None) => 1.0,
    };
    let ssg = match cfg.regime {
        Regime::StronglyConvex => StepsizePolicy::InverseLinear { c: cfg.steps.ssg_c, alpha: cfg.alpha },
        Regime::Convex => StepsizePolicy::InverseSqrt { c: cfg.steps.ssg_c },
    };
    Ok(Setup {
        admm,
        spg: StepsizePolicy::Constant { eta: spg_eta },
        ssg,
        adasg: StepsizePolicy::Adaptive { gamma: cfg.steps.adasg_gamma, eps: cfg.steps.adasg_eps },
    })
}

type Evaluator<'a> = dyn Fn(&NodalField, &NodalField) -> Result<f64> + Sync + 'a;

fn run_one<O: StochasticOracle>(
    cfg: &ExperimentConfig,
    oracle: &O,
    setup: &Setup,
    eval: &Evaluator<'_>,
    method: Method,
    run: usize,
) -> RunRecord {
    let run_seed = cfg.run_seed(method, run);
    let mut rows = Vec::new();
    let k_max = cfg.iterations;
    let mut hook = |obs: &Observation<'_>| -> Result<()> {
        if !obs.k.is_multiple_of(cfg.eval_every) && obs.k != k_max {
            return Ok(());
        }
        rows.push(RunRow {
            k: obs.k,
            sfo_calls: obs.sfo_calls,
            wall_seconds: obs.elapsed,
            objective: eval(obs.u, obs.z)?,
            feasibility: wnorm(&obs.u.sub(obs.z), oracle.weights())?,
            sparsity: sparsity_fraction(obs.z, oracle.weights(), SPARSITY_TOL)?,
            method,
            run_seed,
        });
        Ok(())
    };
    let outcome = match method {
        Method::Admm => {
            let params = setup.admm.as_ref().expect("admm parameters are derived when admm is requested");
            run_admm(oracle, params, &cfg.batch, k_max, run_seed, &mut hook).map(|_| ())
        }
        Method::Spg => run_baseline(method, oracle, &setup.spg, &cfg.batch, k_max, run_seed, &mut hook).map(|_| ()),
        Method::Ssg => run_baseline(method, oracle, &setup.ssg, &cfg.batch, k_max, run_seed, &mut hook).map(|_| ()),
        Method::Adasg => run_baseline(method, oracle, &setup.adasg, &cfg.batch, k_max, run_seed, &mut hook).map(|_| ()),
    };
    let failure = outcome.err().map(|e| {
        warn!("{method} run {run} failed: {e}");
        e.to_string()
    });
    RunRecord { method, run, run_seed, rows, failure }
}

fn run_all<O: StochasticOracle>(
    cfg: &ExperimentConfig,
    oracle: &O,
    setup: &Setup,
    eval: &Evaluator<'_>,
) -> Vec<RunRecord> {
    let jobs: Vec<(Method, usize)> = cfg.methods.iter().flat_map(|&m| (0..cfg.runs).map(move |r| (m, r))).collect();
    // par_iter preserves job order on collect
    jobs.par_iter().map(|&(m, r)| run_one(cfg, oracle, setup, eval, m, r)).collect()
}

/// Output of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
    /// Set for the quadratic problem.
    pub optimum: Option<f64>,
}

/// Runs every (method, run) pair with its own derived seed against one
/// frozen evaluation sample set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let problem = Problem::from_config(cfg)?;
    let setup = setup(cfg, &problem)?;
    let (records, optimum) = match &problem {
        Problem::Elliptic(inst) => {
            let samples = evaluation_samples(inst, cfg.seed, cfg.eval_samples);
            let eval = |u: &NodalField, z: &NodalField| empirical_objective_split(inst, u, z, &samples);
            (run_all(cfg, inst, &setup, &eval), None)
        }
        Problem::Quadratic(inst) => {
            // the smooth part is deterministic, so the exact objective replaces the sample mean
            let eval = |u: &NodalField, z: &NodalField| Ok(inst.objective_split(u, z));
            let opt = reference_optimum(inst)?;
            (run_all(cfg, inst, &setup, &eval), Some(opt.objective))
        }
    };
    Ok(Experiment { config: cfg.clone(), records, optimum })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failed_runs: usize,
    pub iterations: usize,
    pub sfo_calls: usize,
    pub final_objective_mean: f64,
    pub final_objective_std: f64,
    pub final_objective_min: f64,
    pub final_objective_max: f64,
    pub final_feasibility_mean: f64,
    pub final_sparsity_mean: f64,
    pub wall_seconds_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub optimum: Option<f64>,
    pub methods: Vec<MethodSummary>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl Experiment {
    /// Records of completed runs of `method`.
    pub fn completed(&self, method: Method) -> Vec<&RunRecord> {
        self.records.iter().filter(|r| r.method == method && r.failure.is_none()).collect()
    }

    pub fn final_objectives(&self, method: Method) -> Vec<f64> {
        self.completed(method).iter().filter_map(|r| r.final_row()).map(|row| row.objective).collect()
    }

    pub fn mean_final_objective(&self, method: Method) -> Option<f64> {
        let v = self.final_objectives(method);
        (!v.is_empty()).then(|| mean(&v))
    }

    pub fn mean_final_sparsity(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.completed(method).iter().filter_map(|r| r.final_row()).map(|r| r.sparsity).collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    /// All rows in (method, run, k) order.
    pub fn rows(&self) -> Vec<RunRow> {
        self.records.iter().flat_map(|r| r.rows.iter().cloned()).collect()
    }

    pub fn summary(&self) -> Summary {
        let methods = self
            .config
            .methods
            .iter()
            .map(|&method| {
                let done = self.completed(method);
                let finals: Vec<&RunRow> = done.iter().filter_map(|r| r.final_row()).collect();
                let obj: Vec<f64> = finals.iter().map(|r| r.objective).collect();
                let m = if obj.is_empty() { f64::NAN } else { mean(&obj) };
                let var = if obj.len() > 1 {
                    obj.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (obj.len() - 1) as f64
                } else {
                    0.0
                };
                let pick = |f: fn(&RunRow) -> f64| {
                    if finals.is_empty() {
                        f64::NAN
                    } else {
                        mean(&finals.iter().map(|r| f(r)).collect::<Vec<_>>())
                    }
                };
                MethodSummary {
                    method,
                    runs: self.config.runs,
                    failed_runs: self.config.runs - done.len(),
                    iterations: self.config.iterations,
                    sfo_calls: finals.first().map_or(0, |r| r.sfo_calls),
                    final_objective_mean: m,
                    final_objective_std: var.sqrt(),
                    final_objective_min: obj.iter().copied().fold(f64::INFINITY, f64::min),
                    final_objective_max: obj.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    final_feasibility_mean: pick(|r| r.feasibility),
                    final_sparsity_mean: pick(|r| r.sparsity),
                    wall_seconds_mean: pick(|r| r.wall_seconds),
                }
            })
            .collect();
        Summary { config: self.config.clone(), optimum: self.optimum, methods }
    }

    /// Mean objective per telemetry iteration for each method.
    pub fn mean_curves(&self) -> Vec<Series> {
        self.config
            .methods
            .iter()
            .filter_map(|&m| {
                let recs = self.completed(m);
                let env = envelope(&recs).ok().or_else(|| {
                    recs.first().map(|r| EnvelopeStats {
                        rows: r
                            .rows
                            .iter()
                            .map(|x| EnvelopeRow { k: x.k, min: x.objective, mean: x.objective, max: x.objective })
                            .collect(),
                    })
                })?;
                Some(Series {
                    label: m.name().to_string(),
                    points: env.rows.iter().map(|r| (r.k as f64, r.mean)).collect(),
                })
            })
            .collect()
    }

    /// Writes `records.csv`, `summary.json` and `objective.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
        emit_csv(&self.rows(), &dir.join("records.csv"))?;
        emit_json(&self.summary(), &dir.join("summary.json"))?;
        emit_svg(
            &self.mean_curves(),
            &ChartSpec { title: "mean empirical objective".into(), x_label: "k".into(), log_x: false },
            &dir.join("objective.svg"),
        )
    }
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub k: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeStats {
    pub rows: Vec<EnvelopeRow>,
}

impl EnvelopeStats {
    pub fn width_at(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.max - r.min)
    }
}

/// Per-iteration min/mean/max of the objective over runs of one method.
pub fn envelope(records: &[&RunRecord]) -> Result<EnvelopeStats> {
    if records.len() < 2 {
        return Err(cfg_err("an envelope needs at least two runs"));
    }
    let first = records[0];
    if records.iter().any(|r| r.method != first.method) {
        return Err(cfg_err("envelope runs must share one method"));
    }
    let ks: Vec<usize> = first.rows.iter().map(|r| r.k).collect();
    if records.iter().any(|r| r.rows.iter().map(|x| x.k).ne(ks.iter().copied())) {
        return Err(cfg_err("envelope runs must share their telemetry iterations"));
    }
    let rows = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let vals: Vec<f64> = records.iter().map(|r| r.rows[i].objective).collect();
            EnvelopeRow {
                k,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                mean: mean(&vals),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(EnvelopeStats { rows })
}

/// Least-squares slope of `log y` against `log k` over `lo <= k <= hi`.
/// Nonpositive values are skipped; fewer than 5 usable points is an error.
pub fn fit_rate_slope(points: &[(usize, f64)], (lo, hi): (usize, usize)) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(k, y)| *k >= lo && *k <= hi && *k > 0 && *y > 0.0 && y.is_finite())
        .map(|&(k, y)| ((k as f64).ln(), y.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(cfg_err(format!("rate fit over [{lo}, {hi}] has only {} usable points", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

fn average_over_runs(records: &[&RunRecord], f: impl Fn(&RunRow) -> f64) -> Vec<(usize, f64)> {
    let Some(first) = records.first() else { return Vec::new() };
    (0..first.rows.len())
        .filter(|&i| records.iter().all(|r| r.rows.len() > i && r.rows[i].k == first.rows[i].k))
        .map(|i| (first.rows[i].k, records.iter().map(|r| f(&r.rows[i])).sum::<f64>() / records.len() as f64))
        .collect()
}

/// Run-averaged `|objective - optimum|` per telemetry iteration.
pub fn mean_abs_gap(records: &[&RunRecord], optimum: f64) -> Vec<(usize, f64)> {
    average_over_runs(records, |r| (r.objective - optimum).abs())
}

/// Run-averaged `||u_k - z_k||` per telemetry iteration.
pub fn mean_feasibility(records: &[&RunRecord]) -> Vec<(usize, f64)> {
    average_over_runs(records, |r| r.feasibility)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub optimum: f64,
    pub fit_range: (usize, usize),
    pub gap: Vec<(usize, f64)>,
    pub feasibility: Vec<(usize, f64)>,
    pub gap_slope: f64,
    pub feasibility_slope: f64,
}

/// ADMM runs on the quadratic problem with log-log slopes of the mean
/// absolute objective gap and the mean feasibility violation.
pub fn rate_study(cfg: &ExperimentConfig) -> Result<(Experiment, RateReport)> {
    if cfg.problem != ProblemKind::Quadratic {
        return Err(cfg_err("rate fits need the quadratic problem (its optimum is computable)"));
    }
    let mut cfg = cfg.clone();
    cfg.methods = vec![Method::Admm];
    let exp = run_experiment(&cfg)?;
    let optimum = exp.optimum.expect("quadratic experiments carry the optimum");
    let recs = exp.completed(Method::Admm);
    if recs.is_empty() {
        return Err(cfg_err("every ADMM run failed"));
    }
    let gap = mean_abs_gap(&recs, optimum);
    let feasibility = mean_feasibility(&recs);
    let window = cfg.fit_window();
    let report = RateReport {
        optimum,
        fit_range: window,
        gap_slope: fit_rate_slope(&gap, window)?,
        feasibility_slope: fit_rate_slope(&feasibility, window)?,
        gap,
        feasibility,
    };
    Ok((exp, report))
}

/// Reference optimum of the configured quadratic problem.
pub fn quadratic_optimum(cfg: &ExperimentConfig) -> Result<ReferenceOptimum> {
    match Problem::from_config(cfg)? {
        Problem::Quadratic(q) => reference_optimum(&q),
        Problem::Elliptic(_) => Err(cfg_err("the reference optimum is only available for the quadratic problem")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub rule: String,
    /// Mean nonzero fraction per beta.
    pub fractions: Vec<f64>,
    pub objectives: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityTable {
    pub betas: Vec<f64>,
    pub rows: Vec<SparsityRow>,
}

impl SparsityTable {
    pub fn is_monotone(&self) -> bool {
        self.rows.iter().all(|r| r.fractions.windows(2).all(|w| w[1] <= w[0]))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("rule");
        for b in &self.betas {
            let _ = write!(s, "\t{b:e}");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.rule);
            for f in &r.fractions {
                let _ = write!(s, "\t{:.2}%", 100.0 * f);
            }
            s.push('\n');
        }
        s
    }
}

/// ADMM final nonzero fraction per beta, for the configured batch rule and
/// for `m_k = 1`.
pub fn sparsity_table(cfg: &ExperimentConfig, betas: &[f64]) -> Result<SparsityTable> {
    if betas.is_empty() {
        return Err(cfg_err("sparsity table needs at least one beta"));
    }
    let rules =
        [("paper_power".to_string(), cfg.batch.clone()), ("constant_1".to_string(), BatchSchedule::constant(1))];
    let mut rows = Vec::new();
    for (name, batch) in rules {
        let mut fractions = Vec::new();
        let mut objectives = Vec::new();
        for &beta in betas {
            let mut c = cfg.clone();
            c.beta = beta;
            c.batch = batch.clone();
            c.methods = vec![Method::Admm];
            c.eval_every = c.iterations;
            let exp = run_experiment(&c)?;
            fractions.push(exp.mean_final_sparsity(Method::Admm).unwrap_or(f64::NAN));
            objectives.push(exp.mean_final_objective(Method::Admm).unwrap_or(f64::NAN));
        }
        rows.push(SparsityRow { rule: name, fractions, objectives });
    }
    let table = SparsityTable { betas: betas.to_vec(), rows };
    if !table.is_monotone() {
        warn!("nonzero fraction is not monotone in beta");
    }
    Ok(table)
}

/// Label for a batch rule, used in reports.
pub fn batch_label(b: &BatchSchedule) -> String {
    match &b.rule {
        BatchRule::PaperPower { c, p } => format!("ceil({c} k^{p})"),
        BatchRule::Constant { m } => format!("{m}"),
        BatchRule::Custom { sizes } => format!("custom({} sizes)", sizes.len()),
    }
}

// ---------------------------------------------------------------------------
// Numerical self-checks
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub xi: [f64; 4],
    pub direction: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub mesh_h: f64,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Central differences of `F(., xi)` against `<grad F, d>` for 3 samples and
/// 3 directions each.
pub fn grad_check(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    const STEP: f64 = 1e-2;
    const TOL: f64 = 1e-5;
    let mut c = cfg.clone();
    c.problem = ProblemKind::Elliptic;
    c.validate()?;
    let Problem::Elliptic(inst) = Problem::from_config(&c)? else { unreachable!() };
    let inst = inst.with_cg(CgConfig { rel_tol: 1e-13, ..CgConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, label_hash("grad-check")]));
    let n = inst.dim();
    let w = inst.weights();
    let mut entries = Vec::new();
    for _ in 0..3 {
        let xi = SampleXi::new(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))?;
        let u = NodalField::from_fn(n, |_| rng.random_range(-1.0..1.0));
        let g = inst.grad(&u, &xi)?;
        for direction in 0..3 {
            let d = NodalField::from_fn(n, |_| rng.random_range(-1.0..1.0));
            let fp = inst.value(&NodalField::lin_comb(1.0, &u, STEP, &d), &xi)?;
            let fm = inst.value(&NodalField::lin_comb(1.0, &u, -STEP, &d), &xi)?;
            let fd = (fp - fm) / (2.0 * STEP);
            let analytic = wdot(&g, &d, w)?;
            let rel_error = (fd - analytic).abs() / analytic.abs().max(f64::MIN_POSITIVE);
            entries.push(GradCheckEntry { xi: xi.0, direction, analytic, finite_difference: fd, rel_error });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        mesh_h: c.mesh_h,
        step: STEP,
        tolerance: TOL,
        entries,
        max_rel_error,
        passed: max_rel_error <= TOL,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FemVerifyReport {
    pub mesh_sizes: Vec<f64>,
    pub errors: Vec<f64>,
    pub ratios: Vec<f64>,
    pub orders: Vec<f64>,
    pub passed: bool,
}

/// Unit coefficient, exact state `sin(pi x1) sin(pi x2)`: discrete L2 errors,
/// consecutive ratios (expected near 4) and observed orders.
pub fn fem_verify(mesh_sizes: &[f64]) -> Result<FemVerifyReport> {
    use std::f64::consts::PI;
    if mesh_sizes.len() < 2 {
        return Err(cfg_err("fem verification needs at least two mesh sizes"));
    }
    let exact = |x: [f64; 2]| (PI * x[0]).sin() * (PI * x[1]).sin();
    let errors = mesh_sizes
        .iter()
        .map(|&h| {
            let mesh = Arc::new(build_mesh(h)?);
            let ops = assemble(&mesh, &SampleXi::zero());
            let f = mesh.interpolate(|x| 2.0 * PI * PI * exact(x));
            l2_error(&mesh, &solve_state(&ops, &f)?, exact)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ratios: Vec<f64> = errors.windows(2).map(|e| e[0] / e[1]).collect();
    let orders: Vec<f64> = ratios.iter().zip(mesh_sizes.windows(2)).map(|(r, h)| r.ln() / (h[0] / h[1]).ln()).collect();
    let passed = ratios.iter().all(|r| (3.5..=4.5).contains(r));
    Ok(FemVerifyReport { mesh_sizes: mesh_sizes.to_vec(), errors, ratios, orders, passed })
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Writes rows under the fixed header; an empty slice yields the header only.
pub fn emit_csv(rows: &[RunRow], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRow>> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(cfg_err(format!("{}: unexpected CSV header '{}'", path.display(), header.join(","))));
    }
    r.deserialize().collect::<std::result::Result<Vec<RunRow>, _>>().map_err(csv_err)
}

pub fn emit_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub log_x: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Self-contained SVG line chart with a logarithmic y axis and a legend.
/// Points with nonpositive coordinates on a log axis are dropped.
pub fn render_svg(series: &[Series], spec: &ChartSpec) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 80.0, 170.0, 40.0, 50.0);
    let tx = |x: f64| if spec.log_x { x.log10() } else { x };
    let usable: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| *y > 0.0 && y.is_finite() && x.is_finite() && (!spec.log_x || *x > 0.0))
                .map(|&(x, y)| (tx(x), y.log10()))
                .collect()
        })
        .collect();
    let all = usable.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    y0 = y0.floor();
    y1 = y1.ceil().max(y0 + 1.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        xml_escape(&spec.title)
    );
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let mut d = y0 as i64;
    while d <= y1 as i64 {
        let y = py(d as f64);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##, left + pw);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">1e{d}</text>"#,
            left - 6.0,
            y + 4.0
        );
        d += 1;
    }
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let label = if spec.log_x { format!("{:.3}", 10f64.powf(x)) } else { format!("{x:.4}") };
        let label = label.trim_end_matches('0').trim_end_matches('.').to_string();
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
            px(x),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        xml_escape(&spec.x_label)
    );
    for (i, (ser, pts)) in series.iter().zip(&usable).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ =
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        let ly = top + 16.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 24.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            xml_escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn emit_svg(series: &[Series], spec: &ChartSpec, path: &Path) -> Result<()> {
    fs::write(path, render_svg(series, spec)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad_cfg() -> ExperimentConfig {
        ExperimentConfig {
            problem: ProblemKind::Quadratic,
            alpha: 1.0,
            beta: 0.1,
            iterations: 5,
            runs: 2,
            quadratic: QuadraticSpec { n: 6, m: 10, instance_seed: 1, sigma: 0.1 },
            ..ExperimentConfig::default()
        }
    }

    fn rec(method: Method, objs: &[f64]) -> RunRecord {
        RunRecord {
            method,
            run: 0,
            run_seed: 0,
            rows: objs
                .iter()
                .enumerate()
                .map(|(i, &o)| RunRow {
                    k: i + 1,
                    sfo_calls: i + 1,
                    wall_seconds: 0.0,
                    objective: o,
                    feasibility: 0.0,
                    sparsity: 1.0,
                    method,
                    run_seed: 0,
                })
                .collect(),
            failure: None,
        }
    }

    #[test]
    fn sparsity_fraction_examples() {
        let w = Weights::new(vec![1.0, 2.0, 1.0]).unwrap();
        assert_eq!(sparsity_fraction(&NodalField::zeros(3), &w, SPARSITY_TOL).unwrap(), 0.0);
        assert_eq!(sparsity_fraction(&NodalField::constant(3, 1.0), &w, SPARSITY_TOL).unwrap(), 1.0);
        let u = NodalField::from_vec(vec![0.0, 1.0, 1e-13]);
        assert_eq!(sparsity_fraction(&u, &w, SPARSITY_TOL).unwrap(), 0.5);
        assert!(sparsity_fraction(&u, &w, -1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = [
            ExperimentConfig { runs: 0, ..Default::default() },
            ExperimentConfig { eval_samples: 0, ..Default::default() },
            ExperimentConfig { iterations: 0, ..Default::default() },
            ExperimentConfig { mu: 1.0, ..Default::default() },
            ExperimentConfig { alpha: 0.0, ..Default::default() },
            ExperimentConfig { mesh_h: 0.3, ..Default::default() },
            ExperimentConfig { methods: vec![], ..Default::default() },
            ExperimentConfig { methods: vec![Method::Spg, Method::Spg], ..Default::default() },
            ExperimentConfig { u_min: 1.0, ..Default::default() },
            ExperimentConfig { fit_range: Some([10, 5]), ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let p = ExperimentConfig::default().paper_scale();
        assert_eq!((p.runs, p.eval_samples), (50, 10_000));
    }

    #[test]
    fn config_json_rejects_unknown_methods_and_fields() {
        let ok: ExperimentConfig = serde_json::from_str(r#"{"K": 7, "methods": ["admm", "spg"]}"#).unwrap();
        assert_eq!(ok.iterations, 7);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"methods": ["sgd"]}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"colour": 1}"#).is_err());
        let round: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&quad_cfg()).unwrap()).unwrap();
        assert_eq!(round, quad_cfg());
    }

    #[test]
    fn single_iteration_run_gives_one_row_per_method() {
        let cfg = ExperimentConfig { iterations: 1, runs: 1, ..quad_cfg() };
        let exp = run_experiment(&cfg).unwrap();
        assert_eq!(exp.records.len(), 4);
        for r in &exp.records {
            assert_eq!(r.rows.len(), 1);
            assert_eq!(r.rows[0].k, 1);
            assert!(r.failure.is_none());
        }
    }

    #[test]
    fn seeds_differ_per_method_and_run_and_budgets_match() {
        let exp = run_experiment(&quad_cfg()).unwrap();
        let mut seeds: Vec<u64> = exp.records.iter().map(|r| r.run_seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), exp.records.len());
        let budgets: Vec<usize> = exp.records.iter().map(|r| r.final_row().unwrap().sfo_calls).collect();
        assert!(budgets.windows(2).all(|b| b[0] == b[1]));
        for r in &exp.records {
            assert!(r.rows.windows(2).all(|w| w[0].k < w[1].k && w[0].sfo_calls <= w[1].sfo_calls));
        }
    }

    #[test]
    fn eval_every_keeps_final_row() {
        let cfg = ExperimentConfig { iterations: 7, eval_every: 3, runs: 1, methods: vec![Method::Admm], ..quad_cfg() };
        let exp = run_experiment(&cfg).unwrap();
        let ks: Vec<usize> = exp.records[0].rows.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![3, 6, 7]);
    }

    #[test]
    fn baselines_report_zero_feasibility() {
        let exp = run_experiment(&quad_cfg()).unwrap();
        for r in exp.records.iter().filter(|r| r.method != Method::Admm) {
            assert!(r.rows.iter().all(|x| x.feasibility == 0.0));
        }
    }

    #[test]
    fn envelope_examples() {
        let a = rec(Method::Admm, &[3.0, 2.0, 1.0]);
        let b = rec(Method::Admm, &[1.0, 4.0, 1.0]);
        let e = envelope(&[&a, &b]).unwrap();
        assert_eq!(e.rows[0], EnvelopeRow { k: 1, min: 1.0, mean: 2.0, max: 3.0 });
        assert_eq!(e.rows[1].min, 2.0);
        assert_eq!(e.width_at(3), Some(0.0));
        let same = envelope(&[&a, &a]).unwrap();
        assert!(same.rows.iter().all(|r| r.min == r.mean && r.mean == r.max));
        assert!(envelope(&[&a]).is_err());
        assert!(envelope(&[&a, &rec(Method::Spg, &[1.0, 1.0, 1.0])]).is_err());
        assert!(envelope(&[&a, &rec(Method::Admm, &[1.0])]).is_err());
    }

    #[test]
    fn rate_slope_of_exact_power_laws() {
        let sq: Vec<(usize, f64)> = (1..=100).map(|k| (k, 1.0 / (k * k) as f64)).collect();
        assert!((fit_rate_slope(&sq, (1, 100)).unwrap() + 2.0).abs() < 1e-6);
        let lin: Vec<(usize, f64)> = (1..=100).map(|k| (k, 3.0 / k as f64)).collect();
        assert!((fit_rate_slope(&lin, (10, 100)).unwrap() + 1.0).abs() < 1e-6);
        let neg: Vec<(usize, f64)> = (1..=100).map(|k| (k, -1.0 / k as f64)).collect();
        assert!(fit_rate_slope(&neg, (1, 100)).is_err());
        assert!(fit_rate_slope(&lin, (1, 4)).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        emit_csv(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(read_csv(&path).unwrap().is_empty());
        let rows = run_experiment(&quad_cfg()).unwrap().rows();
        emit_csv(&rows, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), rows);
        let missing = dir.path().join("nope").join("r.csv");
        let err = emit_csv(&rows, &missing).unwrap_err().to_string();
        assert!(err.contains("nope"));
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let spec = ChartSpec { title: "t".into(), x_label: "k".into(), log_x: false };
        let series = vec![
            Series { label: "a".into(), points: vec![(1.0, 1.0), (2.0, 0.1)] },
            Series { label: "b<c".into(), points: vec![(1.0, 2.0), (2.0, -1.0), (3.0, 0.5)] },
        ];
        let svg = render_svg(&series, &spec);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(render_svg(&[], &spec).matches("<polyline").count(), 0);
    }

    #[test]
    fn summary_statistics() {
        let exp = run_experiment(&quad_cfg()).unwrap();
        let s = exp.summary();
        assert_eq!(s.methods.len(), 4);
        for m in &s.methods {
            assert_eq!(m.failed_runs, 0);
            assert!(m.final_objective_min <= m.final_objective_mean && m.final_objective_mean <= m.final_objective_max);
        }
        assert_eq!(exp.mean_final_objective(Method::Spg), Some(s.methods[1].final_objective_mean));
    }

    #[test]
    fn huge_beta_gives_zero_sparsity() {
        let cfg = ExperimentConfig { beta: 10.0, methods: vec![Method::Admm], iterations: 20, ..quad_cfg() };
        let exp = run_experiment(&cfg).unwrap();
        assert_eq!(exp.mean_final_sparsity(Method::Admm), Some(0.0));
    }

    #[test]
    fn sparsity_table_shape() {
        let cfg = ExperimentConfig { iterations: 3, runs: 1, ..quad_cfg() };
        let t = sparsity_table(&cfg, &[0.1]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.fractions.len() == 1));
        assert!(sparsity_table(&cfg, &[]).is_err());
    }

    #[test]
    fn rate_study_requires_quadratic() {
        assert!(rate_study(&ExperimentConfig::default()).is_err());
    }

    #[test]
    fn fem_verify_needs_two_meshes() {
        assert!(fem_verify(&[0.25]).is_err());
        let r = fem_verify(&[0.125, 0.0625]).unwrap();
        assert!(r.passed && (r.orders[0] - 2.0).abs() < 0.2);
    }

    proptest! {
        #[test]
        fn envelope_brackets_every_run(objs in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 2..6)) {
            let recs: Vec<RunRecord> = objs.iter().map(|o| rec(Method::Ssg, o)).collect();
            let refs: Vec<&RunRecord> = recs.iter().collect();
            let e = envelope(&refs).unwrap();
            for (i, row) in e.rows.iter().enumerate() {
                prop_assert!(row.min <= row.mean + 1e-9 && row.mean <= row.max + 1e-9);
                for r in &recs {
                    prop_assert!(row.min <= r.rows[i].objective && r.rows[i].objective <= row.max);
                }
            }
        }

        #[test]
        fn sparsity_fraction_in_unit_interval(v in proptest::collection::vec(-1.0f64..1.0, 1..20)) {
            let w = Weights::uniform(v.len());
            let f = sparsity_fraction(&NodalField::from_vec(v), &w, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
