//! The faster stochastic linearized ADMM and the stochastic-gradient baselines.
//!
//! For `min f(u) + g(z)` subject to `u = z`, one ADMM iteration draws a batch,
//! averages the sampled gradients at `v_k` into `G_k` and then performs
//!
//! ```text
//! s+  = argmin_z  g(z) + <lam, z> + rho_k/2 |z - v|^2                 = soft(v - lam/rho_k, beta/rho_k)
//! v+  = argmin_box <G - lam, u> + rho_k/2 |u - s+|^2 + eta_k/2 |u - v|^2
//! psi+ = psi - mu rho_k (v+ - s+)
//! u+  = (1 - 1/theta_k) u + v+/theta_k,   z+ likewise with s+
//! lam+ = psi+ - mu rho_k theta_k (u+ - z+)
//! ```
//!
//! Two parameter regimes are supported: strongly convex (`rho_k = rho theta_k`,
//! `eta_k = eta theta_k`, `theta_{k+1}^2 - theta_{k+1} = theta_k^2`) and general
//! convex (`rho_k = rho`, `eta_k = eta`, `theta_k = k + 1`).

use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::hilbert::{soft_threshold, soft_threshold_each, wnorm, NodalField};
use crate::oracle::{derive_seed, label_hash, Composite, SampleStream, StochasticOracle};

/// Positive root of `t^2 - t - theta^2 = 0`.
pub fn theta_next(theta: f64) -> f64 {
    0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt())
}

/// Running `theta_k` sequence with `theta_0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaSchedule {
    theta: f64,
    k: usize,
}

impl Default for ThetaSchedule {
    fn default() -> Self {
        ThetaSchedule { theta: 1.0, k: 0 }
    }
}

impl ThetaSchedule {
    pub fn current(&self) -> f64 {
        self.theta
    }

    pub fn index(&self) -> usize {
        self.k
    }

    pub fn advance(&mut self) -> f64 {
        self.theta = theta_next(self.theta);
        self.k += 1;
        self.theta
    }
}

impl Iterator for ThetaSchedule {
    type Item = f64;

    /// Yields `theta_0, theta_1, ...`.
    fn next(&mut self) -> Option<f64> {
        let t = self.theta;
        self.advance();
        Some(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BatchRule {
    /// `ceil(c * k^p)`
    PaperPower {
        c: f64,
        p: f64,
    },
    Constant {
        m: usize,
    },
    /// Explicit sizes; the last entry repeats.
    Custom {
        sizes: Vec<usize>,
    },
}

/// Batch sizes `m_k`, never below `floor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    #[serde(flatten)]
    pub rule: BatchRule,
    #[serde(default = "default_floor")]
    pub floor: usize,
}

fn default_floor() -> usize {
    1
}

impl BatchSchedule {
    /// `m_k = max(1, ceil(0.5 k^1.1))`
    pub fn paper() -> Self {
        BatchSchedule { rule: BatchRule::PaperPower { c: 0.5, p: 1.1 }, floor: 1 }
    }

    pub fn constant(m: usize) -> Self {
        BatchSchedule { rule: BatchRule::Constant { m }, floor: 1 }
    }

    pub fn with_floor(mut self, floor: usize) -> Self {
        self.floor = floor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.floor == 0 {
            return Err(Error::Config("batch floor must be at least 1".into()));
        }
        match &self.rule {
            BatchRule::PaperPower { c, p } if !(*c > 0.0 && p.is_finite()) => {
                Err(Error::Config(format!("invalid power batch rule c={c}, p={p}")))
            }
            BatchRule::Custom { sizes } if sizes.is_empty() => {
                Err(Error::Config("custom batch rule needs at least one size".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn size(&self, k: usize) -> usize {
        let raw = match &self.rule {
            BatchRule::PaperPower { c, p } => (c * (k as f64).powf(*p)).ceil() as usize,
            BatchRule::Constant { m } => *m,
            BatchRule::Custom { sizes } => sizes[k.min(sizes.len() - 1)],
        };
        raw.max(self.floor)
    }

    /// `sum_{k < iterations} m_k`
    pub fn total(&self, iterations: usize) -> usize {
        (0..iterations).map(|k| self.size(k)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    StronglyConvex,
    Convex,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmParams {
    pub mu: f64,
    pub rho: f64,
    pub eta: f64,
    pub regime: Regime,
    /// Strong convexity modulus the parameters were derived from.
    pub alpha: Option<f64>,
    /// Lipschitz estimate the convex-regime `eta` was derived from.
    pub l_hat: Option<f64>,
}

/// Step parameters of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationParams {
    pub theta: f64,
    pub rho: f64,
    pub eta: f64,
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Config(format!("mu = {mu} must lie in (0, 1)")));
    }
    Ok(())
}

/// Solves `rho + eta = alpha` and `eta (1 - mu) = 2 rho mu`.
pub fn derive_strongly_convex_params(alpha: f64, mu: f64) -> Result<AdmmParams> {
    check_mu(mu)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("strongly convex regime needs alpha > 0, got {alpha}")));
    }
    let rho_formula = alpha * (1.0 - mu) / (1.0 + mu);
    let eta_formula = 2.0 * alpha * mu / (1.0 + mu);
    // the larger of the two lies in [alpha/2, alpha], so alpha minus it is
    // exact and the pair sums to alpha without rounding
    let (rho, eta) = if eta_formula >= rho_formula {
        (alpha - eta_formula, eta_formula)
    } else {
        (rho_formula, alpha - rho_formula)
    };
    AdmmParams::strongly_convex(rho, eta, mu, alpha)
}

/// `rho = beta`, `eta = min(mu rho / (1 - mu) + 1.01 l_hat, rho)`.
pub fn derive_convex_params(beta: f64, mu: f64, l_hat: f64) -> Result<AdmmParams> {
    check_mu(mu)?;
    if !(beta > 0.0) || !(l_hat > 0.0) {
        return Err(Error::Config(format!("convex regime needs beta > 0 and l_hat > 0 (beta={beta}, l_hat={l_hat})")));
    }
    let rho = beta;
    let eta = (mu * rho / (1.0 - mu) + 1.01 * l_hat).min(rho);
    AdmmParams::convex(rho, eta, mu, l_hat)
}

impl AdmmParams {
    /// Strongly convex regime; requires `rho + eta <= alpha` and `eta (1 - mu) > rho mu`.
    pub fn strongly_convex(rho: f64, eta: f64, mu: f64, alpha: f64) -> Result<Self> {
        check_mu(mu)?;
        if !(rho > 0.0 && eta > 0.0) {
            return Err(Error::Config(format!("rho={rho} and eta={eta} must be positive")));
        }
        if rho + eta > alpha * (1.0 + 1e-12) {
            return Err(Error::Config(format!("rho + eta = {} exceeds alpha = {alpha}", rho + eta)));
        }
        if !(eta * (1.0 - mu) > rho * mu) {
            return Err(Error::Config(format!(
                "eta (1 - mu) = {} must exceed rho mu = {}",
                eta * (1.0 - mu),
                rho * mu
            )));
        }
        Ok(AdmmParams { mu, rho, eta, regime: Regime::StronglyConvex, alpha: Some(alpha), l_hat: None })
    }

    /// Convex regime. Warns when `eta > mu rho / (1 - mu) + l_hat` fails,
    /// which is the condition the nonergodic `O(1/K)` rate is stated under.
    pub fn convex(rho: f64, eta: f64, mu: f64, l_hat: f64) -> Result<Self> {
        check_mu(mu)?;
        if !(rho > 0.0 && eta > 0.0) {
            return Err(Error::Config(format!("rho={rho} and eta={eta} must be positive")));
        }
        let needed = mu * rho / (1.0 - mu) + l_hat;
        if !(eta > needed) {
            warn!("convex regime: eta = {eta:.4e} does not exceed mu rho/(1-mu) + L = {needed:.4e}");
        }
        Ok(AdmmParams { mu, rho, eta, regime: Regime::Convex, alpha: None, l_hat: Some(l_hat) })
    }

    pub fn iteration(&self, k: usize, theta_sched: &ThetaSchedule) -> IterationParams {
        match self.regime {
            Regime::StronglyConvex => {
                let theta = theta_sched.current();
                IterationParams { theta, rho: self.rho * theta, eta: self.eta * theta }
            }
            Regime::Convex => IterationParams { theta: (k + 1) as f64, rho: self.rho, eta: self.eta },
        }
    }
}

/// `(1/n) sum_j ||grad F(u_probe, xi_j)||` over `n_calls` fresh samples.
pub fn estimate_lipschitz<O: StochasticOracle>(
    oracle: &O,
    u_probe: &NodalField,
    n_calls: usize,
    seed: u64,
) -> Result<f64> {
    if n_calls == 0 {
        return Err(usage("estimate_lipschitz needs at least one oracle call"));
    }
    let stream = SampleStream::new(derive_seed(&[seed, label_hash("lipschitz")]));
    let norms = (0..n_calls as u64)
        .into_par_iter()
        .map(|j| {
            let g = oracle.grad(u_probe, &stream.sample(oracle, 0, j))?;
            wnorm(&g, oracle.weights())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(norms.iter().sum::<f64>() / n_calls as f64)
}

/// `G_k = (1/m) sum_i grad F(point, xi_{k,i})` over the `m` draws of iteration `k`.
pub fn averaged_gradient<O: StochasticOracle>(
    oracle: &O,
    point: &NodalField,
    stream: &SampleStream,
    k: usize,
    m: usize,
) -> Result<NodalField> {
    if m == 0 {
        return Err(usage("batch size must be positive"));
    }
    let samples = stream.batch(oracle, k as u64, m);
    oracle.batch_grad(point, &samples)
}

/// The six ADMM iterates plus bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub v: NodalField,
    pub s: NodalField,
    pub psi: NodalField,
    pub u: NodalField,
    pub z: NodalField,
    pub lambda: NodalField,
    pub k: usize,
    pub sfo_calls: usize,
}

impl AdmmState {
    /// `(u_0, z_0) = (v_0, s_0) = 0`, `psi_0 = lambda_0 = 0`.
    pub fn zeros(n: usize) -> Self {
        let zero = NodalField::zeros(n);
        AdmmState {
            v: zero.clone(),
            s: zero.clone(),
            psi: zero.clone(),
            u: zero.clone(),
            z: zero.clone(),
            lambda: zero,
            k: 0,
            sfo_calls: 0,
        }
    }

    /// Starts from a given primal point with zero multipliers.
    pub fn from_point(u0: NodalField) -> Self {
        let zero = NodalField::zeros(u0.len());
        AdmmState {
            v: u0.clone(),
            s: u0.clone(),
            psi: zero.clone(),
            u: u0.clone(),
            z: u0,
            lambda: zero,
            k: 0,
            sfo_calls: 0,
        }
    }
}

fn finite(field: &NodalField, iteration: usize, step: &'static str) -> Result<()> {
    if field.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFailure { iteration, step })
    }
}

/// The deterministic part of one iteration, given the averaged gradient `g`.
pub fn admm_update(
    state: &mut AdmmState,
    mu: f64,
    it: IterationParams,
    g: &NodalField,
    composite: &Composite,
) -> Result<()> {
    let k = state.k;
    let IterationParams { theta, rho, eta } = it;

    // z-subproblem: prox of g/rho at v - lambda/rho
    let shifted = NodalField::lin_comb(1.0, &state.v, -1.0 / rho, &state.lambda);
    let s_next = soft_threshold(&shifted, composite.beta / rho)?;
    finite(&s_next, k, "z-subproblem")?;

    // linearized u-subproblem, solved in closed form then projected
    let inv = 1.0 / (rho + eta);
    let raw = NodalField::from_fn(g.len(), |i| (rho * s_next[i] + eta * state.v[i] + state.lambda[i] - g[i]) * inv);
    let v_next = composite.project(&raw);
    finite(&v_next, k, "u-subproblem")?;

    let mut psi_next = state.psi.clone();
    psi_next.axpy(-mu * rho, &v_next.sub(&s_next));
    finite(&psi_next, k, "multiplier")?;

    let w = 1.0 / theta;
    let u_next = NodalField::lin_comb(1.0 - w, &state.u, w, &v_next);
    let z_next = NodalField::lin_comb(1.0 - w, &state.z, w, &s_next);
    finite(&u_next, k, "u-update")?;
    finite(&z_next, k, "z-update")?;

    let mut lambda_next = psi_next.clone();
    lambda_next.axpy(-mu * rho * theta, &u_next.sub(&z_next));
    finite(&lambda_next, k, "multiplier-update")?;

    state.v = v_next;
    state.s = s_next;
    state.psi = psi_next;
    state.u = u_next;
    state.z = z_next;
    state.lambda = lambda_next;
    state.k += 1;
    Ok(())
}

/// One full stochastic iteration: batch draw, gradient averaging at `v_k`, updates.
pub fn admm_step<O: StochasticOracle>(
    state: &mut AdmmState,
    params: &AdmmParams,
    theta: &mut ThetaSchedule,
    batch: &BatchSchedule,
    oracle: &O,
    stream: &SampleStream,
) -> Result<()> {
    let k = state.k;
    debug_assert_eq!(theta.index(), k);
    let m = batch.size(k);
    let g = averaged_gradient(oracle, &state.v, stream, k, m)?;
    finite(&g, k, "gradient")?;
    let it = params.iteration(k, theta);
    admm_update(state, params.mu, it, &g, &oracle.composite())?;
    state.sfo_calls += m;
    theta.advance();
    Ok(())
}

/// What a telemetry hook sees after each completed iteration.
#[derive(Debug)]
pub struct Observation<'a> {
    /// Number of completed iterations.
    pub k: usize,
    pub sfo_calls: usize,
    /// Solver time so far, excluding time spent inside the hook.
    pub elapsed: f64,
    /// Primal iterate (`u_k`).
    pub u: &'a NodalField,
    /// Split iterate (`z_k`); equal to `u` for single-variable methods.
    pub z: &'a NodalField,
}

/// Runs `iterations` ADMM steps from zero and calls `hook` after each one.
pub fn run_admm<O: StochasticOracle>(
    oracle: &O,
    params: &AdmmParams,
    batch: &BatchSchedule,
    iterations: usize,
    seed: u64,
    mut hook: impl FnMut(&Observation<'_>) -> Result<()>,
) -> Result<AdmmState> {
    if iterations == 0 {
        return Err(usage("run needs at least one iteration"));
    }
    batch.validate()?;
    let stream = SampleStream::new(seed);
    let mut state = AdmmState::zeros(oracle.dim());
    let mut theta = ThetaSchedule::default();
    let mut elapsed = 0.0;
    for _ in 0..iterations {
        let t0 = Instant::now();
        admm_step(&mut state, params, &mut theta, batch, oracle, &stream)?;
        elapsed += t0.elapsed().as_secs_f64();
        hook(&Observation { k: state.k, sfo_calls: state.sfo_calls, elapsed, u: &state.u, z: &state.z })?;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Stochastic gradient baselines
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Admm,
    Spg,
    Ssg,
    Adasg,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Admm, Method::Spg, Method::Ssg, Method::Adasg];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Admm => "admm",
            Method::Spg => "spg",
            Method::Ssg => "ssg",
            Method::Adasg => "adasg",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected admm, spg, ssg or adasg)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum StepsizePolicy {
    /// `eta_k = eta`
    Constant { eta: f64 },
    /// `eta_k = c / (alpha (k + 1))`
    InverseLinear { c: f64, alpha: f64 },
    /// `eta_k = c / sqrt(k + 1)`
    InverseSqrt { c: f64 },
    /// Per-node `gamma / sqrt(eps + sum_{j <= k} G_{j,i}^2)`
    Adaptive { gamma: f64, eps: f64 },
}

impl StepsizePolicy {
    /// Scalar step for iteration `k`; `None` for the adaptive policy.
    pub fn scalar(&self, k: usize) -> Option<f64> {
        match *self {
            StepsizePolicy::Constant { eta } => Some(eta),
            StepsizePolicy::InverseLinear { c, alpha } => Some(c / (alpha * (k + 1) as f64)),
            StepsizePolicy::InverseSqrt { c } => Some(c / ((k + 1) as f64).sqrt()),
            StepsizePolicy::Adaptive { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineState {
    pub u: NodalField,
    pub k: usize,
    pub sfo_calls: usize,
    /// Accumulated squared gradients (adaptive method only).
    pub grad_sq: Vec<f64>,
}

impl BaselineState {
    pub fn zeros(n: usize) -> Self {
        BaselineState { u: NodalField::zeros(n), k: 0, sfo_calls: 0, grad_sq: vec![0.0; n] }
    }
}

/// `u+ = P_box(soft(u - eta G, eta beta))`
pub fn spg_update(u: &NodalField, g: &NodalField, eta: f64, composite: &Composite) -> NodalField {
    composite.prox(&NodalField::lin_comb(1.0, u, -eta, g), eta)
}

/// `u+ = P_box(u - eta (G + beta sign(u)))` with `sign(0) = 0`.
pub fn ssg_update(u: &NodalField, g: &NodalField, eta: f64, composite: &Composite) -> NodalField {
    let beta = composite.beta;
    let stepped = NodalField::from_fn(u.len(), |i| {
        let sub = if u[i] == 0.0 { 0.0 } else { beta * u[i].signum() };
        u[i] - eta * (g[i] + sub)
    });
    composite.project(&stepped)
}

/// Accumulates `G^2` into `grad_sq` and takes a per-node proximal step.
pub fn adagrad_update(
    u: &NodalField,
    g: &NodalField,
    grad_sq: &mut [f64],
    gamma: f64,
    eps: f64,
    composite: &Composite,
) -> Result<NodalField> {
    for (acc, gi) in grad_sq.iter_mut().zip(g.iter()) {
        *acc += gi * gi;
    }
    let steps: Vec<f64> = grad_sq.iter().map(|a| gamma / (eps + a).sqrt()).collect();
    let stepped = NodalField::from_fn(u.len(), |i| u[i] - steps[i] * g[i]);
    let thresholds: Vec<f64> = steps.iter().map(|t| t * composite.beta).collect();
    Ok(composite.project(&soft_threshold_each(&stepped, &thresholds)?))
}

/// One baseline iteration with a freshly averaged gradient at `u_k`.
pub fn baseline_step<O: StochasticOracle>(
    method: Method,
    state: &mut BaselineState,
    policy: &StepsizePolicy,
    batch: &BatchSchedule,
    oracle: &O,
    stream: &SampleStream,
) -> Result<()> {
    let k = state.k;
    let m = batch.size(k);
    let g = averaged_gradient(oracle, &state.u, stream, k, m)?;
    finite(&g, k, "gradient")?;
    let comp = oracle.composite();
    let next = match (method, policy) {
        (Method::Spg, p) => {
            let eta = p.scalar(k).ok_or_else(|| Error::Config("spg needs a scalar stepsize".into()))?;
            spg_update(&state.u, &g, eta, &comp)
        }
        (Method::Ssg, p) => {
            let eta = p.scalar(k).ok_or_else(|| Error::Config("ssg needs a scalar stepsize".into()))?;
            ssg_update(&state.u, &g, eta, &comp)
        }
        (Method::Adasg, StepsizePolicy::Adaptive { gamma, eps }) => {
            adagrad_update(&state.u, &g, &mut state.grad_sq, *gamma, *eps, &comp)?
        }
        (Method::Adasg, _) => return Err(Error::Config("adasg needs the adaptive stepsize policy".into())),
        (Method::Admm, _) => return Err(usage("admm is not a baseline method")),
    };
    finite(&next, k, "baseline update")?;
    state.u = next;
    state.k += 1;
    state.sfo_calls += m;
    Ok(())
}

pub fn run_baseline<O: StochasticOracle>(
    method: Method,
    oracle: &O,
    policy: &StepsizePolicy,
    batch: &BatchSchedule,
    iterations: usize,
    seed: u64,
    mut hook: impl FnMut(&Observation<'_>) -> Result<()>,
) -> Result<BaselineState> {
    if iterations == 0 {
        return Err(usage("run needs at least one iteration"));
    }
    batch.validate()?;
    let stream = SampleStream::new(seed);
    let mut state = BaselineState::zeros(oracle.dim());
    let mut elapsed = 0.0;
    for _ in 0..iterations {
        let t0 = Instant::now();
        baseline_step(method, &mut state, policy, batch, oracle, &stream)?;
        elapsed += t0.elapsed().as_secs_f64();
        hook(&Observation { k: state.k, sfo_calls: state.sfo_calls, elapsed, u: &state.u, z: &state.u })?;
    }
    Ok(state)
}
