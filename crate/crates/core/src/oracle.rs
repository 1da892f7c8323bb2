//! Stochastic first-order oracles and the problem instances behind them.
//!
//! An oracle exposes `F(u, xi)` and `grad_u F(u, xi)` for independently drawn
//! samples `xi`, together with the nonsmooth part `g = beta * ||.||_1` and the
//! box `[lo, hi]` of admissible controls.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{usage, Error, Result};
use crate::fem::{assemble, solve_adjoint_with, solve_state_with, SampleXi, StructuredMesh};
use crate::hilbert::{project_box, shrink, wdot, wl1, NodalField, Weights};
use crate::linsolve::{matvec, CgConfig};

/// Nonsmooth term `beta * ||.||_1` and box constraint `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub beta: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Composite {
    pub fn new(beta: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(usage(format!("beta = {beta} must be nonnegative")));
        }
        if !(lo < hi) {
            return Err(usage(format!("empty control box [{lo}, {hi}]")));
        }
        Ok(Composite { beta, lo, hi })
    }

    /// `g(z) = beta * sum_i w_i |z_i|`
    pub fn value(&self, z: &NodalField, w: &Weights) -> Result<f64> {
        Ok(self.beta * wl1(z, w)?)
    }

    pub fn project(&self, u: &NodalField) -> NodalField {
        project_box(u, self.lo, self.hi).expect("box validated at construction")
    }

    /// Exact prox of `t * beta * |.| + indicator([lo, hi])`, applied per node.
    pub fn prox(&self, u: &NodalField, t: f64) -> NodalField {
        let thr = t * self.beta;
        NodalField::from_fn(u.len(), |i| shrink(u[i], thr).clamp(self.lo, self.hi))
    }
}

/// Uniform contract for the problems the optimizers run on.
pub trait StochasticOracle: Sync {
    type Sample: Clone + Send + Sync;

    fn dim(&self) -> usize;

    /// Weights of the discrete inner product.
    fn weights(&self) -> &Weights;

    fn composite(&self) -> Composite;

    /// Draws one independent realization.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Self::Sample;

    /// Riesz representative of `grad_u F(u, sample)` in the weighted inner product.
    fn grad(&self, u: &NodalField, sample: &Self::Sample) -> Result<NodalField>;

    /// `F(u, sample)`.
    fn smooth_value(&self, u: &NodalField, sample: &Self::Sample) -> Result<f64>;

    /// Mean of `grad` over `samples`, accumulated in slice order.
    fn batch_grad(&self, u: &NodalField, samples: &[Self::Sample]) -> Result<NodalField> {
        if samples.is_empty() {
            return Err(usage("batch gradient needs at least one sample"));
        }
        let grads = samples.par_iter().map(|xi| self.grad(u, xi)).collect::<Result<Vec<_>>>()?;
        let mut acc = NodalField::zeros(u.len());
        for g in &grads {
            acc.axpy(1.0, g);
        }
        acc.scale(1.0 / samples.len() as f64);
        Ok(acc)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic hash of a tuple of integers, used to key every random stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5851_f42d_4c95_7f2d, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

/// Stable 64-bit hash of a label (FNV-1a), for keying streams by name.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Counter-based sample source: draw `j` of iteration `k` depends only on
/// `(seed, k, j)`, never on how many draws happened before.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleStream {
    seed: u64,
}

impl SampleStream {
    pub fn new(seed: u64) -> Self {
        SampleStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, iteration: u64, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, iteration, index]))
    }

    pub fn sample<O: StochasticOracle + ?Sized>(&self, oracle: &O, iteration: u64, index: u64) -> O::Sample {
        oracle.draw(&mut self.rng(iteration, index))
    }

    /// `count` draws of one iteration.
    pub fn batch<O: StochasticOracle + ?Sized>(&self, oracle: &O, iteration: u64, count: usize) -> Vec<O::Sample> {
        (0..count as u64).map(|j| self.sample(oracle, iteration, j)).collect()
    }
}

/// Frozen evaluation set shared by every method and iteration of an experiment.
pub fn evaluation_samples<O: StochasticOracle + ?Sized>(oracle: &O, seed: u64, count: usize) -> Vec<O::Sample> {
    SampleStream::new(derive_seed(&[seed, label_hash("evaluation")])).batch(oracle, 0, count)
}

/// Sample mean of `F(u, xi_j)` evaluated in parallel, reduced in sample order.
pub fn empirical_smooth<O: StochasticOracle + ?Sized>(
    oracle: &O,
    u: &NodalField,
    samples: &[O::Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(usage("empirical objective needs at least one sample"));
    }
    let values = samples.par_iter().map(|s| oracle.smooth_value(u, s)).collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / samples.len() as f64)
}

/// `(1/N) sum_j F(u, xi_j) + beta * sum_i w_i |u_i|`
pub fn empirical_objective<O: StochasticOracle + ?Sized>(
    oracle: &O,
    u: &NodalField,
    samples: &[O::Sample],
) -> Result<f64> {
    empirical_objective_split(oracle, u, u, samples)
}

/// Same as [`empirical_objective`] with the `L1` term taken at `z`, i.e. the
/// split objective `f(u) + g(z)` of the constrained reformulation.
pub fn empirical_objective_split<O: StochasticOracle + ?Sized>(
    oracle: &O,
    u: &NodalField,
    z: &NodalField,
    samples: &[O::Sample],
) -> Result<f64> {
    let smooth = empirical_smooth(oracle, u, samples)?;
    Ok(smooth + oracle.composite().value(z, oracle.weights())?)
}

// ---------------------------------------------------------------------------
// Elliptic control problem
// ---------------------------------------------------------------------------

/// Sparse distributed control of `-div(a(x, xi) grad y) = u`, `y = 0` on the
/// boundary, with tracking functional
/// `F(u, xi) = 1/2 ||y(u, xi) - y_d||_M^2 + alpha/2 ||u||_W^2`.
#[derive(Clone, Debug)]
pub struct EllipticInstance {
    mesh: Arc<StructuredMesh>,
    alpha: f64,
    composite: Composite,
    y_d: NodalField,
    cg: CgConfig,
}

/// Piecewise constant target: `-1` on the open square `(0.25, 0.75)^2`, `+1`
/// elsewhere, including the square's edges.
pub fn checkerboard_target(mesh: &StructuredMesh) -> NodalField {
    let inside = |t: f64| t > 0.25 && t < 0.75;
    mesh.interpolate(|x| if inside(x[0]) && inside(x[1]) { -1.0 } else { 1.0 })
}

impl EllipticInstance {
    pub fn new(
        mesh: Arc<StructuredMesh>,
        alpha: f64,
        beta: f64,
        y_d: NodalField,
        u_min: f64,
        u_max: f64,
    ) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(usage(format!("alpha = {alpha} must be nonnegative")));
        }
        if y_d.len() != mesh.num_nodes() {
            return Err(usage("desired state does not match the mesh"));
        }
        let composite = Composite::new(beta, u_min, u_max)?;
        Ok(EllipticInstance { mesh, alpha, composite, y_d, cg: CgConfig::default() })
    }

    /// The checkerboard tracking problem with controls in `[-6, 6]`.
    pub fn standard(h: f64, alpha: f64, beta: f64) -> Result<Self> {
        let mesh = Arc::new(crate::fem::build_mesh(h)?);
        let y_d = checkerboard_target(&mesh);
        EllipticInstance::new(mesh, alpha, beta, y_d, -6.0, 6.0)
    }

    pub fn with_cg(mut self, cg: CgConfig) -> Self {
        self.cg = cg;
        self
    }

    pub fn mesh(&self) -> &Arc<StructuredMesh> {
        &self.mesh
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn desired_state(&self) -> &NodalField {
        &self.y_d
    }

    fn check(&self, u: &NodalField) -> Result<()> {
        if u.len() != self.mesh.num_nodes() {
            return Err(usage(format!("control has {} values, mesh has {} nodes", u.len(), self.mesh.num_nodes())));
        }
        Ok(())
    }

    pub fn state(&self, u: &NodalField, xi: &SampleXi) -> Result<NodalField> {
        self.check(u)?;
        solve_state_with(&assemble(&self.mesh, xi), u, &self.cg)
    }

    /// `alpha u + W^{-1} M p` with `p` the adjoint state; this is the exact
    /// gradient of [`Self::value`] in the lumped inner product.
    pub fn grad(&self, u: &NodalField, xi: &SampleXi) -> Result<NodalField> {
        self.check(u)?;
        let ops = assemble(&self.mesh, xi);
        let y = solve_state_with(&ops, u, &self.cg)?;
        let p = solve_adjoint_with(&ops, &y, &self.y_d, &self.cg)?;
        let mp = matvec(self.mesh.mass(), p.as_slice())?;
        let w = self.mesh.lumped().as_slice();
        Ok(NodalField::from_fn(u.len(), |i| self.alpha * u[i] + mp[i] / w[i]))
    }

    pub fn value(&self, u: &NodalField, xi: &SampleXi) -> Result<f64> {
        let y = self.state(u, xi)?;
        let e = y.sub(&self.y_d);
        let me = matvec(self.mesh.mass(), e.as_slice())?;
        let tracking: f64 = e.iter().zip(&me).map(|(a, b)| a * b).sum();
        let reg = wdot(u, u, self.mesh.lumped())?;
        Ok(0.5 * tracking + 0.5 * self.alpha * reg)
    }
}

impl StochasticOracle for EllipticInstance {
    type Sample = SampleXi;

    fn dim(&self) -> usize {
        self.mesh.num_nodes()
    }

    fn weights(&self) -> &Weights {
        self.mesh.lumped()
    }

    fn composite(&self) -> Composite {
        self.composite
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SampleXi {
        SampleXi(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
    }

    fn grad(&self, u: &NodalField, xi: &SampleXi) -> Result<NodalField> {
        EllipticInstance::grad(self, u, xi)
    }

    fn smooth_value(&self, u: &NodalField, xi: &SampleXi) -> Result<f64> {
        self.value(u, xi)
    }
}

// ---------------------------------------------------------------------------
// Synthetic quadratic problem
// ---------------------------------------------------------------------------

/// `f(u) = 1/2 ||A u - b||^2 + alpha/2 ||u||^2` in the Euclidean inner
/// product, observed through gradients corrupted by `N(0, sigma^2 I)` noise.
#[derive(Clone, Debug)]
pub struct QuadraticInstance {
    a: DMatrix<f64>,
    b: DVector<f64>,
    alpha: f64,
    sigma: f64,
    composite: Composite,
    weights: Weights,
}

impl QuadraticInstance {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        alpha: f64,
        beta: f64,
        u_min: f64,
        u_max: f64,
        sigma: f64,
    ) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(usage(format!("A has {} rows but b has {} entries", a.nrows(), b.len())));
        }
        if !(alpha >= 0.0) || !(sigma >= 0.0) {
            return Err(usage("alpha and sigma must be nonnegative"));
        }
        let composite = Composite::new(beta, u_min, u_max)?;
        let weights = Weights::uniform(a.ncols());
        Ok(QuadraticInstance { a, b, alpha, sigma, composite, weights })
    }

    /// Seeded random instance: `A` is `m x n` with `N(0, 1/m)` entries and
    /// `b = A u_true + 0.1 e` for a half-sparse `u_true` inside `[-2, 2]`.
    pub fn random(n: usize, m: usize, seed: u64, alpha: f64, beta: f64, sigma: f64, bound: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (m as f64).sqrt();
        let a = DMatrix::from_fn(m, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let u_true = DVector::from_fn(n, |i, _| if i % 2 == 0 { 0.0 } else { rng.random_range(-2.0..2.0) });
        let noise = DVector::from_fn(m, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let b = &a * u_true + noise;
        QuadraticInstance::new(a, b, alpha, beta, -bound, bound, sigma)
    }

    /// Same data with a different Tikhonov weight.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        QuadraticInstance { alpha, ..self.clone() }
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        QuadraticInstance { sigma, ..self.clone() }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn exact_grad(&self, u: &NodalField) -> NodalField {
        let uv = DVector::from_column_slice(u.as_slice());
        let r = &self.a * &uv - &self.b;
        let g = self.a.tr_mul(&r) + uv * self.alpha;
        NodalField::from_vec(g.as_slice().to_vec())
    }

    pub fn exact_value(&self, u: &NodalField) -> f64 {
        let uv = DVector::from_column_slice(u.as_slice());
        let r = &self.a * &uv - &self.b;
        0.5 * r.norm_squared() + 0.5 * self.alpha * uv.norm_squared()
    }

    /// `f(u) + g(z)`
    pub fn objective_split(&self, u: &NodalField, z: &NodalField) -> f64 {
        self.exact_value(u) + self.composite.beta * z.iter().map(|x| x.abs()).sum::<f64>()
    }

    /// `lambda_max(A^T A) + alpha` by power iteration.
    pub fn lipschitz(&self) -> f64 {
        let ata = self.a.tr_mul(&self.a);
        let n = ata.ncols();
        let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let w = &ata * &v;
            let next = w.norm();
            if next == 0.0 {
                return self.alpha;
            }
            v = w / next;
            if (next - lambda).abs() <= 1e-14 * next {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda + self.alpha
    }
}

impl StochasticOracle for QuadraticInstance {
    type Sample = NodalField;

    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn weights(&self) -> &Weights {
        &self.weights
    }

    fn composite(&self) -> Composite {
        self.composite
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> NodalField {
        NodalField::from_fn(self.dim(), |_| self.sigma * rng.sample::<f64, _>(StandardNormal))
    }

    fn grad(&self, u: &NodalField, noise: &NodalField) -> Result<NodalField> {
        if u.len() != self.dim() || noise.len() != self.dim() {
            return Err(usage("quadratic oracle: dimension mismatch"));
        }
        Ok(self.exact_grad(u).add(noise))
    }

    /// The exact part is shared by every sample, so it is computed once.
    fn batch_grad(&self, u: &NodalField, noises: &[NodalField]) -> Result<NodalField> {
        if u.len() != self.dim() || noises.iter().any(|e| e.len() != self.dim()) {
            return Err(usage("quadratic oracle: dimension mismatch"));
        }
        if noises.is_empty() {
            return Err(usage("batch gradient needs at least one sample"));
        }
        let mut mean = NodalField::zeros(self.dim());
        for e in noises {
            mean.axpy(1.0, e);
        }
        mean.scale(1.0 / noises.len() as f64);
        Ok(self.exact_grad(u).add(&mean))
    }

    fn smooth_value(&self, u: &NodalField, _noise: &NodalField) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(usage("quadratic oracle: dimension mismatch"));
        }
        Ok(self.exact_value(u))
    }
}

/// Minimizer of the deterministic composite problem.
#[derive(Clone, Debug)]
pub struct ReferenceOptimum {
    pub u: NodalField,
    pub objective: f64,
    /// Final prox-gradient mapping norm `L ||u - T(u)||`.
    pub residual: f64,
    pub iterations: usize,
}

/// Exact-gradient proximal gradient with step `1/L`, run until the
/// prox-gradient residual drops to `1e-12` (at most `10^6` iterations).
pub fn reference_optimum(inst: &QuadraticInstance) -> Result<ReferenceOptimum> {
    const TOL: f64 = 1e-12;
    const MAX_ITER: usize = 1_000_000;
    let l = inst.lipschitz();
    let comp = inst.composite;
    let mut u = NodalField::zeros(inst.dim());
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_ITER {
        let g = inst.exact_grad(&u);
        let next = comp.prox(&NodalField::lin_comb(1.0, &u, -1.0 / l, &g), 1.0 / l);
        residual = l * next.sub(&u).iter().map(|x| x * x).sum::<f64>().sqrt();
        u = next;
        if residual <= TOL {
            let objective = inst.objective_split(&u, &u);
            return Ok(ReferenceOptimum { u, objective, residual, iterations: it });
        }
    }
    Err(Error::NonConvergence { iterations: MAX_ITER, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_mesh;

    fn kkt_violation(inst: &QuadraticInstance, u: &NodalField) -> f64 {
        // independent check of 0 in grad f(u) + beta d|u| + N_[lo,hi](u)
        let g = inst.exact_grad(u);
        let c = inst.composite();
        let mut worst = 0.0f64;
        for i in 0..u.len() {
            let (ui, gi) = (u[i], g[i]);
            let v = if ui == 0.0 {
                (gi.abs() - c.beta).max(0.0)
            } else if ui >= c.hi {
                (gi + c.beta).max(0.0)
            } else if ui <= c.lo {
                (-(gi - c.beta)).max(0.0)
            } else {
                (gi + c.beta * ui.signum()).abs()
            };
            worst = worst.max(v);
        }
        worst
    }

    #[test]
    fn reference_optimum_trivial_instances() {
        let id = DMatrix::identity(4, 4);
        let inst = QuadraticInstance::new(id.clone(), DVector::zeros(4), 1.0, 0.0, -1.0, 1.0, 0.0).unwrap();
        let opt = reference_optimum(&inst).unwrap();
        assert!(opt.u.max_abs() == 0.0 && opt.objective == 0.0);

        let inst = QuadraticInstance::new(id, DVector::from_element(4, 2.0), 0.0, 1.0, -6.0, 6.0, 0.0).unwrap();
        let opt = reference_optimum(&inst).unwrap();
        for v in opt.u.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_optimum_satisfies_kkt() {
        let inst = QuadraticInstance::random(10, 20, 3, 0.1, 0.05, 0.0, 1.0).unwrap();
        let opt = reference_optimum(&inst).unwrap();
        assert!(kkt_violation(&inst, &opt.u) <= 1e-10);
    }

    #[test]
    fn lipschitz_matches_dense_eigenvalue() {
        let inst = QuadraticInstance::random(12, 30, 1, 0.5, 0.0, 0.0, 6.0).unwrap();
        let ata = inst.matrix().tr_mul(inst.matrix());
        let lmax = ata.symmetric_eigen().eigenvalues.max() + 0.5;
        assert!((inst.lipschitz() - lmax).abs() <= 1e-9 * lmax);
    }

    #[test]
    fn quadratic_gradient_lipschitz_bound() {
        let inst = QuadraticInstance::random(8, 16, 2, 0.3, 0.0, 0.0, 6.0).unwrap();
        let l = inst.lipschitz();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let u = NodalField::from_fn(8, |_| rng.random_range(-3.0..3.0));
            let v = NodalField::from_fn(8, |_| rng.random_range(-3.0..3.0));
            let dg = inst.exact_grad(&u).sub(&inst.exact_grad(&v));
            let norm = |x: &NodalField| x.iter().map(|t| t * t).sum::<f64>().sqrt();
            assert!(norm(&dg) <= l * norm(&u.sub(&v)) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn noiseless_gradient_matches_dense_formula() {
        let inst = QuadraticInstance::random(5, 7, 9, 0.2, 0.0, 0.0, 6.0).unwrap();
        let u = NodalField::from_vec(vec![0.5, -1.0, 0.0, 2.0, 0.1]);
        let noise = inst.draw(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(noise.max_abs() == 0.0);
        let g = inst.grad(&u, &noise).unwrap();
        // dense oracle: A^T (A u - b) + alpha u, accumulated by hand
        let (a, b) = (inst.matrix(), inst.rhs());
        for j in 0..5 {
            let mut expect = 0.2 * u[j];
            for i in 0..7 {
                let ri: f64 = (0..5).map(|k| a[(i, k)] * u[k]).sum::<f64>() - b[i];
                expect += a[(i, j)] * ri;
            }
            assert!((g[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn consistent_least_squares_has_zero_gradient() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let u = DVector::from_vec(vec![0.7, -0.3]);
        let b = &a * &u;
        let inst = QuadraticInstance::new(a, b, 0.0, 0.0, -6.0, 6.0, 0.0).unwrap();
        let g = inst.exact_grad(&NodalField::from_vec(vec![0.7, -0.3]));
        assert!(g.max_abs() < 1e-14);
    }

    #[test]
    fn noisy_gradient_mean_is_unbiased() {
        let n = 6;
        let sigma = 0.5;
        let inst = QuadraticInstance::random(n, 10, 4, 0.1, 0.0, sigma, 6.0).unwrap();
        let u = NodalField::from_vec(vec![0.3; n]);
        let exact = inst.exact_grad(&u);
        let stream = SampleStream::new(77);
        let count = 100_000;
        let mut mean = NodalField::zeros(n);
        for j in 0..count {
            let s = stream.sample(&inst, 0, j);
            mean.axpy(1.0 / count as f64, &inst.grad(&u, &s).unwrap());
        }
        let bound = 4.0 * sigma * (n as f64 / count as f64).sqrt();
        for i in 0..n {
            assert!((mean[i] - exact[i]).abs() <= bound, "component {i}");
        }
    }

    #[test]
    fn quadratic_batch_gradient_matches_sample_mean() {
        let inst = QuadraticInstance::random(7, 9, 4, 0.3, 0.1, 0.5, 6.0).unwrap();
        let u = NodalField::from_fn(7, |i| 0.1 * i as f64 - 0.2);
        let noises = SampleStream::new(1).batch(&inst, 0, 13);
        let mut mean = NodalField::zeros(7);
        for e in &noises {
            mean.axpy(1.0 / 13.0, &inst.grad(&u, e).unwrap());
        }
        assert!(inst.batch_grad(&u, &noises).unwrap().sub(&mean).max_abs() < 1e-13);
        assert!(inst.batch_grad(&u, &[]).is_err());
    }

    #[test]
    fn sample_stream_is_counter_based() {
        let inst = EllipticInstance::standard(0.25, 1e-3, 0.0).unwrap();
        let s = SampleStream::new(12);
        let a = s.sample(&inst, 3, 5);
        let _ = s.sample(&inst, 3, 4);
        assert_eq!(a, s.sample(&inst, 3, 5));
        assert_ne!(a, s.sample(&inst, 3, 6));
        assert_ne!(a, SampleStream::new(13).sample(&inst, 3, 5));
        assert!(a.0.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn checkerboard_target_values() {
        let mesh = build_mesh(0.25).unwrap();
        let yd = checkerboard_target(&mesh);
        for (x, v) in mesh.nodes().iter().zip(yd.iter()) {
            let expect = if *x == [0.5, 0.5] { -1.0 } else { 1.0 };
            assert_eq!(*v, expect, "{x:?}");
        }
    }

    #[test]
    fn elliptic_zero_cases() {
        let mesh = Arc::new(build_mesh(0.125).unwrap());
        let n = mesh.num_nodes();
        let inst = EllipticInstance::new(mesh, 0.0, 0.0, NodalField::zeros(n), -6.0, 6.0).unwrap();
        let xi = SampleXi([0.3, -0.5, 0.1, 0.9]);
        let zero = NodalField::zeros(n);
        assert_eq!(inst.value(&zero, &xi).unwrap(), 0.0);
        assert_eq!(inst.grad(&zero, &xi).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn elliptic_gradient_is_affine_in_control() {
        let inst = EllipticInstance::standard(0.125, 0.0, 0.0).unwrap();
        let n = inst.dim();
        let xi = SampleXi([0.3, -0.5, 0.1, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u1 = NodalField::from_fn(n, |_| rng.random_range(-2.0..2.0));
        let u2 = NodalField::from_fn(n, |_| rng.random_range(-2.0..2.0));
        let g = |u: &NodalField| EllipticInstance::grad(&inst, u, &xi).unwrap();
        let mut combo = g(&u1.add(&u2));
        combo.axpy(-1.0, &g(&u1));
        combo.axpy(-1.0, &g(&u2));
        combo.axpy(1.0, &g(&NodalField::zeros(n)));
        assert!(combo.max_abs() < 1e-9);
    }

    #[test]
    fn elliptic_value_nonnegative_and_empirical_examples() {
        let mesh = Arc::new(build_mesh(0.125).unwrap());
        let n = mesh.num_nodes();
        // all-ones target has unit mass norm
        let inst = EllipticInstance::new(mesh, 1e-3, 0.25, NodalField::constant(n, 1.0), -6.0, 6.0).unwrap();
        let samples = evaluation_samples(&inst, 1, 8);
        let zero = NodalField::zeros(n);
        let v = empirical_objective(&inst, &zero, &samples).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let ones = NodalField::constant(n, 1.0);
        let split = empirical_objective_split(&inst, &zero, &ones, &samples).unwrap();
        assert!((split - (0.5 + 0.25)).abs() < 1e-12);
        assert!(empirical_objective(&inst, &zero, &samples[..0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = NodalField::from_fn(n, |_| rng.random_range(-6.0..6.0));
        let fast = empirical_objective(&inst, &u, &samples).unwrap();
        // reordering oracle: reverse accumulation order
        let mut acc = 0.0;
        for s in samples.iter().rev() {
            acc += inst.value(&u, s).unwrap();
        }
        let slow = acc / samples.len() as f64 + 0.25 * wl1(&u, inst.weights()).unwrap();
        assert!((fast - slow).abs() <= 1e-12 * fast.abs());
        assert!(fast >= 0.0);
    }

    #[test]
    fn composite_prox_is_clamped_soft_threshold() {
        let c = Composite::new(0.5, -1.0, 2.0).unwrap();
        let p = c.prox(&NodalField::from_vec(vec![-3.0, 0.2, 1.0, 5.0]), 2.0);
        assert_eq!(p.as_slice(), &[-1.0, 0.0, 0.0, 2.0]);
        assert!(Composite::new(-1.0, 0.0, 1.0).is_err());
        assert!(Composite::new(0.0, 1.0, 1.0).is_err());
    }
}
