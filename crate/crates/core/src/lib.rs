//! Faster stochastic linearized ADMM for nonsmooth composite convex problems
//! `min f(u) + g(u)` over a box, where `f = E[F(u, xi)]` is only reachable through a
//! stochastic first-order oracle and `g = beta * ||u||_1`.
//!
//! The crate ships the solver together with its main testbed, sparse optimal
//! control of `-div(a(x, xi) grad y) = u` on the unit square with a random
//! log-affine diffusion coefficient, discretized by P1 finite elements.
//!
//! Module map:
//! - [`hilbert`]: weighted inner products, box projection and soft thresholding.
//! - [`linsolve`]: CSR matrices and preconditioned conjugate gradients.
//! - [`fem`]: structured triangular mesh, assembly, state and adjoint solves.
//! - [`oracle`]: the stochastic first-order oracle contract and the problem instances.
//! - [`optimizer`]: the ADMM iteration, its parameter rules, and SPG/SSG/AdaSG baselines.
//! - [`harness`]: seeded multi-run experiments, statistics, and CSV/JSON/SVG output.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod error;
pub mod fem;
pub mod harness;
pub mod hilbert;
pub mod linsolve;
pub mod optimizer;
pub mod oracle;

pub use error::{Error, Result};
pub use hilbert::{NodalField, Weights};
