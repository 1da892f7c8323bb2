//! Weighted discrete L2 geometry on nodal fields.
//!
//! Every inner product, norm and proximal map in the crate is taken with
//! respect to a diagonal weight vector (the lumped P1 mass), so the splitting
//! subproblems decouple node by node.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

/// Nodal values of a function on a mesh (or coordinates of a plain vector).
///
/// Controls, states, adjoints, multipliers and gradients all live here; dual
/// quantities are stored through their Riesz representatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodalField(Vec<f64>);

impl NodalField {
    pub fn zeros(n: usize) -> Self {
        NodalField(vec![0.0; n])
    }

    pub fn constant(n: usize, value: f64) -> Self {
        NodalField(vec![value; n])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        NodalField(values)
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Self {
        NodalField((0..n).map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self <- self + a * x`
    pub fn axpy(&mut self, a: f64, x: &NodalField) {
        debug_assert_eq!(self.len(), x.len());
        for (yi, xi) in self.0.iter_mut().zip(&x.0) {
            *yi += a * xi;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.0.iter_mut().for_each(|x| *x *= a);
    }

    pub fn scaled(&self, a: f64) -> NodalField {
        NodalField(self.0.iter().map(|x| a * x).collect())
    }

    /// `a * x + b * y`
    pub fn lin_comb(a: f64, x: &NodalField, b: f64, y: &NodalField) -> NodalField {
        debug_assert_eq!(x.len(), y.len());
        NodalField(x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + b * yi).collect())
    }

    pub fn sub(&self, other: &NodalField) -> NodalField {
        NodalField::lin_comb(1.0, self, -1.0, other)
    }

    pub fn add(&self, other: &NodalField) -> NodalField {
        NodalField::lin_comb(1.0, self, 1.0, other)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl Index<usize> for NodalField {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for NodalField {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for NodalField {
    fn from(v: Vec<f64>) -> Self {
        NodalField(v)
    }
}

/// Strictly positive diagonal weights defining the discrete inner product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(i) = w.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(usage(format!("weight {i} is not strictly positive: {}", w[i])));
        }
        Ok(Weights(w))
    }

    /// Unit weights, i.e. the Euclidean inner product.
    pub fn uniform(n: usize) -> Self {
        Weights(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Sum of the weights (the domain measure for lumped mass).
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

fn check_len(n: usize, m: usize, what: &str) -> Result<()> {
    if n != m {
        return Err(usage(format!("{what}: length mismatch ({n} vs {m})")));
    }
    Ok(())
}

/// Weighted inner product `sum_i w_i a_i b_i`.
pub fn wdot(a: &NodalField, b: &NodalField, w: &Weights) -> Result<f64> {
    check_len(a.len(), b.len(), "wdot")?;
    check_len(a.len(), w.len(), "wdot")?;
    Ok(a.0.iter().zip(&b.0).zip(&w.0).map(|((x, y), wi)| wi * x * y).sum())
}

pub fn wnorm(a: &NodalField, w: &Weights) -> Result<f64> {
    Ok(wdot(a, a, w)?.sqrt())
}

/// Weighted `L1` norm `sum_i w_i |a_i|`.
pub fn wl1(a: &NodalField, w: &Weights) -> Result<f64> {
    check_len(a.len(), w.len(), "wl1")?;
    Ok(a.0.iter().zip(&w.0).map(|(x, wi)| wi * x.abs()).sum())
}

/// Clamp every entry into `[lo, hi]`.
pub fn project_box(a: &NodalField, lo: f64, hi: f64) -> Result<NodalField> {
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(usage(format!("project_box: empty box [{lo}, {hi}]")));
    }
    Ok(NodalField(a.0.iter().map(|x| x.clamp(lo, hi)).collect()))
}

#[inline]
pub(crate) fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Entrywise `sign(a_i) * max(|a_i| - t, 0)`, the proximal map of `t * |.|`.
///
/// Because the weights are diagonal this is also the prox of `t * wl1` in the
/// weighted geometry.
pub fn soft_threshold(a: &NodalField, t: f64) -> Result<NodalField> {
    if !(t >= 0.0) {
        return Err(usage(format!("soft_threshold: negative threshold {t}")));
    }
    Ok(NodalField(a.0.iter().map(|&x| shrink(x, t)).collect()))
}

/// Per-node thresholds, used by the adaptive baseline.
pub fn soft_threshold_each(a: &NodalField, t: &[f64]) -> Result<NodalField> {
    check_len(a.len(), t.len(), "soft_threshold_each")?;
    if let Some(bad) = t.iter().find(|x| !(**x >= 0.0)) {
        return Err(usage(format!("soft_threshold_each: negative threshold {bad}")));
    }
    Ok(NodalField(a.0.iter().zip(t).map(|(&x, &ti)| shrink(x, ti)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(v: &[f64]) -> NodalField {
        NodalField::from_vec(v.to_vec())
    }

    #[test]
    fn wdot_of_ones_is_total_weight() {
        let w = Weights::new(vec![0.25, 0.125, 0.125, 0.5]).unwrap();
        let one = NodalField::constant(4, 1.0);
        assert_eq!(wdot(&one, &one, &w).unwrap(), 1.0);
        assert_eq!(wnorm(&one, &w).unwrap(), 1.0);
        assert_eq!(wdot(&NodalField::zeros(4), &one, &w).unwrap(), 0.0);
        assert_eq!(wnorm(&NodalField::zeros(4), &w).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        let w = Weights::uniform(3);
        let err = wdot(&NodalField::zeros(3), &NodalField::zeros(2), &w).unwrap_err();
        assert!(matches!(err, crate::Error::Usage(_)));
        assert!(wnorm(&NodalField::zeros(4), &w).is_err());
    }

    #[test]
    fn weights_reject_nonpositive() {
        assert!(Weights::new(vec![1.0, 0.0]).is_err());
        assert!(Weights::new(vec![1.0, -1.0]).is_err());
        assert!(Weights::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn project_box_examples() {
        let p = project_box(&field(&[-8.0, 0.0, 8.0]), -6.0, 6.0).unwrap();
        assert_eq!(p.as_slice(), &[-6.0, 0.0, 6.0]);
        let inside = field(&[-1.0, 0.5, 5.9]);
        assert_eq!(project_box(&inside, -6.0, 6.0).unwrap(), inside);
        assert!(project_box(&inside, 1.0, -1.0).is_err());
    }

    #[test]
    fn soft_threshold_examples() {
        let s = soft_threshold(&field(&[1.0, -0.2, 0.3]), 0.3).unwrap();
        assert!((s[0] - 0.7).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);
        let a = field(&[1.0, -0.2, 0.3]);
        assert_eq!(soft_threshold(&a, 0.0).unwrap(), a);
        assert!(soft_threshold(&a, -0.1).is_err());
    }

    #[test]
    fn soft_threshold_matches_grid_minimizer() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = 0.17;
        let grid: Vec<f64> = (0..=4000).map(|i| -2.0 + 1e-3 * i as f64).collect();
        for _ in 0..200 {
            let a: f64 = rng.random_range(-1.0..1.0);
            let obj = |z: f64| t * z.abs() + 0.5 * (z - a) * (z - a);
            let best = grid.iter().copied().min_by(|x, y| obj(*x).partial_cmp(&obj(*y)).unwrap()).unwrap();
            let z = soft_threshold(&field(&[a]), t).unwrap()[0];
            assert!((z - best).abs() <= 1e-3, "a={a} z={z} grid={best}");
        }
    }

    #[test]
    fn scaling_homogeneity() {
        let w = Weights::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = field(&[0.3, -1.7, 2.2, 0.01]);
        let lhs = wnorm(&a.scaled(-3.0), &w).unwrap();
        let rhs = 3.0 * wnorm(&a, &w).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs);
    }

    fn vec_and_weights() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..24).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(0.01f64..2.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn wdot_is_inner_product((a, b, w) in vec_and_weights(), c in -5.0f64..5.0) {
            let w = Weights::new(w).unwrap();
            let (a, b) = (field(&a), field(&b));
            let ab = wdot(&a, &b, &w).unwrap();
            let ba = wdot(&b, &a, &w).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
            let lin = wdot(&NodalField::lin_comb(c, &a, 1.0, &b), &b, &w).unwrap();
            let expect = c * ab + wdot(&b, &b, &w).unwrap();
            prop_assert!((lin - expect).abs() <= 1e-12 * (1.0 + lin.abs() + expect.abs()));
            prop_assert!(wdot(&a, &a, &w).unwrap() >= 0.0);
        }

        #[test]
        fn prox_maps_are_firmly_nonexpansive((a, b, w) in vec_and_weights(), t in 0.0f64..3.0) {
            let w = Weights::new(w).unwrap();
            let (a, b) = (field(&a), field(&b));
            let d = a.sub(&b);
            for (ta, tb) in [
                (project_box(&a, -6.0, 6.0).unwrap(), project_box(&b, -6.0, 6.0).unwrap()),
                (soft_threshold(&a, t).unwrap(), soft_threshold(&b, t).unwrap()),
            ] {
                let dt = ta.sub(&tb);
                let lhs = wdot(&dt, &dt, &w).unwrap();
                let rhs = wdot(&dt, &d, &w).unwrap();
                prop_assert!(lhs <= rhs + 1e-12 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn soft_threshold_subgradient_condition(a in prop::collection::vec(-10.0f64..10.0, 1..32), t in 0.0f64..3.0) {
            let a = field(&a);
            let z = soft_threshold(&a, t).unwrap();
            for i in 0..a.len() {
                let r = a[i] - z[i];
                if z[i] == 0.0 {
                    prop_assert!(r.abs() <= t + 1e-12);
                } else {
                    prop_assert!((r - t * z[i].signum()).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn projection_idempotent(a in prop::collection::vec(-10.0f64..10.0, 1..32)) {
            let p = project_box(&field(&a), -6.0, 6.0).unwrap();
            prop_assert_eq!(project_box(&p, -6.0, 6.0).unwrap(), p);
        }
    }
}
