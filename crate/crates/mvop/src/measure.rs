//! Measures on boxes, tensor Gauss–Legendre quadrature, and the discrete
//! and continuous deformations `e^{t(x)} Π(n_a·x − q_a)^{m_a} dμ(x)`.

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::{DMatrix, DVector};

use crate::error::{MvopError, Result};
use crate::mindex::{enumerate_level, MultiIndex};

/// Tolerance for a negative-power factor vanishing at a node.
pub const POLE_TOL: f64 = 1e-13;

/// Per-axis factor `(1−s)^α (1+s)^β p(s)` on the reference variable `s ∈ [−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeight {
    pub alpha: f64,
    pub beta: f64,
    /// Coefficients of `p`, lowest degree first; empty means `p = 1`.
    pub poly: Vec<f64>,
}

impl AxisWeight {
    pub fn jacobi(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, poly: Vec::new() }
    }

    fn eval(&self, s: f64) -> f64 {
        let p = if self.poly.is_empty() {
            1.0
        } else {
            self.poly.iter().rev().fold(0.0, |acc, c| acc * s + c)
        };
        (1.0 - s).powf(self.alpha) * (1.0 + s).powf(self.beta) * p
    }
}

pub type WeightFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Weight {
    Constant(f64),
    /// Product of per-axis factors.
    Product(Vec<AxisWeight>),
    Callback(WeightFn),
    /// Explicit nodes and weights; the box is then only descriptive.
    Nodes { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl fmt::Debug for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weight::Constant(c) => write!(f, "Constant({c})"),
            Weight::Product(axes) => f.debug_tuple("Product").field(axes).finish(),
            Weight::Callback(_) => write!(f, "Callback(..)"),
            Weight::Nodes { points, .. } => write!(f, "Nodes({} points)", points.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeasureSpec {
    pub dim: usize,
    pub domain: Vec<(f64, f64)>,
    pub weight: Weight,
    pub description: String,
}

impl MeasureSpec {
    /// Lebesgue measure on `[−1, 1]^D`.
    pub fn lebesgue(dim: usize) -> Self {
        Self {
            dim,
            domain: vec![(-1.0, 1.0); dim],
            weight: Weight::Constant(1.0),
            description: format!("lebesgue[-1,1]^{dim}"),
        }
    }

    /// `Π (1−x_a)^α (1+x_a)^β` on `[−1, 1]^D`.
    pub fn jacobi(dim: usize, alpha: f64, beta: f64) -> Self {
        Self {
            dim,
            domain: vec![(-1.0, 1.0); dim],
            weight: Weight::Product(vec![AxisWeight::jacobi(alpha, beta); dim]),
            description: format!("jacobi({alpha},{beta})[-1,1]^{dim}"),
        }
    }

    pub fn with_callback(dim: usize, domain: Vec<(f64, f64)>, f: WeightFn, description: &str) -> Self {
        Self { dim, domain, weight: Weight::Callback(f), description: description.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.domain.len() != self.dim {
            return Err(MvopError::InvalidArgument("domain must have one interval per axis".into()));
        }
        for &(a, b) in &self.domain {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(MvopError::InvalidArgument(format!("bad interval [{a}, {b}]")));
            }
        }
        if let Weight::Product(axes) = &self.weight {
            if axes.len() != self.dim {
                return Err(MvopError::InvalidArgument("one axis weight per dimension".into()));
            }
        }
        Ok(())
    }

    /// Base weight at a point of the box.
    pub fn weight_at(&self, x: &[f64]) -> f64 {
        match &self.weight {
            Weight::Constant(c) => *c,
            Weight::Product(axes) => axes
                .iter()
                .zip(x)
                .zip(&self.domain)
                .map(|((w, &xi), &(a, b))| w.eval((2.0 * xi - a - b) / (b - a)))
                .product(),
            Weight::Callback(f) => f(x),
            Weight::Nodes { .. } => 1.0,
        }
    }

    /// Corners of the box.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        (0..1usize << self.dim)
            .map(|mask| {
                self.domain
                    .iter()
                    .enumerate()
                    .map(|(a, &(lo, hi))| if mask >> a & 1 == 1 { hi } else { lo })
                    .collect()
            })
            .collect()
    }

    /// Half-diagonal-free radius per axis: `max(|a_i|, |b_i|)`.
    pub fn axis_radius(&self) -> Vec<f64> {
        self.domain.iter().map(|&(a, b)| a.abs().max(b.abs())).collect()
    }
}

/// Nodes (flattened, stride `dim`) and weights including the base weight.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub dim: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: Vec<usize>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.nodes[j * self.dim..(j + 1) * self.dim]
    }

    /// Same nodes with weights multiplied by `f(x)`.
    pub fn reweighted(&self, f: impl Fn(&[f64]) -> f64) -> QuadratureRule {
        let weights = (0..self.len()).map(|j| self.weights[j] * f(self.node(j))).collect();
        QuadratureRule { weights, ..self.clone() }
    }
}

/// Tensor Gauss–Legendre rule on the box with the base weight applied at the nodes.
pub fn build_quadrature(spec: &MeasureSpec, per_axis_order: usize) -> Result<QuadratureRule> {
    spec.validate()?;
    if let Weight::Nodes { points, weights } = &spec.weight {
        if points.len() != weights.len() || points.iter().any(|p| p.len() != spec.dim) {
            return Err(MvopError::InvalidArgument("node list does not match weights".into()));
        }
        return Ok(QuadratureRule {
            dim: spec.dim,
            nodes: points.concat(),
            weights: weights.clone(),
            order: vec![points.len()],
        });
    }
    let order = NonZeroUsize::new(per_axis_order)
        .ok_or_else(|| MvopError::InvalidArgument("quadrature order must be ≥ 1".into()))?;
    let rule = GaussLegendre::new(order);
    let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let dim = spec.dim;
    let n1 = pairs.len();
    let total = n1.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut point = vec![0.0; dim];
    for flat in 0..total {
        let mut rest = flat;
        let mut w = 1.0;
        // Last axis varies fastest.
        for a in (0..dim).rev() {
            let (s, ws) = pairs[rest % n1];
            rest /= n1;
            let (lo, hi) = spec.domain[a];
            point[a] = 0.5 * ((hi - lo) * s + hi + lo);
            w *= 0.5 * (hi - lo) * ws;
        }
        let base = spec.weight_at(&point);
        if !base.is_finite() {
            return Err(MvopError::WeightEvaluation { node: point.clone() });
        }
        nodes.extend_from_slice(&point);
        weights.push(w * base);
    }
    Ok(QuadratureRule { dim, nodes, weights, order: vec![n1; dim] })
}

/// Discrete position `m` with directions `N` and offsets `q`, plus continuous times.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// Rows are the directions `n_a`.
    pub n: DMatrix<f64>,
    pub q: Vec<f64>,
    pub m: Vec<i32>,
    /// Coefficients `t_q` of `t(x) = Σ t_q x^q`.
    pub times: BTreeMap<MultiIndex, f64>,
}

impl FlowState {
    /// `N = I`, offsets `−2`, no deformation.
    pub fn zero(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim), vec![-2.0; dim])
    }

    pub fn new(n: DMatrix<f64>, q: Vec<f64>) -> Self {
        let dim = q.len();
        Self { n, q, m: vec![0; dim], times: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn direction(&self, a: usize) -> Vec<f64> {
        self.n.row(a).iter().copied().collect()
    }

    pub fn with_m(mut self, m: Vec<i32>) -> Self {
        self.m = m;
        self
    }

    /// Shifted discrete position `m + delta`.
    pub fn stepped(&self, delta: &[i32]) -> Self {
        let mut s = self.clone();
        for (m, d) in s.m.iter_mut().zip(delta) {
            *m += d;
        }
        s
    }

    /// Adds `value` to the time `t_q`.
    pub fn with_time(mut self, q: &MultiIndex, value: f64) -> Self {
        *self.times.entry(q.clone()).or_insert(0.0) += value;
        self
    }

    /// Level-`k` block `t_[k]` in the graded order.
    pub fn time_level(&self, k: usize) -> DVector<f64> {
        let basis = enumerate_level(self.dim(), k);
        DVector::from_iterator(
            basis.len(),
            basis.indices.iter().map(|q| self.times.get(q).copied().unwrap_or(0.0)),
        )
    }

    /// Sets all times from level blocks `t_[1] … t_[K]`.
    pub fn with_time_levels(mut self, levels: &[DVector<f64>]) -> Self {
        for (i, block) in levels.iter().enumerate() {
            let basis = enumerate_level(self.dim(), i + 1);
            for (q, &v) in basis.indices.iter().zip(block.iter()) {
                if v != 0.0 {
                    self.times.insert(q.clone(), v);
                }
            }
        }
        self
    }

    /// `t(x)`.
    pub fn t_of(&self, x: &[f64]) -> f64 {
        self.times.iter().map(|(q, v)| v * q.monomial(x)).sum()
    }

    pub fn validate(&self, spec: &MeasureSpec) -> Result<()> {
        let d = self.dim();
        if self.n.shape() != (d, d) || self.m.len() != d || spec.dim != d {
            return Err(MvopError::InvalidArgument("flow state dimensions disagree".into()));
        }
        let det = self.n.determinant();
        if det.abs() < 1e-12 {
            return Err(MvopError::InvalidArgument("direction matrix N is singular".into()));
        }
        if let Some(a) = self.q.iter().position(|&q| q == 0.0) {
            return Err(MvopError::InvalidArgument(format!("offset q_{} must be nonzero", a + 1)));
        }
        for a in 0..d {
            if self.m[a] < 0 {
                let n = self.direction(a);
                for c in spec.corners() {
                    let v: f64 = n.iter().zip(&c).map(|(x, y)| x * y).sum();
                    if v.abs() >= self.q[a].abs() {
                        return Err(MvopError::ValidityRegion);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `e^{t(x)} Π_a (n_a·x − q_a)^{m_a}`.
pub fn deformed_weight(x: &[f64], state: &FlowState) -> Result<f64> {
    let mut w = state.t_of(x).exp();
    for a in 0..state.dim() {
        let m = state.m[a];
        if m == 0 {
            continue;
        }
        let f: f64 = state.n.row(a).iter().zip(x).map(|(n, xi)| n * xi).sum::<f64>() - state.q[a];
        if m < 0 && f.abs() < POLE_TOL {
            return Err(MvopError::PoleOnSupport { node: x.to_vec() });
        }
        w *= f.powi(m);
    }
    Ok(w)
}

/// Quadrature weights of the deformed measure.
pub fn deformed_weights(rule: &QuadratureRule, state: &FlowState) -> Result<Vec<f64>> {
    (0..rule.len())
        .map(|j| deformed_weight(rule.node(j), state).map(|w| w * rule.weights[j]))
        .collect()
}

/// Neumaier-compensated sum in iteration order.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `Σ_j w_j · weight(x_j) · f(x_j)`.
pub fn integrate(rule: &QuadratureRule, state: &FlowState, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let w = deformed_weights(rule, state)?;
    Ok(neumaier_sum((0..rule.len()).map(|j| w[j] * f(rule.node(j)))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_exactness() {
        let rule = build_quadrature(&MeasureSpec::lebesgue(1), 2).unwrap();
        let v = integrate(&rule, &FlowState::zero(1), |x| x[0] * x[0]).unwrap();
        assert_relative_eq!(v, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn square_integrals() {
        let rule = build_quadrature(&MeasureSpec::lebesgue(2), 4).unwrap();
        let z = FlowState::zero(2);
        assert_relative_eq!(integrate(&rule, &z, |_| 1.0).unwrap(), 4.0, epsilon = 1e-14);
        assert!(integrate(&rule, &z, |x| x[0] * x[1]).unwrap().abs() < 1e-15);
        assert_relative_eq!(integrate(&rule, &z, |x| x[0] * x[0]).unwrap(), 4.0 / 3.0, epsilon = 1e-14);
        let stepped = FlowState::new(DMatrix::identity(2, 2), vec![-2.0, -2.0]).with_m(vec![1, 0]);
        assert_relative_eq!(integrate(&rule, &stepped, |_| 1.0).unwrap(), 8.0, epsilon = 1e-14);
    }

    #[test]
    fn deformed_weight_examples() {
        let z = FlowState::zero(2);
        assert_eq!(deformed_weight(&[0.3, 0.4], &z).unwrap(), 1.0);
        let s = FlowState::new(DMatrix::identity(2, 2), vec![-2.0, 5.0]).with_m(vec![1, 0]);
        assert_eq!(deformed_weight(&[0.0, 0.0], &s).unwrap(), 2.0);
        let t = FlowState::zero(2).with_time(&MultiIndex::unit(2, 0), 0.7);
        assert_relative_eq!(deformed_weight(&[0.5, -0.2], &t).unwrap(), (0.35f64).exp());
    }

    #[test]
    fn pole_and_validity() {
        let s = FlowState::new(DMatrix::identity(1, 1), vec![0.5]).with_m(vec![-1]);
        assert!(matches!(deformed_weight(&[0.5], &s), Err(MvopError::PoleOnSupport { .. })));
        assert_eq!(s.validate(&MeasureSpec::lebesgue(1)), Err(MvopError::ValidityRegion));
        let bad = FlowState::new(DMatrix::identity(1, 1), vec![0.0]);
        assert!(bad.validate(&MeasureSpec::lebesgue(1)).is_err());
    }

    #[test]
    fn time_levels_round_trip() {
        let t = FlowState::zero(2).with_time_levels(&[
            DVector::from_vec(vec![0.1, 0.0]),
            DVector::from_vec(vec![0.0, 0.2, 0.3]),
        ]);
        assert_eq!(t.time_level(2).as_slice(), &[0.0, 0.2, 0.3]);
        assert_relative_eq!(t.t_of(&[2.0, 3.0]), 0.2 + 0.2 * 6.0 + 0.3 * 9.0);
    }
}
