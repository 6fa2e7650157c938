//! Discrete flows: connection matrices, resolvents, Christoffel formulas via
//! poised node sets, quasi-tau quotients and lattice identities.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blockmat::{
    last_quasi_determinant, max_abs, pivot_inverse, pseudo_inverse_full_column_rank, BlockMatrix,
};
use crate::error::{MvopError, Result};
use crate::measure::FlowState;
use crate::mvopr::{PolynomialSystem, SystemBuilder};
use crate::shift::vstack;

/// Reciprocal condition required of a sample matrix.
pub const POISED_RCOND: f64 = 1e-8;

/// Default number of resampling attempts.
pub const POISED_RETRIES: usize = 50;

/// Smallest admissible `|Q(x)|` when dividing by the transformation factor.
pub const DEGENERATE_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Affine hyperplane `n·x = q`; its linear factor is `n·x − q`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hyperplane {
    pub n: Vec<f64>,
    pub q: f64,
}

impl Hyperplane {
    pub fn new(n: Vec<f64>, q: f64) -> Self {
        Self { n, q }
    }

    pub fn factor(&self, x: &[f64]) -> f64 {
        dot(&self.n, x) - self.q
    }
}

/// `Q(x) = Π_i (n⁽ⁱ⁾·x − q⁽ⁱ⁾)`.
pub fn product_factor(hps: &[Hyperplane], x: &[f64]) -> f64 {
    hps.iter().map(|h| h.factor(x)).product()
}

/// Nodes for the sample matrix at one level: hyperplane `i` carries `|[k+i]|` nodes.
#[derive(Debug, Clone, Serialize)]
pub struct NodeSet {
    pub hyperplanes: Vec<Hyperplane>,
    pub level: usize,
    pub nodes: Vec<Vec<Vec<f64>>>,
    pub rcond: f64,
    pub seed: u64,
}

impl NodeSet {
    pub fn all_nodes(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.nodes.iter().flatten()
    }

    /// Largest `|n⁽ⁱ⁾·p − q⁽ⁱ⁾|` over the nodes of each hyperplane.
    pub fn hyperplane_defect(&self) -> f64 {
        self.hyperplanes
            .iter()
            .zip(&self.nodes)
            .flat_map(|(h, ps)| ps.iter().map(move |p| h.factor(p).abs()))
            .fold(0.0, f64::max)
    }
}

/// Orthonormal basis of `n⊥`.
fn tangent_basis(n: &[f64]) -> Vec<DVector<f64>> {
    let d = n.len();
    let nv = DVector::from_column_slice(n).normalize();
    let mut basis: Vec<DVector<f64>> = vec![nv];
    for a in 0..d {
        let mut v = DVector::zeros(d);
        v[a] = 1.0;
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        if v.norm() > 1e-8 && basis.len() < d {
            basis.push(v.normalize());
        }
    }
    basis.into_iter().skip(1).collect()
}

fn sample_point(h: &Hyperplane, tangents: &[DVector<f64>], radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nn = dot(&h.n, &h.n);
    let mut p = DVector::from_column_slice(&h.n) * (h.q / nn);
    for t in tangents {
        p += t * rng.random_range(-radius..radius);
    }
    p.iter().copied().collect()
}

fn rcond(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.singular_values();
    if sv.max() > 0.0 {
        sv.min() / sv.max()
    } else {
        0.0
    }
}

/// Sample matrix with rows `P_[k] … P_[k+rows−1]` and one column per node.
pub fn sample_matrix(sys: &PolynomialSystem, k: usize, rows: usize, nodes: &[&Vec<f64>]) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = nodes
        .iter()
        .map(|p| {
            let parts: Vec<DVector<f64>> = (k..k + rows).map(|j| sys.p(j, p)).collect();
            let n = parts.iter().map(|v| v.len()).sum();
            DVector::from_iterator(n, parts.iter().flat_map(|v| v.iter().copied()))
        })
        .collect();
    let nr = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(nr, cols.len(), |i, j| cols[j][i])
}

/// Draws a poised node set for level `k` and the given hyperplanes.
pub fn poised_nodes(
    sys: &PolynomialSystem,
    hyperplanes: &[Hyperplane],
    k: usize,
    radius: f64,
    seed: u64,
    retries: usize,
) -> Result<NodeSet> {
    let m = hyperplanes.len();
    if m == 0 {
        return Err(MvopError::InvalidArgument("need at least one hyperplane".into()));
    }
    if k + m > sys.levels() {
        return Err(MvopError::OutOfRange { requested: k + m, available: sys.levels() });
    }
    for h in hyperplanes {
        if h.n.len() != sys.dim() || dot(&h.n, &h.n) == 0.0 {
            return Err(MvopError::InvalidArgument("hyperplane normal must be a nonzero D-vector".into()));
        }
    }
    let tangents: Vec<Vec<DVector<f64>>> = hyperplanes.iter().map(|h| tangent_basis(&h.n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..retries.max(1) {
        let nodes: Vec<Vec<Vec<f64>>> = hyperplanes
            .iter()
            .zip(&tangents)
            .enumerate()
            .map(|(i, (h, t))| (0..sys.size(k + i)).map(|_| sample_point(h, t, radius, &mut rng)).collect())
            .collect();
        let flat: Vec<&Vec<f64>> = nodes.iter().flatten().collect();
        let rc = rcond(&sample_matrix(sys, k, m, &flat));
        if rc > POISED_RCOND {
            return Ok(NodeSet { hyperplanes: hyperplanes.to_vec(), level: k, nodes, rcond: rc, seed });
        }
    }
    Err(MvopError::PoisednessFailure { attempts: retries.max(1) })
}

/// `(Π_i n⁽ⁱ⁾·Λ)_[k],[k+m]`.
pub fn product_lambda(sys: &PolynomialSystem, hps: &[Hyperplane], k: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::identity(sys.size(k), sys.size(k));
    for (i, h) in hps.iter().enumerate() {
        acc *= sys.nlam(&h.n, k + i);
    }
    acc
}

/// Christoffel transform of a system by `Q(x) = Π(n⁽ⁱ⁾·x − q⁽ⁱ⁾)` built from sample matrices.
#[derive(Debug, Clone)]
pub struct ChristoffelTransform {
    pub hyperplanes: Vec<Hyperplane>,
    /// `omega[k][j] = ω_[k],[k+j]`, `j = 0 … m`.
    pub omega: Vec<Vec<DMatrix<f64>>>,
    /// `(TH)_[k]`.
    pub th: Vec<DMatrix<f64>>,
    pub nodes: Vec<NodeSet>,
}

impl ChristoffelTransform {
    pub fn steps(&self) -> usize {
        self.hyperplanes.len()
    }

    pub fn levels(&self) -> usize {
        self.th.len()
    }

    /// `(TP)_[k](x) = Q(x)⁻¹ Σ_j ω_[k],[k+j] P_[k+j](x)`.
    pub fn tp(&self, sys: &PolynomialSystem, k: usize, x: &[f64]) -> Result<DVector<f64>> {
        let qx = product_factor(&self.hyperplanes, x);
        if qx.abs() < DEGENERATE_TOL {
            return Err(MvopError::DegeneratePoint);
        }
        let mut acc = DVector::zeros(sys.size(k));
        for (j, w) in self.omega[k].iter().enumerate() {
            acc += w * sys.p(k + j, x);
        }
        Ok(acc / qx)
    }

    /// `(TC)_[k](z) = Σ_j ω_[k],[k+j] C_[k+j](z)`.
    pub fn tc(&self, sys: &PolynomialSystem, k: usize, z: &[f64]) -> Result<DVector<f64>> {
        let c = sys.cauchy_upto(k + self.steps(), z, &[], false)?;
        let mut acc = DVector::zeros(sys.size(k));
        for (j, w) in self.omega[k].iter().enumerate() {
            acc += w * &c[k + j];
        }
        Ok(acc)
    }
}

/// Multi-step Christoffel formula for levels `0 … kmax`.
pub fn m_step_christoffel(
    sys: &PolynomialSystem,
    hyperplanes: &[Hyperplane],
    kmax: usize,
    radius: f64,
    seed: u64,
) -> Result<ChristoffelTransform> {
    let m = hyperplanes.len();
    let mut omega = Vec::new();
    let mut th = Vec::new();
    let mut sets = Vec::new();
    for k in 0..=kmax {
        let ns = poised_nodes(sys, hyperplanes, k, radius, seed.wrapping_add(k as u64), POISED_RETRIES)?;
        let flat: Vec<&Vec<f64>> = ns.all_nodes().collect();
        let joint = sample_matrix(sys, k, m, &flat);
        let top = sample_matrix(sys, k + m, 1, &flat);
        let lead = product_lambda(sys, hyperplanes, k);
        let inv = pivot_inverse(&joint).map_err(|_| MvopError::PoisednessFailure { attempts: 1 })?;
        let coeffs = -(&lead * top * inv);
        let mut row = Vec::with_capacity(m + 1);
        let mut c = 0;
        for j in 0..m {
            let sz = sys.size(k + j);
            row.push(coeffs.columns(c, sz).into_owned());
            c += sz;
        }
        row.push(lead);
        th.push(&row[0] * sys.h(k));
        omega.push(row);
        sets.push(ns);
    }
    Ok(ChristoffelTransform { hyperplanes: hyperplanes.to_vec(), omega, th, nodes: sets })
}

/// Single-hyperplane case.
pub fn elementary_darboux(
    sys: &PolynomialSystem,
    hyperplane: &Hyperplane,
    kmax: usize,
    radius: f64,
    seed: u64,
) -> Result<ChristoffelTransform> {
    m_step_christoffel(sys, std::slice::from_ref(hyperplane), kmax, radius, seed)
}

/// `|TP_{k−1}(x)P_{k−1}(q) − [P_k(x)P_{k−1}(q) − P_k(q)P_{k−1}(x)]/(x − q)|` in one dimension,
/// with `transformed` the system of `(x − q) dμ`.
pub fn darboux_1d_residual(
    sys: &PolynomialSystem,
    transformed: &PolynomialSystem,
    q: f64,
    k: usize,
    x: f64,
) -> Result<f64> {
    if sys.dim() != 1 || k == 0 || k >= sys.levels() {
        return Err(MvopError::InvalidArgument("needs a one-dimensional system and 1 ≤ k < levels".into()));
    }
    if (x - q).abs() < DEGENERATE_TOL {
        return Err(MvopError::DegeneratePoint);
    }
    let p = |j: usize, y: f64| sys.p(j, &[y])[0];
    let lhs = transformed.p(k - 1, &[x])[0] * p(k - 1, q);
    let rhs = (p(k, x) * p(k - 1, q) - p(k, q) * p(k - 1, x)) / (x - q);
    Ok((lhs - rhs).abs() / (1.0 + rhs.abs()))
}

/// Resolvent from the factors: `ω = (TS) Q(Λ) S⁻¹`, blocks `ω_[k],[k+j]`.
pub fn resolvent_direct(
    sys: &PolynomialSystem,
    transformed: &PolynomialSystem,
    hyperplanes: &[Hyperplane],
    kmax: usize,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let m = hyperplanes.len();
    let lv = sys.levels().min(transformed.levels());
    if kmax + m >= lv {
        return Err(MvopError::OutOfRange { requested: kmax + m + 1, available: lv });
    }
    let mut q = BlockMatrix::identity(sys.dim(), sys.layout.sizes()[..lv].to_vec());
    for h in hyperplanes {
        let mut f = BlockMatrix::identity(sys.dim(), sys.layout.sizes()[..lv].to_vec());
        *f.dense_mut() *= -h.q;
        for k in 0..lv - 1 {
            f.set_block(k, k + 1, &sys.nlam(&h.n, k));
        }
        q = q.mul(&f);
    }
    let w = transformed.factors.s.truncate(lv).mul(&q).mul(&sys.factors.s_inv.truncate(lv));
    Ok((0..=kmax).map(|k| (0..=m).map(|j| w.block(k, k + j)).collect()).collect())
}

/// Connection blocks `ρ_[k]` (`k ≥ 1`, index 0 unused) and `α_[k]` for one step along `a`.
#[derive(Debug, Clone)]
pub struct Connection {
    pub rho: Vec<DMatrix<f64>>,
    pub alpha: Vec<DMatrix<f64>>,
    /// Largest disagreement between the H-route and the β-route.
    pub route_gap: f64,
}

/// `ρ_[k] = H_[k](n·Λ)ᵀ(TH_[k−1])⁻¹ = β_[k] − Tβ_[k]` and
/// `α_[k] = (TH_[k])H_[k]⁻¹ = (Tβ_[k])(n·Λ) − (n·Λ)β_[k+1] − q`.
pub fn connection_matrices(
    sys: &PolynomialSystem,
    stepped: &PolynomialSystem,
    n: &[f64],
    q: f64,
) -> Result<Connection> {
    let lv = sys.levels().min(stepped.levels());
    if lv < 2 {
        return Err(MvopError::OutOfRange { requested: 2, available: lv });
    }
    let mut rho = vec![DMatrix::zeros(0, 0)];
    let mut alpha = Vec::new();
    let mut gap: f64 = 0.0;
    for k in 0..lv - 1 {
        let a1 = stepped.h(k) * sys.h_inv(k);
        let mut a2 = -(sys.nlam(n, k) * sys.beta(k + 1));
        if k > 0 {
            a2 += stepped.beta(k) * sys.nlam(n, k - 1);
        }
        for i in 0..a2.nrows() {
            a2[(i, i)] -= q;
        }
        gap = gap.max(max_abs(&(&a1 - a2)) / (1.0 + max_abs(&a1)));
        alpha.push(a1);
        if k > 0 {
            let r1 = sys.h(k) * sys.nlam(n, k - 1).transpose() * stepped.h_inv(k - 1);
            let r2 = sys.beta(k) - stepped.beta(k);
            gap = gap.max(max_abs(&(&r1 - r2)) / (1.0 + max_abs(&r1)));
            rho.push(r1);
        }
    }
    Ok(Connection { rho, alpha, route_gap: gap })
}

/// `M = I + Σ ρ_[k]` on the subdiagonal, `levels` block levels.
pub fn connection_block_matrix(sys: &PolynomialSystem, c: &Connection, levels: usize) -> BlockMatrix {
    let mut m = BlockMatrix::identity(sys.dim(), sys.layout.sizes()[..levels].to_vec());
    for k in 1..levels {
        m.set_block(k, k - 1, &c.rho[k]);
    }
    m
}

/// `ω = diag α_[k] + (n·Λ)` on the superdiagonal, `levels` block levels.
pub fn resolvent_block_matrix(sys: &PolynomialSystem, c: &Connection, n: &[f64], levels: usize) -> BlockMatrix {
    let mut w = BlockMatrix::from_layout(&sys.layout, levels);
    for k in 0..levels {
        w.set_block(k, k, &c.alpha[k]);
        if k + 1 < levels {
            w.set_block(k, k + 1, &sys.nlam(n, k));
        }
    }
    w
}

fn shifted_jacobi(sys: &PolynomialSystem, n: &[f64], q: f64) -> Result<BlockMatrix> {
    let mut j = sys.jacobi_matrix(n)?.j;
    let t = j.total();
    for i in 0..t {
        j.dense_mut()[(i, i)] -= q;
    }
    Ok(j)
}

/// `α_[k] = Θ_*((n·J − q)^{[k+1]})` and `ρ_[k] = (n·J)_[k],[k−1] Θ_*((n·J − q)^{[k]})⁻¹`.
pub fn resolvent_quasideterminant(
    sys: &PolynomialSystem,
    n: &[f64],
    q: f64,
    k: usize,
) -> Result<(Option<DMatrix<f64>>, DMatrix<f64>)> {
    let j = shifted_jacobi(sys, n, q)?;
    if k + 1 > j.levels() {
        return Err(MvopError::OutOfRange { requested: k + 1, available: j.levels() });
    }
    let alpha = last_quasi_determinant(&j.truncate(k + 1).into_dense(), sys.size(k))?;
    let rho = if k == 0 {
        None
    } else {
        let prev = last_quasi_determinant(&j.truncate(k).into_dense(), sys.size(k - 1))?;
        Some(sys.jacobi_block(n, k, k - 1) * pivot_inverse(&prev)?)
    };
    Ok((rho, alpha))
}

fn leading_gap(a: &BlockMatrix, b: &BlockMatrix, levels: usize) -> f64 {
    let n = a.offset(levels);
    let d = a.dense().view((0, 0), (n, n)) - b.dense().view((0, 0), (n, n));
    max_abs(&d)
}

/// LU/UL interchange residuals `‖(n·J − q) − Mω‖` and `‖(T(n·J) − q) − ωM‖`.
pub fn lu_ul_residuals(sys: &PolynomialSystem, stepped: &PolynomialSystem, n: &[f64], q: f64) -> Result<(f64, f64)> {
    let c = connection_matrices(sys, stepped, n, q)?;
    let j = shifted_jacobi(sys, n, q)?;
    let tj = shifted_jacobi(stepped, n, q)?;
    let lv = j.levels();
    let m = connection_block_matrix(sys, &c, lv);
    let w = resolvent_block_matrix(sys, &c, n, lv);
    let lu = leading_gap(&j, &m.mul(&w), lv);
    let ul = leading_gap(&tj, &w.mul(&m), lv - 1);
    Ok((lu, ul))
}

/// Systems on the discrete lattice around a base state, factorized on demand.
#[derive(Debug)]
pub struct LatticeFamily {
    pub builder: SystemBuilder,
    pub base: FlowState,
    cache: Mutex<HashMap<Vec<i32>, Arc<PolynomialSystem>>>,
}

impl LatticeFamily {
    pub fn new(builder: SystemBuilder, base: FlowState) -> Self {
        Self { builder, base, cache: Mutex::new(HashMap::new()) }
    }

    pub fn dim(&self) -> usize {
        self.builder.dim()
    }

    /// System at `m + delta`.
    pub fn at(&self, delta: &[i32]) -> Result<Arc<PolynomialSystem>> {
        if let Some(s) = self.cache.lock().unwrap().get(delta) {
            return Ok(s.clone());
        }
        let s = Arc::new(self.builder.system(&self.base.stepped(delta))?);
        self.cache.lock().unwrap().insert(delta.to_vec(), s.clone());
        Ok(s)
    }

    pub fn unit(&self, a: usize) -> Vec<i32> {
        let mut e = vec![0; self.dim()];
        e[a] = 1;
        e
    }

    fn plus(&self, delta: &[i32], a: usize) -> Vec<i32> {
        let mut d = delta.to_vec();
        d[a] += 1;
        d
    }

    pub fn direction(&self, a: usize) -> Vec<f64> {
        self.base.direction(a)
    }

    pub fn offset(&self, a: usize) -> f64 {
        self.base.q[a]
    }

    /// Connection blocks for the step `delta → delta + e_a`.
    pub fn connection(&self, delta: &[i32], a: usize) -> Result<Connection> {
        let s = self.at(delta)?;
        let t = self.at(&self.plus(delta, a))?;
        connection_matrices(&s, &t, &self.direction(a), self.offset(a))
    }
}

/// `P_[k](N⁻¹q)` as `−[NΛ]⁺_[k−1][TH]_[k−1]H_[k−1]⁻¹` applied recursively from `P_[0] = 1`.
pub fn tau_quotient_p(family: &LatticeFamily, k: usize) -> Result<DVector<f64>> {
    let d = family.dim();
    let sys = family.at(&vec![0; d])?;
    let stepped: Vec<Arc<PolynomialSystem>> = (0..d).map(|a| family.at(&family.unit(a))).collect::<Result<_>>()?;
    if k >= sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let mut p = DVector::from_element(1, 1.0);
    for j in 0..k {
        let nl = sys.shifts.stacked_dot(&family.base.n, j);
        let pinv = pseudo_inverse_full_column_rank(&nl)?;
        let th = vstack(&stepped.iter().map(|s| s.h(j).clone()).collect::<Vec<_>>());
        p = -(pinv * th * sys.h_inv(j) * p);
    }
    Ok(p)
}

/// `C_[k](q)` with `N = I` as the ordered sum over `1 ≤ a₁ ≤ … ≤ a_k ≤ D` of
/// `ρ⁽ᵃᵏ⁾_[k] ⋯ ρ⁽ᵃ¹⁾_[1] (T⁻¹H_[0])`, with `ρ⁽ᵃ⁾_[j] = (U_aH_[j])Λ_aᵀ(U_{a+1}H_[j−1])⁻¹`
/// and `U_a = Π_{b ≥ a} T_b⁻¹`.
pub fn tau_quotient_c(family: &LatticeFamily, k: usize) -> Result<DVector<f64>> {
    let d = family.dim();
    if family.base.n != DMatrix::identity(d, d) {
        return Err(MvopError::InvalidArgument("second-kind quotient needs N = I".into()));
    }
    let u: Vec<Arc<PolynomialSystem>> = (0..=d)
        .map(|a| {
            let delta: Vec<i32> = (0..d).map(|b| if b >= a { -1 } else { 0 }).collect();
            family.at(&delta)
        })
        .collect::<Result<_>>()?;
    if k >= u[0].levels() {
        return Err(MvopError::OutOfRange { requested: k, available: u[0].levels() });
    }
    let rho = |a: usize, j: usize| -> DMatrix<f64> { u[a].h(j) * u[a].lam(a, j - 1).transpose() * u[a + 1].h_inv(j - 1) };
    let start = DVector::from_element(1, u[0].h(0)[(0, 0)]);
    // ending[a]: sum over sequences whose last axis is a
    let mut ending: Vec<DVector<f64>> = Vec::new();
    for j in 1..=k {
        let mut prefix = if j == 1 { start.clone() } else { DVector::zeros(ending[0].len()) };
        ending = (0..d)
            .map(|a| {
                if j > 1 {
                    prefix += &ending[a];
                }
                rho(a, j) * &prefix
            })
            .collect();
    }
    let total = if k == 0 { start } else { ending.iter().skip(1).fold(ending[0].clone(), |s, v| s + v) };
    let sign = if (k + d).is_multiple_of(2) { 1.0 } else { -1.0 };
    Ok(total * sign)
}

/// `K^{(ℓ)}(x,y) − (n·x − q)TK^{(ℓ−1)}(x,y) − P_[ℓ−1](x)ᵀH_[ℓ−1]⁻¹TP_[ℓ−1](y)`.
pub fn cd_transform_residual(
    sys: &PolynomialSystem,
    stepped: &PolynomialSystem,
    hyperplane: &Hyperplane,
    l: usize,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    if l == 0 || l >= sys.levels() {
        return Err(MvopError::OutOfRange { requested: l, available: sys.levels() });
    }
    let k = sys.cd_kernel(l, x, y)?;
    let tk = stepped.cd_kernel(l - 1, x, y)?;
    let tail = (sys.p(l - 1, x).transpose() * sys.h_inv(l - 1) * stepped.p(l - 1, y))[0];
    Ok((k - hyperplane.factor(x) * tk - tail).abs())
}

/// `K^{(ℓ)}(x,y) − Q(x)TK^{(ℓ)}(x,y) + Σ_{i=ℓ−m}^{ℓ−1} Σ_{j=ℓ}^{i+m} TP_[i](y)ᵀ TH_[i]⁻¹ ω_[i],[j] P_[j](x)`.
pub fn cd_transform_residual_m(
    sys: &PolynomialSystem,
    transformed: &PolynomialSystem,
    hyperplanes: &[Hyperplane],
    omega: &[Vec<DMatrix<f64>>],
    l: usize,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    let m = hyperplanes.len();
    if l < m || l + 1 > omega.len() + m || l >= transformed.levels() {
        return Err(MvopError::OutOfRange { requested: l, available: omega.len() });
    }
    let k = sys.cd_kernel(l, x, y)?;
    let mut rhs = product_factor(hyperplanes, x) * transformed.cd_kernel(l, x, y)?;
    for i in (l - m)..l {
        let tpy = transformed.p(i, y);
        for j in l..=(i + m) {
            rhs -= (tpy.transpose() * transformed.h_inv(i) * &omega[i][j - i] * sys.p(j, x))[0];
        }
    }
    Ok((k - rhs).abs())
}

/// Residuals of the discrete Toda equations at level `k` on the patch `m, m+e_a, m+e_b, m+e_a+e_b`:
/// `(H-form, β-form)`.
pub fn discrete_toda_residuals(family: &LatticeFamily, a: usize, b: usize, k: usize) -> Result<(f64, f64)> {
    let d = family.dim();
    let z = vec![0; d];
    let ea = family.unit(a);
    let eb = family.unit(b);
    let eab: Vec<i32> = ea.iter().zip(&eb).map(|(x, y)| x + y).collect();
    let s = family.at(&z)?;
    let ta = family.at(&ea)?;
    let tb = family.at(&eb)?;
    let tab = family.at(&eab)?;
    if k == 0 || k + 2 > s.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: s.levels() });
    }
    let na = family.direction(a);
    let nb = family.direction(b);
    let qb = family.offset(b);

    let lhs = tab.h(k) * tb.h_inv(k) - ta.h(k) * s.h_inv(k);
    let rhs = s.nlam(&na, k) * s.h(k + 1) * s.nlam(&nb, k).transpose() * tb.h_inv(k)
        - ta.h(k) * s.nlam(&nb, k - 1).transpose() * tab.h_inv(k - 1) * s.nlam(&na, k - 1);
    let h_res = max_abs(&(lhs - &rhs)) / (1.0 + max_abs(&rhs));

    let alpha_b = tb.h(k) * s.h_inv(k);
    let da = ta.beta(k) - s.beta(k);
    let tb_da = tab.beta(k) - tb.beta(k);
    let mut ta_alpha = -(s.nlam(&nb, k - 1) * ta.beta(k));
    if k > 1 {
        ta_alpha += tab.beta(k - 1) * s.nlam(&nb, k - 2);
    }
    for i in 0..ta_alpha.nrows() {
        ta_alpha[(i, i)] -= qb;
    }
    let l = &alpha_b * &da;
    let r = tb_da * ta_alpha;
    let b_res = max_abs(&(&l - &r)) / (1.0 + max_abs(&l));
    Ok((h_res, b_res))
}

/// Residuals of `T_b(n_aJ)ω_b = ω_b(n_aJ)`, `M_bT_b(n_aJ) = (n_aJ)M_b`,
/// `(T_aω_b)ω_a = (T_bω_a)ω_b` and `M_a(T_aM_b) = M_b(T_bM_a)`.
pub fn discrete_laxzs_residuals(family: &LatticeFamily, a: usize, b: usize) -> Result<[f64; 4]> {
    let d = family.dim();
    let z = vec![0; d];
    let ea = family.unit(a);
    let eb = family.unit(b);
    let s = family.at(&z)?;
    let tb = family.at(&eb)?;
    let na = family.direction(a);
    let nb = family.direction(b);
    let ca = family.connection(&z, a)?;
    let cb = family.connection(&z, b)?;
    let ta_cb = family.connection(&ea, b)?;
    let tb_ca = family.connection(&eb, a)?;
    let ja = s.jacobi_matrix(&na)?.j;
    let tja = tb.jacobi_matrix(&na)?.j;
    let lv = ja.levels();
    let cmp = lv - 1;

    let wb = resolvent_block_matrix(&s, &cb, &nb, lv);
    let mb = connection_block_matrix(&s, &cb, lv);
    let wa = resolvent_block_matrix(&s, &ca, &na, lv);
    let ma = connection_block_matrix(&s, &ca, lv);
    let ta_wb = resolvent_block_matrix(&s, &ta_cb, &nb, lv);
    let ta_mb = connection_block_matrix(&s, &ta_cb, lv);
    let tb_wa = resolvent_block_matrix(&s, &tb_ca, &na, lv);
    let tb_ma = connection_block_matrix(&s, &tb_ca, lv);

    let r1 = leading_gap(&tja.mul(&wb), &wb.mul(&ja), cmp);
    let r2 = leading_gap(&mb.mul(&tja), &ja.mul(&mb), cmp);
    let r3 = leading_gap(&ta_wb.mul(&wa), &tb_wa.mul(&wb), cmp);
    let r4 = leading_gap(&ma.mul(&ta_mb), &mb.mul(&tb_ma), cmp);
    Ok([r1, r2, r3, r4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::MeasureSpec;
    use approx::assert_relative_eq;

    fn legendre(levels: usize) -> (SystemBuilder, PolynomialSystem, PolynomialSystem) {
        let b = SystemBuilder::new(MeasureSpec::lebesgue(1), 32, levels, 2).unwrap();
        let s = b.system(&FlowState::zero(1)).unwrap();
        let t = b.system(&FlowState::zero(1).stepped(&[1])).unwrap();
        (b, s, t)
    }

    #[test]
    fn first_alpha_is_two() {
        let (_, s, t) = legendre(3);
        let c = connection_matrices(&s, &t, &[1.0], -2.0).unwrap();
        assert_relative_eq!(c.alpha[0][(0, 0)], 2.0, epsilon = 1e-13);
        assert!(c.route_gap < 1e-10);
        let (_, a0) = resolvent_quasideterminant(&s, &[1.0], -2.0, 0).unwrap();
        assert_relative_eq!(a0[(0, 0)], 2.0, epsilon = 1e-13);
    }

    #[test]
    fn one_dim_node_is_the_point() {
        let (_, s, _) = legendre(3);
        let ns = poised_nodes(&s, &[Hyperplane::new(vec![2.0], -3.0)], 0, 1.0, 1, 5).unwrap();
        assert_eq!(ns.nodes[0], vec![vec![-1.5]]);
    }

    #[test]
    fn elementary_first_level() {
        let (_, s, t) = legendre(4);
        let ct = elementary_darboux(&s, &Hyperplane::new(vec![1.0], -2.0), 2, 1.0, 3).unwrap();
        assert_relative_eq!(ct.th[0][(0, 0)], 4.0, epsilon = 1e-13);
        assert_relative_eq!(t.h(0)[(0, 0)], 4.0, epsilon = 1e-13);
        let x = [0.37];
        assert_relative_eq!(ct.tp(&s, 2, &x).unwrap()[0], t.p(2, &x)[0], epsilon = 1e-12);
    }
}
