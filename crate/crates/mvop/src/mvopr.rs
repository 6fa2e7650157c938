//! Orthogonal polynomials, second-kind functions, Jacobi matrices,
//! three-term relations, Christoffel–Darboux kernels and Baker functions.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::blockmat::{block_ldl_factorize, max_abs, pivot_inverse, BlockMatrix, CholeskyFactors};
use crate::error::{MvopError, Result};
use crate::measure::{build_quadrature, deformed_weights, neumaier_sum, FlowState, MeasureSpec, QuadratureRule};
use crate::mindex::Layout;
use crate::moments::{assemble, MomentMatrix};
use crate::shift::ShiftFamily;

/// Minimum of `Π_a |z_a − y_a|` over the nodes for a Cauchy transform.
pub const SUPPORT_GAP: f64 = 1e-6;

/// Smallest admissible `|n·(x − y)|` in the kernel formulas.
pub const DIRECTION_GAP: f64 = 1e-8;

/// Shared ingredients for building systems of one base measure.
#[derive(Debug, Clone)]
pub struct SystemBuilder {
    pub spec: MeasureSpec,
    pub rule: Arc<QuadratureRule>,
    pub layout: Arc<Layout>,
    pub shifts: Arc<ShiftFamily>,
    pub usable: usize,
    pub buffer: usize,
}

impl SystemBuilder {
    pub fn new(spec: MeasureSpec, quad_order: usize, usable: usize, buffer: usize) -> Result<Self> {
        if usable < 1 {
            return Err(MvopError::InvalidArgument("need at least one usable level".into()));
        }
        let rule = Arc::new(build_quadrature(&spec, quad_order)?);
        let layout = Arc::new(Layout::new(spec.dim, usable + buffer));
        let shifts = Arc::new(ShiftFamily::new(&layout));
        Ok(Self { spec, rule, layout, shifts, usable, buffer })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn total_levels(&self) -> usize {
        self.usable + self.buffer
    }

    /// Factorized system of the measure deformed by `state`.
    pub fn system(&self, state: &FlowState) -> Result<PolynomialSystem> {
        state.validate(&self.spec)?;
        let w = deformed_weights(&self.rule, state)?;
        self.system_with_weights(state.clone(), w)
    }

    /// System for the same nodes with the weights multiplied by `f`.
    pub fn system_reweighted(&self, state: &FlowState, f: impl Fn(&[f64]) -> f64) -> Result<PolynomialSystem> {
        let mut w = deformed_weights(&self.rule, state)?;
        for (j, wj) in w.iter_mut().enumerate() {
            *wj *= f(self.rule.node(j));
        }
        self.system_with_weights(state.clone(), w)
    }

    fn system_with_weights(&self, state: FlowState, weights: Vec<f64>) -> Result<PolynomialSystem> {
        let moments = assemble(&self.layout, &self.rule, &weights, self.usable, self.buffer);
        let factors = block_ldl_factorize(&moments.g)?;
        Ok(PolynomialSystem {
            layout: self.layout.clone(),
            shifts: self.shifts.clone(),
            rule: self.rule.clone(),
            moments,
            factors,
            weights,
            state,
            p_nodes: OnceLock::new(),
        })
    }
}

/// Factorized moment matrix with the polynomial layer on top.
#[derive(Debug)]
pub struct PolynomialSystem {
    pub layout: Arc<Layout>,
    pub shifts: Arc<ShiftFamily>,
    pub rule: Arc<QuadratureRule>,
    pub moments: MomentMatrix,
    pub factors: CholeskyFactors,
    /// Quadrature weights of the deformed measure.
    pub weights: Vec<f64>,
    pub state: FlowState,
    p_nodes: OnceLock<DMatrix<f64>>,
}

/// Baker functions on one level.
#[derive(Debug, Clone)]
pub struct BakerFunctions {
    pub psi1: DVector<f64>,
    pub psi2: DVector<f64>,
    pub psi1_star: DVector<f64>,
    pub psi2_star: DVector<f64>,
}

/// Truncated `n·J` with its direction.
#[derive(Debug, Clone)]
pub struct JacobiTruncation {
    pub n: Vec<f64>,
    pub j: BlockMatrix,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PolynomialSystem {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Number of factorized levels `L + B`.
    pub fn levels(&self) -> usize {
        self.factors.levels()
    }

    pub fn usable(&self) -> usize {
        self.moments.usable
    }

    pub fn size(&self, k: usize) -> usize {
        self.layout.size(k)
    }

    fn check(&self, k: usize) -> Result<()> {
        if k >= self.levels() {
            return Err(MvopError::OutOfRange { requested: k, available: self.levels() });
        }
        Ok(())
    }

    pub fn h(&self, k: usize) -> &DMatrix<f64> {
        &self.factors.h[k]
    }

    pub fn h_inv(&self, k: usize) -> &DMatrix<f64> {
        &self.factors.h_inv[k]
    }

    /// `β_[k]`; zero-width for `k = 0`.
    pub fn beta(&self, k: usize) -> DMatrix<f64> {
        if k == 0 {
            return DMatrix::zeros(1, 0);
        }
        self.factors.beta(k)
    }

    /// `β⁽²⁾_[k] = S_[k],[k−2]`.
    pub fn beta2(&self, k: usize) -> DMatrix<f64> {
        if k < 2 {
            return DMatrix::zeros(self.size(k), 0);
        }
        self.factors.beta_j(k, 2)
    }

    /// `(Λ_a)_[k],[k+1]`.
    pub fn lam(&self, a: usize, k: usize) -> DMatrix<f64> {
        self.shifts.block(a, k)
    }

    /// `(n·Λ)_[k],[k+1]`.
    pub fn nlam(&self, n: &[f64], k: usize) -> DMatrix<f64> {
        self.shifts.dot_block(n, k)
    }

    /// `P_[k](x) = Σ_{ℓ≤k} S_[k],[ℓ] χ_[ℓ](x)`.
    pub fn p(&self, k: usize, x: &[f64]) -> DVector<f64> {
        let chi = self.layout.chi_upto(k + 1, x);
        let s = self.factors.s.dense();
        let off = self.layout.offset(k);
        s.view((off, 0), (self.size(k), chi.len())) * chi
    }

    pub fn eval_p(&self, k: usize, x: &[f64]) -> Result<DVector<f64>> {
        self.check(k)?;
        Ok(self.p(k, x))
    }

    /// `P` at every quadrature node: column `j` holds `P(y_j)` over all levels.
    pub fn p_at_nodes(&self) -> &DMatrix<f64> {
        self.p_nodes.get_or_init(|| {
            let n = self.rule.len();
            let total = self.layout.offset(self.levels());
            let mut chi = DMatrix::zeros(total, n);
            for j in 0..n {
                chi.set_column(j, &self.layout.chi_upto(self.levels(), self.rule.node(j)));
            }
            self.factors.s.dense() * chi
        })
    }

    /// `∫P_[k] P_[ℓ]ᵀ dμ` by quadrature.
    pub fn gram_block(&self, k: usize, l: usize) -> DMatrix<f64> {
        let pn = self.p_at_nodes();
        let pk = pn.rows(self.layout.offset(k), self.size(k));
        let pl = pn.rows(self.layout.offset(l), self.size(l));
        let w = DVector::from_column_slice(&self.weights);
        let weighted = DMatrix::from_fn(pl.nrows(), pl.ncols(), |i, j| pl[(i, j)] * w[j]);
        pk * weighted.transpose()
    }

    /// `(n·J)_[k],[ℓ]` from the explicit block formulas, `|k − ℓ| ≤ 1`, `k ≤ L+B−2`.
    pub fn jacobi_block(&self, n: &[f64], k: usize, l: usize) -> DMatrix<f64> {
        if l + 1 == k {
            self.h(k) * self.nlam(n, k - 1).transpose() * self.h_inv(k - 1)
        } else if l == k {
            let mut d = -(self.nlam(n, k) * self.beta(k + 1));
            if k > 0 {
                d += self.beta(k) * self.nlam(n, k - 1);
            }
            d
        } else if l == k + 1 {
            self.nlam(n, k)
        } else {
            DMatrix::zeros(self.size(k), self.size(l))
        }
    }

    /// `n·J` over levels `0 … L+B−2`.
    pub fn jacobi_matrix(&self, n: &[f64]) -> Result<JacobiTruncation> {
        if self.levels() < 2 {
            return Err(MvopError::OutOfRange { requested: 2, available: self.levels() });
        }
        let lv = self.levels() - 1;
        let mut j = BlockMatrix::from_layout(&self.layout, lv);
        for k in 0..lv {
            for l in k.saturating_sub(1)..(k + 2).min(lv) {
                j.set_block(k, l, &self.jacobi_block(n, k, l));
            }
        }
        Ok(JacobiTruncation { n: n.to_vec(), j })
    }

    /// `‖(n·x)P_[k] − [(nJ)_{k,k−1}P_{k−1} + (nJ)_{kk}P_k + (nΛ)P_{k+1}]‖_∞`.
    pub fn three_term_residual(&self, n: &[f64], k: usize, x: &[f64]) -> Result<f64> {
        self.check(k + 1)?;
        let pk = self.p(k, x);
        let mut rhs = self.jacobi_block(n, k, k) * &pk + self.nlam(n, k) * self.p(k + 1, x);
        if k > 0 {
            rhs += self.jacobi_block(n, k, k - 1) * self.p(k - 1, x);
        }
        Ok(max_abs(&(pk * dot(n, x) - rhs)))
    }

    /// `K^{(ℓ)}(x, y) = Σ_{k<ℓ} P_k(x)ᵀ H_k⁻¹ P_k(y)`.
    pub fn cd_kernel(&self, l: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        if l > self.levels() {
            return Err(MvopError::OutOfRange { requested: l, available: self.levels() });
        }
        Ok((0..l).map(|k| (self.p(k, x).transpose() * self.h_inv(k) * self.p(k, y))[0]).sum())
    }

    fn direction_gap(n: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
        let gap = dot(n, x) - dot(n, y);
        if gap.abs() < DIRECTION_GAP {
            return Err(MvopError::DegenerateDirection { gap });
        }
        Ok(gap)
    }

    /// Residual of the Christoffel–Darboux formula at level `ℓ ≥ 1`.
    pub fn cd_formula_residual(&self, l: usize, n: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(l)?;
        let gap = Self::direction_gap(n, x, y)?;
        let nl = self.nlam(n, l - 1);
        let hi = self.h_inv(l - 1);
        let num = ((&nl * self.p(l, x)).transpose() * hi * self.p(l - 1, y))[0]
            - (self.p(l - 1, x).transpose() * hi * &nl * self.p(l, y))[0];
        Ok((self.cd_kernel(l, x, y)? - num / gap).abs())
    }

    /// Cauchy transforms `∫P_[k](y) / Π_{a ∉ removed}(z_a − y_a) dμ(y)` for `k ≤ kmax`.
    pub fn cauchy_upto(&self, kmax: usize, z: &[f64], removed: &[usize], base_measure: bool) -> Result<Vec<DVector<f64>>> {
        self.check(kmax)?;
        let n = self.rule.len();
        let mut scale = Vec::with_capacity(n);
        let mut min_den = f64::INFINITY;
        for a in (0..self.dim()).filter(|a| !removed.contains(a)) {
            let (lo, hi) = (0..n).map(|j| self.rule.node(j)[a]).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if z[a] >= lo && z[a] <= hi {
                return Err(MvopError::TooCloseToSupport { point: z.to_vec() });
            }
        }
        for j in 0..n {
            let y = self.rule.node(j);
            let mut den = 1.0;
            for a in 0..self.dim() {
                if !removed.contains(&a) {
                    den *= z[a] - y[a];
                }
            }
            min_den = min_den.min(den.abs());
            let w = if base_measure { self.rule.weights[j] } else { self.weights[j] };
            scale.push(w / den);
        }
        if min_den < SUPPORT_GAP {
            return Err(MvopError::TooCloseToSupport { point: z.to_vec() });
        }
        let pn = self.p_at_nodes();
        Ok((0..=kmax)
            .map(|k| {
                let off = self.layout.offset(k);
                DVector::from_iterator(
                    self.size(k),
                    (0..self.size(k)).map(|i| neumaier_sum((0..n).map(|j| pn[(off + i, j)] * scale[j]))),
                )
            })
            .collect())
    }

    /// `C_[k](z)`.
    pub fn eval_c(&self, k: usize, z: &[f64]) -> Result<DVector<f64>> {
        Ok(self.cauchy_upto(k, z, &[], false)?.pop().unwrap())
    }

    /// Reduced second-kind function with the listed axes removed from the denominator.
    pub fn eval_c_reduced(&self, k: usize, removed: &[usize], z: &[f64]) -> Result<DVector<f64>> {
        Ok(self.cauchy_upto(k, z, removed, false)?.pop().unwrap())
    }

    /// `n·Ĉ_[k](z) = Σ_a n_a Ĉ_[k],a(z)` for `k ≤ kmax`.
    pub fn n_dot_c_hat(&self, kmax: usize, n: &[f64], z: &[f64]) -> Result<Vec<DVector<f64>>> {
        let mut acc: Vec<DVector<f64>> = (0..=kmax).map(|k| DVector::zeros(self.size(k))).collect();
        for (a, &na) in n.iter().enumerate() {
            if na == 0.0 {
                continue;
            }
            for (k, c) in self.cauchy_upto(kmax, z, &[a], false)?.into_iter().enumerate() {
                acc[k] += c * na;
            }
        }
        Ok(acc)
    }

    /// Residual of `(n·z)C_k = (nJ C)_k + n·Ĉ_k`.
    pub fn secondkind_three_term_residual(&self, n: &[f64], k: usize, z: &[f64]) -> Result<f64> {
        self.check(k + 1)?;
        let c = self.cauchy_upto(k + 1, z, &[], false)?;
        let ch = self.n_dot_c_hat(k, n, z)?;
        let mut rhs = self.jacobi_block(n, k, k) * &c[k] + self.nlam(n, k) * &c[k + 1] + &ch[k];
        if k > 0 {
            rhs += self.jacobi_block(n, k, k - 1) * &c[k - 1];
        }
        Ok(max_abs(&(&c[k] * dot(n, z) - rhs)))
    }

    /// `Q^{(ℓ)}(x, y) = Σ_{k<ℓ} C_k(x)ᵀ H_k⁻¹ C_k(y)`.
    pub fn q_kernel(&self, l: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        let cx = self.cauchy_upto(l - 1, x, &[], false)?;
        let cy = self.cauchy_upto(l - 1, y, &[], false)?;
        Ok((0..l).map(|k| (cx[k].transpose() * self.h_inv(k) * &cy[k])[0]).sum())
    }

    /// Residual of the second-kind Christoffel–Darboux formula.
    pub fn q_kernel_residual(&self, l: usize, n: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(l)?;
        let gap = Self::direction_gap(n, x, y)?;
        let cx = self.cauchy_upto(l, x, &[], false)?;
        let cy = self.cauchy_upto(l, y, &[], false)?;
        let hx = self.n_dot_c_hat(l - 1, n, x)?;
        let hy = self.n_dot_c_hat(l - 1, n, y)?;
        let nl = self.nlam(n, l - 1);
        let hi = self.h_inv(l - 1);
        let mut rhs = ((&nl * &cx[l]).transpose() * hi * &cy[l - 1])[0]
            - (cx[l - 1].transpose() * hi * &nl * &cy[l])[0];
        for k in 0..l {
            let hk = self.h_inv(k);
            rhs += (hx[k].transpose() * hk * &cy[k])[0] - (cx[k].transpose() * hk * &hy[k])[0];
        }
        let q: f64 = (0..l).map(|k| (cx[k].transpose() * self.h_inv(k) * &cy[k])[0]).sum();
        Ok((q * gap - rhs).abs())
    }

    /// `e^{t(z)} Π_a (n_a·z − q_a)^{m_a}`.
    pub fn baker_prefactor(&self, z: &[f64]) -> f64 {
        let st = &self.state;
        let mut pref = st.t_of(z).exp();
        for a in 0..self.dim() {
            pref *= (dot(&st.direction(a), z) - st.q[a]).powi(st.m[a]);
        }
        pref
    }

    /// `Ψ₁` at level `k`.
    pub fn psi1(&self, k: usize, z: &[f64]) -> DVector<f64> {
        self.p(k, z) * self.baker_prefactor(z)
    }

    /// Baker functions at level `k`.
    pub fn baker_functions(&self, k: usize, z: &[f64]) -> Result<BakerFunctions> {
        self.check(k)?;
        let pref = self.baker_prefactor(z);
        let p = self.p(k, z);
        let psi2 = self.eval_c(k, z)?;
        let c0 = self.cauchy_upto(k, z, &[], true)?.pop().unwrap();
        Ok(BakerFunctions {
            psi1: &p * pref,
            psi2,
            psi1_star: self.h_inv(k) * c0,
            psi2_star: self.h_inv(k) * p,
        })
    }
}

impl PolynomialSystem {
    /// `‖S G Sᵀ − H‖ / ‖G‖` on the first `levels` levels.
    pub fn factorization_residual(&self, levels: usize) -> Result<f64> {
        self.check(levels.saturating_sub(1))?;
        let g = self.moments.g.truncate(levels);
        let s = self.factors.s.truncate(levels);
        let h = self.factors.h_matrix().truncate(levels);
        let r = s.mul(&g).mul(&s.transpose()).sub(&h);
        Ok(max_abs(r.dense()) / max_abs(g.dense()))
    }

    /// `‖H_[k] − Θ_*(G^{[k+1]})‖ / ‖H_[k]‖`.
    pub fn quasi_tau_residual(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        let qd = self
            .moments
            .g
            .truncate(k + 1)
            .last_quasi_determinant()
            .map_err(|_| MvopError::SingularTruncation { level: k })?;
        Ok(max_abs(&(qd - self.h(k))) / max_abs(self.h(k)))
    }

    /// `‖∫P_[k] P_[ℓ]ᵀ dμ − δ_{kℓ}H_[k]‖ / ‖H_[max(k,ℓ)]‖` by quadrature.
    pub fn orthogonality_residual(&self, k: usize, l: usize) -> Result<f64> {
        self.check(k.max(l))?;
        let mut g = self.gram_block(k, l);
        if k == l {
            g -= self.h(k);
        }
        Ok(max_abs(&g) / max_abs(self.h(k.max(l))))
    }

    /// `K^{(ℓ)}(x, y_j)` at every quadrature node `y_j`.
    fn kernel_at_nodes(&self, l: usize, x: &[f64]) -> DVector<f64> {
        let pn = self.p_at_nodes();
        let mut out = DVector::zeros(self.rule.len());
        for k in 0..l {
            let c = self.h_inv(k) * self.p(k, x);
            out += pn.rows(self.layout.offset(k), self.size(k)).tr_mul(&c);
        }
        out
    }

    fn node_sum(&self, f: impl Fn(usize) -> f64) -> f64 {
        neumaier_sum((0..self.rule.len()).map(|j| self.weights[j] * f(j)))
    }

    /// `|∫K^{(ℓ)}(x, y)p(y) dμ(y) − p(x)|` for `p = coeffs·χ^{[ℓ]}`.
    pub fn cd_projection_residual(&self, l: usize, coeffs: &DVector<f64>, x: &[f64]) -> Result<f64> {
        self.check(l.saturating_sub(1))?;
        let n = self.layout.offset(l);
        if coeffs.len() != n {
            return Err(MvopError::InvalidArgument(format!("expected {n} coefficients")));
        }
        let kx = self.kernel_at_nodes(l, x);
        let values: Vec<f64> = (0..self.rule.len())
            .map(|j| coeffs.dot(&self.layout.chi_upto(l, self.rule.node(j))))
            .collect();
        let proj = self.node_sum(|j| kx[j] * values[j]);
        Ok((proj - coeffs.dot(&self.layout.chi_upto(l, x))).abs())
    }

    /// `|∫K^{(ℓ)}(x, z)K^{(ℓ)}(z, y) dμ(z) − K^{(ℓ)}(x, y)|`.
    pub fn cd_reproducing_residual(&self, l: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        let kxy = self.cd_kernel(l, x, y)?;
        let kx = self.kernel_at_nodes(l, x);
        let ky = self.kernel_at_nodes(l, y);
        Ok((self.node_sum(|j| kx[j] * ky[j]) - kxy).abs())
    }

    /// Relative defect of `(n·J)ᵀ = H⁻¹(n·J)H` on the leading `levels − 2` levels.
    pub fn jacobi_conjugation_residual(&self, n: &[f64]) -> Result<f64> {
        let jt = self.jacobi_matrix(n)?;
        let lv = jt.j.levels() - 1;
        let j = jt.j.truncate(lv);
        let h = self.factors.h_matrix().truncate(lv);
        let mut hinv = BlockMatrix::from_layout(&self.layout, lv);
        for k in 0..lv {
            hinv.set_block(k, k, self.h_inv(k));
        }
        let r = j.transpose().sub(&hinv.mul(&j).mul(&h));
        let mut worst: f64 = 0.0;
        for k in 0..lv {
            for l in 0..lv {
                let scale = max_abs(&j.block(l, k)).max(max_abs(&(self.h_inv(k) * j.block(k, l) * self.h(l))));
                worst = worst.max(max_abs(&r.block(k, l)) / scale.max(1.0));
            }
        }
        Ok(worst)
    }
}

/// `P_[ℓ](x)` as a Schur complement of the bordered truncated moment matrix.
pub fn eval_p_quasideterminant(moments: &MomentMatrix, l: usize, x: &[f64]) -> Result<DVector<f64>> {
    let lay = &moments.layout;
    let chi_l = lay.chi(l, x);
    if l == 0 {
        return Ok(chi_l);
    }
    let n = lay.offset(l);
    let g = moments.g.dense();
    let lead = g.view((0, 0), (n, n)).into_owned();
    let inv = pivot_inverse(&lead).map_err(|_| MvopError::SingularTruncation { level: l })?;
    let border = g.view((lay.offset(l), 0), (lay.size(l), n));
    Ok(chi_l - border * inv * lay.chi_upto(l, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn legendre(levels: usize) -> PolynomialSystem {
        SystemBuilder::new(MeasureSpec::lebesgue(1), 32, levels, 1)
            .unwrap()
            .system(&FlowState::zero(1))
            .unwrap()
    }

    #[test]
    fn legendre_values() {
        let s = legendre(4);
        assert_relative_eq!(s.p(0, &[0.3])[0], 1.0);
        assert_relative_eq!(s.p(2, &[0.3])[0], 0.09 - 1.0 / 3.0, epsilon = 1e-14);
        let j = s.jacobi_block(&[1.0], 1, 0)[(0, 0)];
        assert_relative_eq!(j, 1.0 / 3.0, epsilon = 1e-14);
        assert!(s.jacobi_block(&[1.0], 1, 1)[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn cauchy_of_constant() {
        let s = legendre(3);
        assert_relative_eq!(s.eval_c(0, &[3.0]).unwrap()[0], 2f64.ln(), epsilon = 1e-14);
        assert!(matches!(s.eval_c(0, &[0.2]), Err(MvopError::TooCloseToSupport { .. })));
    }

    #[test]
    fn square_tensor_polynomial() {
        let s = SystemBuilder::new(MeasureSpec::lebesgue(2), 16, 4, 1)
            .unwrap()
            .system(&FlowState::zero(2))
            .unwrap();
        let x = [0.4, -0.7];
        assert_relative_eq!(s.p(2, &x)[1], x[0] * x[1], epsilon = 1e-14);
        assert_relative_eq!(s.cd_kernel(1, &x, &[0.1, 0.2]).unwrap(), 0.25, epsilon = 1e-14);
    }
}
