//! Continuous flows: finite-difference time derivatives of the factors, Lax
//! and Toda-type equations, Miwa shifts, the β telescoping chain and the
//! higher-order residuals built from mixed time derivatives.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::blockmat::{max_abs, pseudo_inverse_full_column_rank};
use crate::error::{MvopError, Result};
use crate::measure::FlowState;
use crate::mindex::MultiIndex;
use crate::mvopr::{PolynomialSystem, SystemBuilder};
use crate::shift::{dot_lambda, vstack};

/// Finite-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowDerivativeConfig {
    pub h: f64,
    /// One level of Richardson extrapolation on top of central differences.
    pub richardson: bool,
}

impl Default for FlowDerivativeConfig {
    fn default() -> Self {
        Self { h: 1e-4, richardson: true }
    }
}

impl FlowDerivativeConfig {
    pub fn new(h: f64, richardson: bool) -> Result<Self> {
        if h.is_nan() || h <= 0.0 || !h.is_finite() {
            return Err(MvopError::InvalidArgument("step h must be positive".into()));
        }
        Ok(Self { h, richardson })
    }

    pub fn plain(h: f64) -> Self {
        Self { h, richardson: false }
    }
}

/// Evaluated quantity of a system at some state.
pub type Probe<'a> = dyn Fn(&FlowState, &PolynomialSystem) -> DMatrix<f64> + 'a;

type StateKey = (Vec<i32>, Vec<u64>, Vec<(MultiIndex, u64)>);

fn state_key(s: &FlowState) -> StateKey {
    (
        s.m.clone(),
        s.n.iter().chain(&s.q).map(|v| v.to_bits()).collect(),
        s.times.iter().filter(|(_, v)| **v != 0.0).map(|(q, v)| (q.clone(), v.to_bits())).collect(),
    )
}

/// Systems of one base measure at arbitrary flow states, memoized.
#[derive(Debug)]
pub struct FlowFamily {
    pub builder: SystemBuilder,
    cache: Mutex<HashMap<StateKey, Arc<PolynomialSystem>>>,
}

impl FlowFamily {
    pub fn new(builder: SystemBuilder) -> Self {
        Self { builder, cache: Mutex::new(HashMap::new()) }
    }

    pub fn dim(&self) -> usize {
        self.builder.dim()
    }

    pub fn system(&self, state: &FlowState) -> Result<Arc<PolynomialSystem>> {
        let key = state_key(state);
        if let Some(s) = self.cache.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let s = Arc::new(self.builder.system(state)?);
        self.cache.lock().unwrap().insert(key, s.clone());
        Ok(s)
    }

    /// Drops memoized systems.
    pub fn clear(&self) {
        self.cache.lock().unwrap().clear();
    }

    /// Nested central difference `∂^n f / ∂t_{d₁}⋯∂t_{dₙ}` with step `h`.
    pub fn central(&self, at: &FlowState, dirs: &[MultiIndex], h: f64, f: &Probe) -> Result<DMatrix<f64>> {
        let n = dirs.len();
        let mut acc: Option<DMatrix<f64>> = None;
        for mask in 0..(1u32 << n) {
            let mut st = at.clone();
            let mut sign = 1.0;
            for (i, d) in dirs.iter().enumerate() {
                let s = if mask & (1 << i) == 0 { 1.0 } else { -1.0 };
                sign *= s;
                st = st.with_time(d, s * h);
            }
            let sys = self.system(&st)?;
            let v = f(&st, &sys) * sign;
            acc = Some(match acc {
                Some(a) => a + v,
                None => v,
            });
        }
        Ok(acc.unwrap() / (2.0 * h).powi(n as i32))
    }

    /// Derivative with optional Richardson extrapolation and a stability check.
    pub fn derivative(
        &self,
        at: &FlowState,
        dirs: &[MultiIndex],
        cfg: &FlowDerivativeConfig,
        f: &Probe,
    ) -> Result<DMatrix<f64>> {
        if dirs.is_empty() {
            let sys = self.system(at)?;
            return Ok(f(at, &sys));
        }
        let coarse = self.central(at, dirs, cfg.h, f)?;
        if !cfg.richardson {
            return Ok(coarse);
        }
        let fine = self.central(at, dirs, cfg.h / 2.0, f)?;
        let disagreement = max_abs(&(&fine - &coarse));
        let scale = 1.0 + max_abs(&coarse);
        let expected = cfg.h * cfg.h + 1e-13 / cfg.h.powi(dirs.len() as i32);
        if !disagreement.is_finite() || disagreement > 1e2 * expected * scale {
            return Err(MvopError::StencilInstability { disagreement });
        }
        Ok((fine * 4.0 - coarse) / 3.0)
    }

    /// `∂/∂n_a = Σ_b N_{ab} ∂/∂t_{e_b}` applied to `f`, with further time directions `extra`.
    pub fn n_derivative(
        &self,
        at: &FlowState,
        a: usize,
        extra: &[MultiIndex],
        cfg: &FlowDerivativeConfig,
        f: &Probe,
    ) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut acc: Option<DMatrix<f64>> = None;
        for b in 0..d {
            let c = at.n[(a, b)];
            if c == 0.0 {
                continue;
            }
            let mut dirs = vec![MultiIndex::unit(d, b)];
            dirs.extend_from_slice(extra);
            let v = self.derivative(at, &dirs, cfg, f)? * c;
            acc = Some(match acc {
                Some(x) => x + v,
                None => v,
            });
        }
        acc.ok_or_else(|| MvopError::InvalidArgument("zero direction".into()))
    }
}

/// Factor quantities that can be differentiated in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    H(usize),
    Beta(usize),
    Beta2(usize),
    /// The full unitriangular factor `S`.
    S,
}

impl Quantity {
    pub fn eval(&self, sys: &PolynomialSystem) -> DMatrix<f64> {
        match *self {
            Quantity::H(k) => sys.h(k).clone(),
            Quantity::Beta(k) => sys.beta(k),
            Quantity::Beta2(k) => sys.beta2(k),
            Quantity::S => sys.factors.s.dense().clone(),
        }
    }
}

/// `∂^order Q / ∂t_q^order` by finite differences.
pub fn factor_time_derivative(
    fam: &FlowFamily,
    at: &FlowState,
    quantity: Quantity,
    q_time: &MultiIndex,
    order: usize,
    cfg: &FlowDerivativeConfig,
) -> Result<DMatrix<f64>> {
    if !(1..=3).contains(&order) {
        return Err(MvopError::InvalidArgument("derivative order must be 1, 2 or 3".into()));
    }
    let dirs = vec![q_time.clone(); order];
    fam.derivative(at, &dirs, cfg, &|_, s| quantity.eval(s))
}

fn unit(d: usize, a: usize) -> MultiIndex {
    MultiIndex::unit(d, a)
}

fn rel(diff: &DMatrix<f64>, scale: &DMatrix<f64>) -> f64 {
    max_abs(diff) / (1.0 + max_abs(scale))
}

/// `J_a = S Λ_a S⁻¹` on the factorized truncation.
pub fn dressed_shift(sys: &PolynomialSystem, a: usize) -> DMatrix<f64> {
    let mut n = vec![0.0; sys.dim()];
    n[a] = 1.0;
    let lam = dot_lambda(&sys.shifts, &n, sys.levels());
    sys.factors.s.dense() * lam.dense() * sys.factors.s_inv.dense()
}

fn strictly_lower(sys: &PolynomialSystem, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for k in 0..sys.levels() {
        let (o, sz) = (sys.layout.offset(k), sys.size(k));
        for i in o..o + sz {
            for j in o..out.ncols() {
                out[(i, j)] = 0.0;
            }
        }
    }
    out
}

/// Residuals of the Lax-type relations for the flow `t_a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaxResiduals {
    /// `∂S/∂t_a S⁻¹ + (J_a)₋` on all but the last level.
    pub dressing: f64,
    /// `∂β_[k]/∂t_a + (J_a)_[k],[k−1]`, max over interior `k`.
    pub beta: f64,
    /// `∂H_[k]/∂t_a H_[k]⁻¹ − (J_a)_[k],[k]`, max over interior `k`.
    pub h_diag: f64,
}

pub fn lax_residuals(fam: &FlowFamily, at: &FlowState, a: usize, cfg: &FlowDerivativeConfig) -> Result<LaxResiduals> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    let e = unit(d, a);
    let ds = fam.derivative(at, std::slice::from_ref(&e), cfg, &|_, s| s.factors.s.dense().clone())?;
    let j = dressed_shift(&sys, a);
    let lhs = ds * sys.factors.s_inv.dense();
    let jm = strictly_lower(&sys, &j);
    // the last block row of the truncated product misses Λ_[L−1],[L]
    let n_in = sys.layout.offset(sys.levels() - 1);
    let diff = (&lhs + &jm).view((0, 0), (n_in, n_in)).into_owned();
    let dressing = rel(&diff, &jm);
    let mut n = vec![0.0; d];
    n[a] = 1.0;
    let mut beta: f64 = 0.0;
    let mut h_diag: f64 = 0.0;
    for k in 0..sys.levels() - 1 {
        let dh = fam.derivative(at, std::slice::from_ref(&e), cfg, &|_, s| s.h(k).clone())?;
        let jd = sys.jacobi_block(&n, k, k);
        h_diag = h_diag.max(rel(&(dh * sys.h_inv(k) - &jd), &jd));
        if k > 0 {
            let db = fam.derivative(at, std::slice::from_ref(&e), cfg, &|_, s| s.beta(k))?;
            let js = sys.jacobi_block(&n, k, k - 1);
            beta = beta.max(rel(&(db + &js), &js));
        }
    }
    Ok(LaxResiduals { dressing, beta, h_diag })
}

/// Defect `‖∂β_[k]/∂t_a + (J_a)_[k],[k−1]‖` for one step size, for convergence studies.
pub fn beta_flow_defect(fam: &FlowFamily, at: &FlowState, a: usize, k: usize, cfg: &FlowDerivativeConfig) -> Result<f64> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    let mut n = vec![0.0; d];
    n[a] = 1.0;
    let db = fam.derivative(at, &[unit(d, a)], cfg, &|_, s| s.beta(k))?;
    Ok(max_abs(&(db + sys.jacobi_block(&n, k, k - 1))))
}

/// Residuals of the 2D Toda equation at level `k`: `(H-form, β-form)`.
pub fn toda_equation_residual(
    fam: &FlowFamily,
    at: &FlowState,
    a: usize,
    b: usize,
    k: usize,
    cfg: &FlowDerivativeConfig,
) -> Result<(f64, f64)> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k == 0 || k + 2 > sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let (ea, eb) = (unit(d, a), unit(d, b));
    // ∂_b(∂_aH H⁻¹) = ∂_a∂_bH H⁻¹ − ∂_aH H⁻¹ ∂_bH H⁻¹
    let dab = fam.derivative(at, &[ea.clone(), eb.clone()], cfg, &|_, s| s.h(k).clone())?;
    let da = fam.derivative(at, std::slice::from_ref(&ea), cfg, &|_, s| s.h(k).clone())?;
    let db = fam.derivative(at, std::slice::from_ref(&eb), cfg, &|_, s| s.h(k).clone())?;
    let hi = sys.h_inv(k);
    let lhs = dab * hi - &da * hi * &db * hi;
    let rhs = sys.lam(a, k) * sys.h(k + 1) * sys.lam(b, k).transpose() * hi
        - sys.h(k) * sys.lam(b, k - 1).transpose() * sys.h_inv(k - 1) * sys.lam(a, k - 1);
    let h_form = rel(&(&lhs - &rhs), &rhs);

    let bab = fam.derivative(at, &[ea.clone(), eb], cfg, &|_, s| s.beta(k))?;
    let prod = fam.derivative(at, std::slice::from_ref(&ea), cfg, &|_, s| s.beta(k) * s.lam(b, k - 1) * s.beta(k))?;
    let dba = fam.derivative(at, &[ea], cfg, &|_, s| s.beta(k))?;
    let mut rhs = prod - sys.lam(b, k) * sys.beta(k + 1) * &dba;
    if k > 1 {
        rhs -= &dba * sys.beta(k - 1) * sys.lam(b, k - 2);
    }
    let beta_form = rel(&(&bab - &rhs), &bab);
    Ok((h_form, beta_form))
}

/// Mixed difference-differential Toda residuals at level `k`:
/// `Δ_b(∂_aH H⁻¹)` and `∂_a((Δ_bH)H⁻¹)` against their closed forms.
pub fn mixed_toda_residuals(
    fam: &FlowFamily,
    at: &FlowState,
    a: usize,
    b: usize,
    k: usize,
    cfg: &FlowDerivativeConfig,
) -> Result<(f64, f64)> {
    let d = fam.dim();
    let mut step = vec![0; d];
    step[b] = 1;
    let tb_state = at.stepped(&step);
    let sys = fam.system(at)?;
    let tb = fam.system(&tb_state)?;
    if k == 0 || k + 2 > sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let nb = at.direction(b);
    let ea = unit(d, a);
    let log_d = |st: &FlowState| -> Result<DMatrix<f64>> {
        let s = fam.system(st)?;
        Ok(fam.derivative(st, std::slice::from_ref(&ea), cfg, &|_, s| s.h(k).clone())? * s.h_inv(k))
    };
    let lhs1 = log_d(&tb_state)? - log_d(at)?;
    let rhs1 = sys.lam(a, k) * sys.h(k + 1) * sys.nlam(&nb, k).transpose() * tb.h_inv(k)
        - sys.h(k) * sys.nlam(&nb, k - 1).transpose() * tb.h_inv(k - 1) * sys.lam(a, k - 1);
    let r1 = rel(&(&lhs1 - &rhs1), &rhs1);

    let lhs2 = fam.derivative(at, std::slice::from_ref(&ea), cfg, &|st, s| {
        let t = fam.system(&st.stepped(&step)).expect("stepped system");
        t.h(k) * s.h_inv(k)
    })?;
    let rhs2 = sys.nlam(&nb, k) * sys.h(k + 1) * sys.lam(a, k).transpose() * sys.h_inv(k)
        - tb.h(k) * sys.lam(a, k - 1).transpose() * tb.h_inv(k - 1) * sys.nlam(&nb, k - 1);
    let r2 = rel(&(&lhs2 - &rhs2), &rhs2);
    Ok((r1, r2))
}

/// `β_[k+1]` against `[Λ]_k⁺((β_[k] blockwise)[Λ]_{k−1} − [∇H]_kH_[k]⁻¹)`, one step and fully telescoped
/// from `∇H` alone; returns the residuals `(one step, telescoped)`.
pub fn beta_tau_chain(fam: &FlowFamily, at: &FlowState, k: usize, cfg: &FlowDerivativeConfig) -> Result<(f64, f64)> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k + 2 > sys.levels() {
        return Err(MvopError::OutOfRange { requested: k + 1, available: sys.levels() });
    }
    let grad = |j: usize| -> Result<DMatrix<f64>> {
        let parts: Vec<DMatrix<f64>> = (0..d)
            .map(|a| fam.derivative(at, &[unit(d, a)], cfg, &|_, s| s.h(j).clone()))
            .collect::<Result<_>>()?;
        Ok(vstack(&parts))
    };
    let step = |j: usize, beta_j: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let lam = sys.shifts.stacked(j);
        let pinv = pseudo_inverse_full_column_rank(&lam)?;
        let mut inner = -(grad(j)? * sys.h_inv(j));
        if j > 0 {
            let lower = sys.shifts.stacked(j - 1);
            let (r, c) = beta_j.shape();
            let mut bd = DMatrix::zeros(d * r, d * c);
            for a in 0..d {
                bd.view_mut((a * r, a * c), (r, c)).copy_from(beta_j);
            }
            inner += bd * lower;
        }
        Ok(pinv * inner)
    };
    let direct = sys.beta(k + 1);
    let one = step(k, &sys.beta(k))?;
    let mut tele = DMatrix::zeros(1, 0);
    for j in 0..=k {
        tele = step(j, &tele)?;
    }
    Ok((rel(&(&one - &direct), &direct), rel(&(&tele - &direct), &direct)))
}

/// Level blocks `(1/k) M_[k] χ_[k](n/q)`, `k = 1 … K`.
pub fn miwa_shift_vector(n: &[f64], q: f64, levels: usize) -> Result<Vec<DVector<f64>>> {
    if q == 0.0 {
        return Err(MvopError::InvalidArgument("Miwa shift needs q ≠ 0".into()));
    }
    let d = n.len();
    let lay = crate::mindex::Layout::new(d, levels + 1);
    let x: Vec<f64> = n.iter().map(|v| v / q).collect();
    Ok((1..=levels).map(|k| lay.multinomial(k) * lay.chi(k, &x) / k as f64).collect())
}

/// Largest relative deviation of the `H` blocks deformed by the `K`-truncated Miwa shift
/// from those of the measure multiplied by `(1 − n·x/q)⁻¹`.
pub fn miwa_consistency_check(builder: &SystemBuilder, n: &[f64], q: f64, levels: usize) -> Result<f64> {
    let r = builder
        .spec
        .corners()
        .iter()
        .map(|c| c.iter().zip(n).map(|(x, y)| x * y).sum::<f64>().abs())
        .fold(0.0, f64::max);
    if r >= q.abs() {
        return Err(MvopError::ValidityRegion);
    }
    let base = FlowState::zero(builder.dim());
    let shifted = base.clone().with_time_levels(&miwa_shift_vector(n, q, levels)?);
    let approx = builder.system(&shifted)?;
    let exact = builder.system_reweighted(&base, |x| {
        let nx: f64 = x.iter().zip(n).map(|(a, b)| a * b).sum();
        1.0 / (1.0 - nx / q)
    })?;
    let mut dev: f64 = 0.0;
    for k in 0..builder.usable {
        let diff = approx.h(k) - exact.h(k);
        dev = dev.max(max_abs(&diff) / max_abs(exact.h(k)));
    }
    Ok(dev)
}

/// `X_a = ∂β_[k]/∂n_a + (Δ_aβ_[k])(q_a + (n_a·Λ)β_[k])` at `st`.
fn lattice_drift(fam: &FlowFamily, st: &FlowState, a: usize, k: usize, cfg: &FlowDerivativeConfig) -> Result<DMatrix<f64>> {
    let d = fam.dim();
    let mut e = vec![0; d];
    e[a] = 1;
    let s = fam.system(st)?;
    let t = fam.system(&st.stepped(&e))?;
    let dn = fam.n_derivative(st, a, &[], cfg, &|_, s| s.beta(k))?;
    let na = st.direction(a);
    let mut inner = s.nlam(&na, k - 1) * s.beta(k);
    for i in 0..inner.nrows() {
        inner[(i, i)] += st.q[a];
    }
    Ok(dn + (t.beta(k) - s.beta(k)) * inner)
}

/// `Δ_b[X_a](n_b·Λ) − Δ_a[X_b](n_a·Λ)` at level `k`.
pub fn beta_lattice_residual(fam: &FlowFamily, at: &FlowState, a: usize, b: usize, k: usize, cfg: &FlowDerivativeConfig) -> Result<f64> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k == 0 || k + 1 > sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let step = |c: usize| {
        let mut e = vec![0; d];
        e[c] = 1;
        at.stepped(&e)
    };
    let xa = lattice_drift(fam, at, a, k, cfg)?;
    let xb = lattice_drift(fam, at, b, k, cfg)?;
    let xa_b = lattice_drift(fam, &step(b), a, k, cfg)?;
    let xb_a = lattice_drift(fam, &step(a), b, k, cfg)?;
    let lhs = (xa_b - xa) * sys.nlam(&at.direction(b), k - 1);
    let rhs = (xb_a - xb) * sys.nlam(&at.direction(a), k - 1);
    Ok(rel(&(&lhs - &rhs), &lhs))
}

/// Residual of the nonlinear equation for `W_ab = ∂_aβΛ_b + ∂_bβΛ_a` at level `k`:
/// `∂_{(cd)}W_ab − ∂_{(ab)}W_cd = ∂_c∂_dW_ab − ∂_a∂_bW_cd + [W_ab, W_cd]
///  − (∂_bW_cd)βΛ_a − (∂_aW_cd)βΛ_b + (∂_dW_ab)βΛ_c + (∂_cW_ab)βΛ_d`.
pub fn beta_second_order_residual(fam: &FlowFamily, at: &FlowState, idx: [usize; 4], k: usize, cfg: &FlowDerivativeConfig) -> Result<f64> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k == 0 || k + 1 > sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let [a, b, c, e] = idx;
    let lam = |x: usize| sys.lam(x, k - 1);
    let beta = sys.beta(k);
    // derivative of W_xy along `dirs`
    let dw = |x: usize, y: usize, dirs: &[MultiIndex]| -> Result<DMatrix<f64>> {
        let mut dx = vec![unit(d, x)];
        dx.extend_from_slice(dirs);
        let mut dy = vec![unit(d, y)];
        dy.extend_from_slice(dirs);
        Ok(fam.derivative(at, &dx, cfg, &|_, s| s.beta(k))? * lam(y) + fam.derivative(at, &dy, cfg, &|_, s| s.beta(k))? * lam(x))
    };
    let pair = |x: usize, y: usize| MultiIndex::from_axes(d, &[x, y]);
    let wab = dw(a, b, &[])?;
    let wcd = dw(c, e, &[])?;
    let lhs = dw(a, b, &[pair(c, e)])? - dw(c, e, &[pair(a, b)])?;
    let rhs = dw(a, b, &[unit(d, c), unit(d, e)])? - dw(c, e, &[unit(d, a), unit(d, b)])? + &wab * &wcd
        - &wcd * &wab
        - dw(c, e, &[unit(d, b)])? * &beta * lam(a)
        - dw(c, e, &[unit(d, a)])? * &beta * lam(b)
        + dw(a, b, &[unit(d, e)])? * &beta * lam(c)
        + dw(a, b, &[unit(d, c)])? * &beta * lam(e);
    Ok(rel(&(&lhs - &rhs), &lhs))
}

fn psi1_probe(k: usize, z: Vec<f64>) -> impl Fn(&FlowState, &PolynomialSystem) -> DMatrix<f64> {
    move |_, s| {
        let v = s.psi1(k, &z);
        DMatrix::from_column_slice(v.len(), 1, v.as_slice())
    }
}

/// `∂Ψ/∂t_{(ab)} − ∂_a∂_bΨ − U_abΨ` on `Ψ₁` at level `k`, `U_ab = −∂_aβΛ_b − ∂_bβΛ_a`.
pub fn schrodinger_residual(
    fam: &FlowFamily,
    at: &FlowState,
    a: usize,
    b: usize,
    k: usize,
    z: &[f64],
    cfg: &FlowDerivativeConfig,
) -> Result<f64> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k == 0 || k >= sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let psi = psi1_probe(k, z.to_vec());
    let lhs = fam.derivative(at, &[MultiIndex::from_axes(d, &[a, b])], cfg, &psi)?;
    let d2 = fam.derivative(at, &[unit(d, a), unit(d, b)], cfg, &psi)?;
    let dba = fam.derivative(at, &[unit(d, a)], cfg, &|_, s| s.beta(k))?;
    let dbb = fam.derivative(at, &[unit(d, b)], cfg, &|_, s| s.beta(k))?;
    let u = -(dba * sys.lam(b, k - 1)) - dbb * sys.lam(a, k - 1);
    let p0 = psi(at, &sys);
    let rhs = d2 + u * p0;
    Ok(rel(&(&lhs - &rhs), &lhs))
}

/// Third-order linear equation on `Ψ₁` at level `k` with
/// `V_xy = ∂_xβΛ_y` and `V_xyw = ∂_xβ(β_[k−1]Λ_y − Λ_yβ)Λ_w`.
pub fn third_order_residual(
    fam: &FlowFamily,
    at: &FlowState,
    idx: [usize; 3],
    k: usize,
    z: &[f64],
    cfg: &FlowDerivativeConfig,
) -> Result<f64> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k == 0 || k >= sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let [a, b, c] = idx;
    let psi = psi1_probe(k, z.to_vec());
    let dpsi = |dirs: &[MultiIndex]| fam.derivative(at, dirs, cfg, &psi);
    let dbeta = |dirs: &[MultiIndex]| fam.derivative(at, dirs, cfg, &|_, s| s.beta(k));
    let lam = |x: usize| sys.lam(x, k - 1);
    let beta = sys.beta(k);
    let v = |x: usize, y: usize| -> Result<DMatrix<f64>> { Ok(dbeta(&[unit(d, x)])? * lam(y)) };
    let dv = |x: usize, y: usize, w: usize| -> Result<DMatrix<f64>> { Ok(dbeta(&[unit(d, x), unit(d, w)])? * lam(y)) };
    let v3 = |x: usize, y: usize, w: usize| -> Result<DMatrix<f64>> {
        let mut inner = -(sys.lam(y, k - 1) * &beta);
        if k >= 2 {
            inner += sys.beta(k - 1) * sys.lam(y, k - 2);
        }
        Ok(dbeta(&[unit(d, x)])? * inner * lam(w))
    };
    let p0 = psi(at, &sys);
    let lhs = dpsi(&[MultiIndex::from_axes(d, &[a, b, c])])?;
    let rhs = dpsi(&[unit(d, a), unit(d, b), unit(d, c)])?
        - v(a, b)? * dpsi(&[unit(d, c)])?
        - v(c, a)? * dpsi(&[unit(d, b)])?
        - v(b, c)? * dpsi(&[unit(d, a)])?
        - (dv(a, b, c)? + dv(b, c, a)? + dv(c, a, b)? + v3(a, b, c)? + v3(b, c, a)? + v3(c, a, b)?) * p0;
    Ok(rel(&(&lhs - &rhs), &lhs))
}

/// `∂Ψ/∂n_a − T_aΨ − (q_a − (Δ_aβ_[k])(n_a·Λ))Ψ` for `Ψ₁(z)` and, when `w` is given, for `C(w)`.
pub fn discrete_continuous_residual(
    fam: &FlowFamily,
    at: &FlowState,
    a: usize,
    k: usize,
    z: &[f64],
    w: Option<&[f64]>,
    cfg: &FlowDerivativeConfig,
) -> Result<(f64, Option<f64>)> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k == 0 || k >= sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let mut e = vec![0; d];
    e[a] = 1;
    let ta = fam.system(&at.stepped(&e))?;
    let mut coef = -((ta.beta(k) - sys.beta(k)) * sys.nlam(&at.direction(a), k - 1));
    for i in 0..coef.nrows() {
        coef[(i, i)] += at.q[a];
    }
    let psi = psi1_probe(k, z.to_vec());
    let lhs = fam.n_derivative(at, a, &[], cfg, &psi)?;
    let rhs = psi(&at.stepped(&e), &ta) + &coef * psi(at, &sys);
    let r1 = rel(&(&lhs - &rhs), &lhs);
    let r2 = match w {
        None => None,
        Some(w) => {
            let wv = w.to_vec();
            let cprobe = move |_: &FlowState, s: &PolynomialSystem| {
                let v = s.eval_c(k, &wv).expect("admissible point");
                DMatrix::from_column_slice(v.len(), 1, v.as_slice())
            };
            sys.eval_c(k, w)?;
            let lhs = fam.n_derivative(at, a, &[], cfg, &cprobe)?;
            let rhs = cprobe(at, &ta) + &coef * cprobe(at, &sys);
            Some(rel(&(&lhs - &rhs), &lhs))
        }
    };
    Ok((r1, r2))
}

/// `∂_aβ⁽²⁾_[k]Λ_a − ∂_aβ_[k]Λ_aβ_[k] + ½∂_a²β_[k] − ½∂_{(aa)}β_[k]`.
pub fn beta2_first_residual(fam: &FlowFamily, at: &FlowState, a: usize, k: usize, cfg: &FlowDerivativeConfig) -> Result<f64> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k < 2 || k >= sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let ea = unit(d, a);
    let lhs = fam.derivative(at, std::slice::from_ref(&ea), cfg, &|_, s| s.beta2(k))? * sys.lam(a, k - 2);
    let db = fam.derivative(at, std::slice::from_ref(&ea), cfg, &|_, s| s.beta(k))?;
    let d2 = fam.derivative(at, &[ea.clone(), ea.clone()], cfg, &|_, s| s.beta(k))?;
    let daa = fam.derivative(at, &[MultiIndex::from_axes(d, &[a, a])], cfg, &|_, s| s.beta(k))?;
    let rhs = db * sys.lam(a, k - 1) * sys.beta(k) - d2 * 0.5 + daa * 0.5;
    Ok(rel(&(&lhs - &rhs), &lhs))
}

/// Superdiagonal and diagonal components of the second equation of the `β, β⁽²⁾` system at level `k`.
pub fn beta2_second_residuals(
    fam: &FlowFamily,
    at: &FlowState,
    a: usize,
    b: usize,
    k: usize,
    cfg: &FlowDerivativeConfig,
) -> Result<(f64, f64)> {
    let d = fam.dim();
    let sys = fam.system(at)?;
    if k < 2 || k + 1 >= sys.levels() {
        return Err(MvopError::OutOfRange { requested: k, available: sys.levels() });
    }
    let beta = sys.beta(k);
    let beta2 = sys.beta2(k);
    let la = |x: usize| sys.lam(x, k - 1);
    let la2 = |x: usize| sys.lam(x, k - 2);
    let lk = |x: usize| sys.lam(x, k);
    let ua = unit(d, a);
    let ub = unit(d, b);
    let db = |dirs: &[MultiIndex]| fam.derivative(at, dirs, cfg, &|_, s| s.beta(k));
    let db2 = |dirs: &[MultiIndex]| fam.derivative(at, dirs, cfg, &|_, s| s.beta2(k));
    let with = |first: &MultiIndex, rest: &[MultiIndex]| {
        let mut v = vec![first.clone()];
        v.extend_from_slice(rest);
        v
    };
    let u = |dirs: &[MultiIndex]| -> Result<DMatrix<f64>> { Ok(db(&with(&ua, dirs))? * la(a) * -2.0) };
    let v = |dirs: &[MultiIndex]| -> Result<DMatrix<f64>> { Ok(db(&with(&ub, dirs))? * la(b) * -2.0) };
    let ut = |dirs: &[MultiIndex]| -> Result<DMatrix<f64>> {
        let mut r = db(&[vec![ub.clone(), ub.clone()], dirs.to_vec()].concat())? * la(b) * -3.0
            - db2(&with(&ub, dirs))? * la2(b) * la(b) * 3.0;
        let p = match dirs.len() {
            0 => db(std::slice::from_ref(&ub))? * la(b) * &beta * la(b),
            1 => {
                db(&with(&ub, dirs))? * la(b) * &beta * la(b) + db(std::slice::from_ref(&ub))? * la(b) * db(dirs)? * la(b)
            }
            _ => {
                let (x, y) = (&dirs[0], &dirs[1]);
                (db(&[ub.clone(), x.clone(), y.clone()])? * la(b) * &beta
                    + db(&[ub.clone(), x.clone()])? * la(b) * db(std::slice::from_ref(y))?
                    + db(&[ub.clone(), y.clone()])? * la(b) * db(std::slice::from_ref(x))?
                    + db(std::slice::from_ref(&ub))? * la(b) * db(&[x.clone(), y.clone()])?)
                    * la(b)
            }
        };
        r += p * 3.0;
        Ok(r)
    };
    let pair = |x: usize, y: usize| MultiIndex::from_axes(d, &[x, y]);
    let triple = MultiIndex::from_axes(d, &[b, b, b]);
    let u0 = u(&[])?;
    let v0 = v(&[])?;
    let ut0 = ut(&[])?;
    let cbb = u(std::slice::from_ref(&ub))? * -3.0;
    let cab = v(std::slice::from_ref(&ua))? * 3.0;
    let ca = ut(std::slice::from_ref(&ua))? * 2.0;
    let cb = v(&[ua.clone(), ua.clone()])? * 1.5 - u(&[ub.clone(), ub.clone()])? * 3.0 + (&u0 * &v0 - &v0 * &u0) * 1.5
        - v(&[pair(a, a)])? * 1.5;
    let c0 = u(&[triple])? - ut(&[pair(a, a)])? + ut(&[ua.clone(), ua.clone()])?
        - u(&[ub.clone(), ub.clone(), ub.clone()])?
        - &v0 * u(std::slice::from_ref(&ub))? * 1.5
        + (&u0 * &ut0 - &ut0 * &u0);
    let sup = &cbb * &beta * la(b) * lk(b) + &cab * &beta * la(a) * lk(b) + &ca * lk(a) + &cb * lk(b);
    let dbb = db(std::slice::from_ref(&ub))?;
    let dba = db(std::slice::from_ref(&ua))?;
    let diag = &cbb * (&beta2 * la2(b) * la(b) + &dbb * la(b) * 2.0)
        + &cab * (&beta2 * la2(a) * la(b) + &dba * la(b) + &dbb * la(a))
        + &ca * &beta * la(a)
        + &cb * &beta * la(b)
        + &c0;
    let scale = max_abs(&cb).max(max_abs(&c0));
    Ok((max_abs(&sup) / (1.0 + scale), max_abs(&diag) / (1.0 + scale)))
}

/// Identity selector for [`kp_residuals`].
#[derive(Debug, Clone, PartialEq)]
pub enum KpIdentity {
    BetaLattice { a: usize, b: usize },
    SecondOrder { idx: [usize; 4] },
    ThirdOrder { idx: [usize; 3], z: Vec<f64> },
    Schrodinger { a: usize, b: usize, z: Vec<f64> },
    Beta2First { a: usize },
    Beta2Second { a: usize, b: usize },
}

/// Largest residual of the selected identity at level `k`.
pub fn kp_residuals(fam: &FlowFamily, at: &FlowState, id: &KpIdentity, k: usize, cfg: &FlowDerivativeConfig) -> Result<f64> {
    match id {
        KpIdentity::BetaLattice { a, b } => beta_lattice_residual(fam, at, *a, *b, k, cfg),
        KpIdentity::SecondOrder { idx } => beta_second_order_residual(fam, at, *idx, k, cfg),
        KpIdentity::ThirdOrder { idx, z } => third_order_residual(fam, at, *idx, k, z, cfg),
        KpIdentity::Schrodinger { a, b, z } => schrodinger_residual(fam, at, *a, *b, k, z, cfg),
        KpIdentity::Beta2First { a } => beta2_first_residual(fam, at, *a, k, cfg),
        KpIdentity::Beta2Second { a, b } => beta2_second_residuals(fam, at, *a, *b, k, cfg).map(|(s, d)| s.max(d)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::MeasureSpec;
    use approx::assert_relative_eq;

    #[test]
    fn miwa_vector_examples() {
        let v = miwa_shift_vector(&[1.0], 2.0, 3).unwrap();
        assert_relative_eq!(v[0][0], 0.5);
        assert_relative_eq!(v[1][0], 1.0 / 8.0);
        assert_relative_eq!(v[2][0], 1.0 / 24.0);
        let w = miwa_shift_vector(&[1.0, 1.0], 2.0, 2).unwrap();
        assert_eq!(w[1].as_slice(), &[0.125, 0.25, 0.125]);
        assert!(miwa_shift_vector(&[0.0, 0.0], 2.0, 3).unwrap().iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn legendre_h0_flow() {
        let fam = FlowFamily::new(SystemBuilder::new(MeasureSpec::lebesgue(1), 32, 3, 2).unwrap());
        let d = factor_time_derivative(&fam, &FlowState::zero(1), Quantity::H(0), &MultiIndex::unit(1, 0), 1, &FlowDerivativeConfig::default())
            .unwrap();
        assert!(d[(0, 0)].abs() < 1e-10);
    }
}
