//! Symmetric powers of linear isometries, the block matrices `η_R` with
//! `χ(Rx) = η_R χ(x)`, and invariance checks for symmetric measures.

use nalgebra::{DMatrix, DVector};

use crate::blockmat::{max_abs, BlockMatrix};
use crate::error::{MvopError, Result};
use crate::measure::FlowState;
use crate::mindex::{multinomial_matrix, Layout};
use crate::mvopr::PolynomialSystem;
use crate::shift::ShiftFamily;

/// Largest admissible `‖RᵀR − I‖`.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Coefficients over level `k` of `Π_a (f_a·x)^{α_a}`, with `f_a` the rows of `forms`.
fn expand_products(layout: &Layout, shifts: &ShiftFamily, forms: &DMatrix<f64>, alpha: &[u32]) -> DVector<f64> {
    let mut poly = DVector::from_element(1, 1.0);
    let mut level = 0;
    for (a, &e) in alpha.iter().enumerate() {
        for _ in 0..e {
            let mut next = DVector::zeros(layout.size(level + 1));
            for (i, &c) in poly.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for b in 0..forms.ncols() {
                    next[shifts.map(b, level)[i]] += c * forms[(a, b)];
                }
            }
            poly = next;
            level += 1;
        }
    }
    poly
}

fn check_orthogonal(r: &DMatrix<f64>) -> Result<()> {
    if !r.is_square() {
        return Err(MvopError::InvalidArgument("isometry must be square".into()));
    }
    let defect = max_abs(&(r.transpose() * r - DMatrix::identity(r.nrows(), r.nrows())));
    if defect > ORTHOGONALITY_TOL {
        return Err(MvopError::NotOrthogonal { defect });
    }
    Ok(())
}

/// `[R^{⊙k}]` in the canonical basis: column `j` holds the coefficients of `Π_a (Re_a)^{q_{j,a}}`.
pub fn symmetric_power_matrix(r: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    check_orthogonal(r)?;
    let layout = Layout::new(r.nrows(), k + 1);
    let shifts = ShiftFamily::new(&layout);
    let cols = r.transpose();
    let basis = layout.basis(k);
    let mut m = DMatrix::zeros(basis.len(), basis.len());
    for (j, q) in basis.indices.iter().enumerate() {
        m.set_column(j, &expand_products(&layout, &shifts, &cols, q.exps()));
    }
    Ok(m)
}

/// Block-diagonal action of an isometry on the monomial vector.
#[derive(Debug, Clone)]
pub struct IsometryAction {
    pub r: DMatrix<f64>,
    /// `[R^{⊙k}]` per level.
    pub sym: Vec<DMatrix<f64>>,
    /// `η_[k]` per level, row `i` holding the coefficients of `(Rx)^{q_i}`.
    pub eta: Vec<DMatrix<f64>>,
}

impl IsometryAction {
    pub fn new(r: DMatrix<f64>, levels: usize) -> Result<Self> {
        check_orthogonal(&r)?;
        let layout = Layout::new(r.nrows(), levels.max(1));
        let shifts = ShiftFamily::new(&layout);
        let mut eta = Vec::with_capacity(levels);
        let mut sym = Vec::with_capacity(levels);
        for k in 0..levels {
            let basis = layout.basis(k);
            let mut e = DMatrix::zeros(basis.len(), basis.len());
            for (i, q) in basis.indices.iter().enumerate() {
                e.set_row(i, &expand_products(&layout, &shifts, &r, q.exps()).transpose());
            }
            eta.push(e);
            sym.push(symmetric_power_matrix(&r, k)?);
        }
        Ok(Self { r, sym, eta })
    }

    pub fn levels(&self) -> usize {
        self.eta.len()
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    /// `η_R` over the first `levels` levels.
    pub fn eta_matrix(&self, layout: &Layout, levels: usize) -> BlockMatrix {
        let mut m = BlockMatrix::from_layout(layout, levels);
        for k in 0..levels {
            m.set_block(k, k, &self.eta[k]);
        }
        m
    }

    /// `η_R⁻¹ = η_{Rᵀ}` over the first `levels` levels.
    pub fn eta_inverse_matrix(&self, layout: &Layout, levels: usize) -> BlockMatrix {
        let mut m = BlockMatrix::from_layout(layout, levels);
        for k in 0..levels {
            m.set_block(k, k, &self.sym[k].transpose());
        }
        m
    }

    /// Largest defect of `η_[k] = M_[k]⁻¹[R^{⊙k}]M_[k]`, `η_[k]ᵀM_[k]η_[k] = M_[k]` and `η_[k][R^{⊙k}]ᵀ = I`.
    pub fn structure_defect(&self) -> f64 {
        let d = self.dim();
        let mut defect: f64 = 0.0;
        for k in 0..self.levels() {
            let m = multinomial_matrix(d, k);
            let minv = DMatrix::from_diagonal(&m.diagonal().map(|v| 1.0 / v));
            let e = &self.eta[k];
            let id = DMatrix::identity(e.nrows(), e.nrows());
            defect = defect
                .max(max_abs(&(e - &minv * &self.sym[k] * &m)))
                .max(max_abs(&(e.transpose() * &m * e - &m)) / max_abs(&m))
                .max(max_abs(&(e * self.sym[k].transpose() - id)));
        }
        defect
    }
}

/// `max_k ‖χ_[k](Rx) − η_[k]χ_[k](x)‖`.
pub fn chi_equivariance_residual(action: &IsometryAction, x: &[f64]) -> f64 {
    let layout = Layout::new(action.dim(), action.levels());
    let rx: Vec<f64> = (&action.r * DVector::from_column_slice(x)).iter().copied().collect();
    (0..action.levels())
        .map(|k| max_abs(&(layout.chi(k, &rx) - &action.eta[k] * layout.chi(k, x))))
        .fold(0.0, f64::max)
}

/// `max_k ‖((Rn)·Λ)_[k],[k+1] − η_[k](n·Λ)_[k],[k+1]η_[k+1]⁻¹‖`.
pub fn shift_conjugation_residual(action: &IsometryAction, n: &[f64]) -> f64 {
    let layout = Layout::new(action.dim(), action.levels());
    let shifts = ShiftFamily::new(&layout);
    let rn: Vec<f64> = (&action.r * DVector::from_column_slice(n)).iter().copied().collect();
    (0..action.levels() - 1)
        .map(|k| {
            let lhs = shifts.dot_block(&rn, k);
            let rhs = &action.eta[k] * shifts.dot_block(n, k) * action.sym[k + 1].transpose();
            max_abs(&(lhs - rhs))
        })
        .fold(0.0, f64::max)
}

/// `max_k ‖(n·Λ)_[k−1],[k] η_[k] (Λ_a)ᵀ η_[k−1]⁻¹ − I‖` for `n = Re_a`.
pub fn isometry_right_inverse_residual(action: &IsometryAction, a: usize) -> f64 {
    let layout = Layout::new(action.dim(), action.levels());
    let shifts = ShiftFamily::new(&layout);
    let n: Vec<f64> = action.r.column(a).iter().copied().collect();
    (1..action.levels())
        .map(|k| {
            let m = shifts.dot_block(&n, k - 1) * &action.eta[k] * shifts.block(a, k - 1).transpose()
                * action.sym[k - 1].transpose();
            max_abs(&(m - DMatrix::identity(layout.size(k - 1), layout.size(k - 1))))
        })
        .fold(0.0, f64::max)
}

/// Representation defects `‖η_{R₁R₂} − η_{R₁}η_{R₂}‖` and `‖η_{R⁻¹}η_R − I‖`.
pub fn representation_defect(r1: &DMatrix<f64>, r2: &DMatrix<f64>, levels: usize) -> Result<(f64, f64)> {
    let a = IsometryAction::new(r1.clone(), levels)?;
    let b = IsometryAction::new(r2.clone(), levels)?;
    let ab = IsometryAction::new(r1 * r2, levels)?;
    let inv = IsometryAction::new(r1.transpose(), levels)?;
    let mut prod: f64 = 0.0;
    let mut inverse: f64 = 0.0;
    for k in 0..levels {
        prod = prod.max(max_abs(&(&ab.eta[k] - &a.eta[k] * &b.eta[k])));
        let n = a.eta[k].nrows();
        inverse = inverse.max(max_abs(&(&inv.eta[k] * &a.eta[k] - DMatrix::identity(n, n))));
    }
    Ok((prod, inverse))
}

/// Invariance residuals of a system under an isometry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct InvarianceResiduals {
    pub moments: f64,
    pub factor_s: f64,
    pub factor_h: f64,
    pub beta: f64,
    pub polynomials: f64,
    pub jacobi: f64,
    pub kernel: f64,
}

impl InvarianceResiduals {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("moment_matrix", self.moments),
            ("factor_s", self.factor_s),
            ("quasi_tau_h", self.factor_h),
            ("beta", self.beta),
            ("polynomials", self.polynomials),
            ("jacobi", self.jacobi),
            ("cd_kernel", self.kernel),
        ]
    }

    pub fn max(&self) -> f64 {
        self.named().iter().map(|(_, v)| *v).fold(0.0, f64::max)
    }
}

fn relative(diff: &DMatrix<f64>, scale: &DMatrix<f64>) -> f64 {
    max_abs(diff) / max_abs(scale).max(1e-300)
}

/// Relative residuals of `ηGηᵀ = G`, `ηSη⁻¹ = S`, `ηHηᵀ = H`, `η_[k]β_[k] = β_[k]η_[k−1]`,
/// `P(Rx) = ηP(x)`, `(Rn)·J = η(n·J)η⁻¹` and `K(Rx, Ry) = K(x, y)` at the given samples.
pub fn measure_invariance_residuals(
    sys: &PolynomialSystem,
    action: &IsometryAction,
    n: &[f64],
    samples: &[(Vec<f64>, Vec<f64>)],
) -> Result<InvarianceResiduals> {
    let lv = sys.levels();
    if action.levels() < lv {
        return Err(MvopError::OutOfRange { requested: lv, available: action.levels() });
    }
    let eta = action.eta_matrix(&sys.layout, lv);
    let eta_inv = action.eta_inverse_matrix(&sys.layout, lv);
    let g = &sys.moments.g;
    let moments = relative(&(eta.mul(g).mul(&eta.transpose()).sub(g).into_dense()), g.dense());
    let s = &sys.factors.s;
    let factor_s = relative(&(eta.mul(s).mul(&eta_inv).sub(s).into_dense()), s.dense());
    let h = sys.factors.h_matrix();
    let factor_h = relative(&(eta.mul(&h).mul(&eta.transpose()).sub(&h).into_dense()), h.dense());
    let mut beta: f64 = 0.0;
    for k in 1..lv {
        let b = sys.beta(k);
        beta = beta.max(max_abs(&(&action.eta[k] * &b - &b * &action.eta[k - 1])) / (1.0 + max_abs(&b)));
    }
    let rot = |x: &[f64]| -> Vec<f64> { (&action.r * DVector::from_column_slice(x)).iter().copied().collect() };
    let mut polynomials: f64 = 0.0;
    let mut kernel: f64 = 0.0;
    for (x, y) in samples {
        let (rx, ry) = (rot(x), rot(y));
        for k in 0..lv {
            let p = sys.p(k, x);
            polynomials = polynomials.max(max_abs(&(sys.p(k, &rx) - &action.eta[k] * &p)) / (1.0 + max_abs(&p)));
        }
        for l in 1..=sys.usable() {
            let kxy = sys.cd_kernel(l, x, y)?;
            kernel = kernel.max((sys.cd_kernel(l, &rx, &ry)? - kxy).abs() / (1.0 + kxy.abs()));
        }
    }
    let rn: Vec<f64> = rot(n);
    let j = sys.jacobi_matrix(n)?.j;
    let rj = sys.jacobi_matrix(&rn)?.j;
    let jl = j.levels();
    let conj = action.eta_matrix(&sys.layout, jl).mul(&j).mul(&action.eta_inverse_matrix(&sys.layout, jl));
    let jacobi = relative(&(rj.sub(&conj).into_dense()), rj.dense());
    Ok(InvarianceResiduals { moments, factor_s, factor_h, beta, polynomials, jacobi, kernel })
}

/// Defect `max_k ‖t_[k]η_[k] − t_[k]‖` for the times of `state`, `k = 1 … levels−1`.
pub fn invariant_time_defect(action: &IsometryAction, state: &FlowState) -> f64 {
    (1..action.levels())
        .map(|k| {
            let t = state.time_level(k);
            max_abs(&(t.transpose() * &action.eta[k] - t.transpose()))
        })
        .fold(0.0, f64::max)
}

/// Whether the times are invariant (defect below `1e−10`) together with the defect.
pub fn invariant_time_check(action: &IsometryAction, state: &FlowState) -> (bool, f64) {
    let d = invariant_time_defect(action, state);
    (d < 1e-10, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn swap() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
    }

    #[test]
    fn identity_and_first_power() {
        let id = DMatrix::identity(3, 3);
        assert_eq!(symmetric_power_matrix(&id, 3).unwrap(), DMatrix::identity(10, 10));
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert!(max_abs(&(symmetric_power_matrix(&r, 1).unwrap() - &r)) < 1e-15);
    }

    #[test]
    fn swap_reverses_level_two() {
        let m = symmetric_power_matrix(&swap(), 2).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(3, 3, &[0., 0., 1., 0., 1., 0., 1., 0., 0.]));
    }

    #[test]
    fn rejects_non_orthogonal() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(symmetric_power_matrix(&r, 2), Err(MvopError::NotOrthogonal { .. })));
    }

    #[test]
    fn time_invariance_examples() {
        use crate::mindex::MultiIndex;
        let act = IsometryAction::new(swap(), 3).unwrap();
        let mid = FlowState::zero(2).with_time(&MultiIndex::new(vec![1, 1]), 0.4);
        assert!(invariant_time_check(&act, &mid).0);
        let t1 = FlowState::zero(2).with_time(&MultiIndex::unit(2, 0), 0.4);
        assert!(!invariant_time_check(&act, &t1).0);
        assert!(invariant_time_check(&act, &FlowState::zero(2)).0);
    }
}
