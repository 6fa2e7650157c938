//! Shift matrices `Λ_a`, their powers and projections, `n·Λ`, and the
//! multinomial right inverse of `(n·Λ)_[k−1],[k]`.
//!
//! Axes are 0-based. Every block `(Λ_a)_[k],[k+1]` has exactly one unit
//! entry per row, so it is stored as a column map.

use nalgebra::{DMatrix, DVector};

use crate::blockmat::{pivot_inverse, BlockMatrix};
use crate::error::{MvopError, Result};
use crate::mindex::{Layout, MultiIndex};

/// Column maps of `(Λ_a)_[k],[k+1]` for every axis and level.
#[derive(Debug, Clone)]
pub struct ShiftFamily {
    dim: usize,
    levels: usize,
    sizes: Vec<usize>,
    /// `maps[a][k][i]` is the column of the unit entry in row `i`.
    maps: Vec<Vec<Vec<usize>>>,
}

impl ShiftFamily {
    /// Blocks for `k + 1 < layout.levels()`.
    pub fn new(layout: &Layout) -> Self {
        let dim = layout.dim();
        let levels = layout.levels();
        let maps = (0..dim)
            .map(|a| {
                (0..levels.saturating_sub(1))
                    .map(|k| {
                        layout
                            .basis(k)
                            .indices
                            .iter()
                            .map(|q| layout.position(&q.add_axis(a)).unwrap())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { dim, levels, sizes: layout.sizes(), maps }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn map(&self, a: usize, k: usize) -> &[usize] {
        &self.maps[a][k]
    }

    /// `(Λ_a)_[k],[k+1]` as a dense 0/1 matrix.
    pub fn block(&self, a: usize, k: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.sizes[k], self.sizes[k + 1]);
        for (i, &j) in self.maps[a][k].iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }

    /// `(n·Λ)_[k],[k+1]`.
    pub fn dot_block(&self, n: &[f64], k: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.sizes[k], self.sizes[k + 1]);
        for (a, &na) in n.iter().enumerate() {
            for (i, &j) in self.maps[a][k].iter().enumerate() {
                m[(i, j)] += na;
            }
        }
        m
    }

    /// `Λ_a · X` for `X` with `|[k+1]|` rows: picks rows.
    pub fn apply_left(&self, a: usize, k: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let map = &self.maps[a][k];
        DMatrix::from_fn(map.len(), x.ncols(), |i, c| x[(map[i], c)])
    }

    /// `[Λ]_k`: the `D|[k]|×|[k+1]|` stack of `(Λ_a)_[k],[k+1]`.
    pub fn stacked(&self, k: usize) -> DMatrix<f64> {
        let rows: Vec<DMatrix<f64>> = (0..self.dim).map(|a| self.block(a, k)).collect();
        vstack(&rows)
    }

    /// `[NΛ]_k`: stack of `(n_a·Λ)_[k],[k+1]` over the rows `n_a` of `N`.
    pub fn stacked_dot(&self, n: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        let rows: Vec<DMatrix<f64>> = (0..n.nrows())
            .map(|a| {
                let na: Vec<f64> = n.row(a).iter().copied().collect();
                self.dot_block(&na, k)
            })
            .collect();
        vstack(&rows)
    }
}

/// Vertical concatenation.
pub fn vstack(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut m = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        m.view_mut((r, 0), p.shape()).copy_from(p);
        r += p.nrows();
    }
    m
}

/// `(Λ_a)_[k],[k+1]`, entry `(i, j) = 1` iff `q_i + e_a = q_j`.
pub fn shift_block(layout: &Layout, a: usize, k: usize) -> DMatrix<f64> {
    let rows = layout.basis(k);
    let cols = crate::mindex::enumerate_level(layout.dim(), k + 1);
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        if rows.indices[i].add_axis(a) == cols.indices[j] {
            1.0
        } else {
            0.0
        }
    })
}

/// Truncation of `Λ^{k_vec} = Λ₁^{k₁}⋯Λ_D^{k_D}` over the first `levels` levels.
pub fn lambda_power(layout: &Layout, kvec: &MultiIndex, levels: usize) -> Result<BlockMatrix> {
    let shift = kvec.len() as usize;
    if levels > layout.levels() {
        return Err(MvopError::OutOfRange { requested: levels, available: layout.levels() });
    }
    if levels < shift + 1 && shift > 0 {
        return Err(MvopError::OutOfRange { requested: shift + 1, available: levels });
    }
    let mut m = BlockMatrix::from_layout(layout, levels);
    for k in 0..levels.saturating_sub(shift) {
        let mut b = DMatrix::zeros(layout.size(k), layout.size(k + shift));
        for (i, q) in layout.basis(k).indices.iter().enumerate() {
            let j = layout.position(&q.add(kvec)).unwrap();
            b[(i, j)] = 1.0;
        }
        m.set_block(k, k + shift, &b);
    }
    Ok(m)
}

/// Truncation of `n·Λ = Σ n_a Λ_a` over the first `levels` levels.
pub fn dot_lambda(shifts: &ShiftFamily, n: &[f64], levels: usize) -> BlockMatrix {
    let mut m = BlockMatrix::zeros(shifts.dim, shifts.sizes[..levels].to_vec());
    for k in 0..levels.saturating_sub(1) {
        m.set_block(k, k + 1, &shifts.dot_block(n, k));
    }
    m
}

/// `Π_{a,n} = (Λ_aᵀ)ⁿΛ_aⁿ` on level `k`: diagonal, 1 where `α_a ≥ n`.
pub fn projection_block(layout: &Layout, a: usize, n: u32, k: usize) -> DMatrix<f64> {
    let diag = layout
        .basis(k)
        .indices
        .iter()
        .map(|q| if q.exps()[a] >= n { 1.0 } else { 0.0 });
    DMatrix::from_diagonal(&DVector::from_iterator(layout.size(k), diag))
}

/// `M_[k]⁻¹(n·Λ)ᵀ((n·Λ)M_[k]⁻¹(n·Λ)ᵀ)⁻¹` with `n·Λ = (n·Λ)_[k−1],[k]`.
pub fn right_inverse_dot_lambda(shifts: &ShiftFamily, n: &[f64], k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(MvopError::InvalidArgument("right inverse needs k ≥ 1".into()));
    }
    let nl = shifts.dot_block(n, k - 1);
    let layout_dim = shifts.dim;
    let minv = DMatrix::from_diagonal(&crate::mindex::multinomial_matrix(layout_dim, k).diagonal().map(|v| 1.0 / v));
    let left = &minv * nl.transpose();
    let inner = &nl * &left;
    let inv = pivot_inverse(&inner).map_err(|_| MvopError::RankDeficient)?;
    Ok(left * inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_examples() {
        let lay = Layout::new(2, 4);
        let l1 = shift_block(&lay, 0, 1);
        assert_eq!(l1, DMatrix::from_row_slice(2, 3, &[1., 0., 0., 0., 1., 0.]));
        let l2 = shift_block(&lay, 1, 1);
        assert_eq!(l2, DMatrix::from_row_slice(2, 3, &[0., 1., 0., 0., 0., 1.]));
        let fam = ShiftFamily::new(&lay);
        assert_eq!(fam.block(0, 1), l1);
        assert_eq!(fam.block(1, 2), shift_block(&lay, 1, 2));
        let lay1 = Layout::new(1, 5);
        for k in 0..4 {
            assert_eq!(shift_block(&lay1, 0, k), DMatrix::from_element(1, 1, 1.0));
        }
    }

    #[test]
    fn projection_example() {
        let lay = Layout::new(2, 3);
        assert_eq!(projection_block(&lay, 0, 1, 2).diagonal().as_slice(), &[1., 1., 0.]);
    }

    #[test]
    fn lambda_power_zero_is_identity() {
        let lay = Layout::new(3, 4);
        let p = lambda_power(&lay, &MultiIndex::zero(3), 4).unwrap();
        assert_eq!(p.dense(), &DMatrix::identity(lay.total(), lay.total()));
        assert!(lambda_power(&lay, &MultiIndex::new(vec![2, 2, 0]), 4).is_err());
    }

    #[test]
    fn right_inverse_one_dim() {
        let lay = Layout::new(1, 4);
        let fam = ShiftFamily::new(&lay);
        let r = right_inverse_dot_lambda(&fam, &[1.0], 2).unwrap();
        assert_eq!(r, DMatrix::from_element(1, 1, 1.0));
    }
}
