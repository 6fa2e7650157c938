//! Level-partitioned dense matrices, Schur complements, quasi-determinants,
//! the block LDL factorization and full-column-rank pseudo-inverses.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{MvopError, Result};
use crate::mindex::Layout;

/// A pivot is singular when `σ_min < PIVOT_RCOND · σ_max`.
pub const PIVOT_RCOND: f64 = 1e-12;

/// Dense matrix partitioned into level blocks; block `(k, ℓ)` is `|[k]|×|[ℓ]|`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    dim: usize,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    data: DMatrix<f64>,
}

fn offsets_of(sizes: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(sizes.len() + 1);
    off.push(0);
    for s in sizes {
        off.push(off.last().unwrap() + s);
    }
    off
}

impl BlockMatrix {
    pub fn zeros(dim: usize, sizes: Vec<usize>) -> Self {
        let offsets = offsets_of(&sizes);
        let n = *offsets.last().unwrap();
        Self { dim, sizes, offsets, data: DMatrix::zeros(n, n) }
    }

    /// Zero matrix over the first `levels` levels of `layout`.
    pub fn from_layout(layout: &Layout, levels: usize) -> Self {
        Self::zeros(layout.dim(), layout.sizes()[..levels].to_vec())
    }

    pub fn identity(dim: usize, sizes: Vec<usize>) -> Self {
        let mut m = Self::zeros(dim, sizes);
        m.data.fill_with_identity();
        m
    }

    pub fn from_dense(dim: usize, sizes: Vec<usize>, data: DMatrix<f64>) -> Result<Self> {
        let offsets = offsets_of(&sizes);
        let n = *offsets.last().unwrap();
        if data.nrows() != n || data.ncols() != n {
            return Err(MvopError::InvalidArgument(format!(
                "dense matrix is {}x{}, block sizes need {n}x{n}",
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self { dim, sizes, offsets, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, k: usize) -> usize {
        self.sizes[k]
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn dense_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.data
    }

    pub fn into_dense(self) -> DMatrix<f64> {
        self.data
    }

    pub fn block(&self, k: usize, l: usize) -> DMatrix<f64> {
        self.data
            .view((self.offsets[k], self.offsets[l]), (self.sizes[k], self.sizes[l]))
            .into_owned()
    }

    pub fn set_block(&mut self, k: usize, l: usize, b: &DMatrix<f64>) {
        assert_eq!(b.shape(), (self.sizes[k], self.sizes[l]), "block shape mismatch");
        self.data
            .view_mut((self.offsets[k], self.offsets[l]), (self.sizes[k], self.sizes[l]))
            .copy_from(b);
    }

    /// Leading `levels × levels` block truncation.
    pub fn truncate(&self, levels: usize) -> BlockMatrix {
        let n = self.offsets[levels];
        BlockMatrix {
            dim: self.dim,
            sizes: self.sizes[..levels].to_vec(),
            offsets: self.offsets[..=levels].to_vec(),
            data: self.data.view((0, 0), (n, n)).into_owned(),
        }
    }

    pub fn transpose(&self) -> BlockMatrix {
        BlockMatrix { data: self.data.transpose(), ..self.clone() }
    }

    pub fn mul(&self, other: &BlockMatrix) -> BlockMatrix {
        assert_eq!(self.sizes, other.sizes, "block structures differ");
        BlockMatrix { data: &self.data * &other.data, ..self.clone() }
    }

    pub fn sub(&self, other: &BlockMatrix) -> BlockMatrix {
        assert_eq!(self.sizes, other.sizes, "block structures differ");
        BlockMatrix { data: &self.data - &other.data, ..self.clone() }
    }

    /// Replace by `(G + Gᵀ)/2`.
    pub fn symmetrize(&mut self) {
        let t = self.data.transpose();
        self.data = (&self.data + t) * 0.5;
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    /// Θ_* with respect to all but the last level.
    pub fn last_quasi_determinant(&self) -> Result<DMatrix<f64>> {
        last_quasi_determinant(&self.data, *self.sizes.last().unwrap())
    }

    /// Text dump: dimension, level count, then every block.
    pub fn dump(&self) -> String {
        let mut blocks = Vec::new();
        for k in 0..self.levels() {
            for l in 0..self.levels() {
                blocks.push((k, l, self.block(k, l)));
            }
        }
        dump_blocks(self.dim, self.levels(), &blocks)
    }
}

/// Writes `D`, `L`, then each `(k, ℓ)` block row-major at 17 significant digits.
pub fn dump_blocks(dim: usize, levels: usize, blocks: &[(usize, usize, DMatrix<f64>)]) -> String {
    let mut s = String::new();
    writeln!(s, "D {dim}").unwrap();
    writeln!(s, "L {levels}").unwrap();
    for (k, l, b) in blocks {
        writeln!(s, "block {k} {l} {} {}", b.nrows(), b.ncols()).unwrap();
        for i in 0..b.nrows() {
            let row: Vec<String> = (0..b.ncols()).map(|j| format!("{:.16e}", b[(i, j)])).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
    }
    s
}

/// Labelled blocks `(row level, column level, block)`.
pub type LabelledBlocks = Vec<(usize, usize, DMatrix<f64>)>;

/// Parses the output of [`dump_blocks`].
pub fn parse_dump(text: &str) -> Result<(usize, usize, LabelledBlocks)> {
    let bad = |m: &str| MvopError::InvalidArgument(format!("malformed dump: {m}"));
    let mut lines = text.lines();
    let mut header = |tag: &str| -> Result<usize> {
        let line = lines.next().ok_or_else(|| bad("missing header"))?;
        line.strip_prefix(tag)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(line))
    };
    let dim = header("D ")?;
    let levels = header("L ")?;
    let mut blocks = Vec::new();
    while let Some(line) = lines.next() {
        let f: Vec<usize> = line
            .strip_prefix("block ")
            .ok_or_else(|| bad(line))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(line)))
            .collect::<Result<_>>()?;
        if f.len() != 4 {
            return Err(bad(line));
        }
        let mut b = DMatrix::zeros(f[2], f[3]);
        for i in 0..f[2] {
            let row = lines.next().ok_or_else(|| bad("truncated block"))?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(row)))
                .collect::<Result<_>>()?;
            if vals.len() != f[3] {
                return Err(bad(row));
            }
            for (j, v) in vals.into_iter().enumerate() {
                b[(i, j)] = v;
            }
        }
        blocks.push((f[0], f[1], b));
    }
    Ok((dim, levels, blocks))
}

/// Largest absolute entry.
pub fn max_abs<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<f64, R, C>>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Inverse of a pivot block, rejecting numerically singular ones.
pub fn pivot_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    assert!(a.is_square(), "pivot must be square");
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sv = a.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smax.is_nan() || smax <= 0.0 || smin < PIVOT_RCOND * smax {
        return Err(MvopError::SingularPivot { ratio: if smax > 0.0 { smin / smax } else { 0.0 } });
    }
    a.clone().try_inverse().ok_or(MvopError::SingularPivot { ratio: smin / smax })
}

/// `D − C A⁻¹ B` for `M = [[A, B], [C, D]]` with `A` of size `split`.
pub fn schur_complement(m: &DMatrix<f64>, split: usize) -> Result<DMatrix<f64>> {
    assert!(m.is_square() && split <= m.nrows(), "bad partition");
    let n = m.nrows() - split;
    let a = m.view((0, 0), (split, split)).into_owned();
    let b = m.view((0, split), (split, n));
    let c = m.view((split, 0), (n, split));
    let d = m.view((split, split), (n, n));
    let ainv = pivot_inverse(&a)?;
    Ok(d - c * ainv * b)
}

/// Θ_*: Schur complement with respect to everything but the trailing `last` rows/columns.
pub fn last_quasi_determinant(m: &DMatrix<f64>, last: usize) -> Result<DMatrix<f64>> {
    schur_complement(m, m.nrows() - last)
}

/// Factors of `G = S⁻¹ H S⁻ᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactors {
    /// Block lower unitriangular.
    pub s: BlockMatrix,
    /// `S⁻¹`.
    pub s_inv: BlockMatrix,
    pub h: Vec<DMatrix<f64>>,
    pub h_inv: Vec<DMatrix<f64>>,
}

impl CholeskyFactors {
    pub fn levels(&self) -> usize {
        self.h.len()
    }

    /// `β_[k] = S_[k],[k−1]` (k ≥ 1).
    pub fn beta(&self, k: usize) -> DMatrix<f64> {
        self.s.block(k, k - 1)
    }

    /// `β⁽ʲ⁾_[k] = S_[k],[k−j]`.
    pub fn beta_j(&self, k: usize, j: usize) -> DMatrix<f64> {
        self.s.block(k, k - j)
    }

    /// `H` as a block-diagonal matrix.
    pub fn h_matrix(&self) -> BlockMatrix {
        let mut m = BlockMatrix::zeros(self.s.dim(), self.s.sizes().to_vec());
        for (k, h) in self.h.iter().enumerate() {
            m.set_block(k, k, h);
        }
        m
    }
}

/// Block LDL by level-wise Schur complements.
pub fn block_ldl_factorize(g: &BlockMatrix) -> Result<CholeskyFactors> {
    let nl = g.levels();
    let mut lf = BlockMatrix::identity(g.dim(), g.sizes().to_vec());
    let mut h: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
    let mut h_inv: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
    // lh[l][i] = L_{l,i} H_i
    let mut lh: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(nl);
    for l in 0..nl {
        let mut row_lh = Vec::with_capacity(l);
        for (j, hj_inv) in h_inv.iter().enumerate() {
            let mut acc = g.block(l, j);
            for (i, lhi) in row_lh.iter().enumerate().take(j) {
                let lji: DMatrix<f64> = lf.block(j, i);
                acc -= lhi * lji.transpose();
            }
            let lj = &acc * hj_inv;
            lf.set_block(l, j, &lj);
            row_lh.push(acc);
        }
        let mut acc = g.block(l, l);
        for (i, lhi) in row_lh.iter().enumerate() {
            acc -= lhi * lf.block(l, i).transpose();
        }
        let acc = (&acc + acc.transpose()) * 0.5;
        let inv = pivot_inverse(&acc).map_err(|_| MvopError::SingularTruncation { level: l })?;
        h.push(acc);
        h_inv.push(inv);
        lh.push(row_lh);
    }
    // S = L⁻¹ by block forward substitution.
    let mut s = BlockMatrix::identity(g.dim(), g.sizes().to_vec());
    for l in 1..nl {
        for j in (0..l).rev() {
            let mut acc = lf.block(l, j);
            for i in (j + 1)..l {
                acc += lf.block(l, i) * s.block(i, j);
            }
            s.set_block(l, j, &(-acc));
        }
    }
    Ok(CholeskyFactors { s, s_inv: lf, h, h_inv })
}

/// `G^{[ℓ+1]}_k`: the truncation `G^{[ℓ+1]}` with its last block row
/// replaced by `(G_[k],[0] … G_[k],[ℓ])`.
pub fn bordered_truncation(g: &BlockMatrix, k: usize, l: usize) -> Result<DMatrix<f64>> {
    let need = k.max(l) + 1;
    if need > g.levels() {
        return Err(MvopError::OutOfRange { requested: need, available: g.levels() });
    }
    if k < l {
        return Err(MvopError::InvalidArgument("bordered truncation needs k ≥ ℓ".into()));
    }
    let top = g.offset(l);
    let cols = g.offset(l + 1);
    let rows = top + g.size(k);
    let mut m = DMatrix::zeros(rows, cols);
    let d = g.dense();
    m.view_mut((0, 0), (top, cols)).copy_from(&d.view((0, 0), (top, cols)));
    m.view_mut((top, 0), (g.size(k), cols))
        .copy_from(&d.view((g.offset(k), 0), (g.size(k), cols)));
    Ok(m)
}

/// `A⁺ = (AᵀA)⁻¹Aᵀ` for full column rank `A`.
pub fn pseudo_inverse_full_column_rank(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let at = a.transpose();
    let corr = &at * a;
    let inv = pivot_inverse(&corr).map_err(|_| MvopError::RankDeficient)?;
    Ok(inv * at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn schur_examples() {
        assert_relative_eq!(schur_complement(&m(2, 2, &[1., 0., 0., 5.]), 1).unwrap()[(0, 0)], 5.0);
        assert_relative_eq!(schur_complement(&m(2, 2, &[2., 1., 1., 2.]), 1).unwrap()[(0, 0)], 1.5);
        let full = m(3, 3, &[1., 0., 2., 0., 1., 3., 4., 5., 6.]);
        let expect = 6.0 - (4.0 * 2.0 + 5.0 * 3.0);
        assert_relative_eq!(schur_complement(&full, 2).unwrap()[(0, 0)], expect);
    }

    #[test]
    fn singular_pivot_detected() {
        let r = schur_complement(&m(2, 2, &[0., 1., 1., 0.]), 1);
        assert!(matches!(r, Err(MvopError::SingularPivot { .. })));
    }

    #[test]
    fn quasi_determinant_block_diagonal() {
        let mut b = BlockMatrix::zeros(2, vec![1, 2, 3]);
        b.set_block(0, 0, &m(1, 1, &[2.0]));
        b.set_block(1, 1, &m(2, 2, &[1., 0.5, 0.5, 3.]));
        let c = m(3, 3, &[4., 1., 0., 1., 5., 1., 0., 1., 6.]);
        b.set_block(2, 2, &c);
        assert_relative_eq!(b.last_quasi_determinant().unwrap(), c, epsilon = 1e-14);
    }

    #[test]
    fn identity_factorizes_trivially() {
        let g = BlockMatrix::identity(2, vec![1, 2, 3]);
        let f = block_ldl_factorize(&g).unwrap();
        assert_eq!(f.s, BlockMatrix::identity(2, vec![1, 2, 3]));
        for h in &f.h {
            assert_eq!(*h, DMatrix::identity(h.nrows(), h.ncols()));
        }
    }

    #[test]
    fn bordered_identity_has_zero_border() {
        let g = BlockMatrix::identity(2, vec![1, 2, 3, 4]);
        let b = bordered_truncation(&g, 3, 1).unwrap();
        assert_eq!(b.shape(), (1 + 4, 3));
        assert!(b.rows(1, 4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudo_inverse_examples() {
        let p = pseudo_inverse_full_column_rank(&m(2, 1, &[1., 1.])).unwrap();
        assert_relative_eq!(p, m(1, 2, &[0.5, 0.5]), epsilon = 1e-15);
        assert_eq!(
            pseudo_inverse_full_column_rank(&DMatrix::identity(3, 3)).unwrap(),
            DMatrix::identity(3, 3)
        );
        assert!(pseudo_inverse_full_column_rank(&m(2, 2, &[1., 2., 2., 4.])).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let mut b = BlockMatrix::zeros(2, vec![1, 2]);
        b.dense_mut()[(1, 2)] = 1.0 / 3.0;
        b.dense_mut()[(0, 0)] = -2.5e-17;
        let text = b.dump();
        let (d, l, blocks) = parse_dump(&text).unwrap();
        assert_eq!((d, l, blocks.len()), (2, 2, 4));
        assert_eq!(blocks[3].2[(0, 1)], 1.0 / 3.0);
        assert_eq!(blocks[0].2[(0, 0)], -2.5e-17);
    }
}
