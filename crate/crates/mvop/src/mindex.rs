//! Multi-indices, the graded order on monomials, and multinomial matrices.
//!
//! Within a level `k` the exponent vectors are generated with the first
//! exponent descending, so `x₁^k` always comes first and `x_D^k` last.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{MvopError, Result};

/// Exponent vector `(α₁, …, α_D)` with its cached length `Σα_a`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex {
    exps: Vec<u32>,
    len: u32,
}

impl MultiIndex {
    pub fn new(exps: Vec<u32>) -> Self {
        let len = exps.iter().sum();
        Self { exps, len }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![0; dim])
    }

    /// Unit index `e_a` (0-based axis).
    pub fn unit(dim: usize, a: usize) -> Self {
        let mut e = vec![0; dim];
        e[a] = 1;
        Self::new(e)
    }

    /// Sum of unit indices, e.g. `[a, b]` gives `e_a + e_b`.
    pub fn from_axes(dim: usize, axes: &[usize]) -> Self {
        let mut e = vec![0; dim];
        for &a in axes {
            e[a] += 1;
        }
        Self::new(e)
    }

    pub fn exps(&self) -> &[u32] {
        &self.exps
    }

    pub fn dim(&self) -> usize {
        self.exps.len()
    }

    /// Total degree `|q|`.
    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex::new(self.exps.iter().zip(&other.exps).map(|(a, b)| a + b).collect())
    }

    pub fn add_axis(&self, a: usize) -> MultiIndex {
        let mut e = self.exps.clone();
        e[a] += 1;
        MultiIndex::new(e)
    }

    /// `x^q`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.exps
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }

    /// `|q|! / Π α_a!`.
    pub fn multinomial(&self) -> f64 {
        let mut r = factorial(self.len);
        for &e in &self.exps {
            r /= factorial(e);
        }
        r
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.exps.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

impl Ord for MultiIndex {
    /// Graded order: shorter first; within a level the first differing
    /// coordinate with the larger exponent comes first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.len.cmp(&other.len).then_with(|| {
            for (a, b) in self.exps.iter().zip(&other.exps) {
                if a != b {
                    return b.cmp(a);
                }
            }
            Ordering::Equal
        })
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// All multi-indices of one level, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBasis {
    pub dim: usize,
    pub level: usize,
    pub indices: Vec<MultiIndex>,
}

impl LevelBasis {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `χ_[k](x)`.
    pub fn eval_chi(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.indices.iter().map(|q| q.monomial(x)))
    }
}

fn generate(dim: usize, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
    if prefix.len() + 1 == dim {
        prefix.push(k);
        out.push(MultiIndex::new(prefix.clone()));
        prefix.pop();
        return;
    }
    for a in (0..=k).rev() {
        prefix.push(a);
        generate(dim, k - a, prefix, out);
        prefix.pop();
    }
}

/// Enumerate `[k]` for dimension `dim`.
pub fn enumerate_level(dim: usize, k: usize) -> LevelBasis {
    assert!(dim >= 1, "dimension must be positive");
    let mut out = Vec::new();
    generate(dim, k as u32, &mut Vec::with_capacity(dim), &mut out);
    LevelBasis { dim, level: k, indices: out }
}

/// `|[k]| = C(D+k−1, k)`.
pub fn level_size(dim: usize, k: usize) -> Result<usize> {
    if dim == 0 {
        return Err(MvopError::InvalidArgument("dimension must be positive".into()));
    }
    // C(n, r) with r = min(k, dim-1), built incrementally so each step is exact.
    let n = dim - 1 + k;
    let r = k.min(dim - 1);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc
            .checked_mul((n - i) as u128)
            .ok_or(MvopError::Overflow { dim, level: k })?
            / (i + 1) as u128;
    }
    usize::try_from(acc).map_err(|_| MvopError::Overflow { dim, level: k })
}

/// `M_[k] = diag(k!/Πα!)`.
pub fn multinomial_matrix(dim: usize, k: usize) -> DMatrix<f64> {
    let basis = enumerate_level(dim, k);
    DMatrix::from_diagonal(&DVector::from_iterator(
        basis.len(),
        basis.indices.iter().map(MultiIndex::multinomial),
    ))
}

/// Level bases `[0] … [L−1]` with global offsets and position lookup.
#[derive(Debug, Clone)]
pub struct Layout {
    dim: usize,
    levels: Vec<LevelBasis>,
    offsets: Vec<usize>,
    lookup: Vec<HashMap<MultiIndex, usize>>,
}

impl Layout {
    pub fn new(dim: usize, levels: usize) -> Self {
        let bases: Vec<LevelBasis> = (0..levels).map(|k| enumerate_level(dim, k)).collect();
        let mut offsets = Vec::with_capacity(levels + 1);
        offsets.push(0);
        for b in &bases {
            offsets.push(offsets.last().unwrap() + b.len());
        }
        let lookup = bases
            .iter()
            .map(|b| b.indices.iter().cloned().enumerate().map(|(i, q)| (q, i)).collect())
            .collect();
        Self { dim, levels: bases, offsets, lookup }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of levels `L`.
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn basis(&self, k: usize) -> &LevelBasis {
        &self.levels[k]
    }

    pub fn size(&self, k: usize) -> usize {
        self.levels[k].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(LevelBasis::len).collect()
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// Total size `Σ_{k<L} |[k]|`.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Position of `q` within its level.
    pub fn position(&self, q: &MultiIndex) -> Option<usize> {
        self.lookup.get(q.len() as usize)?.get(q).copied()
    }

    /// Position of `q` in the full `χ`.
    pub fn global_index(&self, q: &MultiIndex) -> Option<usize> {
        self.position(q).map(|p| self.offsets[q.len() as usize] + p)
    }

    pub fn chi(&self, k: usize, x: &[f64]) -> DVector<f64> {
        self.levels[k].eval_chi(x)
    }

    /// `χ(x)` truncated to the first `levels` levels.
    pub fn chi_upto(&self, levels: usize, x: &[f64]) -> DVector<f64> {
        let mut v = DVector::zeros(self.offsets[levels]);
        for k in 0..levels {
            let c = self.chi(k, x);
            v.rows_mut(self.offsets[k], c.len()).copy_from(&c);
        }
        v
    }

    pub fn chi_all(&self, x: &[f64]) -> DVector<f64> {
        self.chi_upto(self.levels(), x)
    }

    pub fn multinomial(&self, k: usize) -> DMatrix<f64> {
        multinomial_matrix(self.dim, k)
    }
}
