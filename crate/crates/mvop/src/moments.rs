//! Moment matrices of deformed measures and their exact shift-matrix actions.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::blockmat::BlockMatrix;
use crate::error::{MvopError, Result};
use crate::measure::{deformed_weights, neumaier_sum, FlowState, QuadratureRule};
use crate::mindex::{Layout, MultiIndex};

/// Moment matrix truncated at `L + B` levels; the last `B` levels are buffer.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    pub g: BlockMatrix,
    pub usable: usize,
    pub buffer: usize,
    pub layout: Arc<Layout>,
}

impl MomentMatrix {
    pub fn total_levels(&self) -> usize {
        self.usable + self.buffer
    }
}

/// Unique moments `∫x^α dμ` for `|α| ≤ max_degree`, indexed by the global
/// position of `α` in a layout of `max_degree + 1` levels.
pub fn raw_moments(rule: &QuadratureRule, weights: &[f64], max_degree: usize) -> (Layout, Vec<f64>) {
    let dim = rule.dim;
    let lay = Layout::new(dim, max_degree + 1);
    let n = rule.len();
    // pows[a][j * (max_degree+1) + p] = x_{j,a}^p
    let stride = max_degree + 1;
    let pows: Vec<Vec<f64>> = (0..dim)
        .map(|a| {
            let mut v = vec![0.0; n * stride];
            for j in 0..n {
                let x = rule.node(j)[a];
                let mut p = 1.0;
                for e in 0..stride {
                    v[j * stride + e] = p;
                    p *= x;
                }
            }
            v
        })
        .collect();
    let mut out = Vec::with_capacity(lay.total());
    for k in 0..lay.levels() {
        for q in &lay.basis(k).indices {
            let e = q.exps();
            out.push(neumaier_sum((0..n).map(|j| {
                let mut v = weights[j];
                for a in 0..dim {
                    v *= pows[a][j * stride + e[a] as usize];
                }
                v
            })));
        }
    }
    (lay, out)
}

/// `G = ∫χ dμ_{t,m} χᵀ` over `L + B` levels.
pub fn moment_matrix(
    layout: &Arc<Layout>,
    rule: &QuadratureRule,
    state: &FlowState,
    usable: usize,
    buffer: usize,
) -> Result<MomentMatrix> {
    let total = usable + buffer;
    if total > layout.levels() {
        return Err(MvopError::OutOfRange { requested: total, available: layout.levels() });
    }
    let w = deformed_weights(rule, state)?;
    Ok(assemble(layout, rule, &w, usable, buffer))
}

/// Moment matrix from explicit effective weights at the rule's nodes.
pub fn assemble(
    layout: &Arc<Layout>,
    rule: &QuadratureRule,
    weights: &[f64],
    usable: usize,
    buffer: usize,
) -> MomentMatrix {
    let total = usable + buffer;
    let (mlay, m) = raw_moments(rule, weights, 2 * (total - 1));
    let mut g = BlockMatrix::from_layout(layout, total);
    let n = g.total();
    let idx: Vec<&MultiIndex> = (0..total).flat_map(|k| layout.basis(k).indices.iter()).collect();
    let d = g.dense_mut();
    for i in 0..n {
        for j in i..n {
            let v = m[mlay.global_index(&idx[i].add(idx[j])).unwrap()];
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    g.symmetrize();
    MomentMatrix { g, usable, buffer, layout: layout.clone() }
}

/// `Λ_{q} G` truncated to `L + B − |q|` levels: `∂G/∂t_q` at the current times.
pub fn moment_time_derivative(mm: &MomentMatrix, q_time: &MultiIndex) -> Result<BlockMatrix> {
    let shift = q_time.len() as usize;
    if shift > mm.buffer {
        return Err(MvopError::OutOfRange { requested: shift, available: mm.buffer });
    }
    let levels = mm.total_levels() - shift;
    let mut out = BlockMatrix::from_layout(&mm.layout, levels);
    *out.dense_mut() = shifted_rows(mm, q_time, levels);
    Ok(out)
}

/// `(n·Λ − q) G` truncated to `L + B − 1` levels: the moments after one discrete step.
pub fn discrete_step_matrix(mm: &MomentMatrix, n: &[f64], q: f64) -> Result<BlockMatrix> {
    if mm.buffer < 1 {
        return Err(MvopError::OutOfRange { requested: 1, available: 0 });
    }
    let levels = mm.total_levels() - 1;
    let dim = mm.layout.dim();
    let mut out = mm.g.truncate(levels);
    *out.dense_mut() *= -q;
    for (a, &na) in n.iter().enumerate() {
        if na == 0.0 {
            continue;
        }
        let d = shifted_rows(mm, &MultiIndex::unit(dim, a), levels);
        *out.dense_mut() += d * na;
    }
    Ok(out)
}

fn shifted_rows(mm: &MomentMatrix, q: &MultiIndex, levels: usize) -> DMatrix<f64> {
    let lay = &mm.layout;
    let rows: Vec<usize> = (0..levels)
        .flat_map(|k| lay.basis(k).indices.iter())
        .map(|p| lay.global_index(&p.add(q)).unwrap())
        .collect();
    let n = lay.offset(levels);
    let g = mm.g.dense();
    DMatrix::from_fn(n, n, |i, j| g[(rows[i], j)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{build_quadrature, MeasureSpec};
    use approx::assert_relative_eq;

    #[test]
    fn square_moments() {
        let lay = Arc::new(Layout::new(2, 4));
        let rule = build_quadrature(&MeasureSpec::lebesgue(2), 8).unwrap();
        let mm = moment_matrix(&lay, &rule, &FlowState::zero(2), 3, 1).unwrap();
        let g = mm.g.dense();
        assert_relative_eq!(g[(0, 0)], 4.0, epsilon = 1e-14);
        assert_relative_eq!(g[(1, 1)], 4.0 / 3.0, epsilon = 1e-14);
        assert!(g[(1, 2)].abs() < 1e-15);
    }

    #[test]
    fn one_dim_hilbert_like() {
        let lay = Arc::new(Layout::new(1, 6));
        let rule = build_quadrature(&MeasureSpec::lebesgue(1), 8).unwrap();
        let mm = moment_matrix(&lay, &rule, &FlowState::zero(1), 4, 2).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let e = if (i + j) % 2 == 0 { 2.0 / (i + j + 1) as f64 } else { 0.0 };
                assert_relative_eq!(mm.g.dense()[(i, j)], e, epsilon = 1e-14);
            }
        }
        let d = moment_time_derivative(&mm, &MultiIndex::unit(1, 0)).unwrap();
        assert_eq!(d.dense()[(2, 3)], mm.g.dense()[(3, 3)]);
    }

    #[test]
    fn step_example() {
        let lay = Arc::new(Layout::new(2, 4));
        let rule = build_quadrature(&MeasureSpec::lebesgue(2), 8).unwrap();
        let mm = moment_matrix(&lay, &rule, &FlowState::zero(2), 3, 1).unwrap();
        let t = discrete_step_matrix(&mm, &[1.0, 0.0], -2.0).unwrap();
        assert_relative_eq!(t.dense()[(0, 0)], 8.0, epsilon = 1e-14);
    }
}
