use mvop::measure::{FlowState, MeasureSpec};
use mvop::mindex::MultiIndex;
use mvop::mvopr::SystemBuilder;
use mvop::symmetry::*;
use nalgebra::DMatrix;

fn swap() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
}

fn quarter() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
}

fn rotation(theta: f64) -> DMatrix<f64> {
    let (c, s) = (theta.cos(), theta.sin());
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

fn samples() -> Vec<(Vec<f64>, Vec<f64>)> {
    vec![
        (vec![0.3, -0.7], vec![-0.2, 0.5]),
        (vec![0.9, 0.1], vec![0.4, 0.4]),
        (vec![-0.6, -0.6], vec![0.8, -0.1]),
    ]
}

#[test]
fn action_structure() {
    for r in [swap(), quarter(), rotation(0.7)] {
        let act = IsometryAction::new(r, 6).unwrap();
        assert!(act.structure_defect() < 1e-12);
        assert!(chi_equivariance_residual(&act, &[0.4, -1.3]) < 1e-12);
        assert!(shift_conjugation_residual(&act, &[0.6, 0.8]) < 1e-12);
        for a in 0..2 {
            assert!(isometry_right_inverse_residual(&act, a) < 1e-12);
        }
    }
    let (prod, inv) = representation_defect(&rotation(0.4), &quarter(), 6).unwrap();
    assert!(prod < 1e-12 && inv < 1e-12);
}

#[test]
fn three_dim_power() {
    let r = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let act = IsometryAction::new(r, 5).unwrap();
    assert!(act.structure_defect() < 1e-12);
    assert!(chi_equivariance_residual(&act, &[0.2, -0.5, 1.1]) < 1e-12);
}

#[test]
fn symmetric_measures_are_invariant() {
    for spec in [MeasureSpec::lebesgue(2), MeasureSpec::jacobi(2, 0.5, 0.5)] {
        let b = SystemBuilder::new(spec, 40, 5, 2).unwrap();
        let state = FlowState::zero(2)
            .with_time(&MultiIndex::new(vec![2, 0]), -0.3)
            .with_time(&MultiIndex::new(vec![0, 2]), -0.3);
        let sys = b.system(&state).unwrap();
        for r in [swap(), quarter()] {
            let act = IsometryAction::new(r, sys.levels()).unwrap();
            assert!(invariant_time_check(&act, &state).0);
            let res = measure_invariance_residuals(&sys, &act, &[0.6, -0.3], &samples()).unwrap();
            for (name, v) in res.named() {
                assert!(v < 1e-10, "{name}: {v}");
            }
        }
    }
}

#[test]
fn asymmetric_measure_is_detected() {
    let b = SystemBuilder::new(MeasureSpec::jacobi(2, 1.5, 0.0), 40, 5, 2).unwrap();
    let sys = b.system(&FlowState::zero(2)).unwrap();
    let act = IsometryAction::new(quarter(), sys.levels()).unwrap();
    let res = measure_invariance_residuals(&sys, &act, &[0.6, -0.3], &samples()).unwrap();
    assert!(res.max() > 1e-3, "{res:?}");
    assert!(res.moments > 1e-3);
}
