use mvop::measure::{FlowState, MeasureSpec};
use mvop::mindex::MultiIndex;
use mvop::mvopr::SystemBuilder;
use mvop::toda::*;
use nalgebra::DMatrix;

fn family() -> (FlowFamily, FlowState) {
    let b = SystemBuilder::new(MeasureSpec::lebesgue(2), 64, 5, 3).unwrap();
    let at = FlowState::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 1.0]), vec![-2.5, 2.4])
        .with_time(&MultiIndex::unit(2, 0), 0.2)
        .with_time(&MultiIndex::new(vec![0, 2]), -0.1);
    (FlowFamily::new(b), at)
}

#[test]
fn lax_and_beta_flow() {
    let (fam, at) = family();
    let cfg = FlowDerivativeConfig::default();
    for a in 0..2 {
        let r = lax_residuals(&fam, &at, a, &cfg).unwrap();
        assert!(r.dressing < 1e-6 && r.beta < 1e-6 && r.h_diag < 1e-6, "{r:?}");
        let ds: Vec<f64> = [4e-3, 2e-3]
            .iter()
            .map(|h| beta_flow_defect(&fam, &at, a, 2, &FlowDerivativeConfig::plain(*h)).unwrap())
            .collect();
        let ratio = ds[0] / ds[1];
        assert!((3.5..4.5).contains(&ratio), "a={a} ratio {ratio}");
    }
}

#[test]
fn toda_type_equations() {
    let (fam, at) = family();
    let cfg = FlowDerivativeConfig::default();
    let c4 = FlowDerivativeConfig::new(4e-3, true).unwrap();
    for (a, b) in [(0, 0), (0, 1)] {
        for k in 1..4 {
            let (th, tb) = toda_equation_residual(&fam, &at, a, b, k, &c4).unwrap();
            assert!(th < 1e-5 && tb < 1e-5, "Toda {a}{b} k={k} {th:e} {tb:e}");
            let (m1, m2) = mixed_toda_residuals(&fam, &at, a, b, k, &c4).unwrap();
            assert!(m1 < 1e-5 && m2 < 1e-5, "mixed {a}{b} k={k} {m1:e} {m2:e}");
            let t3 = beta_lattice_residual(&fam, &at, a, b, k, &cfg).unwrap();
            assert!(t3 < 1e-5, "beta lattice {a}{b} k={k} {t3:e}");
        }
    }
    for k in 0..4 {
        let (c1, c2) = beta_tau_chain(&fam, &at, k, &cfg).unwrap();
        assert!(c1 < 1e-6 && c2 < 1e-6, "chain k={k} {c1:e} {c2:e}");
    }
}

#[test]
fn higher_order_equations() {
    let (fam, at) = family();
    let cfg = FlowDerivativeConfig::default();
    let c4 = FlowDerivativeConfig::new(4e-3, true).unwrap();
    let z = [0.37, -0.52];
    let w = [2.7, -3.1];
    for k in 1..4 {
        let dc = discrete_continuous_residual(&fam, &at, 0, k, &z, Some(&w), &cfg).unwrap();
        assert!(dc.0 < 1e-6 && dc.1.is_none_or(|v| v < 1e-6), "discrete/continuous k={k} {dc:?}");
        let s = schrodinger_residual(&fam, &at, 0, 1, k, &z, &c4).unwrap();
        assert!(s < 1e-5, "Schrodinger k={k} {s:e}");
        let t4 = beta_second_order_residual(&fam, &at, [0, 0, 1, 1], k, &c4).unwrap();
        assert!(t4 < 1e-4, "second order k={k} {t4:e}");
        let t = third_order_residual(&fam, &at, [0, 0, 1], k, &z, &c4).unwrap();
        assert!(t < 1e-4, "third order k={k} {t:e}");
    }
    let c2 = FlowDerivativeConfig::new(1e-2, true).unwrap();
    for k in 2..4 {
        let r = beta2_first_residual(&fam, &at, 0, k, &c4).unwrap();
        assert!(r < 1e-5, "beta2 first k={k} {r:e}");
        let r2 = beta2_second_residuals(&fam, &at, 0, 1, k, &c2).unwrap();
        assert!(r2.0 < 1e-4 && r2.1 < 1e-4, "beta2 second k={k} {r2:?}");
    }
}

#[test]
fn miwa_deviation_decays() {
    let b = SystemBuilder::new(MeasureSpec::lebesgue(1), 64, 5, 2).unwrap();
    let devs: Vec<f64> = (2..10).map(|k| miwa_consistency_check(&b, &[1.0], 3.0, k).unwrap()).collect();
    assert!(devs[6] < 1e-3, "{devs:?}");
    assert!(devs.windows(2).all(|w| w[1] < w[0]), "{devs:?}");
}
