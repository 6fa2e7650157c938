use mvop::darboux::*;
use mvop::measure::{FlowState, MeasureSpec};
use mvop::mvopr::SystemBuilder;
use nalgebra::DMatrix;

fn square(levels: usize) -> SystemBuilder {
    SystemBuilder::new(MeasureSpec::lebesgue(2), 40, levels, 2).unwrap()
}

#[test]
fn christoffel_routes_two_dims() {
    let b = square(5);
    let s = b.system(&FlowState::zero(2)).unwrap();
    let h1 = Hyperplane::new(vec![0.6, 0.8], -2.0);
    let h2 = Hyperplane::new(vec![-0.28, 0.96], 2.1);
    let t1 = b.system_reweighted(&FlowState::zero(2), |x| h1.factor(x)).unwrap();
    let t2 = b.system_reweighted(&FlowState::zero(2), |x| h1.factor(x) * h2.factor(x)).unwrap();
    let e = elementary_darboux(&s, &h1, 3, 1.5, 11).unwrap();
    let e2 = elementary_darboux(&s, &h1, 3, 1.5, 99).unwrap();
    let m2 = m_step_christoffel(&s, &[h1.clone(), h2.clone()], 3, 1.5, 5).unwrap();
    let x = [0.3, -0.45];
    let z = [2.5, -1.8];
    for k in 0..=3 {
        let d = (e.tp(&s, k, &x).unwrap() - t1.p(k, &x)).amax();
        assert!(d < 1e-8, "TP k={k} {d:e}");
        let dn = (e.tp(&s, k, &x).unwrap() - e2.tp(&s, k, &x).unwrap()).amax();
        assert!(dn < 1e-7, "node choice k={k} {dn:e}");
        let dh = (&e.th[k] - t1.h(k)).amax() / t1.h(k).amax();
        assert!(dh < 1e-8, "TH k={k} {dh:e}");
        let dc = (e.tc(&s, k, &z).unwrap() - t1.eval_c(k, &z).unwrap()).amax();
        assert!(dc < 1e-8, "TC k={k} {dc:e}");
        let d2 = (m2.tp(&s, k, &x).unwrap() - t2.p(k, &x)).amax();
        assert!(d2 < 1e-7, "two-step TP k={k} {d2:e}");
        let dh2 = (&m2.th[k] - t2.h(k)).amax() / t2.h(k).amax();
        assert!(dh2 < 1e-7, "two-step TH k={k} {dh2:e}");
    }
    let dir = resolvent_direct(&s, &t2, &[h1.clone(), h2.clone()], 3).unwrap();
    for (k, (dk, ok)) in dir.iter().zip(&m2.omega).enumerate().take(4) {
        for (j, (dj, oj)) in dk.iter().zip(ok).enumerate().take(3) {
            let d = (dj - oj).amax();
            assert!(d < 1e-7, "resolvent k={k} j={j} {d:e}");
        }
    }
    let y = [-0.7, 0.2];
    for l in 1..5 {
        let r = cd_transform_residual(&s, &t1, &h1, l, &x, &y).unwrap();
        assert!(r < 1e-8, "one-step kernel l={l} {r:e}");
    }
    for l in 2..5 {
        let om = resolvent_direct(&s, &t2, &[h1.clone(), h2.clone()], l - 1).unwrap();
        let r = cd_transform_residual_m(&s, &t2, &[h1.clone(), h2.clone()], &om, l, &x, &y).unwrap();
        assert!(r < 1e-7, "two-step kernel l={l} {r:e}");
    }
}

#[test]
fn lattice_two_dims() {
    let b = square(5);
    let st = FlowState::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 1.0]), vec![-2.5, 2.4]);
    let fam = LatticeFamily::new(b, st);
    for a in 0..2 {
        let s = fam.at(&[0, 0]).unwrap();
        let t = fam.at(&fam.unit(a)).unwrap();
        let n = fam.direction(a);
        let q = fam.offset(a);
        let c = connection_matrices(&s, &t, &n, q).unwrap();
        assert!(c.route_gap < 1e-8, "route gap a={a} {:e}", c.route_gap);
        let (lu, ul) = lu_ul_residuals(&s, &t, &n, q).unwrap();
        assert!(lu < 1e-8 && ul < 1e-8, "LU/UL a={a} {lu:e} {ul:e}");
        for k in 0..4 {
            let (r, al) = resolvent_quasideterminant(&s, &n, q, k).unwrap();
            let d = (al - &c.alpha[k]).amax();
            assert!(d < 1e-8, "alpha k={k} {d:e}");
            if let Some(r) = r {
                let d = (r - &c.rho[k]).amax();
                assert!(d < 1e-8, "rho k={k} {d:e}");
            }
        }
        for bb in 0..2 {
            let lz = discrete_laxzs_residuals(&fam, a, bb).unwrap();
            assert!(lz.iter().all(|v| *v < 1e-8), "Lax/ZS {a}{bb} {lz:?}");
            for k in 1..4 {
                let (th, tb) = discrete_toda_residuals(&fam, a, bb, k).unwrap();
                assert!(th < 1e-8 && tb < 1e-8, "discrete Toda {a}{bb} k={k} {th:e} {tb:e}");
            }
        }
    }
}

#[test]
fn quotients_two_dims() {
    let b = square(4);
    let fam = LatticeFamily::new(b.clone(), FlowState::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), vec![-2.0, 2.5]));
    let s = fam.at(&[0, 0]).unwrap();
    let ninv = fam.base.n.clone().try_inverse().unwrap();
    let pt = ninv * nalgebra::DVector::from_column_slice(&fam.base.q);
    for k in 0..4 {
        let d = (tau_quotient_p(&fam, k).unwrap() - s.p(k, pt.as_slice())).amax();
        assert!(d < 1e-8, "P quotient k={k} {d:e}");
    }
    let fam = LatticeFamily::new(b, FlowState::new(DMatrix::identity(2, 2), vec![-2.5, 3.0]));
    let s = fam.at(&[0, 0]).unwrap();
    for k in 0..3 {
        let c = tau_quotient_c(&fam, k).unwrap();
        let e = s.eval_c(k, &[-2.5, 3.0]).unwrap();
        let d = (&c - &e).amax() / e.amax();
        assert!(d < 1e-6, "C quotient k={k} {d:e}");
    }
}
