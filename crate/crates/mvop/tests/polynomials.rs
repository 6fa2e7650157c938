use mvop::measure::{FlowState, MeasureSpec};
use mvop::mvopr::{eval_p_quasideterminant, PolynomialSystem, SystemBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn system(spec: MeasureSpec, order: usize, l: usize) -> PolynomialSystem {
    let dim = spec.dim;
    SystemBuilder::new(spec, order, l, 2).unwrap().system(&FlowState::zero(dim)).unwrap()
}

fn pt(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(lo..hi)).collect()
}

fn outside(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let v: f64 = rng.random_range(1.5..3.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect()
}

#[test]
fn identities_in_two_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for spec in [MeasureSpec::lebesgue(2), MeasureSpec::jacobi(2, 0.5, 0.5)] {
        let s = system(spec, 48, 5);
        for _ in 0..10 {
            let x = pt(&mut rng, 2, -1.0, 1.0);
            let y = pt(&mut rng, 2, -1.0, 1.0);
            let n = pt(&mut rng, 2, -1.0, 1.0);
            for k in 0..4 {
                let r = s.three_term_residual(&n, k, &x).unwrap();
                assert!(r < 1e-10, "three-term k={k} r={r}");
                let q = eval_p_quasideterminant(&s.moments, k, &x).unwrap();
                assert!((q - s.p(k, &x)).amax() < 1e-10);
            }
            for l in 1..5 {
                let r = s.cd_formula_residual(l, &n, &x, &y).unwrap();
                assert!(r < 1e-9, "cd l={l} r={r}");
            }
            let z = outside(&mut rng, 2);
            let w = outside(&mut rng, 2);
            for k in 0..4 {
                let r = s.secondkind_three_term_residual(&n, k, &z).unwrap();
                assert!(r < 1e-8, "second kind k={k} r={r}");
            }
            for l in 1..5 {
                let r = s.q_kernel_residual(l, &n, &z, &w).unwrap();
                assert!(r < 1e-7, "kerQQ l={l} r={r}");
            }
        }
    }
}
