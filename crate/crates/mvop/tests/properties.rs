use mvop::blockmat::{block_ldl_factorize, dump_blocks, parse_dump, BlockMatrix};
use mvop::measure::{FlowState, MeasureSpec};
use mvop::mindex::{enumerate_level, level_size, Layout};
use mvop::mvopr::SystemBuilder;
use mvop::shift::ShiftFamily;
use mvop::suites::random_orthogonal;
use mvop::symmetry::{chi_equivariance_residual, shift_conjugation_residual, IsometryAction};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn coords(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn level_sizes_are_binomial(d in 1usize..5, k in 0usize..7) {
        prop_assert_eq!(level_size(d, k).unwrap(), binomial(k + d - 1, d - 1));
        let basis = enumerate_level(d, k);
        prop_assert_eq!(basis.len(), level_size(d, k).unwrap());
        for w in basis.indices.windows(2) {
            prop_assert!(w[0].exps() > w[1].exps());
        }
    }

    #[test]
    fn layout_positions_round_trip(d in 1usize..4, l in 1usize..6) {
        let layout = Layout::new(d, l);
        for k in 0..l {
            for (i, q) in layout.basis(k).indices.iter().enumerate() {
                prop_assert_eq!(layout.position(q), Some(i));
                prop_assert_eq!(layout.global_index(q), Some(layout.offset(k) + i));
            }
        }
    }

    #[test]
    fn shift_multiplies_by_coordinate(d in 1usize..4, x in coords(3), a in 0usize..3, k in 0usize..4) {
        prop_assume!(a < d);
        let layout = Layout::new(d, 5);
        let shifts = ShiftFamily::new(&layout);
        let x = &x[..d];
        let lhs = shifts.block(a, k) * layout.chi(k + 1, x);
        let rhs = layout.chi(k, x) * x[a];
        prop_assert!((lhs - rhs).amax() < 1e-14);
    }

    #[test]
    fn block_ldl_reconstructs(seed in any::<u64>(), d in 1usize..3) {
        let layout = Layout::new(d, 4);
        let n = layout.total();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let g = &a * a.transpose() + DMatrix::identity(n, n) * n as f64;
        let bm = BlockMatrix::from_dense(d, layout.sizes(), g.clone()).unwrap();
        let f = block_ldl_factorize(&bm).unwrap();
        let back = f.s_inv.mul(&f.h_matrix()).mul(&f.s_inv.transpose());
        prop_assert!((back.dense() - &g).amax() / g.amax() < 1e-12);
        for k in 0..4 {
            let q = bm.truncate(k + 1).last_quasi_determinant().unwrap();
            prop_assert!((&q - &f.h[k]).amax() / g.amax() < 1e-12);
            prop_assert!((&f.h[k] - f.h[k].transpose()).amax() < 1e-12 * g.amax());
        }
    }

    #[test]
    fn dump_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<_> = (0..3)
            .map(|k| (k, k, DMatrix::from_fn(k + 1, k + 1, |_, _| rand::Rng::random_range(&mut rng, -1e3..1e3))))
            .collect();
        let (d, l, back) = parse_dump(&dump_blocks(2, 3, &blocks)).unwrap();
        prop_assert_eq!((d, l), (2, 3));
        prop_assert_eq!(back, blocks);
    }

    #[test]
    fn orthogonal_actions_are_representations(seed in any::<u64>(), d in 1usize..4, x in coords(3), n in coords(3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_orthogonal(d, &mut rng);
        let act = IsometryAction::new(r, 4).unwrap();
        prop_assert!(act.structure_defect() < 1e-12);
        prop_assert!(chi_equivariance_residual(&act, &x[..d]) < 1e-12);
        prop_assert!(shift_conjugation_residual(&act, &n[..d]) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn polynomials_satisfy_recurrences(x in coords(2), y in coords(2), n in coords(2), alpha in -0.5..1.5f64) {
        let spec = MeasureSpec::jacobi(2, alpha, 0.5);
        let sys = SystemBuilder::new(spec, 40, 4, 2).unwrap().system(&FlowState::zero(2)).unwrap();
        for k in 0..3 {
            prop_assert!(sys.three_term_residual(&n, k, &x).unwrap() < 1e-10);
            prop_assert!(sys.orthogonality_residual(k, k + 1).unwrap() < 1e-10);
        }
        for l in 1..4 {
            prop_assert!(sys.cd_formula_residual(l, &n, &x, &y).unwrap() < 1e-9);
        }
    }
}
