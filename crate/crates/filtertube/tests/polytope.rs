mod common;

use common::{random_matrix, random_polytope, vertex_support, vertex_support_rows, vertices};
use filtertube::polytope::{fuse_sets, fused_offsets, minkowski_support, Polytope};
use filtertube::qp::LinExpr;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n: usize) -> (ChaCha8Rng, Polytope) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_polytope(&mut rng, n);
    (rng, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn support_matches_vertices(seed in any::<u64>(), n in 1usize..=3, xi in prop::collection::vec(-2.0f64..2.0, 3)) {
        let (_, p) = instance(seed, n);
        let xi = DVector::from_column_slice(&xi[..n]);
        let s = p.support(xi.as_slice()).unwrap();
        let oracle = vertex_support(&p, &DMatrix::identity(n, n), &xi);
        prop_assert!((s - oracle).abs() < 1e-7, "{s} vs {oracle}");
    }

    #[test]
    fn support_is_additive(seed in any::<u64>(), n in 1usize..=3, xi in prop::collection::vec(-2.0f64..2.0, 3)) {
        let (mut rng, p) = instance(seed, n);
        let q = random_polytope(&mut rng, n);
        let t1 = random_matrix(&mut rng, n, n, 1.0);
        let t2 = random_matrix(&mut rng, n, n, 1.0);
        let xi = &xi[..n];
        let sum = minkowski_support(&[(t1.clone(), &p), (t2.clone(), &q)], xi).unwrap();
        let a = minkowski_support(&[(t1, &p)], xi).unwrap();
        let b = minkowski_support(&[(t2, &q)], xi).unwrap();
        prop_assert!((sum - a - b).abs() < 1e-8);
    }

    #[test]
    fn scaling_is_linear(seed in any::<u64>(), n in 1usize..=3, s in 0.0f64..3.0, xi in prop::collection::vec(-2.0f64..2.0, 3)) {
        let (_, p) = instance(seed, n);
        let xi = &xi[..n];
        let lhs = p.scale(s).support(xi).unwrap();
        let rhs = s * p.support(xi).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-8 * (1.0 + rhs.abs()));
    }

    #[test]
    fn pontryagin_difference_is_sound(seed in any::<u64>(), n in 1usize..=3) {
        let (mut rng, p) = instance(seed, n);
        let s = random_polytope(&mut rng, n).scale(0.2);
        let g = random_matrix(&mut rng, n, n, 1.0);
        let t = p.pontryagin_tighten(&[(g.clone(), &s)]);
        prop_assume!(t.is_ok());
        let t = t.unwrap();
        for v in vertices(&t) {
            for w in vertices(&s) {
                let x = &v + &g * &w;
                prop_assert!(p.margin(x.as_slice()) <= 1e-8);
            }
        }
    }

    #[test]
    fn one_hot_fusion_selects_member(seed in any::<u64>(), n in 1usize..=3, pick in 0usize..3) {
        let (mut rng, p) = instance(seed, n);
        let members: Vec<DVector<f64>> = (0..3).map(|_| {
            let q = random_polytope(&mut rng, n);
            // shared facet matrix, varied offsets
            p.offsets() + DVector::from_fn(p.n_facets(), |r, _| q.offsets()[r.min(q.n_facets() - 1)] * 0.1)
        }).collect();
        let coeffs: Vec<LinExpr> = (0..3).map(|k| LinExpr::constant(if k == pick { 1.0 } else { 0.0 })).collect();
        let fused = fused_offsets(&coeffs, &members).unwrap();
        for (r, e) in fused.iter().enumerate() {
            prop_assert!(e.terms.is_empty());
            prop_assert_eq!(e.constant, members[pick][r]);
        }
        let sets: Vec<Polytope> = members.iter().map(|h| p.with_offsets(h.clone())).collect();
        let refs: Vec<&Polytope> = sets.iter().collect();
        let mut w = vec![0.0; 3];
        w[pick] = 1.0;
        let f = fuse_sets(&w, &refs).unwrap();
        prop_assert_eq!(f.offsets(), &members[pick]);
    }

    #[test]
    fn image_support_rows_match_vertices(seed in any::<u64>(), n in 1usize..=3) {
        let (mut rng, y) = instance(seed, n);
        let x = random_polytope(&mut rng, n);
        let t = random_matrix(&mut rng, n, n, 1.0);
        let fast = x.image_support_rows(&t, y.hmat()).unwrap();
        let oracle = vertex_support_rows(&y, &t, &x);
        prop_assert!((fast - oracle).amax() < 1e-7);
    }
}

#[test]
fn box_detection() {
    let b = Polytope::from_box(&[-1.0, -2.0], &[3.0, 4.0]);
    assert_eq!(b.box_bounds().unwrap(), &[(-1.0, 3.0), (-2.0, 4.0)]);
    let tri = Polytope::new(
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]),
        DVector::from_vec(vec![1.0, 1.0, 0.0]),
    )
    .unwrap();
    assert!(tri.box_bounds().is_none());
}

#[test]
fn empty_tightening_detected() {
    let p = Polytope::inf_ball(2, 1.0);
    let big = Polytope::inf_ball(2, 2.0);
    let r = p.pontryagin_tighten(&[(DMatrix::identity(2, 2), &big)]);
    assert!(matches!(r, Err(filtertube::polytope::PolytopeError::EmptyResult)));
}

#[test]
fn subset_check_agrees_with_vertices() {
    let outer = Polytope::inf_ball(2, 1.0);
    let inner = Polytope::inf_ball(2, 0.5);
    assert!(inner.is_subset_of(&outer, 1e-9).unwrap());
    assert!(!outer.is_subset_of(&inner, 1e-9).unwrap());
    assert!(common::vertex_subset(&inner, &outer, 1e-12));
}
