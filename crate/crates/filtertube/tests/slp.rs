mod common;

use common::{random_matrix, random_polytope, vertex_support_rows};
use filtertube::slp::{forward_phi_e, rollout_error, shift, slp_residual, tube_offsets, Blt};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_blt(rng: &mut ChaCha8Rng, h: usize, r: usize, c: usize, scale: f64) -> Blt {
    Blt::from_fn(h, r, c, |_, _| random_matrix(rng, r, c, scale))
}

/// Block row `k` moved to `k + 1`, first block row zero.
fn down_shift(m: &DMatrix<f64>, block: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let rows = m.nrows() - block;
    out.view_mut((block, 0), (rows, m.ncols())).copy_from(&m.view((0, 0), (rows, m.ncols())));
    out
}

fn block_diag(m: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows() * count, m.ncols() * count);
    for k in 0..count {
        out.view_mut((k * m.nrows(), k * m.ncols()), m.shape()).copy_from(m);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn forward_recursion_solves_dense_equality(seed in any::<u64>(), h in 1usize..6, n in 1usize..4, m in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, n, n, 1.0);
        let b = random_matrix(&mut rng, n, m, 1.0);
        let nu = random_blt(&mut rng, h, m, n, 1.0);
        let sig = random_blt(&mut rng, h, n, n, 1.0);
        let e = forward_phi_e(&nu, &sig, &a, &b);
        prop_assert!(slp_residual(&e, &nu, &sig, &a, &b).unwrap().max_abs() < 1e-9);
        // dense form: Φe = S (A Φe + B Φν) + Σ with S the block down-shift
        let (ed, nd, sd) = (e.to_dense(), nu.to_dense(), sig.to_dense());
        let rhs = down_shift(&(block_diag(&a, h) * &ed + block_diag(&b, h) * &nd), n) + &sd;
        prop_assert!((ed - rhs).amax() < 1e-9 * (1.0 + e.max_abs()));
    }

    #[test]
    fn rollout_matches_error_simulation(seed in any::<u64>(), h in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, 2, 2, 1.0);
        let b = random_matrix(&mut rng, 2, 1, 1.0);
        let nu = random_blt(&mut rng, h, 1, 2, 1.0);
        let sig = random_blt(&mut rng, h, 2, 2, 1.0);
        let e = forward_phi_e(&nu, &sig, &a, &b);
        let w: Vec<DVector<f64>> = (0..h).map(|_| random_matrix(&mut rng, 2, 1, 1.0).column(0).into()).collect();
        let (es, vs) = rollout_error(&e, &nu, &w).unwrap();
        // e_{i+1} = A e_i + B ν_i + Σ_j Σ(i+1, j) w_j, e_0 = 0, ν_0 = 0
        let mut x = DVector::zeros(2);
        let mut v = DVector::zeros(1);
        for i in 1..=h {
            let mut next = &a * &x + &b * &v;
            for (j, wj) in w.iter().enumerate().take(i) {
                next += sig.get(i, j) * wj;
            }
            x = next;
            prop_assert!((&x - &es[i - 1]).amax() < 1e-9 * (1.0 + x.amax()));
            v = DVector::zeros(1);
            for (j, wj) in w.iter().enumerate().take(i) {
                v += nu.get(i, j) * wj;
            }
            prop_assert!((&v - &vs[i - 1]).amax() < 1e-12 * (1.0 + v.amax()));
        }
    }

    #[test]
    fn rollout_is_linear(seed in any::<u64>(), h in 1usize..5, s in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_blt(&mut rng, h, 2, 2, 1.0);
        let nu = random_blt(&mut rng, h, 1, 2, 1.0);
        let w1: Vec<DVector<f64>> = (0..h).map(|_| random_matrix(&mut rng, 2, 1, 1.0).column(0).into()).collect();
        let w2: Vec<DVector<f64>> = (0..h).map(|_| random_matrix(&mut rng, 2, 1, 1.0).column(0).into()).collect();
        let mix: Vec<DVector<f64>> = w1.iter().zip(&w2).map(|(p, q)| p * s + q).collect();
        let (e1, n1) = rollout_error(&e, &nu, &w1).unwrap();
        let (e2, n2) = rollout_error(&e, &nu, &w2).unwrap();
        let (em, nm) = rollout_error(&e, &nu, &mix).unwrap();
        for i in 0..h {
            prop_assert!((&em[i] - (&e1[i] * s + &e2[i])).amax() < 1e-9);
            prop_assert!((&nm[i] - (&n1[i] * s + &n2[i])).amax() < 1e-9);
        }
    }

    #[test]
    fn shift_preserves_lower_blocks(seed in any::<u64>(), h in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_blt(&mut rng, h, 2, 1, 1.0);
        let row: Vec<DMatrix<f64>> = (0..h).map(|_| random_matrix(&mut rng, 2, 1, 1.0)).collect();
        let s = shift(&a, &row).unwrap();
        let (ad, sd) = (a.to_dense(), s.to_dense());
        // dense view: drop first block row and column, append the new row
        prop_assert_eq!(sd.view((0, 0), (2 * (h - 1), h - 1)), ad.view((2, 1), (2 * (h - 1), h - 1)));
        for (j, b) in row.iter().enumerate() {
            prop_assert_eq!(&sd.view((2 * (h - 1), j), (2, 1)).clone_owned(), b);
        }
    }

    #[test]
    fn tube_offsets_match_vertex_oracle(seed in any::<u64>(), h in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = random_blt(&mut rng, h, 2, 2, 1.0);
        let wbar = random_polytope(&mut rng, 2);
        let target = random_polytope(&mut rng, 2);
        let t = tube_offsets(&phi, &wbar, target.hmat()).unwrap();
        prop_assert_eq!(t.len(), h + 1);
        prop_assert!(t[0].amax() == 0.0);
        for i in 1..=h {
            let mut oracle = DVector::zeros(target.n_facets());
            for j in 0..i {
                oracle += vertex_support_rows(&target, phi.get(i, j), &wbar);
            }
            prop_assert!((&t[i] - oracle).amax() < 1e-7);
        }
    }

    #[test]
    fn tube_offsets_grow_with_disturbance(seed in any::<u64>(), h in 1usize..4, s in 1.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = random_blt(&mut rng, h, 2, 2, 1.0);
        let wbar = random_polytope(&mut rng, 2);
        let target = random_polytope(&mut rng, 2);
        let small = tube_offsets(&phi, &wbar, target.hmat()).unwrap();
        let big = tube_offsets(&phi, &wbar.scale(s), target.hmat()).unwrap();
        for (p, q) in small.iter().zip(&big) {
            prop_assert!(q.iter().zip(p.iter()).all(|(b, a)| *b >= *a - 1e-9));
        }
    }
}
