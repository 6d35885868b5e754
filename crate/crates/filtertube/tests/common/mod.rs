//! Shared fixtures and vertex-enumeration oracles for the integration tests.
#![allow(dead_code)]

use filtertube::polytope::Polytope;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};

/// Bounded polytope in `R^n` with a box skeleton and up to `8 - 2n` extra rows.
pub fn random_polytope(rng: &mut impl Rng, n: usize) -> Polytope {
    let extra = rng.random_range(0..=(8 - 2 * n).min(3));
    let mut rows: Vec<f64> = Vec::new();
    let mut offs = Vec::new();
    for k in 0..n {
        for s in [1.0, -1.0] {
            let mut r = vec![0.0; n];
            r[k] = s;
            rows.extend(r);
            offs.push(rng.random_range(0.3..1.5));
        }
    }
    for _ in 0..extra {
        rows.extend((0..n).map(|_| rng.random_range(-1.0..1.0)));
        offs.push(rng.random_range(0.3..1.5));
    }
    Polytope::new(DMatrix::from_row_slice(offs.len(), n, &rows), DVector::from_vec(offs)).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
}

pub fn vertices(p: &Polytope) -> Vec<DVector<f64>> {
    p.vertices().unwrap().vertices
}

/// `max_{v ∈ vert(P)} ξ' M v`
pub fn vertex_support(p: &Polytope, m: &DMatrix<f64>, xi: &DVector<f64>) -> f64 {
    vertices(p).iter().map(|v| xi.dot(&(m * v))).fold(f64::NEG_INFINITY, f64::max)
}

/// Row-wise vertex support of `M P` over the facet normals of `y`.
pub fn vertex_support_rows(y: &Polytope, m: &DMatrix<f64>, p: &Polytope) -> DVector<f64> {
    DVector::from_fn(y.n_facets(), |r, _| vertex_support(p, m, &y.hmat().row(r).transpose()))
}

/// Whether every vertex of `inner` lies in `outer`.
pub fn vertex_subset(inner: &Polytope, outer: &Polytope, tol: f64) -> bool {
    vertices(inner).iter().all(|v| outer.margin(v.as_slice()) <= tol)
}
