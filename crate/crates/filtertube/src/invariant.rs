//! LQR terminal gain, maximal robust positively invariant sets for the
//! auxiliary dynamics and maximal robust control invariant sets for the true
//! uncertain dynamics.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lp::{DenseLp, LpOutcome};
use crate::polytope::{Polytope, PolytopeError, PolytopeRecord};
use crate::sysmodel::{CostSpec, UncertainLTI};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvariantError {
    #[error("Riccati iteration did not converge (pair not stabilizable?)")]
    NotStabilizable,
    #[error("recursion did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("invariant set is empty")]
    EmptyInvariantSet,
    #[error("elimination supports at most {0} inputs")]
    TooManyInputs(usize),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

pub type Result<T> = std::result::Result<T, InvariantError>;

pub const DARE_TOL: f64 = 1e-10;
pub const DARE_MAX_ITER: usize = 10_000;
pub const RPI_MAX_ITER: usize = 500;
pub const RPI_TOL: f64 = 1e-9;
pub const RCI_MAX_ITER: usize = 200;
pub const RCI_TOL: f64 = 1e-7;

/// Terminal gain, cost and invariant set.
#[derive(Clone, Debug)]
pub struct TerminalIngredients {
    pub k_f: DMatrix<f64>,
    pub p_f: DMatrix<f64>,
    pub z_f: Polytope,
    pub iterations: usize,
    pub converged: bool,
}

impl TerminalIngredients {
    /// `A + B K_f`
    pub fn a_cl(&self, sys: &UncertainLTI) -> DMatrix<f64> {
        &sys.a + &sys.b * &self.k_f
    }
}

fn dare_step(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let gain = s.lu().solve(&(&bt_p * a))?;
    let next = q + a.transpose() * p * a - a.transpose() * p * b * gain;
    Some((&next + next.transpose()) * 0.5)
}

/// Relative residual of the discrete algebraic Riccati equation.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    match dare_step(a, b, q, r, p) {
        Some(next) => (next - p).amax() / p.amax().max(1.0),
        None => f64::INFINITY,
    }
}

/// Infinite-horizon LQR gain by Riccati fixed-point iteration.
/// Returns `(K, P)` with `u = K x`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let next = dare_step(a, b, q, r, &p).ok_or(InvariantError::NotStabilizable)?;
        if !next.iter().all(|v| v.is_finite()) || next.amax() > 1e14 {
            return Err(InvariantError::NotStabilizable);
        }
        let change = (&next - &p).amax() / next.amax().max(1.0);
        p = next;
        if change <= DARE_TOL {
            let bt_p = b.transpose() * &p;
            let k = -(r + &bt_p * b).lu().solve(&(&bt_p * a)).ok_or(InvariantError::NotStabilizable)?;
            return Ok((k, p));
        }
    }
    Err(InvariantError::NotStabilizable)
}

/// Spectral radius of a real square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn row_max(hm: &DMatrix<f64>, h: &DVector<f64>, xi: &[f64]) -> Option<f64> {
    match crate::lp::maximize_over(hm, h, xi) {
        LpOutcome::Optimal { value, .. } => Some(value),
        _ => None,
    }
}

/// `X ∩ {x | K x ∈ U}`.
pub fn state_input_set(x: &Polytope, u: &Polytope, k: &DMatrix<f64>) -> Result<Polytope> {
    let pre = u.affine_preimage(k)?;
    Ok(x.intersect(&pre)?.remove_redundant(1e-12))
}

/// Maximal RPI subset of `x_kf` for `x+ = A_cl x + w̄`, `w̄ ∈ W̄`.
///
/// Stage `t` contributes the rows `H A_cl^t x <= h - Σ_{s<t} h_W̄(A_cl^s' H')`;
/// the recursion stops once a whole stage is redundant.
pub fn max_rpi(a_cl: &DMatrix<f64>, wbar: &Polytope, x_kf: &Polytope) -> Result<(Polytope, usize)> {
    let n = a_cl.nrows();
    let base_h = x_kf.hmat().clone();
    let base_o = x_kf.offsets().clone();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut offs: Vec<f64> = Vec::new();
    for r in 0..base_h.nrows() {
        rows.push(base_h.row(r).transpose());
        offs.push(base_o[r]);
    }
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut acc = DVector::<f64>::zeros(base_h.nrows());
    for t in 1..=RPI_MAX_ITER {
        // tightening by A_cl^{t-1} W̄
        let dirs = &base_h * &power;
        acc += wbar.support_rows(&dirs)?;
        power = &power * a_cl;
        let cur_h = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        let cur_o = DVector::from_column_slice(&offs);
        let new_dirs = &base_h * &power;
        let mut added = 0;
        for r in 0..new_dirs.nrows() {
            let off = base_o[r] - acc[r];
            let d: Vec<f64> = new_dirs.row(r).iter().copied().collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-14 {
                if off < -RPI_TOL {
                    return Err(InvariantError::EmptyInvariantSet);
                }
                continue;
            }
            match row_max(&cur_h, &cur_o, &d) {
                Some(v) if v <= off + RPI_TOL * norm.max(1.0) => {}
                Some(_) => {
                    rows.push(DVector::from_column_slice(&d) / norm);
                    offs.push(off / norm);
                    added += 1;
                }
                None => return Err(InvariantError::EmptyInvariantSet),
            }
        }
        if added == 0 {
            let hm = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
            let p = Polytope::new_unchecked(hm, DVector::from_column_slice(&offs));
            if p.is_empty() || p.margin(&vec![0.0; n]) > RPI_TOL {
                return Err(InvariantError::EmptyInvariantSet);
            }
            return Ok((p.remove_redundant(1e-12), t));
        }
        let probe = Polytope::new_unchecked(
            DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]),
            DVector::from_column_slice(&offs),
        );
        if probe.is_empty() {
            return Err(InvariantError::EmptyInvariantSet);
        }
    }
    Err(InvariantError::NotConverged(RPI_MAX_ITER))
}

/// LQR gain, `P_f` and the maximal RPI set of the auxiliary dynamics.
pub fn terminal_ingredients(sys: &UncertainLTI, cost: &CostSpec) -> Result<TerminalIngredients> {
    let (k_f, p_f) = lqr_gain(&sys.a, &sys.b, &cost.q, &cost.r)?;
    let a_cl = &sys.a + &sys.b * &k_f;
    let x_kf = state_input_set(&sys.x, &sys.u, &k_f)?;
    let (z_f, iterations) = max_rpi(&a_cl, &sys.wbar, &x_kf)?;
    Ok(TerminalIngredients { k_f, p_f, z_f, iterations, converged: true })
}

/// Removes one coordinate from `G y <= g` by Fourier-Motzkin elimination.
fn fm_eliminate(g: &DMatrix<f64>, rhs: &DVector<f64>, col: usize) -> (DMatrix<f64>, DVector<f64>) {
    let (pos, neg, zero): (Vec<usize>, Vec<usize>, Vec<usize>) = {
        let mut p = Vec::new();
        let mut n = Vec::new();
        let mut z = Vec::new();
        for r in 0..g.nrows() {
            let c = g[(r, col)];
            if c > 1e-13 {
                p.push(r);
            } else if c < -1e-13 {
                n.push(r);
            } else {
                z.push(r);
            }
        }
        (p, n, z)
    };
    let keep: Vec<usize> = (0..g.ncols()).filter(|c| *c != col).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offs = Vec::new();
    for &r in &zero {
        rows.push(keep.iter().map(|c| g[(r, *c)]).collect());
        offs.push(rhs[r]);
    }
    for &p in &pos {
        for &q in &neg {
            let a = g[(p, col)];
            let b = -g[(q, col)];
            rows.push(keep.iter().map(|c| g[(p, *c)] / a + g[(q, *c)] / b).collect());
            offs.push(rhs[p] / a + rhs[q] / b);
        }
    }
    let m = DMatrix::from_fn(rows.len(), keep.len(), |i, j| rows[i][j]);
    (m, DVector::from_vec(offs))
}

/// Drops zero rows (checking their sign) and normalizes the rest.
fn tidy(g: DMatrix<f64>, rhs: DVector<f64>) -> Result<Polytope> {
    let mut rows = Vec::new();
    for r in 0..g.nrows() {
        let norm = g.row(r).norm();
        if norm < 1e-12 {
            if rhs[r] < -RCI_TOL {
                return Err(InvariantError::EmptyInvariantSet);
            }
            continue;
        }
        rows.push(r);
    }
    let hm = DMatrix::from_fn(rows.len(), g.ncols(), |i, j| g[(rows[i], j)]);
    let h = DVector::from_iterator(rows.len(), rows.iter().map(|r| rhs[*r]));
    Ok(Polytope::new_unchecked(hm, h))
}

/// One-step robust controllable predecessor intersected with `omega`.
pub fn robust_pre(sys: &UncertainLTI, omega: &Polytope) -> Result<Polytope> {
    let (n, m) = (sys.nx(), sys.nu());
    if m > 2 {
        return Err(InvariantError::TooManyInputs(2));
    }
    let ho = omega.hmat();
    let hw = sys.w.support_rows(ho)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offs: Vec<f64> = Vec::new();
    for d in &sys.deltas {
        let ad = &sys.a + &d.da;
        let bd = &sys.b + &d.db;
        let ga = ho * &ad;
        let gb = ho * &bd;
        for r in 0..ho.nrows() {
            let mut row: Vec<f64> = ga.row(r).iter().copied().collect();
            row.extend(gb.row(r).iter());
            rows.push(row);
            offs.push(omega.offsets()[r] - hw[r]);
        }
    }
    for r in 0..sys.u.n_facets() {
        let mut row = vec![0.0; n];
        row.extend(sys.u.hmat().row(r).iter());
        rows.push(row);
        offs.push(sys.u.offsets()[r]);
    }
    let mut g = DMatrix::from_fn(rows.len(), n + m, |i, j| rows[i][j]);
    let mut rhs = DVector::from_vec(offs);
    for k in (0..m).rev() {
        let (g2, r2) = fm_eliminate(&g, &rhs, n + k);
        let reduced = tidy(g2, r2)?;
        if reduced.n_facets() == 0 {
            g = DMatrix::zeros(0, n + k);
            rhs = DVector::zeros(0);
            continue;
        }
        let reduced = reduced.remove_redundant(1e-12);
        g = reduced.hmat().clone();
        rhs = reduced.offsets().clone();
    }
    let pre = tidy(g, rhs)?;
    let out = omega.intersect(&pre)?;
    if out.is_empty() {
        return Err(InvariantError::EmptyInvariantSet);
    }
    Ok(out.remove_redundant(1e-12))
}

/// Maximal RCI subset of `X` for the true uncertain dynamics.
pub fn max_rci(sys: &UncertainLTI) -> Result<(Polytope, usize)> {
    let mut omega = sys.x.clone();
    for k in 1..=RCI_MAX_ITER {
        let next = robust_pre(sys, &omega)?;
        if omega.is_subset_of(&next, RCI_TOL)? {
            return Ok((next, k));
        }
        omega = next;
    }
    Err(InvariantError::NotConverged(RCI_MAX_ITER))
}

/// Whether some `u ∈ U` keeps every successor of `x` inside `omega`.
pub fn one_step_feasible(sys: &UncertainLTI, omega: &Polytope, x: &DVector<f64>, tol: f64) -> bool {
    let m = sys.nu();
    let mut lp = DenseLp::new(m).maximize(&vec![0.0; m]);
    let hw = match sys.w.support_rows(omega.hmat()) {
        Ok(v) => v,
        Err(_) => return false,
    };
    for d in &sys.deltas {
        let base = omega.hmat() * ((&sys.a + &d.da) * x);
        let gb = omega.hmat() * (&sys.b + &d.db);
        for r in 0..omega.n_facets() {
            lp.le(gb.row(r).iter().copied().collect(), omega.offsets()[r] - hw[r] - base[r] + tol);
        }
    }
    lp.le_block(sys.u.hmat(), &(sys.u.offsets() + DVector::from_element(sys.u.n_facets(), tol)), 0);
    matches!(lp.solve(), LpOutcome::Optimal { .. })
}

// ---------------------------------------------------------------------------
// disk cache

#[derive(Serialize, Deserialize)]
struct CachedSet {
    key: String,
    set: PolytopeRecord,
    iterations: usize,
}

/// Content-addressed cache for computed invariant sets.
#[derive(Clone, Debug)]
pub struct InvariantCache {
    pub dir: PathBuf,
    pub recompute: bool,
}

fn hash_matrix(h: &mut Sha256, m: &DMatrix<f64>) {
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
}

fn hash_set(h: &mut Sha256, p: &Polytope) {
    hash_matrix(h, p.hmat());
    for v in p.offsets().iter() {
        h.update(v.to_bits().to_le_bytes());
    }
}

/// Hash of everything that determines the invariant sets of `sys`.
pub fn system_key(kind: &str, sys: &UncertainLTI, cost: Option<&CostSpec>) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    hash_matrix(&mut h, &sys.a);
    hash_matrix(&mut h, &sys.b);
    for d in &sys.deltas {
        hash_matrix(&mut h, &d.da);
        hash_matrix(&mut h, &d.db);
    }
    for p in [&sys.w, &sys.wbar, &sys.x, &sys.u] {
        hash_set(&mut h, p);
    }
    if let Some(c) = cost {
        hash_matrix(&mut h, &c.q);
        hash_matrix(&mut h, &c.r);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl InvariantCache {
    pub fn new(dir: impl Into<PathBuf>, recompute: bool) -> Self {
        InvariantCache { dir: dir.into(), recompute }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn load(&self, key: &str) -> Option<(Polytope, usize)> {
        if self.recompute {
            return None;
        }
        let text = std::fs::read_to_string(self.path(key)).ok()?;
        let c: CachedSet = serde_json::from_str(&text).ok()?;
        if c.key != key {
            return None;
        }
        Some((Polytope::from_record(&c.set).ok()?, c.iterations))
    }

    fn store(&self, key: &str, p: &Polytope, iterations: usize) {
        let rec = CachedSet { key: key.to_string(), set: p.to_record(), iterations };
        if std::fs::create_dir_all(&self.dir).is_ok() {
            if let Ok(text) = serde_json::to_string(&rec) {
                let _ = std::fs::write(self.path(key), text);
            }
        }
    }

    pub fn max_rci(&self, sys: &UncertainLTI) -> Result<Polytope> {
        let key = system_key("rci-v1", sys, None);
        if let Some((p, _)) = self.load(&key) {
            return Ok(p);
        }
        let (p, it) = max_rci(sys)?;
        self.store(&key, &p, it);
        Ok(p)
    }

    pub fn terminal(&self, sys: &UncertainLTI, cost: &CostSpec) -> Result<TerminalIngredients> {
        let key = system_key("rpi-v1", sys, Some(cost));
        let (k_f, p_f) = lqr_gain(&sys.a, &sys.b, &cost.q, &cost.r)?;
        if let Some((z_f, iterations)) = self.load(&key) {
            return Ok(TerminalIngredients { k_f, p_f, z_f, iterations, converged: true });
        }
        let t = terminal_ingredients(sys, cost)?;
        self.store(&key, &t.z_f, t.iterations);
        Ok(t)
    }
}

/// Default cache location under the system temp directory.
pub fn default_cache_dir() -> PathBuf {
    std::env::temp_dir().join("filtertube-invariants")
}

pub fn cache_exists(dir: &Path) -> bool {
    dir.is_dir()
}
