//! Halfspace polytopes `{x | Hx <= h}`, support functions, Minkowski and
//! Pontryagin operations, and linear encodings of polytope containment.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{DenseLp, LpOutcome};
use crate::qp::{ExprMatrix, LinExpr, QpProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("set is unbounded along the requested direction")]
    Unbounded,
    #[error("set is empty")]
    Infeasible,
    #[error("tightened set is empty")]
    EmptyResult,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vertex enumeration supports dimension <= 3, got {0}")]
    DimensionTooHigh(usize),
    #[error("polytope is empty")]
    Empty,
    #[error("member sets do not share the facet matrix")]
    SharedShapeViolation,
    #[error("facet matrix has a zero row")]
    ZeroRow,
}

pub type Result<T> = std::result::Result<T, PolytopeError>;

/// Emptiness tolerance for feasibility tests.
pub const EMPTY_TOL: f64 = 1e-9;
/// Vertex deduplication tolerance.
pub const VERTEX_TOL: f64 = 1e-9;

/// Compact convex polytope in halfspace form with unit-norm facet normals.
#[derive(Clone, Debug)]
pub struct Polytope {
    hm: DMatrix<f64>,
    h: DVector<f64>,
    bounds: Option<Vec<(f64, f64)>>,
}

/// Plain record used for serialization.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PolytopeRecord {
    #[serde(rename = "H")]
    pub hm: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

/// Extreme points of a low-dimensional polytope.
#[derive(Clone, Debug)]
pub struct VertexSet {
    pub vertices: Vec<DVector<f64>>,
}

impl Polytope {
    /// Builds a bounded, non-empty polytope. Rows are normalized.
    pub fn new(hm: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let p = Self::normalized(hm, h)?;
        for k in 0..p.dim() {
            let mut e = vec![0.0; p.dim()];
            for s in [1.0, -1.0] {
                e[k] = s;
                p.support(&e)?;
            }
        }
        Ok(p)
    }

    /// Normalizes rows but skips the boundedness check.
    pub fn new_unchecked(hm: DMatrix<f64>, h: DVector<f64>) -> Self {
        Self::normalized(hm, h).expect("zero row in facet matrix")
    }

    fn normalized(mut hm: DMatrix<f64>, mut h: DVector<f64>) -> Result<Self> {
        if hm.nrows() != h.len() {
            return Err(PolytopeError::ShapeMismatch(format!(
                "H has {} rows, h has {}",
                hm.nrows(),
                h.len()
            )));
        }
        for r in 0..hm.nrows() {
            let norm = hm.row(r).norm();
            if norm < 1e-14 {
                return Err(PolytopeError::ZeroRow);
            }
            if (norm - 1.0).abs() > 1e-15 {
                for c in 0..hm.ncols() {
                    hm[(r, c)] /= norm;
                }
                h[r] /= norm;
            }
        }
        let bounds = detect_box(&hm, &h);
        Ok(Polytope { hm, h, bounds })
    }

    /// Axis-aligned box `lo <= x <= hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        assert_eq!(n, hi.len());
        let mut hm = DMatrix::zeros(2 * n, n);
        let mut h = DVector::zeros(2 * n);
        for k in 0..n {
            hm[(k, k)] = 1.0;
            h[k] = hi[k];
            hm[(n + k, k)] = -1.0;
            h[n + k] = -lo[k];
        }
        Self::new_unchecked(hm, h)
    }

    /// `{x | ||x||_inf <= r}`.
    pub fn inf_ball(n: usize, r: f64) -> Self {
        Self::from_box(&vec![-r; n], &vec![r; n])
    }

    pub fn dim(&self) -> usize {
        self.hm.ncols()
    }

    pub fn n_facets(&self) -> usize {
        self.hm.nrows()
    }

    pub fn hmat(&self) -> &DMatrix<f64> {
        &self.hm
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.h
    }

    /// Box bounds when every facet is an axis normal and each coordinate is
    /// bounded on both sides.
    pub fn box_bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    /// `sup_{a in P} xi'a`.
    pub fn support(&self, xi: &[f64]) -> Result<f64> {
        if xi.len() != self.dim() {
            return Err(PolytopeError::ShapeMismatch("direction length".into()));
        }
        if let Some(b) = &self.bounds {
            if b.iter().any(|(lo, hi)| lo > hi) {
                return Err(PolytopeError::Infeasible);
            }
            return Ok(xi.iter().zip(b).map(|(c, (lo, hi))| (c * hi).max(c * lo)).sum());
        }
        match crate::lp::maximize_over(&self.hm, &self.h, xi) {
            LpOutcome::Optimal { value, .. } => Ok(value),
            LpOutcome::Infeasible => Err(PolytopeError::Infeasible),
            LpOutcome::Unbounded => Err(PolytopeError::Unbounded),
        }
    }

    /// Support evaluated at every row of `dirs`.
    pub fn support_rows(&self, dirs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(dirs.nrows());
        for r in 0..dirs.nrows() {
            let xi: Vec<f64> = dirs.row(r).iter().copied().collect();
            out[r] = self.support(&xi)?;
        }
        Ok(out)
    }

    /// Support of the image `T P` at every row of `dirs`: `h_P(T' d_r)`.
    pub fn image_support_rows(&self, t: &DMatrix<f64>, dirs: &DMatrix<f64>) -> Result<DVector<f64>> {
        if t.nrows() != dirs.ncols() || t.ncols() != self.dim() {
            return Err(PolytopeError::ShapeMismatch("image map".into()));
        }
        self.support_rows(&(dirs * t))
    }

    /// `P ⊖ (⊕_j Γ_j S_j)` keeping the facet matrix of `P`.
    pub fn pontryagin_tighten(&self, shapes: &[(DMatrix<f64>, &Polytope)]) -> Result<Polytope> {
        let mut h = self.h.clone();
        for (g, s) in shapes {
            h -= s.image_support_rows(g, &self.hm)?;
        }
        let out = Polytope { hm: self.hm.clone(), h, bounds: None };
        let out = Polytope { bounds: detect_box(&out.hm, &out.h), ..out };
        if out.is_empty() {
            return Err(PolytopeError::EmptyResult);
        }
        Ok(out)
    }

    /// `{x | Hx <= s h}`.
    pub fn scale(&self, s: f64) -> Polytope {
        assert!(s >= 0.0, "scale factor must be nonnegative");
        Polytope {
            hm: self.hm.clone(),
            h: &self.h * s,
            bounds: self.bounds.as_ref().map(|b| b.iter().map(|(l, u)| (l * s, u * s)).collect()),
        }
    }

    /// Same facets, new offsets.
    pub fn with_offsets(&self, h: DVector<f64>) -> Polytope {
        assert_eq!(h.len(), self.n_facets());
        let bounds = detect_box(&self.hm, &h);
        Polytope { hm: self.hm.clone(), h, bounds }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        (0..self.n_facets()).all(|r| {
            let v: f64 = self.hm.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
            v <= self.h[r] + tol
        })
    }

    /// Largest violation `max_r (H_r x - h_r)`, negative inside.
    pub fn margin(&self, x: &[f64]) -> f64 {
        (0..self.n_facets())
            .map(|r| {
                let v: f64 = self.hm.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
                v - self.h[r]
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Feasibility of `Hx <= h + EMPTY_TOL`.
    pub fn is_empty(&self) -> bool {
        if let Some(b) = &self.bounds {
            return b.iter().any(|(lo, hi)| *lo > *hi + EMPTY_TOL);
        }
        let mut lp = DenseLp::new(self.dim()).maximize(&vec![0.0; self.dim()]);
        let slack = DVector::from_element(self.n_facets(), EMPTY_TOL);
        lp.le_block(&self.hm, &(&self.h + slack), 0);
        matches!(lp.solve(), LpOutcome::Infeasible)
    }

    /// Radius of the largest inscribed ball and its center.
    pub fn chebyshev(&self) -> Option<(f64, DVector<f64>)> {
        let n = self.dim();
        let mut c = vec![0.0; n + 1];
        c[n] = 1.0;
        let mut lp = DenseLp::new(n + 1).maximize(&c);
        for r in 0..self.n_facets() {
            let mut row: Vec<f64> = self.hm.row(r).iter().copied().collect();
            row.push(1.0);
            lp.le(row, self.h[r]);
        }
        lp.bound(n, 0.0, f64::INFINITY);
        match lp.solve() {
            LpOutcome::Optimal { value, x } => Some((value, DVector::from_column_slice(&x[..n]))),
            _ => None,
        }
    }

    /// `self ⊆ other` up to `tol` on each facet of `other`.
    pub fn is_subset_of(&self, other: &Polytope, tol: f64) -> Result<bool> {
        let s = self.support_rows(other.hmat())?;
        Ok((0..s.len()).all(|r| s[r] <= other.h[r] + tol))
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim() != other.dim() {
            return Err(PolytopeError::ShapeMismatch("intersection dimension".into()));
        }
        let mut hm = DMatrix::zeros(self.n_facets() + other.n_facets(), self.dim());
        hm.rows_mut(0, self.n_facets()).copy_from(&self.hm);
        hm.rows_mut(self.n_facets(), other.n_facets()).copy_from(&other.hm);
        let h = DVector::from_iterator(
            hm.nrows(),
            self.h.iter().chain(other.h.iter()).copied(),
        );
        Ok(Polytope::new_unchecked(hm, h))
    }

    /// `{x | M x ∈ P}`; rows that vanish under `M` are kept only if violated.
    pub fn affine_preimage(&self, m: &DMatrix<f64>) -> Result<Polytope> {
        if m.nrows() != self.dim() {
            return Err(PolytopeError::ShapeMismatch("preimage map".into()));
        }
        let g = &self.hm * m;
        let mut rows = Vec::new();
        for r in 0..g.nrows() {
            if g.row(r).norm() < 1e-13 {
                if self.h[r] < -EMPTY_TOL {
                    return Err(PolytopeError::EmptyResult);
                }
                continue;
            }
            rows.push(r);
        }
        let hm = DMatrix::from_fn(rows.len(), m.ncols(), |i, j| g[(rows[i], j)]);
        let h = DVector::from_iterator(rows.len(), rows.iter().map(|r| self.h[*r]));
        Ok(Polytope::new_unchecked(hm, h))
    }

    /// Drops duplicate and LP-redundant facets.
    ///
    /// Each candidate row is tested against a growing witness set of rows
    /// that were violated at earlier LP optima, so the LPs stay small.
    pub fn remove_redundant(&self, tol: f64) -> Polytope {
        let n = self.dim();
        let mut keep: Vec<usize> = Vec::new();
        'outer: for r in 0..self.n_facets() {
            for slot in keep.iter_mut() {
                let d = (self.hm.row(r) - self.hm.row(*slot)).amax();
                if d < 1e-10 {
                    if self.h[r] < self.h[*slot] {
                        *slot = r;
                    }
                    continue 'outer;
                }
            }
            keep.push(r);
        }
        let row = |r: usize| -> Vec<f64> { self.hm.row(r).iter().copied().collect() };
        let value_at = |r: usize, x: &[f64]| -> f64 {
            self.hm.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - self.h[r]
        };
        let mut alive = vec![true; keep.len()];
        let mut witness: Vec<usize> = Vec::new();
        for a in 0..keep.len() {
            let r = keep[a];
            let xi = row(r);
            loop {
                let mut lp = DenseLp::new(n).maximize(&xi);
                for &b in &witness {
                    if b != a && alive[b] {
                        lp.le(row(keep[b]), self.h[keep[b]]);
                    }
                }
                lp.le(xi.clone(), self.h[r] + 1.0);
                let x = match lp.solve() {
                    LpOutcome::Optimal { value, x } => {
                        if value <= self.h[r] + tol {
                            alive[a] = false;
                            witness.retain(|w| *w != a);
                            break;
                        }
                        x
                    }
                    _ => {
                        // witness LP unbounded in some other direction, test against all rows
                        let mut full = DenseLp::new(n).maximize(&xi);
                        for b in 0..keep.len() {
                            if b != a && alive[b] {
                                full.le(row(keep[b]), self.h[keep[b]]);
                            }
                        }
                        full.le(xi.clone(), self.h[r] + 1.0);
                        if let LpOutcome::Optimal { value, .. } = full.solve() {
                            if value <= self.h[r] + tol {
                                alive[a] = false;
                                witness.retain(|w| *w != a);
                            } else if !witness.contains(&a) {
                                witness.push(a);
                            }
                        }
                        break;
                    }
                };
                let mut worst = None;
                let mut worst_v = tol;
                for b in 0..keep.len() {
                    if b == a || !alive[b] || witness.contains(&b) {
                        continue;
                    }
                    let v = value_at(keep[b], &x);
                    if v > worst_v {
                        worst_v = v;
                        worst = Some(b);
                    }
                }
                match worst {
                    Some(b) => witness.push(b),
                    None => {
                        if !witness.contains(&a) {
                            witness.push(a);
                        }
                        break;
                    }
                }
            }
        }
        let rows: Vec<usize> = keep.iter().zip(&alive).filter(|(_, a)| **a).map(|(r, _)| *r).collect();
        let hm = DMatrix::from_fn(rows.len(), n, |i, j| self.hm[(rows[i], j)]);
        let h = DVector::from_iterator(rows.len(), rows.iter().map(|r| self.h[*r]));
        Polytope::new_unchecked(hm, h)
    }

    /// Extreme points by intersecting every n-subset of facets (n <= 3).
    pub fn vertices(&self) -> Result<VertexSet> {
        let n = self.dim();
        if n > 3 {
            return Err(PolytopeError::DimensionTooHigh(n));
        }
        let m = self.n_facets();
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        if m < n {
            return Err(PolytopeError::Empty);
        }
        loop {
            let a = DMatrix::from_fn(n, n, |i, j| self.hm[(idx[i], j)]);
            let b = DVector::from_iterator(n, idx.iter().map(|r| self.h[*r]));
            if let Some(x) = a.clone().lu().solve(&b) {
                let resid = (&a * &x - &b).amax();
                if resid < 1e-9 && self.margin(x.as_slice()) <= 1e-9 {
                    if !out.iter().any(|v| (v - &x).amax() < VERTEX_TOL) {
                        out.push(x);
                    }
                }
            }
            // next combination
            let mut k = n;
            loop {
                if k == 0 {
                    if out.is_empty() {
                        return Err(PolytopeError::Empty);
                    }
                    return Ok(VertexSet { vertices: out });
                }
                k -= 1;
                if idx[k] < m - n + k {
                    idx[k] += 1;
                    for t in k + 1..n {
                        idx[t] = idx[t - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    pub fn to_record(&self) -> PolytopeRecord {
        PolytopeRecord {
            hm: (0..self.n_facets()).map(|r| self.hm.row(r).iter().copied().collect()).collect(),
            h: self.h.iter().copied().collect(),
        }
    }

    pub fn from_record(rec: &PolytopeRecord) -> Result<Polytope> {
        let m = rec.hm.len();
        let n = rec.hm.first().map(|r| r.len()).unwrap_or(0);
        if rec.hm.iter().any(|r| r.len() != n) {
            return Err(PolytopeError::ShapeMismatch("ragged H".into()));
        }
        let hm = DMatrix::from_fn(m, n, |i, j| rec.hm[i][j]);
        Self::normalized(hm, DVector::from_column_slice(&rec.h))
    }
}

fn detect_box(hm: &DMatrix<f64>, h: &DVector<f64>) -> Option<Vec<(f64, f64)>> {
    let n = hm.ncols();
    let mut lo = vec![f64::NEG_INFINITY; n];
    let mut hi = vec![f64::INFINITY; n];
    for r in 0..hm.nrows() {
        let mut axis = None;
        for c in 0..n {
            let v = hm[(r, c)];
            if v != 0.0 {
                if axis.is_some() || (v.abs() - 1.0).abs() > 1e-15 {
                    return None;
                }
                axis = Some((c, v));
            }
        }
        let (c, v) = axis?;
        if v > 0.0 {
            hi[c] = hi[c].min(h[r]);
        } else {
            lo[c] = lo[c].max(-h[r]);
        }
    }
    if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
        return None;
    }
    Some(lo.into_iter().zip(hi).collect())
}

/// Support of `⊕_j T_j S_j` at `xi`.
pub fn minkowski_support(terms: &[(DMatrix<f64>, &Polytope)], xi: &[f64]) -> Result<f64> {
    let c = DVector::from_column_slice(xi);
    let mut s = 0.0;
    for (t, p) in terms {
        let d = t.transpose() * &c;
        s += p.support(d.as_slice())?;
    }
    Ok(s)
}

/// `Σ_m a_m h^m` as affine expressions.
pub fn fused_offsets(coeffs: &[LinExpr], offsets: &[DVector<f64>]) -> Result<Vec<LinExpr>> {
    if coeffs.len() != offsets.len() || offsets.is_empty() {
        return Err(PolytopeError::ShapeMismatch("one coefficient per member".into()));
    }
    let len = offsets[0].len();
    if offsets.iter().any(|h| h.len() != len) {
        return Err(PolytopeError::SharedShapeViolation);
    }
    let mut out = vec![LinExpr::zero(); len];
    for (a, h) in coeffs.iter().zip(offsets) {
        for r in 0..len {
            out[r].add_scaled(a, h[r]);
        }
    }
    for e in &mut out {
        e.compact();
    }
    Ok(out)
}

/// Numeric fused set `⊕ a_m X_m` for members sharing one facet matrix.
pub fn fuse_sets(weights: &[f64], sets: &[&Polytope]) -> Result<Polytope> {
    let first = sets.first().ok_or_else(|| PolytopeError::ShapeMismatch("no members".into()))?;
    for s in sets {
        if s.hmat().shape() != first.hmat().shape() || (s.hmat() - first.hmat()).amax() > 1e-12 {
            return Err(PolytopeError::SharedShapeViolation);
        }
    }
    let mut h = DVector::zeros(first.n_facets());
    for (w, s) in weights.iter().zip(sets) {
        h += s.offsets() * *w;
    }
    Ok(first.with_offsets(h))
}

// ---------------------------------------------------------------------------
// containment encodings

/// Linear map applied to one Minkowski summand.
#[derive(Clone, Debug)]
pub enum TermMap {
    /// Fixed matrix.
    Const(DMatrix<f64>),
    /// Nonnegative scalar expression times a fixed matrix.
    Scaled(LinExpr, DMatrix<f64>),
    /// Matrix of affine expressions.
    Expr(ExprMatrix),
}

impl TermMap {
    fn shape(&self) -> (usize, usize) {
        match self {
            TermMap::Const(m) | TermMap::Scaled(_, m) => m.shape(),
            TermMap::Expr(e) => (e.rows, e.cols),
        }
    }
}

/// Scaling of the containing set: `β Y` with scalar β, or per-facet
/// scalings (hyperrectangle `Y` with diagonal β).
#[derive(Clone, Debug)]
pub enum Scale {
    Scalar(LinExpr),
    PerRow(Vec<LinExpr>),
}

impl Scale {
    pub fn one() -> Scale {
        Scale::Scalar(LinExpr::constant(1.0))
    }

    fn row(&self, r: usize) -> &LinExpr {
        match self {
            Scale::Scalar(e) => e,
            Scale::PerRow(v) => &v[r],
        }
    }
}

/// Handle to a block of multiplier variables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LambdaHandle {
    pub start: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Rows and variables emitted by one containment encoding.
#[derive(Clone, Debug, Default)]
pub struct ContainmentBlocks {
    pub lambda_vars: Vec<LambdaHandle>,
    pub eq_rows: Vec<usize>,
    pub ineq_rows: Vec<usize>,
}

/// One summand `T X` of a containment left-hand side.
#[derive(Clone, Debug)]
pub struct InclusionTerm<'a> {
    pub map: TermMap,
    pub set: &'a Polytope,
}

/// How decision-dependent support terms are written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupportForm {
    /// Multiplier rows `Λ >= 0, Λ H = c', Λ h` for every summand, constant or not.
    Explicit,
    /// Constant directions use precomputed supports; box summands use an
    /// epigraph per coordinate; other summands use multipliers.
    Compact,
}

/// Emits linear constraints equivalent to
/// `{a} ⊕ ⊕_i T_i X_i ⊆ β Y`.
///
/// A subtracted `Γ Z` on the right-hand side is passed as an extra summand.
pub fn encode_inclusion(
    qp: &mut QpProblem,
    offset: Option<&[LinExpr]>,
    terms: &[InclusionTerm<'_>],
    y: &Polytope,
    scale: &Scale,
    family: u16,
    form: SupportForm,
) -> Result<ContainmentBlocks> {
    let n = y.dim();
    if let Some(a) = offset {
        if a.len() != n {
            return Err(PolytopeError::ShapeMismatch("offset length".into()));
        }
    }
    for t in terms {
        let (r, c) = t.map.shape();
        if r != n || c != t.set.dim() {
            return Err(PolytopeError::ShapeMismatch(format!(
                "term map is {}x{}, expected {}x{}",
                r,
                c,
                n,
                t.set.dim()
            )));
        }
    }
    if let Scale::PerRow(v) = scale {
        if v.len() != y.n_facets() {
            return Err(PolytopeError::ShapeMismatch("per-row scale length".into()));
        }
    }
    let hy = y.hmat();
    // constant supports, one vector per term
    let mut fixed: Vec<Option<DVector<f64>>> = Vec::with_capacity(terms.len());
    for t in terms {
        fixed.push(match (&t.map, form) {
            (TermMap::Const(m), SupportForm::Compact) | (TermMap::Scaled(_, m), SupportForm::Compact) => {
                Some(t.set.image_support_rows(m, hy)?)
            }
            _ => None,
        });
    }
    let mut blocks = ContainmentBlocks::default();
    // epigraphs of symmetric boxes are shared between directions c and -c
    let mut epi_cache: Vec<(usize, Vec<LinExpr>, usize)> = Vec::new();
    for r in 0..y.n_facets() {
        let mut lhs = LinExpr::zero();
        if let Some(a) = offset {
            for k in 0..n {
                lhs.add_scaled(&a[k], hy[(r, k)]);
            }
        }
        for (ti, (t, fx)) in terms.iter().zip(&fixed).enumerate() {
            if let Some(s) = fx {
                match &t.map {
                    TermMap::Scaled(e, _) => lhs.add_scaled(e, s[r]),
                    _ => lhs.constant += s[r],
                }
                continue;
            }
            // direction c_k = (H_y[r] T)_k
            let dir: Vec<LinExpr> = row_times_map(hy, r, &t.map);
            if form == SupportForm::Compact && dir.iter().all(|e| e.is_constant()) {
                let xi: Vec<f64> = dir.iter().map(|e| e.constant).collect();
                lhs.constant += t.set.support(&xi)?;
                continue;
            }
            match (form, t.set.box_bounds()) {
                (SupportForm::Compact, Some(b)) => {
                    let symmetric = b.iter().all(|(lo, hi)| *lo == -*hi);
                    if symmetric {
                        if let Some((_, _, start)) =
                            epi_cache.iter().find(|(k, d, _)| *k == ti && same_up_to_sign(d, &dir))
                        {
                            for k in 0..dir.len() {
                                lhs.add_term(start + k, 1.0);
                            }
                            continue;
                        }
                    }
                    let start = qp.add_vars("epi", n_of(&dir));
                    if symmetric {
                        epi_cache.push((ti, dir.clone(), start));
                    }
                    for (k, (lo, hi)) in b.iter().enumerate() {
                        let tk = LinExpr::var(start + k);
                        let mut up = dir[k].scaled(*hi);
                        up.add_scaled(&tk, -1.0);
                        blocks.ineq_rows.push(qp.add_le(&up, family));
                        let mut dn = dir[k].scaled(*lo);
                        dn.add_scaled(&tk, -1.0);
                        blocks.ineq_rows.push(qp.add_le(&dn, family));
                        lhs.add_term(start + k, 1.0);
                    }
                }
                _ => {
                    let hx = t.set.hmat();
                    let nx = t.set.n_facets();
                    let start = qp.add_vars("lambda", nx);
                    qp.add_nonneg(start, nx, family);
                    blocks.lambda_vars.push(LambdaHandle { start, rows: 1, cols: nx });
                    for k in 0..t.set.dim() {
                        let mut e = LinExpr::zero();
                        for l in 0..nx {
                            e.add_term(start + l, hx[(l, k)]);
                        }
                        e.add_scaled(&dir[k], -1.0);
                        blocks.eq_rows.push(qp.add_eq(&e, family));
                    }
                    for l in 0..nx {
                        lhs.add_term(start + l, t.set.offsets()[l]);
                    }
                }
            }
        }
        lhs.add_scaled(scale.row(r), -y.offsets()[r]);
        blocks.ineq_rows.push(qp.add_le(&lhs, family));
    }
    Ok(blocks)
}

fn same_up_to_sign(a: &[LinExpr], b: &[LinExpr]) -> bool {
    let matches = |s: f64| {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.terms.len() == y.terms.len()
                    && x.constant == s * y.constant
                    && x.terms.iter().zip(&y.terms).all(|(p, q)| p.0 == q.0 && p.1 == s * q.1)
            })
    };
    matches(1.0) || matches(-1.0)
}

fn n_of(v: &[LinExpr]) -> usize {
    v.len()
}

fn row_times_map(hy: &DMatrix<f64>, r: usize, map: &TermMap) -> Vec<LinExpr> {
    match map {
        TermMap::Const(m) => (0..m.ncols())
            .map(|k| LinExpr::constant((0..m.nrows()).map(|q| hy[(r, q)] * m[(q, k)]).sum()))
            .collect(),
        TermMap::Scaled(e, m) => (0..m.ncols())
            .map(|k| e.scaled((0..m.nrows()).map(|q| hy[(r, q)] * m[(q, k)]).sum()))
            .collect(),
        TermMap::Expr(x) => (0..x.cols)
            .map(|k| {
                let mut acc = LinExpr::zero();
                for q in 0..x.rows {
                    let a = hy[(r, q)];
                    if a != 0.0 {
                        acc.add_scaled(x.at(q, k), a);
                    }
                }
                acc.compact();
                acc
            })
            .collect(),
    }
}

/// `α A X ⊆ β Y ⊖ Γ Z`, written with explicit multipliers for both `X` and `Z`.
#[allow(clippy::too_many_arguments)]
pub fn encode_affine_containment(
    qp: &mut QpProblem,
    alpha: &LinExpr,
    a: &DMatrix<f64>,
    beta: &LinExpr,
    y: &Polytope,
    gamma: &TermMap,
    z: &Polytope,
    x: &Polytope,
    family: u16,
) -> Result<ContainmentBlocks> {
    if a.nrows() != y.dim() || a.ncols() != x.dim() {
        return Err(PolytopeError::ShapeMismatch("A does not map X into Y's space".into()));
    }
    let terms = [
        InclusionTerm { map: TermMap::Scaled(alpha.clone(), a.clone()), set: x },
        InclusionTerm { map: gamma.clone(), set: z },
    ];
    encode_inclusion(qp, None, &terms, y, &Scale::Scalar(beta.clone()), family, SupportForm::Explicit)
}

/// `{a} ⊕ ⊕_i A_i X_i ⊆ β Y ⊖ Γ Z`, explicit multipliers throughout.
#[allow(clippy::too_many_arguments)]
pub fn encode_minkowski_containment(
    qp: &mut QpProblem,
    a: &[LinExpr],
    terms: &[(TermMap, &Polytope)],
    beta: &Scale,
    y: &Polytope,
    gamma: &TermMap,
    z: &Polytope,
    family: u16,
) -> Result<ContainmentBlocks> {
    let mut all: Vec<InclusionTerm<'_>> =
        terms.iter().map(|(m, s)| InclusionTerm { map: m.clone(), set: *s }).collect();
    all.push(InclusionTerm { map: gamma.clone(), set: z });
    encode_inclusion(qp, Some(a), &all, y, beta, family, SupportForm::Explicit)
}
