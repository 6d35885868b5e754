//! Block-lower-triangular operators of the system level parameterization.
//!
//! Index convention: block `(i, j)` with `1 <= i <= N` and `0 <= j < i` maps
//! the auxiliary disturbance at stage `j` to the error (or error input) at
//! stage `i`. This is the row-stage / column-disturbance convention, shifted
//! by one against the usual SLS layout where the diagonal is populated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polytope::{Polytope, PolytopeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence has length {got}, expected {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

pub type Result<T> = std::result::Result<T, SlpError>;

/// Strictly block-lower-triangular operator with horizon `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blt {
    horizon: usize,
    rows: usize,
    cols: usize,
    blocks: Vec<DMatrix<f64>>,
}

fn flat(i: usize, j: usize) -> usize {
    (i - 1) * i / 2 + j
}

impl Blt {
    pub fn zeros(horizon: usize, rows: usize, cols: usize) -> Self {
        let count = horizon * (horizon + 1) / 2;
        Blt { horizon, rows, cols, blocks: vec![DMatrix::zeros(rows, cols); count] }
    }

    /// Builds from a closure over valid `(i, j)`.
    pub fn from_fn(horizon: usize, rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> DMatrix<f64>) -> Self {
        let mut out = Self::zeros(horizon, rows, cols);
        for i in 1..=horizon {
            for j in 0..i {
                let b = f(i, j);
                assert_eq!(b.shape(), (rows, cols), "block ({i},{j}) has the wrong shape");
                out.blocks[flat(i, j)] = b;
            }
        }
        out
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn row_dim(&self) -> usize {
        self.rows
    }

    pub fn col_dim(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &DMatrix<f64> {
        assert!(i >= 1 && i <= self.horizon && j < i, "block ({i},{j}) outside the triangle");
        &self.blocks[flat(i, j)]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut DMatrix<f64> {
        assert!(i >= 1 && i <= self.horizon && j < i, "block ({i},{j}) outside the triangle");
        &mut self.blocks[flat(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, m: DMatrix<f64>) {
        assert_eq!(m.shape(), (self.rows, self.cols));
        *self.get_mut(i, j) = m;
    }

    /// Blocks of row `i`, `j = 0..i`.
    pub fn row(&self, i: usize) -> Vec<DMatrix<f64>> {
        (0..i).map(|j| self.get(i, j).clone()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().map(|b| b.amax()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Blt {
        Blt { blocks: self.blocks.iter().map(|b| b * s).collect(), ..self.clone() }
    }

    /// `Σ_m w_m X_m`.
    pub fn combine(weights: &[f64], ops: &[&Blt]) -> Result<Blt> {
        let first = ops.first().ok_or_else(|| SlpError::ShapeMismatch("no operators".into()))?;
        let mut out = Blt::zeros(first.horizon, first.rows, first.cols);
        for (w, op) in weights.iter().zip(ops) {
            if (op.horizon, op.rows, op.cols) != (first.horizon, first.rows, first.cols) {
                return Err(SlpError::ShapeMismatch("operators differ in shape".into()));
            }
            for (a, b) in out.blocks.iter_mut().zip(&op.blocks) {
                *a += b * *w;
            }
        }
        Ok(out)
    }

    /// Dense `(N rows) x (N cols)` matrix; block row `i-1`, block column `j`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.horizon;
        let mut m = DMatrix::zeros(n * self.rows, n * self.cols);
        for i in 1..=n {
            for j in 0..i {
                m.view_mut(((i - 1) * self.rows, j * self.cols), (self.rows, self.cols))
                    .copy_from(self.get(i, j));
            }
        }
        m
    }

    pub fn to_record(&self) -> BltRecord {
        BltRecord {
            horizon: self.horizon,
            rows: self.rows,
            cols: self.cols,
            blocks: self.blocks.iter().map(|b| b.transpose().iter().copied().collect()).collect(),
        }
    }

    pub fn from_record(r: &BltRecord) -> Result<Blt> {
        let mut out = Blt::zeros(r.horizon, r.rows, r.cols);
        if r.blocks.len() != out.blocks.len() || r.blocks.iter().any(|b| b.len() != r.rows * r.cols) {
            return Err(SlpError::ShapeMismatch("record block count or size".into()));
        }
        for (dst, src) in out.blocks.iter_mut().zip(&r.blocks) {
            *dst = DMatrix::from_row_slice(r.rows, r.cols, src);
        }
        Ok(out)
    }
}

/// Serialized operator: blocks in triangle order, each row-major.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BltRecord {
    pub horizon: usize,
    pub rows: usize,
    pub cols: usize,
    pub blocks: Vec<Vec<f64>>,
}

/// Terminal filter row `Ξ_0, ..., Ξ_{N-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRow {
    pub blocks: Vec<DMatrix<f64>>,
}

impl FilterRow {
    pub fn zeros(horizon: usize, n: usize) -> Self {
        FilterRow { blocks: vec![DMatrix::zeros(n, n); horizon] }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn combine(weights: &[f64], rows: &[&FilterRow]) -> FilterRow {
        let mut out = FilterRow::zeros(rows[0].len(), rows[0].blocks[0].nrows());
        for (w, r) in weights.iter().zip(rows) {
            for (a, b) in out.blocks.iter_mut().zip(&r.blocks) {
                *a += b * *w;
            }
        }
        out
    }
}

/// Drops the first block row and column and appends `brow` as the last row:
/// `out(i, j) = a(i+1, j+1)` for `i < N`, `out(N, j) = brow[j]`.
pub fn shift(a: &Blt, brow: &[DMatrix<f64>]) -> Result<Blt> {
    let n = a.horizon();
    if brow.len() != n {
        return Err(SlpError::LengthMismatch { got: brow.len(), want: n });
    }
    if brow.iter().any(|b| b.shape() != (a.row_dim(), a.col_dim())) {
        return Err(SlpError::ShapeMismatch("bottom row block shape".into()));
    }
    let mut out = Blt::zeros(n, a.row_dim(), a.col_dim());
    for i in 1..n {
        for j in 0..i {
            out.set(i, j, a.get(i + 1, j + 1).clone());
        }
    }
    for (j, b) in brow.iter().enumerate() {
        out.set(n, j, b.clone());
    }
    Ok(out)
}

fn check_triple(phi_e: &Blt, phi_nu: &Blt, sigma: &Blt, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    let h = phi_e.horizon();
    if phi_nu.horizon() != h || sigma.horizon() != h {
        return Err(SlpError::ShapeMismatch("horizons differ".into()));
    }
    if (phi_e.row_dim(), phi_e.col_dim()) != (n, n)
        || (sigma.row_dim(), sigma.col_dim()) != (n, n)
        || (phi_nu.row_dim(), phi_nu.col_dim()) != (m, n)
        || b.nrows() != n
    {
        return Err(SlpError::ShapeMismatch("block dimensions".into()));
    }
    Ok(())
}

/// Blockwise residual of the SLP equality:
/// `Φe(i, i-1) - Σ(i, i-1)` on the first subdiagonal and
/// `Φe(i, j) - A Φe(i-1, j) - B Φν(i-1, j) - Σ(i, j)` below it.
pub fn slp_residual(phi_e: &Blt, phi_nu: &Blt, sigma: &Blt, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Blt> {
    check_triple(phi_e, phi_nu, sigma, a, b)?;
    let n = a.nrows();
    Ok(Blt::from_fn(phi_e.horizon(), n, n, |i, j| {
        if j + 1 == i {
            phi_e.get(i, j) - sigma.get(i, j)
        } else {
            phi_e.get(i, j) - a * phi_e.get(i - 1, j) - b * phi_nu.get(i - 1, j) - sigma.get(i, j)
        }
    }))
}

/// `Φe` generated from `(Φν, Σ)` by the forward recursion.
pub fn forward_phi_e(phi_nu: &Blt, sigma: &Blt, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Blt {
    let n = a.nrows();
    let mut out = Blt::zeros(sigma.horizon(), n, n);
    for i in 1..=sigma.horizon() {
        for j in 0..i {
            let blk = if j + 1 == i {
                sigma.get(i, j).clone()
            } else {
                a * out.get(i - 1, j) + b * phi_nu.get(i - 1, j) + sigma.get(i, j)
            };
            out.set(i, j, blk);
        }
    }
    out
}

/// `e_i = Σ_j Φe(i, j) w̄_j`, `ν_i = Σ_j Φν(i, j) w̄_j` for `i = 1..N`.
pub fn rollout_error(
    phi_e: &Blt,
    phi_nu: &Blt,
    wbar: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let h = phi_e.horizon();
    if wbar.len() != h {
        return Err(SlpError::LengthMismatch { got: wbar.len(), want: h });
    }
    if phi_nu.horizon() != h || wbar.iter().any(|w| w.len() != phi_e.col_dim()) {
        return Err(SlpError::ShapeMismatch("rollout operands".into()));
    }
    let mut e = Vec::with_capacity(h);
    let mut nu = Vec::with_capacity(h);
    for i in 1..=h {
        let mut ei = DVector::zeros(phi_e.row_dim());
        let mut vi = DVector::zeros(phi_nu.row_dim());
        for j in 0..i {
            ei += phi_e.get(i, j) * &wbar[j];
            vi += phi_nu.get(i, j) * &wbar[j];
        }
        e.push(ei);
        nu.push(vi);
    }
    Ok((e, nu))
}

/// Per-stage tightening `Σ_{j<i} h_W̄(Φ(i, j)' H_r')` for `i = 0..N`.
pub fn tube_offsets(phi: &Blt, wbar: &Polytope, h_target: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    if h_target.ncols() != phi.row_dim() || wbar.dim() != phi.col_dim() {
        return Err(SlpError::ShapeMismatch("target facets or W̄ dimension".into()));
    }
    let mut out = vec![DVector::zeros(h_target.nrows())];
    for i in 1..=phi.horizon() {
        let mut acc = DVector::zeros(h_target.nrows());
        for j in 0..i {
            acc += wbar.image_support_rows(phi.get(i, j), h_target)?;
        }
        out.push(acc);
    }
    Ok(out)
}
