//! Sparse convex QP model with linear constraints and a Clarabel backend.
//!
//! Objective convention: minimize `0.5 x'Px + q'x + c`.

use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Affine expression `sum_k a_k x_k + c`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        LinExpr::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr { terms: Vec::new(), constant: c }
    }

    pub fn var(i: usize) -> Self {
        LinExpr { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn scaled_var(i: usize, a: f64) -> Self {
        LinExpr { terms: vec![(i, a)], constant: 0.0 }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|(_, a)| *a == 0.0)
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &LinExpr, s: f64) {
        if s == 0.0 {
            return;
        }
        self.terms.extend(other.terms.iter().map(|(i, a)| (*i, a * s)));
        self.constant += s * other.constant;
    }

    pub fn add_term(&mut self, i: usize, a: f64) {
        if a != 0.0 {
            self.terms.push((i, a));
        }
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        LinExpr {
            terms: self.terms.iter().map(|(i, a)| (*i, a * s)).collect(),
            constant: self.constant * s,
        }
    }

    /// Sorts and merges duplicate variable indices, dropping zeros.
    pub fn compact(&mut self) {
        if self.terms.len() < 2 {
            self.terms.retain(|(_, a)| *a != 0.0);
            return;
        }
        self.terms.sort_by_key(|(i, _)| *i);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, a) in &self.terms {
            match out.last_mut() {
                Some((j, b)) if *j == i => *b += a,
                _ => out.push((i, a)),
            }
        }
        out.retain(|(_, a)| *a != 0.0);
        self.terms = out;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, a)| a * x[*i]).sum::<f64>()
    }
}

/// Dense matrix of affine expressions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ExprMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<LinExpr>,
}

impl ExprMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ExprMatrix { rows, cols, data: vec![LinExpr::zero(); rows * cols] }
    }

    pub fn from_const(m: &DMatrix<f64>) -> Self {
        let mut e = ExprMatrix::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                e.data[r * m.ncols() + c] = LinExpr::constant(m[(r, c)]);
            }
        }
        e
    }

    /// Matrix whose entries are consecutive variables, row-major from `start`.
    pub fn from_vars(rows: usize, cols: usize, start: usize) -> Self {
        let data = (0..rows * cols).map(|k| LinExpr::var(start + k)).collect();
        ExprMatrix { rows, cols, data }
    }

    /// Column vector of consecutive variables.
    pub fn var_vector(len: usize, start: usize) -> Self {
        ExprMatrix::from_vars(len, 1, start)
    }

    pub fn at(&self, r: usize, c: usize) -> &LinExpr {
        &self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut LinExpr {
        &mut self.data[r * self.cols + c]
    }

    pub fn is_constant(&self) -> bool {
        self.data.iter().all(|e| e.is_constant())
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &ExprMatrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a.add_scaled(b, s);
        }
    }

    /// `M * self` for a constant matrix `M`.
    pub fn premul(&self, m: &DMatrix<f64>) -> ExprMatrix {
        assert_eq!(m.ncols(), self.rows, "shape mismatch");
        let mut out = ExprMatrix::zeros(m.nrows(), self.cols);
        for r in 0..m.nrows() {
            for k in 0..self.rows {
                let a = m[(r, k)];
                if a == 0.0 {
                    continue;
                }
                for c in 0..self.cols {
                    out.data[r * self.cols + c].add_scaled(&self.data[k * self.cols + c], a);
                }
            }
        }
        out.compact();
        out
    }

    pub fn compact(&mut self) {
        for e in &mut self.data {
            e.compact();
        }
    }

    pub fn row(&self, r: usize) -> &[LinExpr] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.at(r, c).eval(x))
    }
}

/// Named contiguous block of decision variables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Sparse linear row `a'x (=|<=) rhs`, tagged with a constraint family id.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
    pub rhs: f64,
    pub family: u16,
}

impl SparseRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(i, a)| a * x[*i]).sum()
    }
}

/// Convex QP with linear equality and inequality constraints.
#[derive(Clone, Debug, Default)]
pub struct QpProblem {
    n: usize,
    pub segments: Vec<Segment>,
    quad: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub c0: f64,
    pub eq: Vec<SparseRow>,
    pub ineq: Vec<SparseRow>,
    pub families: Vec<String>,
}

impl QpProblem {
    pub fn new() -> Self {
        QpProblem::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn add_vars(&mut self, name: &str, len: usize) -> usize {
        let start = self.n;
        self.n += len;
        self.q.resize(self.n, 0.0);
        self.segments.push(Segment { name: name.to_string(), start, len });
        start
    }

    /// Registers a constraint family name and returns its id.
    pub fn family(&mut self, name: &str) -> u16 {
        if let Some(k) = self.families.iter().position(|f| f == name) {
            return k as u16;
        }
        self.families.push(name.to_string());
        (self.families.len() - 1) as u16
    }

    /// Adds `0.5 * s * (x_i * x_j + x_j * x_i)`-style entries of `P`; both
    /// triangles are folded into the upper one at assembly time.
    pub fn add_quad(&mut self, i: usize, j: usize, v: f64) {
        if v != 0.0 {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.quad.push((a, b, v));
        }
    }

    /// Adds `x' M x` for the variables `vars` (M symmetric).
    pub fn add_quadratic_form(&mut self, vars: &[usize], m: &DMatrix<f64>) {
        for a in 0..vars.len() {
            for b in a..vars.len() {
                let v = if a == b { 2.0 * m[(a, a)] } else { m[(a, b)] + m[(b, a)] };
                self.add_quad(vars[a], vars[b], v);
            }
        }
    }

    pub fn add_linear_cost(&mut self, e: &LinExpr) {
        for (i, a) in &e.terms {
            self.q[*i] += a;
        }
        self.c0 += e.constant;
    }

    fn to_row(e: &LinExpr, family: u16) -> SparseRow {
        let mut e = e.clone();
        e.compact();
        SparseRow {
            idx: e.terms.iter().map(|t| t.0).collect(),
            val: e.terms.iter().map(|t| t.1).collect(),
            rhs: -e.constant,
            family,
        }
    }

    /// `e == 0`; returns the row index.
    pub fn add_eq(&mut self, e: &LinExpr, family: u16) -> usize {
        self.eq.push(Self::to_row(e, family));
        self.eq.len() - 1
    }

    /// `e <= 0`; returns the row index.
    pub fn add_le(&mut self, e: &LinExpr, family: u16) -> usize {
        self.ineq.push(Self::to_row(e, family));
        self.ineq.len() - 1
    }

    pub fn add_nonneg(&mut self, start: usize, len: usize, family: u16) {
        for k in start..start + len {
            self.ineq.push(SparseRow { idx: vec![k], val: vec![-1.0], rhs: 0.0, family });
        }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut v = self.c0;
        for (i, a) in self.q.iter().enumerate() {
            v += a * x[i];
        }
        for &(i, j, p) in &self.quad {
            v += if i == j { 0.5 * p * x[i] * x[i] } else { 0.5 * p * (x[i] * x[j] + x[j] * x[i]) };
        }
        v
    }

    /// Largest equality residual or inequality excess at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let e = self.eq.iter().map(|r| (r.eval(x) - r.rhs).abs());
        let i = self.ineq.iter().map(|r| (r.eval(x) - r.rhs).max(0.0));
        e.chain(i).fold(0.0, f64::max)
    }

    /// Per-family maximum violation.
    pub fn violations_by_family(&self, x: &[f64]) -> Vec<(String, f64)> {
        let mut v = vec![0.0f64; self.families.len().max(1)];
        for r in &self.eq {
            let f = r.family as usize;
            v[f] = v[f].max((r.eval(x) - r.rhs).abs());
        }
        for r in &self.ineq {
            let f = r.family as usize;
            v[f] = v[f].max((r.eval(x) - r.rhs).max(0.0));
        }
        self.families.iter().cloned().zip(v).collect()
    }

    pub fn nnz(&self) -> usize {
        self.eq.iter().chain(&self.ineq).map(|r| r.idx.len()).sum()
    }

    fn folded_quad(&self) -> Vec<(usize, usize, f64)> {
        let mut t = self.quad.clone();
        t.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(t.len());
        for (i, j, v) in t {
            match out.last_mut() {
                Some((a, b, w)) if *a == i && *b == j => *w += v,
                _ => out.push((i, j, v)),
            }
        }
        out
    }

    /// Writes the problem as sparse triplets.
    ///
    /// Format, one record per line, indices zero-based, column-major order:
    /// `dims n m_eq m_ineq`, `P i j v` (upper triangle), `q j v`, `c v`,
    /// `A i j v` (rows 0..m_eq are equalities), `l i v`, `u i v`.
    /// Equality rows have `l = u`; inequality rows have `l = -inf`.
    pub fn to_triplet_text(&self) -> String {
        let mut s = String::new();
        let m = self.eq.len() + self.ineq.len();
        let _ = writeln!(s, "dims {} {} {}", self.n, self.eq.len(), self.ineq.len());
        for (i, j, v) in self.folded_quad() {
            let _ = writeln!(s, "P {} {} {:e}", i, j, v);
        }
        for (j, v) in self.q.iter().enumerate() {
            if *v != 0.0 {
                let _ = writeln!(s, "q {} {:e}", j, v);
            }
        }
        let _ = writeln!(s, "c {:e}", self.c0);
        let (colptr, rowval, nzval) = self.constraint_csc();
        for j in 0..self.n {
            for k in colptr[j]..colptr[j + 1] {
                let _ = writeln!(s, "A {} {} {:e}", rowval[k], j, nzval[k]);
            }
        }
        for (r, row) in self.eq.iter().chain(&self.ineq).enumerate() {
            let lo = if r < self.eq.len() { format!("{:e}", row.rhs) } else { "-inf".to_string() };
            let _ = writeln!(s, "l {} {}", r, lo);
            let _ = writeln!(s, "u {} {:e}", r, row.rhs);
        }
        debug_assert_eq!(m, self.eq.len() + self.ineq.len());
        s
    }

    fn constraint_csc(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz());
        for (r, row) in self.eq.iter().chain(&self.ineq).enumerate() {
            for (i, v) in row.idx.iter().zip(&row.val) {
                trip.push((*i, r, *v));
            }
        }
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut colptr = vec![0usize; self.n + 1];
        let mut rowval = Vec::with_capacity(trip.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (c, r, v) in trip {
            if last == Some((c, r)) {
                *nzval.last_mut().unwrap() += v;
                continue;
            }
            colptr[c + 1] += 1;
            rowval.push(r);
            nzval.push(v);
            last = Some((c, r));
        }
        for j in 0..self.n {
            colptr[j + 1] += colptr[j];
        }
        (colptr, rowval, nzval)
    }
}

/// Solver termination summary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct QpOutcome {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub solve_time: f64,
    pub iterations: u32,
}

/// Anything that can solve a [`QpProblem`]. Implementations must be
/// deterministic for fixed inputs and settings.
pub trait QpSolver: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, prob: &QpProblem) -> QpOutcome;
}

/// Interior-point backend.
#[derive(Clone, Debug)]
pub struct ClarabelQp {
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub max_iter: u32,
    /// Post-check bound on the assembled constraint violation.
    pub accept_violation: f64,
}

impl Default for ClarabelQp {
    fn default() -> Self {
        ClarabelQp { tol_feas: 1e-9, tol_gap: 1e-9, max_iter: 200, accept_violation: 1e-6 }
    }
}

impl QpSolver for ClarabelQp {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, prob: &QpProblem) -> QpOutcome {
        let start = Instant::now();
        let n = prob.n;
        let quad = prob.folded_quad();
        // normalize the cost; the interior point method is sensitive to its scale
        let scale = quad.iter().map(|t| t.2.abs()).chain(prob.q.iter().map(|v| v.abs())).fold(0.0, f64::max).max(1.0);
        let mut pcol = vec![0usize; n + 1];
        let mut prow = Vec::with_capacity(quad.len());
        let mut pval = Vec::with_capacity(quad.len());
        for (i, j, v) in &quad {
            pcol[j + 1] += 1;
            prow.push(*i);
            pval.push(*v / scale);
        }
        for j in 0..n {
            pcol[j + 1] += pcol[j];
        }
        let p = CscMatrix::new(n, n, pcol, prow, pval);
        let (colptr, rowval, nzval) = prob.constraint_csc();
        let m = prob.eq.len() + prob.ineq.len();
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);
        let b: Vec<f64> = prob.eq.iter().chain(&prob.ineq).map(|r| r.rhs).collect();
        let mut cones = Vec::new();
        if !prob.eq.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(prob.eq.len()));
        }
        if !prob.ineq.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(prob.ineq.len()));
        }
        let qs: Vec<f64> = prob.q.iter().map(|v| v / scale).collect();
        // a second attempt without equilibration rescues some ill-conditioned
        // problems; the accepted point must pass the same violation check
        let mut last: Option<(SolveStatus, Vec<f64>)> = None;
        let mut iterations = 0;
        for equilibrate in [true, false] {
            let settings = DefaultSettings {
                verbose: false,
                max_iter: self.max_iter,
                tol_feas: self.tol_feas,
                tol_gap_abs: self.tol_gap,
                tol_gap_rel: self.tol_gap,
                equilibrate_enable: equilibrate,
                ..DefaultSettings::default()
            };
            let Ok(mut solver) = DefaultSolver::new(&p, &qs, &a, &b, &cones, settings) else {
                continue;
            };
            solver.solve();
            let sol = &solver.solution;
            iterations += sol.iterations;
            let x = sol.x.clone();
            let status = match sol.status {
                SolverStatus::Solved => SolveStatus::Optimal,
                SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
                SolverStatus::AlmostSolved
                | SolverStatus::MaxIterations
                | SolverStatus::InsufficientProgress
                | SolverStatus::NumericalError => {
                    if x.iter().all(|v| v.is_finite()) && prob.max_violation(&x) <= self.accept_violation {
                        SolveStatus::Optimal
                    } else if matches!(sol.status, SolverStatus::AlmostSolved) {
                        SolveStatus::NumericalFailure
                    } else {
                        SolveStatus::Infeasible
                    }
                }
                _ => SolveStatus::NumericalFailure,
            };
            let certified = matches!(sol.status, SolverStatus::PrimalInfeasible);
            let solved = matches!(sol.status, SolverStatus::Solved);
            // an accepted inexact point is kept only if the next attempt does
            // not find a better one
            let better = match &last {
                Some((SolveStatus::Optimal, y)) => status == SolveStatus::Optimal && prob.objective(&x) < prob.objective(y),
                _ => true,
            };
            if better {
                last = Some((status, x));
            }
            if solved || certified {
                break;
            }
        }
        let (status, x) = last.unwrap_or((SolveStatus::NumericalFailure, vec![0.0; n]));
        let objective = if status == SolveStatus::Optimal { prob.objective(&x) } else { f64::NAN };
        QpOutcome { status, x, objective, solve_time: start.elapsed().as_secs_f64(), iterations }
    }
}
