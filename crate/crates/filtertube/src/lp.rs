//! Small dense linear programs on top of a simplex backend.
//!
//! Used for support functions, membership tests and redundancy checks where
//! problems have a handful of variables and at most a few thousand rows.

use minilp::{ComparisonOp, OptimizationDirection, Problem, Variable};
use nalgebra::{DMatrix, DVector};

/// Result of a small LP.
#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, x: Vec<f64> },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// Dense LP `max/min c'x` over free variables with `<=` and `==` rows.
#[derive(Clone, Debug)]
pub struct DenseLp {
    n: usize,
    objective: Vec<f64>,
    maximize: bool,
    bounds: Vec<(f64, f64)>,
    le: Vec<(Vec<f64>, f64)>,
    eq: Vec<(Vec<f64>, f64)>,
}

impl DenseLp {
    pub fn new(n: usize) -> Self {
        DenseLp {
            n,
            objective: vec![0.0; n],
            maximize: true,
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
            le: Vec::new(),
            eq: Vec::new(),
        }
    }

    pub fn maximize(mut self, c: &[f64]) -> Self {
        self.objective = c.to_vec();
        self.maximize = true;
        self
    }

    pub fn minimize(mut self, c: &[f64]) -> Self {
        self.objective = c.to_vec();
        self.maximize = false;
        self
    }

    pub fn bound(&mut self, var: usize, lo: f64, hi: f64) {
        self.bounds[var] = (lo, hi);
    }

    pub fn le(&mut self, row: Vec<f64>, rhs: f64) {
        debug_assert_eq!(row.len(), self.n);
        self.le.push((row, rhs));
    }

    pub fn eq(&mut self, row: Vec<f64>, rhs: f64) {
        debug_assert_eq!(row.len(), self.n);
        self.eq.push((row, rhs));
    }

    /// Adds `H x <= h` for the first `H.ncols()` variables starting at `offset`.
    pub fn le_block(&mut self, hm: &DMatrix<f64>, h: &DVector<f64>, offset: usize) {
        for r in 0..hm.nrows() {
            let mut row = vec![0.0; self.n];
            for c in 0..hm.ncols() {
                row[offset + c] = hm[(r, c)];
            }
            self.le.push((row, h[r]));
        }
    }

    pub fn solve(&self) -> LpOutcome {
        let dir = if self.maximize {
            OptimizationDirection::Maximize
        } else {
            OptimizationDirection::Minimize
        };
        let mut pb = Problem::new(dir);
        let vars: Vec<Variable> = (0..self.n)
            .map(|i| pb.add_var(self.objective[i], self.bounds[i]))
            .collect();
        let push = |pb: &mut Problem, row: &[f64], op: ComparisonOp, rhs: f64| {
            let terms: Vec<(Variable, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (vars[i], *v))
                .collect();
            if terms.is_empty() {
                // 0 <= rhs or 0 == rhs, keep the row so infeasibility is reported
                pb.add_constraint(&[(vars[0], 0.0)], op, rhs);
            } else {
                pb.add_constraint(terms.as_slice(), op, rhs);
            }
        };
        for (row, rhs) in &self.le {
            push(&mut pb, row, ComparisonOp::Le, *rhs);
        }
        for (row, rhs) in &self.eq {
            push(&mut pb, row, ComparisonOp::Eq, *rhs);
        }
        match pb.solve() {
            Ok(sol) => {
                let x: Vec<f64> = vars.iter().map(|v| sol[*v]).collect();
                let value = sol.objective();
                // free columns can come back as infinite values instead of an error
                if !value.is_finite() || x.iter().any(|v| !v.is_finite()) {
                    LpOutcome::Unbounded
                } else {
                    LpOutcome::Optimal { value, x }
                }
            }
            Err(minilp::Error::Infeasible) => LpOutcome::Infeasible,
            Err(minilp::Error::Unbounded) => LpOutcome::Unbounded,
        }
    }
}

/// `max xi'x s.t. H x <= h`.
pub fn maximize_over(hm: &DMatrix<f64>, h: &DVector<f64>, xi: &[f64]) -> LpOutcome {
    let mut lp = DenseLp::new(hm.ncols()).maximize(xi);
    lp.le_block(hm, h, 0);
    lp.solve()
}
