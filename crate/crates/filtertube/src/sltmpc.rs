//! Convex programs of filter-based tube MPC.
//!
//! [`MpcTemplate`] assembles one of three programs over the decision set
//! `(z, v, p, Φe, Φν, Σ, Ξ, α)`:
//!
//! * [`ProblemKind::Generic`]: shrinking-horizon problem with a terminal set
//!   `S_f` that is robust invariant for the true dynamics;
//! * [`ProblemKind::Receding`]: recursively feasible problem with the
//!   terminal law `K_f`, the optimized terminal scaling `α` and the terminal
//!   filter row `Ξ`;
//! * [`ProblemKind::Secondary`]: same constraints as `Receding`, tube-size
//!   objective (used by the asynchronous scheme).
//!
//! The template is built once; [`MpcTemplate::solve`] only rewrites the
//! initial-state rows.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariant::TerminalIngredients;
use crate::polytope::{encode_inclusion, InclusionTerm, Polytope, PolytopeError, Scale, SupportForm, TermMap};
use crate::qp::{ExprMatrix, LinExpr, QpProblem, QpSolver, SolveStatus};
use crate::slp::{shift, Blt, FilterRow, SlpError};
use crate::sysmodel::{CostSpec, UncertainLTI};

/// Lower bound imposed on every filter scaling.
pub const SIGMA_MIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("terminal set is not contained in X")]
    IncompatibleTerminalSet,
    #[error("diagonal filter scalings need a box-shaped W̄")]
    DiagonalNeedsBox,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("auxiliary disturbance outside W̄ (margin {0:.3e})")]
    WbarOutsideSet(f64),
    #[error("filter scaling {0:.3e} too small to invert")]
    DegenerateSigma(f64),
    #[error("operation needs terminal ingredients")]
    MissingTerminal,
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Slp(#[from] SlpError),
}

pub type Result<T> = std::result::Result<T, MpcError>;

/// Structure of the filter blocks `Σ_{i,i-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_i I`
    Scalar,
    /// `diag(σ_i)`, admissible for box `W̄`.
    Diagonal,
}

/// Tube-size objective `Σ |Φe|_1 + |Φν|_1 - c α` of the secondary program.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecondaryCost {
    /// `c`
    pub alpha_weight: f64,
    /// Weight of the diagonal blocks `diag(σ_i)` inside `|Φe|_1`.
    pub sigma_weight: f64,
    /// Slack demanded of the anchor trajectory in every nominal constraint.
    pub margin: f64,
}

impl Default for SecondaryCost {
    fn default() -> Self {
        SecondaryCost { alpha_weight: 1.0, sigma_weight: 1.0, margin: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProblemKind {
    Generic,
    Receding,
    Secondary(SecondaryCost),
}

impl ProblemKind {
    fn has_terminal_law(&self) -> bool {
        !matches!(self, ProblemKind::Generic)
    }
}

/// Values of every decision variable of the MPC program.
#[derive(Clone, Debug)]
pub struct TubePlan {
    /// `z_0..z_N`
    pub z: Vec<DVector<f64>>,
    /// `v_0..v_{N-1}`
    pub v: Vec<DVector<f64>>,
    /// `p_0..p_{N-1}`
    pub p: Vec<DVector<f64>>,
    /// Per-coordinate `σ_1..σ_N` (stored at index `i-1`).
    pub sigma: Vec<DVector<f64>>,
    pub phi_e: Blt,
    pub phi_nu: Blt,
    /// Filter `Σ`.
    pub filter: Blt,
    pub xi: FilterRow,
    pub alpha: f64,
}

impl TubePlan {
    /// `Γ = A Φe_{N,0} + B Φν_{N,0} + Ξ_0`
    pub fn gamma(&self, sys: &UncertainLTI) -> DMatrix<f64> {
        let n = self.phi_e.horizon();
        &sys.a * self.phi_e.get(n, 0) + &sys.b * self.phi_nu.get(n, 0) + &self.xi.blocks[0]
    }
}

/// Output of one solve.
#[derive(Clone, Debug)]
pub struct SolutionBundle {
    pub plan: TubePlan,
    pub objective: f64,
    pub status: SolveStatus,
    pub solve_time: f64,
    pub iterations: u32,
}

/// Largest constraint violation per family.
#[derive(Clone, Debug, Default)]
pub struct ViolationReport {
    pub max: f64,
    pub families: Vec<(String, f64)>,
}

impl ViolationReport {
    fn record(&mut self, family: &str, v: f64) {
        match self.families.iter_mut().find(|(f, _)| f == family) {
            Some((_, m)) => *m = m.max(v),
            None => self.families.push((family.to_string(), v)),
        }
        self.max = self.max.max(v);
    }

    fn record_vec(&mut self, family: &str, v: &DVector<f64>) {
        self.record(family, v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}

const NONE: usize = usize::MAX;

fn flat(i: usize, j: usize) -> usize {
    (i - 1) * i / 2 + j
}

#[derive(Clone, Debug)]
struct Layout {
    n: usize,
    m: usize,
    horizon: usize,
    z: usize,
    v: usize,
    p: usize,
    sigma: usize,
    sigma_width: usize,
    phi_e: Vec<usize>,
    phi_nu: Vec<usize>,
    filt: Vec<usize>,
    xi: usize,
    alpha: usize,
}

impl Layout {
    fn vec(start: usize, len: usize) -> Vec<LinExpr> {
        (0..len).map(|k| LinExpr::var(start + k)).collect()
    }

    fn z(&self, i: usize) -> Vec<LinExpr> {
        Self::vec(self.z + i * self.n, self.n)
    }

    fn v(&self, i: usize) -> Vec<LinExpr> {
        Self::vec(self.v + i * self.m, self.m)
    }

    fn p(&self, i: usize) -> Vec<LinExpr> {
        Self::vec(self.p + i * self.n, self.n)
    }

    /// Per-coordinate `σ_i`, `i = 1..N`.
    fn sigma(&self, i: usize) -> Vec<LinExpr> {
        let base = self.sigma + (i - 1) * self.sigma_width;
        (0..self.n)
            .map(|k| LinExpr::var(base + if self.sigma_width == 1 { 0 } else { k }))
            .collect()
    }

    fn diag_sigma(&self, i: usize) -> ExprMatrix {
        let mut e = ExprMatrix::zeros(self.n, self.n);
        for (k, s) in self.sigma(i).into_iter().enumerate() {
            *e.at_mut(k, k) = s;
        }
        e
    }

    fn phi_e(&self, i: usize, j: usize) -> ExprMatrix {
        if j + 1 == i {
            return self.diag_sigma(i);
        }
        ExprMatrix::from_vars(self.n, self.n, self.phi_e[flat(i, j)])
    }

    fn phi_nu(&self, i: usize, j: usize) -> ExprMatrix {
        match self.phi_nu[flat(i, j)] {
            NONE => ExprMatrix::zeros(self.m, self.n),
            s => ExprMatrix::from_vars(self.m, self.n, s),
        }
    }

    fn filt(&self, i: usize, j: usize) -> ExprMatrix {
        if j + 1 == i {
            return self.diag_sigma(i);
        }
        ExprMatrix::from_vars(self.n, self.n, self.filt[flat(i, j)])
    }

    fn xi(&self, j: usize) -> ExprMatrix {
        ExprMatrix::from_vars(self.n, self.n, self.xi + j * self.n * self.n)
    }

    fn alpha(&self) -> LinExpr {
        LinExpr::var(self.alpha)
    }
}

fn mat_vec(m: &DMatrix<f64>, x: &[LinExpr]) -> Vec<LinExpr> {
    (0..m.nrows())
        .map(|r| {
            let mut e = LinExpr::zero();
            for c in 0..m.ncols() {
                e.add_scaled(&x[c], m[(r, c)]);
            }
            e
        })
        .collect()
}

fn add_vec(a: &mut [LinExpr], b: &[LinExpr], s: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        x.add_scaled(y, s);
    }
}

/// Constants reused by the evaluator.
#[derive(Clone, Debug)]
struct Consts {
    /// `h_W(H_w̄')`
    w_on_wbar: DVector<f64>,
    /// axis of each `W̄` facet (box only)
    wbar_axis: Vec<usize>,
    /// `h_Zf(H_x')`, `h_Zf(K_f' H_u')`, `h_Zf(A_K' H_f')`, `h_Zf(Δ_K^d' H_w̄')`
    zf_x: DVector<f64>,
    zf_u: DVector<f64>,
    zf_ak: DVector<f64>,
    zf_dk: Vec<DVector<f64>>,
}

/// Parametric MPC program; solve repeatedly for different initial states.
#[derive(Clone, Debug)]
pub struct MpcTemplate {
    pub kind: ProblemKind,
    pub horizon: usize,
    pub mode: SigmaMode,
    pub sys: UncertainLTI,
    pub cost: CostSpec,
    pub term: Option<TerminalIngredients>,
    /// `S_f` for the generic problem, `Z_f` otherwise.
    pub terminal_set: Polytope,
    pub qp: QpProblem,
    lay: Layout,
    init_rows: Vec<usize>,
    consts: Consts,
}

fn box_axes(p: &Polytope) -> Vec<usize> {
    (0..p.n_facets())
        .map(|r| (0..p.dim()).find(|c| p.hmat()[(r, *c)] != 0.0).unwrap_or(0))
        .collect()
}

impl MpcTemplate {
    /// Shrinking-horizon problem with terminal constraint `z_N ∈ S_f ⊖ F_N(Φe)`.
    pub fn generic(sys: &UncertainLTI, cost: &CostSpec, horizon: usize, s_f: &Polytope, mode: SigmaMode) -> Result<Self> {
        Self::build(ProblemKind::Generic, sys, cost, horizon, None, s_f, mode)
    }

    /// Recursively feasible receding-horizon problem.
    pub fn receding(sys: &UncertainLTI, cost: &CostSpec, horizon: usize, term: &TerminalIngredients, mode: SigmaMode) -> Result<Self> {
        Self::build(ProblemKind::Receding, sys, cost, horizon, Some(term), &term.z_f, mode)
    }

    /// Receding constraints with the tube-size objective.
    pub fn secondary(
        sys: &UncertainLTI,
        cost: &CostSpec,
        horizon: usize,
        term: &TerminalIngredients,
        mode: SigmaMode,
        objective: SecondaryCost,
    ) -> Result<Self> {
        Self::build(ProblemKind::Secondary(objective), sys, cost, horizon, Some(term), &term.z_f, mode)
    }

    fn build(
        kind: ProblemKind,
        sys: &UncertainLTI,
        cost: &CostSpec,
        horizon: usize,
        term: Option<&TerminalIngredients>,
        terminal_set: &Polytope,
        mode: SigmaMode,
    ) -> Result<Self> {
        sys.validate().map_err(|e| MpcError::ShapeMismatch(e.to_string()))?;
        if horizon == 0 {
            return Err(MpcError::ShapeMismatch("horizon must be positive".into()));
        }
        if mode == SigmaMode::Diagonal && !sys.wbar_is_box() {
            return Err(MpcError::DiagonalNeedsBox);
        }
        if terminal_set.dim() != sys.nx() {
            return Err(MpcError::ShapeMismatch("terminal set dimension".into()));
        }
        if !terminal_set.is_subset_of(&sys.x, 1e-9)? {
            return Err(MpcError::IncompatibleTerminalSet);
        }
        let (n, m, nh) = (sys.nx(), sys.nu(), horizon);
        let terminal_law = kind.has_terminal_law();
        let mut qp = QpProblem::new();
        let z = qp.add_vars("z", (nh + 1) * n);
        let v = qp.add_vars("v", nh * m);
        let p = qp.add_vars("p", nh * n);
        let sigma_width = if mode == SigmaMode::Scalar { 1 } else { n };
        let sigma = qp.add_vars("sigma", nh * sigma_width);
        let count = nh * (nh + 1) / 2;
        let mut phi_e = vec![NONE; count];
        let mut phi_nu = vec![NONE; count];
        let mut filt = vec![NONE; count];
        for i in 1..=nh {
            for j in 0..i {
                if j + 1 < i {
                    phi_e[flat(i, j)] = qp.add_vars(&format!("phi_e[{i},{j}]"), n * n);
                    filt[flat(i, j)] = qp.add_vars(&format!("sigma[{i},{j}]"), n * n);
                }
                if i < nh || terminal_law {
                    phi_nu[flat(i, j)] = qp.add_vars(&format!("phi_nu[{i},{j}]"), m * n);
                }
            }
        }
        let (xi, alpha) = if terminal_law {
            (qp.add_vars("xi", nh * n * n), qp.add_vars("alpha", 1))
        } else {
            (NONE, NONE)
        };
        let lay = Layout { n, m, horizon: nh, z, v, p, sigma, sigma_width, phi_e, phi_nu, filt, xi, alpha };

        // cost
        match &kind {
            ProblemKind::Secondary(obj) => {
                add_l1_cost(&mut qp, &lay, obj);
            }
            _ => {
                for i in 0..nh {
                    let zi: Vec<usize> = (0..n).map(|k| z + i * n + k).collect();
                    qp.add_quadratic_form(&zi, &cost.q);
                    let vi: Vec<usize> = (0..m).map(|k| v + i * m + k).collect();
                    qp.add_quadratic_form(&vi, &cost.r);
                }
                let zn: Vec<usize> = (0..n).map(|k| z + nh * n + k).collect();
                qp.add_quadratic_form(&zn, &cost.pf);
                if cost.p_reg > 0.0 {
                    let pv: Vec<usize> = (p..p + nh * n).collect();
                    let qs = &cost.q * cost.p_reg;
                    for i in 0..nh {
                        qp.add_quadratic_form(&pv[i * n..(i + 1) * n], &qs);
                    }
                }
            }
        }

        let f_init = qp.family("init");
        let f_dyn = qp.family("dynamics");
        let f_slp = qp.family("slp");
        let f_bounds = qp.family("bounds");
        let mut init_rows = Vec::new();
        for k in 0..n {
            init_rows.push(qp.add_eq(&LinExpr::var(z + k), f_init));
        }
        for i in 0..nh {
            let mut e = lay.z(i + 1);
            add_vec(&mut e, &mat_vec(&sys.a, &lay.z(i)), -1.0);
            add_vec(&mut e, &mat_vec(&sys.b, &lay.v(i)), -1.0);
            add_vec(&mut e, &lay.p(i), -1.0);
            for r in &e {
                qp.add_eq(r, f_dyn);
            }
        }
        // σ >= SIGMA_MIN
        for k in 0..nh * sigma_width {
            qp.add_le(&LinExpr { terms: vec![(sigma + k, -1.0)], constant: SIGMA_MIN }, f_bounds);
        }
        // SLP recursion below the first subdiagonal
        for i in 1..nh {
            for j in 0..i {
                let mut e = lay.phi_e(i + 1, j);
                e.add_scaled(&lay.phi_e(i, j).premul(&sys.a), -1.0);
                e.add_scaled(&lay.phi_nu(i, j).premul(&sys.b), -1.0);
                e.add_scaled(&lay.filt(i + 1, j), -1.0);
                for r in &e.data {
                    qp.add_eq(r, f_slp);
                }
            }
        }
        if terminal_law {
            let f_close = qp.family("closure");
            qp.add_nonneg(alpha, 1, f_bounds);
            for j in 1..nh {
                let mut e = lay.phi_e(nh, j - 1);
                e.add_scaled(&lay.phi_e(nh, j).premul(&sys.a), -1.0);
                e.add_scaled(&lay.phi_nu(nh, j).premul(&sys.b), -1.0);
                e.add_scaled(&lay.xi(j), -1.0);
                for r in &e.data {
                    qp.add_eq(r, f_close);
                }
            }
        }

        let form = SupportForm::Compact;
        let wbar = &sys.wbar;
        let wbar_axis = box_axes(wbar);
        let phi_e_terms = |i: usize| -> Vec<TermMap> {
            let mut out = Vec::new();
            for j in 0..i {
                if j + 1 == i {
                    out.extend(diag_terms(&lay, mode, i));
                } else {
                    out.push(TermMap::Expr(lay.phi_e(i, j)));
                }
            }
            out
        };
        let with_set = |maps: Vec<TermMap>, set: &Polytope| -> Vec<(TermMap, Polytope)> {
            maps.into_iter().map(|m| (m, set.clone())).collect()
        };
        let sigma_scale = |i: usize| -> Scale {
            match mode {
                SigmaMode::Scalar => Scale::Scalar(LinExpr::var(sigma + (i - 1))),
                SigmaMode::Diagonal => Scale::PerRow(
                    wbar_axis.iter().map(|k| LinExpr::var(sigma + (i - 1) * n + k)).collect(),
                ),
            }
        };

        // state and input tightening, stages 0..N-1
        let f_state = qp.family("state");
        let f_input = qp.family("input");
        for i in 0..nh {
            let terms = with_set(phi_e_terms(i), wbar);
            encode(&mut qp, Some(&lay.z(i)), &terms, &sys.x, &Scale::one(), f_state, form)?;
            let nu_terms: Vec<TermMap> = (0..i).map(|j| TermMap::Expr(lay.phi_nu(i, j))).collect();
            encode(&mut qp, Some(&lay.v(i)), &with_set(nu_terms, wbar), &sys.u, &Scale::one(), f_input, form)?;
        }

        // disturbance inclusions, stages 0..N-1
        let f_incl = qp.family("inclusion");
        let eye = DMatrix::identity(n, n);
        for d in &sys.deltas {
            for i in 0..nh {
                let mut psi = mat_vec(&d.da, &lay.z(i));
                add_vec(&mut psi, &mat_vec(&d.db, &lay.v(i)), 1.0);
                add_vec(&mut psi, &lay.p(i), -1.0);
                let mut terms: Vec<(TermMap, Polytope)> = Vec::new();
                for j in 0..i {
                    let mut e = lay.phi_e(i, j).premul(&d.da);
                    e.add_scaled(&lay.phi_nu(i, j).premul(&d.db), 1.0);
                    e.add_scaled(&lay.filt(i + 1, j), -1.0);
                    e.compact();
                    terms.push((TermMap::Expr(e), wbar.clone()));
                }
                terms.push((TermMap::Const(eye.clone()), sys.w.clone()));
                encode(&mut qp, Some(&psi), &terms, wbar, &sigma_scale(i + 1), f_incl, form)?;
            }
        }

        let zf_zero = DVector::zeros(0);
        let mut consts = Consts {
            w_on_wbar: sys.w.support_rows(wbar.hmat())?,
            wbar_axis: wbar_axis.clone(),
            zf_x: zf_zero.clone(),
            zf_u: zf_zero.clone(),
            zf_ak: zf_zero,
            zf_dk: Vec::new(),
        };

        match term {
            None => {
                let f_term = qp.family("terminal");
                let terms = with_set(phi_e_terms(nh), wbar);
                encode(&mut qp, Some(&lay.z(nh)), &terms, terminal_set, &Scale::one(), f_term, form)?;
            }
            Some(t) => {
                let zf = &t.z_f;
                let a_k = &sys.a + &sys.b * &t.k_f;
                consts.zf_x = zf.support_rows(sys.x.hmat())?;
                consts.zf_u = zf.image_support_rows(&t.k_f, sys.u.hmat())?;
                consts.zf_ak = zf.image_support_rows(&a_k, zf.hmat())?;
                let alpha_e = lay.alpha();
                // z_N ∈ α Z_f
                let f_term = qp.family("terminal");
                let hz = mat_vec(zf.hmat(), &lay.z(nh));
                for (r, mut e) in hz.into_iter().enumerate() {
                    e.add_scaled(&alpha_e, -zf.offsets()[r]);
                    qp.add_le(&e, f_term);
                }
                // α Z_f ⊆ X ⊖ F_N(Φe)
                let f_tx = qp.family("terminal_state");
                let mut terms = vec![(TermMap::Scaled(alpha_e.clone(), eye.clone()), zf.clone())];
                terms.extend(with_set(phi_e_terms(nh), wbar));
                encode(&mut qp, None, &terms, &sys.x, &Scale::one(), f_tx, form)?;
                // α K_f Z_f ⊆ U ⊖ F_N(Φν)
                let f_tu = qp.family("terminal_input");
                let mut terms = vec![(TermMap::Scaled(alpha_e.clone(), t.k_f.clone()), zf.clone())];
                for j in 0..nh {
                    terms.push((TermMap::Expr(lay.phi_nu(nh, j)), wbar.clone()));
                }
                encode(&mut qp, None, &terms, &sys.u, &Scale::one(), f_tu, form)?;
                // α A_K Z_f ⊆ α Z_f ⊖ Γ W̄
                let f_inv = qp.family("terminal_invariance");
                let mut gamma = lay.phi_e(nh, 0).premul(&sys.a);
                gamma.add_scaled(&lay.phi_nu(nh, 0).premul(&sys.b), 1.0);
                gamma.add_scaled(&lay.xi(0), 1.0);
                gamma.compact();
                let terms = vec![
                    (TermMap::Scaled(alpha_e.clone(), a_k.clone()), zf.clone()),
                    (TermMap::Expr(gamma), wbar.clone()),
                ];
                encode(&mut qp, None, &terms, zf, &Scale::Scalar(alpha_e.clone()), f_inv, form)?;
                // terminal disturbance inclusion
                let f_tinc = qp.family("terminal_inclusion");
                for d in &sys.deltas {
                    let dk = &d.da + &d.db * &t.k_f;
                    consts.zf_dk.push(zf.image_support_rows(&dk, wbar.hmat())?);
                    let mut terms = vec![(TermMap::Scaled(alpha_e.clone(), dk), zf.clone())];
                    for j in 0..nh {
                        let mut e = lay.phi_e(nh, j).premul(&d.da);
                        e.add_scaled(&lay.phi_nu(nh, j).premul(&d.db), 1.0);
                        e.add_scaled(&lay.xi(j), -1.0);
                        e.compact();
                        terms.push((TermMap::Expr(e), wbar.clone()));
                    }
                    terms.push((TermMap::Const(eye.clone()), sys.w.clone()));
                    encode(&mut qp, None, &terms, wbar, &sigma_scale(nh), f_tinc, form)?;
                }
            }
        }

        if let ProblemKind::Secondary(obj) = &kind {
            if obj.margin > 0.0 {
                let nominal = z..p + nh * n;
                let fams: Vec<u16> =
                    ["state", "input", "inclusion", "terminal"].iter().map(|f| qp.family(f)).collect();
                for r in qp.ineq.iter_mut() {
                    if fams.contains(&r.family) && r.idx.iter().any(|k| nominal.contains(k)) {
                        r.rhs -= obj.margin;
                    }
                }
            }
        }

        Ok(MpcTemplate {
            kind,
            horizon: nh,
            mode,
            sys: sys.clone(),
            cost: cost.clone(),
            term: term.cloned(),
            terminal_set: terminal_set.clone(),
            qp,
            lay,
            init_rows,
            consts,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.qp.n_vars()
    }

    pub fn set_state(&mut self, x: &DVector<f64>) {
        for (k, r) in self.init_rows.iter().enumerate() {
            self.qp.eq[*r].rhs = x[k];
        }
    }

    /// Solves the program at initial state `x`.
    pub fn solve(&mut self, x: &DVector<f64>, solver: &dyn QpSolver) -> SolutionBundle {
        let start = Instant::now();
        self.set_state(x);
        let out = solver.solve(&self.qp);
        let plan = self.extract(&out.x);
        let objective = if out.status == SolveStatus::Optimal { self.plan_objective(&plan) } else { f64::NAN };
        SolutionBundle {
            plan,
            objective,
            status: out.status,
            solve_time: start.elapsed().as_secs_f64(),
            iterations: out.iterations,
        }
    }

    /// Reads a plan out of a solver vector.
    pub fn extract(&self, x: &[f64]) -> TubePlan {
        let l = &self.lay;
        let (n, m, nh) = (l.n, l.m, l.horizon);
        let vec_at = |start: usize, len: usize| DVector::from_column_slice(&x[start..start + len]);
        let block = |start: usize, r: usize, c: usize| {
            if start == NONE {
                DMatrix::zeros(r, c)
            } else {
                DMatrix::from_row_slice(r, c, &x[start..start + r * c])
            }
        };
        let sigma: Vec<DVector<f64>> = (1..=nh)
            .map(|i| DVector::from_iterator(n, l.sigma(i).iter().map(|e| e.eval(x))))
            .collect();
        let diag = |i: usize| DMatrix::from_diagonal(&sigma[i - 1]);
        let phi_e = Blt::from_fn(nh, n, n, |i, j| if j + 1 == i { diag(i) } else { block(l.phi_e[flat(i, j)], n, n) });
        let filter = Blt::from_fn(nh, n, n, |i, j| if j + 1 == i { diag(i) } else { block(l.filt[flat(i, j)], n, n) });
        let phi_nu = Blt::from_fn(nh, m, n, |i, j| block(l.phi_nu[flat(i, j)], m, n));
        let xi = if l.xi == NONE {
            FilterRow::zeros(nh, n)
        } else {
            FilterRow { blocks: (0..nh).map(|j| block(l.xi + j * n * n, n, n)).collect() }
        };
        TubePlan {
            z: (0..=nh).map(|i| vec_at(l.z + i * n, n)).collect(),
            v: (0..nh).map(|i| vec_at(l.v + i * m, m)).collect(),
            p: (0..nh).map(|i| vec_at(l.p + i * n, n)).collect(),
            sigma,
            phi_e,
            phi_nu,
            filter,
            xi,
            alpha: if l.alpha == NONE { 0.0 } else { x[l.alpha] },
        }
    }

    /// Objective of the program at `plan`, evaluated directly.
    pub fn plan_objective(&self, plan: &TubePlan) -> f64 {
        match &self.kind {
            ProblemKind::Secondary(obj) => {
                let mut s = 0.0;
                for i in 1..=self.horizon {
                    for j in 0..i {
                        let w = if j + 1 == i { obj.sigma_weight } else { 1.0 };
                        s += w * plan.phi_e.get(i, j).iter().map(|v| v.abs()).sum::<f64>();
                        s += plan.phi_nu.get(i, j).iter().map(|v| v.abs()).sum::<f64>();
                    }
                }
                s - obj.alpha_weight * plan.alpha
            }
            _ => nominal_cost(&self.cost, &plan.z, &plan.v) + p_penalty(&self.cost, &plan.p),
        }
    }

    /// Exact evaluation of every constraint family at `(x0, plan)`; supports
    /// are computed directly rather than through the lifted variables.
    pub fn evaluate(&self, x0: &DVector<f64>, plan: &TubePlan) -> Result<ViolationReport> {
        let sys = &self.sys;
        let nh = self.horizon;
        let wbar = &sys.wbar;
        let mut rep = ViolationReport::default();
        rep.record("init", (&plan.z[0] - x0).amax());
        for i in 0..nh {
            let r = &plan.z[i + 1] - &sys.a * &plan.z[i] - &sys.b * &plan.v[i] - &plan.p[i];
            rep.record("dynamics", r.amax());
        }
        for s in &plan.sigma {
            rep.record("bounds", SIGMA_MIN - s.min());
            if self.mode == SigmaMode::Scalar {
                rep.record("sigma_structure", s.max() - s.min());
            }
        }
        for i in 1..=nh {
            let d = DMatrix::from_diagonal(&plan.sigma[i - 1]);
            rep.record("slp", (plan.phi_e.get(i, i - 1) - &d).amax());
            rep.record("slp", (plan.filter.get(i, i - 1) - &d).amax());
        }
        let res = crate::slp::slp_residual(&plan.phi_e, &plan.phi_nu, &plan.filter, &sys.a, &sys.b)?;
        rep.record("slp", res.max_abs());
        let tight_x = |i: usize| -> Result<DVector<f64>> {
            let mut t = DVector::zeros(sys.x.n_facets());
            for j in 0..i {
                t += wbar.image_support_rows(plan.phi_e.get(i, j), sys.x.hmat())?;
            }
            Ok(t)
        };
        let tight_u = |i: usize| -> Result<DVector<f64>> {
            let mut t = DVector::zeros(sys.u.n_facets());
            for j in 0..i {
                t += wbar.image_support_rows(plan.phi_nu.get(i, j), sys.u.hmat())?;
            }
            Ok(t)
        };
        for i in 0..nh {
            let vx = sys.x.hmat() * &plan.z[i] + tight_x(i)? - sys.x.offsets();
            rep.record_vec("state", &vx);
            let vu = sys.u.hmat() * &plan.v[i] + tight_u(i)? - sys.u.offsets();
            rep.record_vec("input", &vu);
        }
        let scale_rows = |i: usize| -> DVector<f64> {
            let s = &plan.sigma[i - 1];
            DVector::from_iterator(wbar.n_facets(), (0..wbar.n_facets()).map(|r| s[self.consts.wbar_axis[r]]))
        };
        let sigma_rows = |i: usize| -> DVector<f64> {
            match self.mode {
                SigmaMode::Scalar => DVector::from_element(wbar.n_facets(), plan.sigma[i - 1][0]),
                SigmaMode::Diagonal => scale_rows(i),
            }
        };
        for d in &sys.deltas {
            for i in 0..nh {
                let psi = &d.da * &plan.z[i] + &d.db * &plan.v[i] - &plan.p[i];
                let mut lhs = wbar.hmat() * psi + &self.consts.w_on_wbar;
                for j in 0..i {
                    let m = &d.da * plan.phi_e.get(i, j) + &d.db * plan.phi_nu.get(i, j) - plan.filter.get(i + 1, j);
                    lhs += wbar.image_support_rows(&m, wbar.hmat())?;
                }
                let rhs = sigma_rows(i + 1).component_mul(wbar.offsets());
                rep.record_vec("inclusion", &(lhs - rhs));
            }
        }
        match &self.term {
            None => {
                let s = &self.terminal_set;
                let mut t = DVector::zeros(s.n_facets());
                for j in 0..nh {
                    t += wbar.image_support_rows(plan.phi_e.get(nh, j), s.hmat())?;
                }
                rep.record_vec("terminal", &(s.hmat() * &plan.z[nh] + t - s.offsets()));
            }
            Some(tm) => {
                let zf = &tm.z_f;
                let a = plan.alpha;
                rep.record("bounds", -a);
                for j in 1..nh {
                    let r = plan.phi_e.get(nh, j - 1)
                        - &sys.a * plan.phi_e.get(nh, j)
                        - &sys.b * plan.phi_nu.get(nh, j)
                        - &plan.xi.blocks[j];
                    rep.record("closure", r.amax());
                }
                rep.record_vec("terminal", &(zf.hmat() * &plan.z[nh] - zf.offsets() * a));
                let vx = &self.consts.zf_x * a + tight_x(nh)? - sys.x.offsets();
                rep.record_vec("terminal_state", &vx);
                let vu = &self.consts.zf_u * a + tight_u(nh)? - sys.u.offsets();
                rep.record_vec("terminal_input", &vu);
                let gamma = plan.gamma(sys);
                let vi = &self.consts.zf_ak * a + wbar.image_support_rows(&gamma, zf.hmat())? - zf.offsets() * a;
                rep.record_vec("terminal_invariance", &vi);
                for (k, d) in sys.deltas.iter().enumerate() {
                    let mut lhs = &self.consts.zf_dk[k] * a + &self.consts.w_on_wbar;
                    for j in 0..nh {
                        let m = &d.da * plan.phi_e.get(nh, j) + &d.db * plan.phi_nu.get(nh, j) - &plan.xi.blocks[j];
                        lhs += wbar.image_support_rows(&m, wbar.hmat())?;
                    }
                    let rhs = sigma_rows(nh).component_mul(wbar.offsets());
                    rep.record_vec("terminal_inclusion", &(lhs - rhs));
                }
            }
        }
        Ok(rep)
    }

    /// Sparse triplet text of the assembled program at state `x`.
    pub fn export_triplets(&mut self, x: &DVector<f64>) -> String {
        self.set_state(x);
        self.qp.to_triplet_text()
    }
}

fn diag_terms(lay: &Layout, mode: SigmaMode, i: usize) -> Vec<TermMap> {
    let n = lay.n;
    let base = lay.sigma + (i - 1) * lay.sigma_width;
    match mode {
        SigmaMode::Scalar => vec![TermMap::Scaled(LinExpr::var(base), DMatrix::identity(n, n))],
        SigmaMode::Diagonal => (0..n)
            .map(|k| {
                let mut e = DMatrix::zeros(n, n);
                e[(k, k)] = 1.0;
                TermMap::Scaled(LinExpr::var(base + k), e)
            })
            .collect(),
    }
}

fn encode(
    qp: &mut QpProblem,
    offset: Option<&[LinExpr]>,
    terms: &[(TermMap, Polytope)],
    y: &Polytope,
    scale: &Scale,
    family: u16,
    form: SupportForm,
) -> Result<()> {
    let t: Vec<InclusionTerm<'_>> = terms.iter().map(|(m, s)| InclusionTerm { map: m.clone(), set: s }).collect();
    encode_inclusion(qp, offset, &t, y, scale, family, form)?;
    Ok(())
}

fn add_l1_cost(qp: &mut QpProblem, lay: &Layout, obj: &SecondaryCost) {
    let f = qp.family("l1");
    let (n, m, nh) = (lay.n, lay.m, lay.horizon);
    let mut vars: Vec<usize> = Vec::new();
    for i in 1..=nh {
        for j in 0..i {
            if lay.phi_e[flat(i, j)] != NONE {
                vars.extend(lay.phi_e[flat(i, j)]..lay.phi_e[flat(i, j)] + n * n);
            }
            if lay.phi_nu[flat(i, j)] != NONE {
                vars.extend(lay.phi_nu[flat(i, j)]..lay.phi_nu[flat(i, j)] + m * n);
            }
        }
    }
    let abs = qp.add_vars("abs", vars.len());
    for (k, var) in vars.iter().enumerate() {
        qp.add_le(&LinExpr { terms: vec![(*var, 1.0), (abs + k, -1.0)], constant: 0.0 }, f);
        qp.add_le(&LinExpr { terms: vec![(*var, -1.0), (abs + k, -1.0)], constant: 0.0 }, f);
    }
    let mut c = LinExpr::zero();
    for k in 0..vars.len() {
        c.add_term(abs + k, 1.0);
    }
    // diagonal blocks are nonnegative scalings
    let per = obj.sigma_weight * if lay.sigma_width == 1 { n as f64 } else { 1.0 };
    for k in 0..nh * lay.sigma_width {
        c.add_term(lay.sigma + k, per);
    }
    if lay.alpha != NONE {
        c.add_term(lay.alpha, -obj.alpha_weight);
    }
    qp.add_linear_cost(&c);
}

/// `Σ_{i<N} l(z_i, v_i) + l_f(z_N)`
pub fn nominal_cost(cost: &CostSpec, z: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
    let n = v.len();
    let mut s = cost.terminal(&z[n]);
    for i in 0..n {
        s += cost.stage(&z[i], &v[i]);
    }
    s
}

/// `ρ Σ p_i' Q p_i`
pub fn p_penalty(cost: &CostSpec, p: &[DVector<f64>]) -> f64 {
    if cost.p_reg == 0.0 {
        return 0.0;
    }
    p.iter().map(|pi| cost.p_reg * (pi.transpose() * &cost.q * pi)[0]).sum()
}

/// Per-coordinate auxiliary disturbance `diag(σ_1)^{-1} (x+ - A x - B u - p_0)`.
pub fn equivalent_disturbance(
    sys: &UncertainLTI,
    x: &DVector<f64>,
    x_next: &DVector<f64>,
    u: &DVector<f64>,
    p0: &DVector<f64>,
    sigma1: &DVector<f64>,
) -> Result<DVector<f64>> {
    let smin = sigma1.min();
    if smin <= 1e-10 {
        return Err(MpcError::DegenerateSigma(smin));
    }
    let r = x_next - &sys.a * x - &sys.b * u - p0;
    Ok(r.component_div(sigma1))
}

/// One-step shift of an optimal plan, given the measured auxiliary
/// disturbance `w̄ ∈ W̄`.
pub fn candidate_shift(sys: &UncertainLTI, term: &TerminalIngredients, prev: &TubePlan, wbar: &DVector<f64>) -> Result<TubePlan> {
    let margin = sys.wbar.margin(wbar.as_slice());
    if margin > 1e-6 {
        return Err(MpcError::WbarOutsideSet(margin));
    }
    let nh = prev.phi_e.horizon();
    let a_k = &sys.a + &sys.b * &term.k_f;
    let gamma = prev.gamma(sys);
    let mut z = Vec::with_capacity(nh + 1);
    let mut v = Vec::with_capacity(nh);
    let mut p = Vec::with_capacity(nh);
    for i in 0..nh {
        z.push(&prev.z[i + 1] + prev.phi_e.get(i + 1, 0) * wbar);
    }
    z.push(&a_k * &prev.z[nh] + &gamma * wbar);
    for i in 0..nh {
        if i + 1 < nh {
            v.push(&prev.v[i + 1] + prev.phi_nu.get(i + 1, 0) * wbar);
            p.push(&prev.p[i + 1] + prev.filter.get(i + 2, 0) * wbar);
        } else {
            v.push(&term.k_f * &prev.z[nh] + prev.phi_nu.get(nh, 0) * wbar);
            p.push(&prev.xi.blocks[0] * wbar);
        }
    }
    let phi_e = shift(&prev.phi_e, &prev.phi_e.row(nh))?;
    let phi_nu = shift(&prev.phi_nu, &prev.phi_nu.row(nh))?;
    let mut last: Vec<DMatrix<f64>> = prev.xi.blocks[1..].to_vec();
    last.push(DMatrix::from_diagonal(&prev.sigma[nh - 1]));
    let filter = shift(&prev.filter, &last)?;
    let mut sigma: Vec<DVector<f64>> = prev.sigma[1..].to_vec();
    sigma.push(prev.sigma[nh - 1].clone());
    Ok(TubePlan { z, v, p, sigma, phi_e, phi_nu, filter, xi: prev.xi.clone(), alpha: prev.alpha })
}

/// Lyapunov decrease diagnostic for consecutive optimal values.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecreaseReport {
    /// `V(x+) - V(x) + l(x, u)`
    pub slack: f64,
    pub violated: bool,
}

pub fn value_decrease_check(v_prev: f64, v_next: f64, stage_cost: f64, wbar_norm: f64, tol: f64) -> DecreaseReport {
    let slack = v_next - v_prev + stage_cost;
    DecreaseReport { slack, violated: wbar_norm == 0.0 && slack > tol }
}

/// Nominal MPC `min Σ l + l_f` with `z ∈ X`, `v ∈ U`, `z_N ∈ terminal`.
pub fn nominal_mpc(
    sys: &UncertainLTI,
    cost: &CostSpec,
    horizon: usize,
    terminal: &Polytope,
    x: &DVector<f64>,
    solver: &dyn QpSolver,
) -> (SolveStatus, f64) {
    let (n, m) = (sys.nx(), sys.nu());
    let mut qp = QpProblem::new();
    let z = qp.add_vars("z", (horizon + 1) * n);
    let v = qp.add_vars("v", horizon * m);
    let zv = |i: usize| Layout::vec(z + i * n, n);
    let vv = |i: usize| Layout::vec(v + i * m, m);
    let f = qp.family("nominal");
    for k in 0..n {
        qp.add_eq(&LinExpr { terms: vec![(z + k, 1.0)], constant: -x[k] }, f);
    }
    for i in 0..horizon {
        let mut e = zv(i + 1);
        add_vec(&mut e, &mat_vec(&sys.a, &zv(i)), -1.0);
        add_vec(&mut e, &mat_vec(&sys.b, &vv(i)), -1.0);
        for r in &e {
            qp.add_eq(r, f);
        }
        for (set, ex) in [(&sys.x, zv(i)), (&sys.u, vv(i))] {
            for (r, mut e) in mat_vec(set.hmat(), &ex).into_iter().enumerate() {
                e.constant -= set.offsets()[r];
                qp.add_le(&e, f);
            }
        }
        let zi: Vec<usize> = (0..n).map(|k| z + i * n + k).collect();
        qp.add_quadratic_form(&zi, &cost.q);
        let vi: Vec<usize> = (0..m).map(|k| v + i * m + k).collect();
        qp.add_quadratic_form(&vi, &cost.r);
    }
    for (r, mut e) in mat_vec(terminal.hmat(), &zv(horizon)).into_iter().enumerate() {
        e.constant -= terminal.offsets()[r];
        qp.add_le(&e, f);
    }
    let zn: Vec<usize> = (0..n).map(|k| z + horizon * n + k).collect();
    qp.add_quadratic_form(&zn, &cost.pf);
    let out = solver.solve(&qp);
    (out.status, out.objective)
}

/// Exact robust one-step problem: `min l(x,u) + l_f(Ax+Bu)` subject to
/// `u ∈ U` and every successor lying in `target`.
pub fn robust_one_step(
    sys: &UncertainLTI,
    cost: &CostSpec,
    target: &Polytope,
    x: &DVector<f64>,
    solver: &dyn QpSolver,
) -> Result<(SolveStatus, DVector<f64>, f64)> {
    let m = sys.nu();
    let mut qp = QpProblem::new();
    let u = qp.add_vars("u", m);
    let f = qp.family("one_step");
    let uv = Layout::vec(u, m);
    for (r, mut e) in mat_vec(sys.u.hmat(), &uv).into_iter().enumerate() {
        e.constant -= sys.u.offsets()[r];
        qp.add_le(&e, f);
    }
    let hw = sys.w.support_rows(target.hmat())?;
    for d in &sys.deltas {
        let base = target.hmat() * ((&sys.a + &d.da) * x);
        let gb = target.hmat() * (&sys.b + &d.db);
        for r in 0..target.n_facets() {
            let mut e = LinExpr::constant(base[r] + hw[r] - target.offsets()[r]);
            for k in 0..m {
                e.add_term(u + k, gb[(r, k)]);
            }
            qp.add_le(&e, f);
        }
    }
    // (Ax+Bu)'P(Ax+Bu) + u'Ru + x'Qx
    let ax = &sys.a * x;
    let btpb = sys.b.transpose() * &cost.pf * &sys.b;
    let vars: Vec<usize> = (0..m).map(|k| u + k).collect();
    qp.add_quadratic_form(&vars, &(&btpb + &cost.r));
    let lin = sys.b.transpose() * &cost.pf * &ax * 2.0;
    let mut c = LinExpr::constant((x.transpose() * &cost.q * x)[0] + (ax.transpose() * &cost.pf * &ax)[0]);
    for k in 0..m {
        c.add_term(u + k, lin[k]);
    }
    qp.add_linear_cost(&c);
    let out = solver.solve(&qp);
    let uu = DVector::from_column_slice(&out.x[u..u + m]);
    Ok((out.status, uu, out.objective))
}
