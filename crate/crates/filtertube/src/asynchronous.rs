//! Asynchronous computation scheme: a slow secondary process optimizes tubes
//! and stores them in a finite memory; a fast primary process optimizes the
//! nominal trajectory over a convex combination of the stored tubes.
//!
//! All tightened sets share the facet matrices of `X`, `U` and `W̄` and are
//! stored as offset vectors, so fusing them is linear in the weights `λ`.

use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariant::TerminalIngredients;
use crate::qp::{LinExpr, QpProblem, QpSolver, SolveStatus};
use crate::slp::{shift, tube_offsets, Blt, BltRecord, FilterRow, SlpError};
use crate::sltmpc::{
    candidate_shift, equivalent_disturbance, MpcError, MpcTemplate, SecondaryCost, SigmaMode, SolutionBundle, TubePlan,
};
use crate::sysmodel::{CostSpec, UncertainLTI};

#[derive(Debug, Error)]
pub enum AsyncError {
    #[error("secondary problem infeasible at the anchor state")]
    SecondaryInfeasible,
    #[error("memory holds no entry")]
    EmptyMemory,
    #[error("memory entries do not share the constraint facets: {0}")]
    SharedShapeViolation(String),
    #[error("secondary template must use the tube-size objective")]
    NotSecondary,
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Slp(#[from] SlpError),
    #[error(transparent)]
    Polytope(#[from] crate::polytope::PolytopeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AsyncError>;

/// Offsets of the tightened sets for stages `0..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tubes {
    /// `X ⊖ F_i(Φe)` over the facets of `X`.
    pub z_off: Vec<DVector<f64>>,
    /// `U ⊖ F_i(Φν)` over the facets of `U`.
    pub v_off: Vec<DVector<f64>>,
    /// `Q^d_i` over the facets of `W̄`, indexed `[d][i]`.
    pub q_off: Vec<Vec<DVector<f64>>>,
}

impl Tubes {
    fn combine(weights: &[f64], parts: &[&Tubes]) -> Tubes {
        let mix = |sel: &dyn Fn(&Tubes) -> &Vec<DVector<f64>>| -> Vec<DVector<f64>> {
            let first = sel(parts[0]);
            (0..first.len())
                .map(|i| {
                    let mut acc = DVector::zeros(first[i].len());
                    for (w, t) in weights.iter().zip(parts) {
                        acc += &sel(t)[i] * *w;
                    }
                    acc
                })
                .collect()
        };
        let n_d = parts[0].q_off.len();
        Tubes {
            z_off: mix(&|t| &t.z_off),
            v_off: mix(&|t| &t.v_off),
            q_off: (0..n_d).map(|d| mix(&|t| &t.q_off[d])).collect(),
        }
    }
}

/// Per-facet scaling of `W̄` by a per-coordinate `σ`.
fn sigma_rows(sys: &UncertainLTI, sigma: &DVector<f64>) -> DVector<f64> {
    let wbar = &sys.wbar;
    DVector::from_iterator(
        wbar.n_facets(),
        (0..wbar.n_facets()).map(|r| {
            if sigma.iter().all(|s| *s == sigma[0]) {
                return sigma[0];
            }
            // box facets: pick the coordinate of the single nonzero entry
            let k = (0..wbar.dim()).find(|c| wbar.hmat()[(r, *c)] != 0.0).unwrap_or(0);
            sigma[k]
        }),
    )
}

/// Tightened-set offsets generated by `(Φe, Φν, Σ, Ξ)` with diagonal
/// scalings `σ_1..σ_N`.
pub fn tubes_from_responses(
    sys: &UncertainLTI,
    phi_e: &Blt,
    phi_nu: &Blt,
    filter: &Blt,
    xi: &FilterRow,
    sigma: &[DVector<f64>],
) -> Result<Tubes> {
    let nh = phi_e.horizon();
    let wbar = &sys.wbar;
    let tx = tube_offsets(phi_e, wbar, sys.x.hmat())?;
    let tu = tube_offsets(phi_nu, wbar, sys.u.hmat())?;
    let z_off = tx.iter().map(|t| sys.x.offsets() - t).collect();
    let v_off = tu.iter().map(|t| sys.u.offsets() - t).collect();
    let hw = sys.w.support_rows(wbar.hmat())?;
    let mut q_off = Vec::with_capacity(sys.deltas.len());
    for d in &sys.deltas {
        let mut per = Vec::with_capacity(nh + 1);
        for i in 0..=nh {
            let s = if i < nh { &sigma[i] } else { &sigma[nh - 1] };
            let mut off = sigma_rows(sys, s).component_mul(wbar.offsets()) - &hw;
            let cols = if i < nh { i } else { nh };
            for j in 0..cols {
                let sub = if i < nh { filter.get(i + 1, j) } else { &xi.blocks[j] };
                let psi = &d.da * phi_e.get(i.max(1), j) + &d.db * phi_nu.get(i.max(1), j) - sub;
                off -= wbar.image_support_rows(&psi, wbar.hmat())?;
            }
            per.push(off);
        }
        q_off.push(per);
    }
    Ok(Tubes { z_off, v_off, q_off })
}

/// One memory slot: tubes, terminal scaling and the generating responses.
#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub tubes: Tubes,
    pub alpha: f64,
    pub phi_e: Blt,
    pub phi_nu: Blt,
    pub filter: Blt,
    pub xi: FilterRow,
    pub sigma: Vec<DVector<f64>>,
    pub score: f64,
    /// Tubes of the shifted responses, used when the entry feeds a fallback.
    pub shifted: Tubes,
}

/// Shifted `(Φe, Φν, Σ, σ)` of an entry.
type Shifted = (Blt, Blt, Blt, Vec<DVector<f64>>);

fn shifted_responses(phi_e: &Blt, phi_nu: &Blt, filter: &Blt, xi: &FilterRow, sigma: &[DVector<f64>]) -> Result<Shifted> {
    let nh = phi_e.horizon();
    let pe = shift(phi_e, &phi_e.row(nh))?;
    let pn = shift(phi_nu, &phi_nu.row(nh))?;
    let mut last: Vec<DMatrix<f64>> = xi.blocks[1..].to_vec();
    last.push(DMatrix::from_diagonal(&sigma[nh - 1]));
    let sf = shift(filter, &last)?;
    let mut s: Vec<DVector<f64>> = sigma[1..].to_vec();
    s.push(sigma[nh - 1].clone());
    Ok((pe, pn, sf, s))
}

impl MemoryEntry {
    /// Builds an entry from responses; `tubes` defaults to the generated ones.
    pub fn from_responses(
        sys: &UncertainLTI,
        phi_e: Blt,
        phi_nu: Blt,
        filter: Blt,
        xi: FilterRow,
        sigma: Vec<DVector<f64>>,
        alpha: f64,
        tubes: Option<Tubes>,
    ) -> Result<MemoryEntry> {
        let tubes = match tubes {
            Some(t) => t,
            None => tubes_from_responses(sys, &phi_e, &phi_nu, &filter, &xi, &sigma)?,
        };
        let (pe, pn, sf, s) = shifted_responses(&phi_e, &phi_nu, &filter, &xi, &sigma)?;
        let shifted = tubes_from_responses(sys, &pe, &pn, &sf, &xi, &s)?;
        Ok(MemoryEntry { tubes, alpha, phi_e, phi_nu, filter, xi, sigma, score: 1.0, shifted })
    }

    pub fn from_plan(sys: &UncertainLTI, plan: &TubePlan) -> Result<MemoryEntry> {
        Self::from_responses(
            sys,
            plan.phi_e.clone(),
            plan.phi_nu.clone(),
            plan.filter.clone(),
            plan.xi.clone(),
            plan.sigma.clone(),
            plan.alpha,
            None,
        )
    }

    pub fn horizon(&self) -> usize {
        self.phi_e.horizon()
    }

    /// Whether every tightened set is non-empty.
    pub fn is_valid(&self, sys: &UncertainLTI) -> bool {
        let nonempty = |p: &crate::polytope::Polytope, h: &DVector<f64>| !p.with_offsets(h.clone()).is_empty();
        self.tubes.z_off.iter().all(|h| nonempty(&sys.x, h))
            && self.tubes.v_off.iter().all(|h| nonempty(&sys.u, h))
            && self.tubes.q_off.iter().flatten().all(|h| nonempty(&sys.wbar, h))
    }

    pub fn to_record(&self) -> EntryRecord {
        EntryRecord {
            tubes: self.tubes.clone(),
            shifted: self.shifted.clone(),
            alpha: self.alpha,
            score: self.score,
            sigma: self.sigma.iter().map(|s| s.as_slice().to_vec()).collect(),
            phi_e: self.phi_e.to_record(),
            phi_nu: self.phi_nu.to_record(),
            filter: self.filter.to_record(),
            xi: self.xi.blocks.iter().map(|b| b.row_iter().map(|r| r.iter().copied().collect()).collect()).collect(),
        }
    }
}

/// On-disk form of a memory entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntryRecord {
    pub tubes: Tubes,
    pub shifted: Tubes,
    pub alpha: f64,
    pub score: f64,
    pub sigma: Vec<Vec<f64>>,
    pub phi_e: BltRecord,
    pub phi_nu: BltRecord,
    pub filter: BltRecord,
    pub xi: Vec<Vec<Vec<f64>>>,
}

/// Choice of the slot overwritten by the secondary process when memory is full.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlotPolicy {
    /// Lowest exponential-moving-average usage score.
    #[default]
    Score,
    /// Least recently written slot.
    Oldest,
    /// New entries enter slot 1 and push older ones one slot down; the last
    /// entry of the chain is dropped. Ignores empty slots.
    ShiftChain,
}

/// Fixed-capacity memory; slot 0 holds the fallback.
#[derive(Clone, Debug)]
pub struct Memory {
    pub slots: Vec<Option<MemoryEntry>>,
    pub policy: SlotPolicy,
    /// Slots never overwritten by the secondary process.
    pub pinned: Vec<bool>,
    written_at: Vec<u64>,
    clock: u64,
}

impl Memory {
    pub fn new(capacity: usize, policy: SlotPolicy) -> Memory {
        assert!(capacity >= 2, "memory needs the fallback slot and one more");
        Memory { slots: vec![None; capacity], policy, pinned: vec![false; capacity], written_at: vec![0; capacity], clock: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn occupied(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|m| self.slots[*m].is_some()).collect()
    }

    pub fn set(&mut self, m: usize, e: MemoryEntry) {
        self.clock += 1;
        self.written_at[m] = self.clock;
        self.slots[m] = Some(e);
    }

    /// Slot chosen by the overwrite heuristic among `1..M`.
    pub fn victim(&self) -> usize {
        let cands = (1..self.slots.len()).filter(|m| !self.pinned[*m]);
        match self.policy {
            SlotPolicy::Score => cands
                .min_by(|a, b| {
                    let sa = self.slots[*a].as_ref().map_or(f64::NEG_INFINITY, |e| e.score);
                    let sb = self.slots[*b].as_ref().map_or(f64::NEG_INFINITY, |e| e.score);
                    sa.total_cmp(&sb).then(a.cmp(b))
                })
                .unwrap_or(1),
            SlotPolicy::Oldest => cands.min_by_key(|m| (self.written_at[*m], *m)).unwrap_or(1),
            SlotPolicy::ShiftChain => cands.max().unwrap_or(1),
        }
    }

    /// Stores a secondary result: first empty slot in `1..M`, otherwise the
    /// heuristic victim. Returns the slot index.
    pub fn update_secondary(&mut self, entry: MemoryEntry) -> usize {
        if self.policy == SlotPolicy::ShiftChain {
            let chain: Vec<usize> = (1..self.slots.len()).filter(|m| !self.pinned[*m]).collect();
            for k in (1..chain.len()).rev() {
                if let Some(e) = self.slots[chain[k - 1]].clone() {
                    self.set(chain[k], e);
                }
            }
            self.set(chain[0], entry);
            return chain[0];
        }
        let m = (1..self.slots.len())
            .find(|m| self.slots[*m].is_none() && !self.pinned[*m])
            .unwrap_or_else(|| self.victim());
        self.set(m, entry);
        m
    }

    /// `s_m <- 0.8 s_m + 0.2 λ_m` over occupied slots.
    pub fn update_scores(&mut self, lambda: &[f64]) {
        for (m, slot) in self.slots.iter_mut().enumerate() {
            if let Some(e) = slot {
                e.score = 0.8 * e.score + 0.2 * lambda[m];
            }
        }
    }

    /// Writes one JSON file per occupied slot.
    pub fn dump(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for m in self.occupied() {
            let path = dir.join(format!("slot_{m}.json"));
            let rec = self.slots[m].as_ref().expect("occupied").to_record();
            std::fs::write(&path, serde_json::to_string_pretty(&rec)?)?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Solves the tube-size program at `anchor` and converts it to an entry.
pub fn run_secondary(
    tpl: &mut MpcTemplate,
    anchor: &DVector<f64>,
    solver: &dyn QpSolver,
) -> Result<(MemoryEntry, SolutionBundle)> {
    if !matches!(tpl.kind, crate::sltmpc::ProblemKind::Secondary { .. }) {
        return Err(AsyncError::NotSecondary);
    }
    let b = tpl.solve(anchor, solver);
    if b.status != SolveStatus::Optimal {
        return Err(AsyncError::SecondaryInfeasible);
    }
    let e = MemoryEntry::from_plan(&tpl.sys, &b.plan)?;
    Ok((e, b))
}

/// Fallback entry: `λ`-weighted shifted tubes and responses of `snapshot`.
pub fn store_fallback(sys: &UncertainLTI, snapshot: &Memory, lambda: &[f64]) -> Result<MemoryEntry> {
    let used: Vec<usize> = snapshot.occupied();
    if used.is_empty() {
        return Err(AsyncError::EmptyMemory);
    }
    let w: Vec<f64> = used.iter().map(|m| lambda[*m]).collect();
    let entries: Vec<&MemoryEntry> = used.iter().map(|m| snapshot.slots[*m].as_ref().expect("occupied")).collect();
    let tubes = Tubes::combine(&w, &entries.iter().map(|e| &e.shifted).collect::<Vec<_>>());
    let mut sh: Vec<Shifted> = Vec::with_capacity(entries.len());
    for e in &entries {
        sh.push(shifted_responses(&e.phi_e, &e.phi_nu, &e.filter, &e.xi, &e.sigma)?);
    }
    let phi_e = Blt::combine(&w, &sh.iter().map(|s| &s.0).collect::<Vec<_>>())?;
    let phi_nu = Blt::combine(&w, &sh.iter().map(|s| &s.1).collect::<Vec<_>>())?;
    let filter = Blt::combine(&w, &sh.iter().map(|s| &s.2).collect::<Vec<_>>())?;
    let xi = FilterRow::combine(&w, &entries.iter().map(|e| &e.xi).collect::<Vec<_>>());
    let nh = phi_e.horizon();
    let sigma: Vec<DVector<f64>> = (0..nh)
        .map(|i| {
            let mut acc = DVector::zeros(sys.nx());
            for (k, s) in sh.iter().enumerate() {
                acc += &s.3[i] * w[k];
            }
            acc
        })
        .collect();
    let alpha = entries.iter().zip(&w).map(|(e, l)| l * e.alpha).sum();
    MemoryEntry::from_responses(sys, phi_e, phi_nu, filter, xi, sigma, alpha, Some(tubes))
}

/// Weighted unshifted responses of a snapshot, packed as a plan around the
/// nominal solution; used to build the shift candidate of the next step.
pub fn mixed_plan(snapshot: &Memory, lambda: &[f64], sol: &PrimarySolution) -> Result<TubePlan> {
    let used = snapshot.occupied();
    let w: Vec<f64> = used.iter().map(|m| lambda[*m]).collect();
    let es: Vec<&MemoryEntry> = used.iter().map(|m| snapshot.slots[*m].as_ref().expect("occupied")).collect();
    let nh = es[0].horizon();
    let n = es[0].sigma[0].len();
    Ok(TubePlan {
        z: sol.z.clone(),
        v: sol.v.clone(),
        p: sol.p.clone(),
        sigma: (0..nh)
            .map(|i| {
                let mut acc = DVector::zeros(n);
                for (k, e) in es.iter().enumerate() {
                    acc += &e.sigma[i] * w[k];
                }
                acc
            })
            .collect(),
        phi_e: Blt::combine(&w, &es.iter().map(|e| &e.phi_e).collect::<Vec<_>>())?,
        phi_nu: Blt::combine(&w, &es.iter().map(|e| &e.phi_nu).collect::<Vec<_>>())?,
        filter: Blt::combine(&w, &es.iter().map(|e| &e.filter).collect::<Vec<_>>())?,
        xi: FilterRow::combine(&w, &es.iter().map(|e| &e.xi).collect::<Vec<_>>()),
        alpha: es.iter().zip(&w).map(|(e, l)| l * e.alpha).sum(),
    })
}

/// Optimizer of the primary program.
#[derive(Clone, Debug)]
pub struct PrimarySolution {
    pub status: SolveStatus,
    pub z: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    /// One weight per slot; empty slots carry 0.
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub solve_time: f64,
}

/// Primary program over the occupied slots of `memory`.
pub struct PrimaryProblem {
    pub qp: QpProblem,
    horizon: usize,
    n: usize,
    m: usize,
    z: usize,
    v: usize,
    p: usize,
    lambda: usize,
    slots: Vec<usize>,
    capacity: usize,
}

fn check_shapes(sys: &UncertainLTI, memory: &Memory, horizon: usize) -> Result<()> {
    for m in memory.occupied() {
        let e = memory.slots[m].as_ref().expect("occupied");
        let t = &e.tubes;
        let ok = e.horizon() == horizon
            && t.z_off.len() == horizon + 1
            && t.z_off.iter().all(|h| h.len() == sys.x.n_facets())
            && t.v_off.iter().all(|h| h.len() == sys.u.n_facets())
            && t.q_off.len() == sys.deltas.len()
            && t.q_off.iter().flatten().all(|h| h.len() == sys.wbar.n_facets());
        if !ok {
            return Err(AsyncError::SharedShapeViolation(format!("slot {m}")));
        }
    }
    Ok(())
}

pub fn build_primary(
    sys: &UncertainLTI,
    cost: &CostSpec,
    horizon: usize,
    memory: &Memory,
    z_f: &crate::polytope::Polytope,
) -> Result<PrimaryProblem> {
    let slots = memory.occupied();
    if slots.is_empty() {
        return Err(AsyncError::EmptyMemory);
    }
    check_shapes(sys, memory, horizon)?;
    let (n, m, nh) = (sys.nx(), sys.nu(), horizon);
    let mut qp = QpProblem::new();
    let z = qp.add_vars("z", (nh + 1) * n);
    let v = qp.add_vars("v", nh * m);
    let p = qp.add_vars("p", nh * n);
    let lambda = qp.add_vars("lambda", slots.len());
    let f_init = qp.family("init");
    let f_dyn = qp.family("dynamics");
    let f_state = qp.family("state");
    let f_input = qp.family("input");
    let f_dist = qp.family("inclusion");
    let f_term = qp.family("terminal");
    let f_simplex = qp.family("simplex");
    let var = |s: usize, k: usize| LinExpr::var(s + k);
    for k in 0..n {
        qp.add_eq(&var(z, k), f_init);
    }
    for i in 0..nh {
        for r in 0..n {
            let mut e = var(z, (i + 1) * n + r);
            for c in 0..n {
                e.add_term(z + i * n + c, -sys.a[(r, c)]);
            }
            for c in 0..m {
                e.add_term(v + i * m + c, -sys.b[(r, c)]);
            }
            e.add_term(p + i * n + r, -1.0);
            qp.add_eq(&e, f_dyn);
        }
    }
    let entries: Vec<&MemoryEntry> = slots.iter().map(|s| memory.slots[*s].as_ref().expect("occupied")).collect();
    // H y <= Σ_m λ_m h_m
    let fused_row = |qp: &mut QpProblem, hrow: &[(usize, f64)], offs: &[f64], fam: u16| {
        let mut e = LinExpr::zero();
        for (i, a) in hrow {
            e.add_term(*i, *a);
        }
        for (k, o) in offs.iter().enumerate() {
            e.add_term(lambda + k, -o);
        }
        qp.add_le(&e, fam);
    };
    for i in 0..nh {
        for r in 0..sys.x.n_facets() {
            let row: Vec<(usize, f64)> = (0..n).map(|c| (z + i * n + c, sys.x.hmat()[(r, c)])).collect();
            let offs: Vec<f64> = entries.iter().map(|e| e.tubes.z_off[i][r]).collect();
            fused_row(&mut qp, &row, &offs, f_state);
        }
        for r in 0..sys.u.n_facets() {
            let row: Vec<(usize, f64)> = (0..m).map(|c| (v + i * m + c, sys.u.hmat()[(r, c)])).collect();
            let offs: Vec<f64> = entries.iter().map(|e| e.tubes.v_off[i][r]).collect();
            fused_row(&mut qp, &row, &offs, f_input);
        }
        for (d, dv) in sys.deltas.iter().enumerate() {
            // ψ = ΔA z_i + ΔB v_i - p_i
            let hw = sys.wbar.hmat();
            let ga = hw * &dv.da;
            let gb = hw * &dv.db;
            for r in 0..sys.wbar.n_facets() {
                let mut row: Vec<(usize, f64)> = Vec::new();
                for c in 0..n {
                    row.push((z + i * n + c, ga[(r, c)]));
                    row.push((p + i * n + c, -hw[(r, c)]));
                }
                for c in 0..m {
                    row.push((v + i * m + c, gb[(r, c)]));
                }
                row.retain(|(_, a)| *a != 0.0);
                let offs: Vec<f64> = entries.iter().map(|e| e.tubes.q_off[d][i][r]).collect();
                fused_row(&mut qp, &row, &offs, f_dist);
            }
        }
    }
    for r in 0..z_f.n_facets() {
        let row: Vec<(usize, f64)> = (0..n).map(|c| (z + nh * n + c, z_f.hmat()[(r, c)])).collect();
        let offs: Vec<f64> = entries.iter().map(|e| e.alpha * z_f.offsets()[r]).collect();
        fused_row(&mut qp, &row, &offs, f_term);
    }
    qp.add_nonneg(lambda, slots.len(), f_simplex);
    let mut sum = LinExpr::constant(-1.0);
    for k in 0..slots.len() {
        sum.add_term(lambda + k, 1.0);
    }
    qp.add_eq(&sum, f_simplex);
    for i in 0..nh {
        let zi: Vec<usize> = (0..n).map(|k| z + i * n + k).collect();
        qp.add_quadratic_form(&zi, &cost.q);
        let vi: Vec<usize> = (0..m).map(|k| v + i * m + k).collect();
        qp.add_quadratic_form(&vi, &cost.r);
        if cost.p_reg > 0.0 {
            let pi: Vec<usize> = (0..n).map(|k| p + i * n + k).collect();
            qp.add_quadratic_form(&pi, &(&cost.q * cost.p_reg));
        }
    }
    let zn: Vec<usize> = (0..n).map(|k| z + nh * n + k).collect();
    qp.add_quadratic_form(&zn, &cost.pf);
    if let Some(k0) = slots.iter().position(|s| *s == 0) {
        qp.add_linear_cost(&LinExpr::scaled_var(lambda + k0, cost.lambda0_reg));
    }
    Ok(PrimaryProblem { qp, horizon: nh, n, m, z, v, p, lambda, slots, capacity: memory.capacity() })
}

impl PrimaryProblem {
    pub fn solve(&mut self, x: &DVector<f64>, solver: &dyn QpSolver) -> PrimarySolution {
        let start = Instant::now();
        for k in 0..self.n {
            self.qp.eq[k].rhs = x[k];
        }
        let out = solver.solve(&self.qp);
        let (n, m, nh) = (self.n, self.m, self.horizon);
        let xs = &out.x;
        let seg = |s: usize, len: usize| DVector::from_column_slice(&xs[s..s + len]);
        let mut lambda = vec![0.0; self.capacity];
        for (k, s) in self.slots.iter().enumerate() {
            lambda[*s] = xs[self.lambda + k];
        }
        PrimarySolution {
            status: out.status,
            z: (0..=nh).map(|i| seg(self.z + i * n, n)).collect(),
            v: (0..nh).map(|i| seg(self.v + i * m, m)).collect(),
            p: (0..nh).map(|i| seg(self.p + i * n, n)).collect(),
            lambda,
            objective: out.objective,
            solve_time: start.elapsed().as_secs_f64(),
        }
    }
}

/// Largest violation of the primary constraints at `(x, z, v, p, λ)`.
pub fn primary_violation(
    sys: &UncertainLTI,
    memory: &Memory,
    z_f: &crate::polytope::Polytope,
    x: &DVector<f64>,
    z: &[DVector<f64>],
    v: &[DVector<f64>],
    p: &[DVector<f64>],
    lambda: &[f64],
) -> f64 {
    let nh = v.len();
    let mut worst = (&z[0] - x).amax();
    let fused = |sel: &dyn Fn(&MemoryEntry) -> DVector<f64>| -> DVector<f64> {
        let mut acc: Option<DVector<f64>> = None;
        for m in memory.occupied() {
            let h = sel(memory.slots[m].as_ref().expect("occupied")) * lambda[m];
            acc = Some(match acc {
                Some(a) => a + h,
                None => h,
            });
        }
        acc.expect("memory is not empty")
    };
    let maxv = |v: DVector<f64>| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for i in 0..nh {
        worst = worst.max((&z[i + 1] - &sys.a * &z[i] - &sys.b * &v[i] - &p[i]).amax());
        worst = worst.max(maxv(sys.x.hmat() * &z[i] - fused(&|e| e.tubes.z_off[i].clone())));
        worst = worst.max(maxv(sys.u.hmat() * &v[i] - fused(&|e| e.tubes.v_off[i].clone())));
        for (d, dv) in sys.deltas.iter().enumerate() {
            let psi = &dv.da * &z[i] + &dv.db * &v[i] - &p[i];
            worst = worst.max(maxv(sys.wbar.hmat() * psi - fused(&|e| e.tubes.q_off[d][i].clone())));
        }
    }
    worst = worst.max(maxv(z_f.hmat() * &z[nh] - fused(&|e| z_f.offsets() * e.alpha)));
    let lmin = memory.occupied().iter().map(|m| lambda[*m]).fold(f64::INFINITY, f64::min);
    let lsum: f64 = memory.occupied().iter().map(|m| lambda[*m]).sum();
    worst.max(-lmin).max((lsum - 1.0).abs())
}

/// Where the secondary process is anchored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// State measured when the secondary process launches.
    #[default]
    Current,
    Fixed(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AsyncMode {
    /// `cadence` primary steps, then one secondary update, deterministically.
    #[default]
    Serialized,
    /// Secondary solves run on a worker thread; results are applied between
    /// primary steps.
    Concurrent,
}

/// Extra memory entry computed offline at `state` and pinned to `slot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedAnchor {
    pub slot: usize,
    pub state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsyncConfig {
    pub memory_size: usize,
    pub cadence: usize,
    /// Explicit secondary update steps; replaces `cadence` when set.
    pub schedule: Option<Vec<usize>>,
    pub policy: SlotPolicy,
    pub anchor: AnchorPolicy,
    pub secondary: SecondaryCost,
    pub mode: AsyncMode,
    pub seeds: Vec<SeedAnchor>,
}

impl Default for AsyncConfig {
    fn default() -> Self {
        AsyncConfig {
            memory_size: 4,
            cadence: 10,
            schedule: None,
            policy: SlotPolicy::Score,
            anchor: AnchorPolicy::Current,
            secondary: SecondaryCost::default(),
            mode: AsyncMode::Serialized,
            seeds: Vec::new(),
        }
    }
}

/// Outcome of one primary step.
#[derive(Clone, Debug)]
pub struct AsyncStep {
    pub u: DVector<f64>,
    pub status: SolveStatus,
    pub lambda: Vec<f64>,
    pub solve_time: f64,
    /// Time of the secondary solve applied before this step, if any.
    pub secondary_time: Option<f64>,
    /// Slot written by a secondary update before this step.
    pub secondary_slot: Option<usize>,
    /// Violation of the shift candidate in the current primary program.
    pub candidate_violation: Option<f64>,
    /// Reconstructed auxiliary disturbance lies in `W̄`.
    pub wbar_margin: Option<f64>,
    pub fallback_used: bool,
    pub secondary_failed: bool,
    /// Primary optimal value.
    pub objective: f64,
    /// Nominal disturbance applied at the current stage.
    pub p0: DVector<f64>,
    /// Optimal nominal trajectory with the `λ`-weighted responses.
    pub plan: Option<TubePlan>,
}

struct Previous {
    x: DVector<f64>,
    u: DVector<f64>,
    mixed: TubePlan,
}

/// Closed-loop controller running the primary process with periodic tube
/// updates.
pub struct AsyncController {
    pub sys: UncertainLTI,
    pub cost: CostSpec,
    pub horizon: usize,
    pub term: TerminalIngredients,
    pub cfg: AsyncConfig,
    pub memory: Memory,
    secondary: MpcTemplate,
    step: usize,
    prev: Option<Previous>,
    worker: Option<mpsc::Receiver<(Result<MemoryEntry>, f64)>>,
}

impl AsyncController {
    /// Runs the secondary once at `anchor`, seeds slots 0 and 1 with it and
    /// pins the configured extra seeds.
    pub fn new(
        sys: &UncertainLTI,
        cost: &CostSpec,
        horizon: usize,
        term: &TerminalIngredients,
        mode: SigmaMode,
        cfg: AsyncConfig,
        anchor: &DVector<f64>,
        solver: &dyn QpSolver,
    ) -> Result<Self> {
        let mut secondary = MpcTemplate::secondary(sys, cost, horizon, term, mode, cfg.secondary)?;
        let (entry, _) = run_secondary(&mut secondary, anchor, solver)?;
        let mut memory = Memory::new(cfg.memory_size, cfg.policy);
        memory.set(0, entry.clone());
        memory.set(1, entry);
        for seed in &cfg.seeds {
            if seed.slot < 2 || seed.slot >= memory.capacity() {
                return Err(AsyncError::SharedShapeViolation(format!("seed slot {} out of range", seed.slot)));
            }
            let (e, _) = run_secondary(&mut secondary, &DVector::from_column_slice(&seed.state), solver)?;
            memory.set(seed.slot, e);
            memory.pinned[seed.slot] = true;
        }
        Ok(AsyncController {
            sys: sys.clone(),
            cost: cost.clone(),
            horizon,
            term: term.clone(),
            cfg,
            memory,
            secondary,
            step: 0,
            prev: None,
            worker: None,
        })
    }

    fn anchor(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.cfg.anchor {
            AnchorPolicy::Current => x.clone(),
            AnchorPolicy::Fixed(v) => DVector::from_column_slice(v),
        }
    }

    /// Secondary update due before step `k` in serialized mode, or a finished
    /// worker result in concurrent mode.
    fn secondary_phase(&mut self, x: &DVector<f64>, solver: &(dyn QpSolver + Sync)) -> (Option<f64>, Option<usize>, bool) {
        let due = match &self.cfg.schedule {
            Some(steps) => steps.contains(&self.step),
            None => self.step > 0 && self.step % self.cfg.cadence.max(1) == 0,
        };
        match self.cfg.mode {
            AsyncMode::Serialized => {
                if !due {
                    return (None, None, false);
                }
                let start = Instant::now();
                let anchor = self.anchor(x);
                match run_secondary(&mut self.secondary, &anchor, solver) {
                    Ok((e, _)) => {
                        let slot = self.memory.update_secondary(e);
                        (Some(start.elapsed().as_secs_f64()), Some(slot), false)
                    }
                    Err(_) => (Some(start.elapsed().as_secs_f64()), None, true),
                }
            }
            AsyncMode::Concurrent => {
                let mut applied = (None, None, false);
                if let Some(rx) = &self.worker {
                    if let Ok((res, t)) = rx.try_recv() {
                        applied = match res {
                            Ok(e) => (Some(t), Some(self.memory.update_secondary(e)), false),
                            Err(_) => (Some(t), None, true),
                        };
                        self.worker = None;
                    }
                }
                if due && self.worker.is_none() {
                    let (tx, rx) = mpsc::channel();
                    let mut tpl = self.secondary.clone();
                    let anchor = self.anchor(x);
                    let solver = crate::qp::ClarabelQp::default();
                    thread::spawn(move || {
                        let start = Instant::now();
                        let r = run_secondary(&mut tpl, &anchor, &solver).map(|(e, _)| e);
                        let _ = tx.send((r, start.elapsed().as_secs_f64()));
                    });
                    self.worker = Some(rx);
                }
                applied
            }
        }
    }

    /// Blocks until a running secondary worker finishes and applies it.
    pub fn drain(&mut self) {
        if let Some(rx) = self.worker.take() {
            if let Ok((Ok(e), _)) = rx.recv() {
                self.memory.update_secondary(e);
            }
        }
    }

    pub fn step(&mut self, x: &DVector<f64>, solver: &(dyn QpSolver + Sync)) -> Result<AsyncStep> {
        let (secondary_time, secondary_slot, secondary_failed) = self.secondary_phase(x, solver);
        // shift candidate of the previous solution, checked against the
        // current memory
        let mut candidate = None;
        let mut wbar_margin = None;
        if let Some(prev) = &self.prev {
            let wb = equivalent_disturbance(&self.sys, &prev.x, x, &prev.u, &prev.mixed.p[0], &prev.mixed.sigma[0])?;
            wbar_margin = Some(self.sys.wbar.margin(wb.as_slice()));
            if let Ok(c) = candidate_shift(&self.sys, &self.term, &prev.mixed, &wb) {
                let mut lam = vec![0.0; self.memory.capacity()];
                lam[0] = 1.0;
                candidate = Some((c, lam));
            }
        }
        let candidate_violation = candidate.as_ref().map(|(c, lam)| {
            primary_violation(&self.sys, &self.memory, &self.term.z_f, x, &c.z, &c.v, &c.p, lam)
        });
        let snapshot = self.memory.clone();
        let mut prob = build_primary(&self.sys, &self.cost, self.horizon, &snapshot, &self.term.z_f)?;
        let mut sol = prob.solve(x, solver);
        let mut fallback_used = false;
        if sol.status != SolveStatus::Optimal {
            if let Some((c, lam)) = candidate {
                fallback_used = true;
                sol = PrimarySolution {
                    status: sol.status,
                    z: c.z,
                    v: c.v,
                    p: c.p,
                    lambda: lam,
                    objective: f64::NAN,
                    solve_time: sol.solve_time,
                };
            } else {
                self.step += 1;
                return Ok(AsyncStep {
                    u: DVector::zeros(self.sys.nu()),
                    status: sol.status,
                    lambda: sol.lambda,
                    solve_time: sol.solve_time,
                    secondary_time,
                    secondary_slot,
                    candidate_violation,
                    wbar_margin,
                    fallback_used,
                    secondary_failed,
                    objective: f64::NAN,
                    p0: DVector::zeros(self.sys.nx()),
                    plan: None,
                });
            }
        }
        // clean tiny negative weights before mixing
        let lam: Vec<f64> = sol.lambda.iter().map(|l| l.max(0.0)).collect();
        let s: f64 = lam.iter().sum();
        let lam: Vec<f64> = lam.iter().map(|l| l / s).collect();
        self.memory.update_scores(&lam);
        let fb = store_fallback(&self.sys, &snapshot, &lam)?;
        let mixed = mixed_plan(&snapshot, &lam, &sol)?;
        self.memory.set(0, fb);
        let u = sol.v[0].clone();
        let p0 = sol.p[0].clone();
        self.prev = Some(Previous { x: x.clone(), u: u.clone(), mixed: mixed.clone() });
        self.step += 1;
        Ok(AsyncStep {
            u,
            status: sol.status,
            lambda: sol.lambda,
            solve_time: sol.solve_time,
            secondary_time,
            secondary_slot,
            candidate_violation,
            wbar_margin,
            fallback_used,
            secondary_failed,
            objective: sol.objective,
            p0,
            plan: Some(mixed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariant::terminal_ingredients;
    use crate::qp::ClarabelQp;
    use crate::sysmodel::{double_integrator, DoubleIntegratorParams};

    fn dummy_entry(score: f64) -> MemoryEntry {
        let (sys, cost) = double_integrator(&DoubleIntegratorParams::default());
        let term = terminal_ingredients(&sys, &cost).unwrap();
        let mut tpl = MpcTemplate::secondary(&sys, &cost, 3, &term, SigmaMode::Diagonal, SecondaryCost::default()).unwrap();
        let (mut e, _) = run_secondary(&mut tpl, &DVector::from_vec(vec![-1.0, 0.0]), &ClarabelQp::default()).unwrap();
        e.score = score;
        e
    }

    #[test]
    fn secondary_fills_first_empty_then_lowest_score() {
        let e = dummy_entry(0.0);
        let mut mem = Memory::new(4, SlotPolicy::Score);
        mem.set(0, e.clone());
        mem.set(1, e.clone());
        mem.set(3, e.clone());
        assert_eq!(mem.update_secondary(e.clone()), 2);
        for (m, s) in [(1, 0.9), (2, 0.1), (3, 0.5)] {
            mem.slots[m].as_mut().unwrap().score = s;
        }
        let mut fresh = e.clone();
        fresh.score = 1.0;
        assert_eq!(mem.update_secondary(fresh), 2);
        // ties resolve to the lowest index; slot 0 is never chosen
        for m in 0..4 {
            mem.slots[m].as_mut().unwrap().score = 0.0;
        }
        assert_eq!(mem.victim(), 1);
    }

    #[test]
    fn fused_alpha_is_affine() {
        let (sys, _) = double_integrator(&DoubleIntegratorParams::default());
        let mut a = dummy_entry(0.0);
        let mut b = a.clone();
        a.alpha = 1.0;
        b.alpha = 3.0;
        let mut mem = Memory::new(2, SlotPolicy::Score);
        mem.set(0, a);
        mem.set(1, b);
        let fb = store_fallback(&sys, &mem, &[0.5, 0.5]).unwrap();
        assert!((fb.alpha - 2.0).abs() < 1e-15);
    }
}
