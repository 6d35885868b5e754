//! Closed-loop simulation, Monte-Carlo summaries, region-of-attraction
//! estimation and soundness audits.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asynchronous::{AsyncController, AsyncError};
use crate::invariant::TerminalIngredients;
use crate::lp::{DenseLp, LpOutcome};
use crate::polytope::Polytope;
use crate::qp::{QpSolver, SolveStatus};
use crate::sltmpc::{
    candidate_shift, equivalent_disturbance, robust_one_step, value_decrease_check, MpcError, MpcTemplate, SigmaMode,
    TubePlan,
};
use crate::sysmodel::{mix_deltas, CostSpec, UncertainLTI};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("controller infeasible at step {0} with no fallback")]
    ControllerInfeasible(usize),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Async(#[from] AsyncError),
    #[error(transparent)]
    Polytope(#[from] crate::polytope::PolytopeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Additive disturbance law.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WLaw {
    /// Uniform over the bounding box of `W`, rejected into `W`. Sets without
    /// interior fall back to flat Dirichlet weights over the vertices.
    #[default]
    Uniform,
    /// A uniformly chosen vertex of `W`.
    Vertex,
    Zero,
}

/// Parametric uncertainty law.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaLaw {
    /// One flat-Dirichlet convex combination of the vertices per run.
    #[default]
    FixedConvex,
    /// One vertex per run.
    FixedVertex,
    /// A fresh convex combination every step.
    StepConvex,
    /// A fresh vertex every step.
    StepVertex,
    /// `ΔA = 0`, `ΔB = 0`.
    Nominal,
}

/// Propagation model of the simulated plant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Plant {
    /// `x+ = (A + ΔA) x + (B + ΔB) u + w`
    #[default]
    True,
    /// `x+ = A x + B u + p_0`: the auxiliary dynamics with `w̄ = 0`.
    Auxiliary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub w: WLaw,
    pub delta: DeltaLaw,
    pub plant: Plant,
}

/// Flat Dirichlet sample of dimension `k`.
pub fn dirichlet(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

/// Draws realizations of `(Δ, w)` according to a [`SamplerSpec`].
pub struct Sampler {
    pub spec: SamplerSpec,
    rng: ChaCha8Rng,
    fixed: Option<Vec<f64>>,
    w_box: Vec<(f64, f64)>,
}

impl Sampler {
    pub fn new(sys: &UncertainLTI, spec: SamplerSpec, seed: u64) -> Result<Sampler> {
        let n = sys.nx();
        let mut w_box = Vec::with_capacity(n);
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            let hi = sys.w.support(&e)?;
            e[k] = -1.0;
            let lo = -sys.w.support(&e)?;
            w_box.push((lo, hi));
        }
        Ok(Sampler { spec, rng: ChaCha8Rng::seed_from_u64(seed), fixed: None, w_box })
    }

    pub fn delta_weights(&mut self, n_d: usize) -> Vec<f64> {
        match self.spec.delta {
            DeltaLaw::Nominal => vec![0.0; n_d],
            DeltaLaw::StepConvex => dirichlet(&mut self.rng, n_d),
            DeltaLaw::StepVertex => one_hot(n_d, self.rng.random_range(0..n_d)),
            DeltaLaw::FixedConvex | DeltaLaw::FixedVertex => {
                if self.fixed.is_none() {
                    self.fixed = Some(if self.spec.delta == DeltaLaw::FixedConvex {
                        dirichlet(&mut self.rng, n_d)
                    } else {
                        one_hot(n_d, self.rng.random_range(0..n_d))
                    });
                }
                self.fixed.clone().expect("just set")
            }
        }
    }

    pub fn w(&mut self, sys: &UncertainLTI) -> DVector<f64> {
        let n = sys.nx();
        match self.spec.w {
            WLaw::Zero => DVector::zeros(n),
            WLaw::Vertex => sys.w_vertices[self.rng.random_range(0..sys.w_vertices.len())].clone(),
            WLaw::Uniform => {
                let degenerate = self.w_box.iter().any(|(lo, hi)| hi - lo <= 1e-12);
                if !degenerate {
                    for _ in 0..1000 {
                        let w = DVector::from_iterator(
                            n,
                            self.w_box.iter().map(|(lo, hi)| lo + (hi - lo) * self.rng.random::<f64>()),
                        );
                        if sys.w.margin(w.as_slice()) <= 0.0 {
                            return w;
                        }
                    }
                }
                let l = dirichlet(&mut self.rng, sys.w_vertices.len());
                let mut w = DVector::zeros(n);
                for (lk, v) in l.iter().zip(&sys.w_vertices) {
                    w += v * *lk;
                }
                w
            }
        }
    }

    /// Generator for auxiliary draws.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Output of one controller invocation.
#[derive(Clone, Debug)]
pub struct ControlStep {
    pub u: DVector<f64>,
    pub p0: DVector<f64>,
    pub status: SolveStatus,
    pub fallback: bool,
    pub solve_time: f64,
    pub objective: f64,
    pub lambda: Vec<f64>,
    pub candidate_violation: Option<f64>,
    pub wbar_margin: Option<f64>,
    pub decrease_slack: Option<f64>,
    pub secondary_time: Option<f64>,
    pub secondary_slot: Option<usize>,
    pub plan: Option<TubePlan>,
}

pub trait Controller {
    fn name(&self) -> &'static str;
    fn control(&mut self, k: usize, x: &DVector<f64>, solver: &(dyn QpSolver + Sync)) -> Result<ControlStep>;
}

struct Prev {
    x: DVector<f64>,
    u: DVector<f64>,
    plan: TubePlan,
    value: f64,
}

/// Receding-horizon controller with the terminal law; falls back to the
/// shift candidate when the solver does not return an optimum.
pub struct RecedingController {
    pub tpl: MpcTemplate,
    pub term: TerminalIngredients,
    pub cost: CostSpec,
    prev: Option<Prev>,
}

impl RecedingController {
    pub fn new(sys: &UncertainLTI, cost: &CostSpec, horizon: usize, term: &TerminalIngredients, mode: SigmaMode) -> Result<Self> {
        Ok(RecedingController {
            tpl: MpcTemplate::receding(sys, cost, horizon, term, mode)?,
            term: term.clone(),
            cost: cost.clone(),
            prev: None,
        })
    }
}

impl Controller for RecedingController {
    fn name(&self) -> &'static str {
        "receding"
    }

    fn control(&mut self, _k: usize, x: &DVector<f64>, solver: &(dyn QpSolver + Sync)) -> Result<ControlStep> {
        let sys = &self.tpl.sys;
        let mut candidate = None;
        let mut wbar_margin = None;
        if let Some(prev) = &self.prev {
            let wb = equivalent_disturbance(sys, &prev.x, x, &prev.u, &prev.plan.p[0], &prev.plan.sigma[0])?;
            wbar_margin = Some(sys.wbar.margin(wb.as_slice()));
            if let Ok(c) = candidate_shift(sys, &self.term, &prev.plan, &wb) {
                let viol = self.tpl.evaluate(x, &c)?.max;
                candidate = Some((c, viol, wb.amax()));
            }
        }
        let b = self.tpl.solve(x, solver);
        let candidate_violation = candidate.as_ref().map(|c| c.1);
        let (plan, status, fallback, objective) = if b.status == SolveStatus::Optimal {
            (b.plan, b.status, false, b.objective)
        } else if let Some((c, _, _)) = candidate.clone() {
            let obj = self.tpl.plan_objective(&c);
            (c, b.status, true, obj)
        } else {
            return Err(SimError::ControllerInfeasible(_k));
        };
        let decrease_slack = match (&self.prev, &candidate) {
            (Some(prev), Some((_, _, wn))) if !fallback => {
                let l = self.cost.stage(&prev.x, &prev.u);
                Some(value_decrease_check(prev.value, objective, l, *wn, 0.0).slack)
            }
            _ => None,
        };
        let u = plan.v[0].clone();
        let p0 = plan.p[0].clone();
        self.prev = Some(Prev { x: x.clone(), u: u.clone(), plan: plan.clone(), value: objective });
        Ok(ControlStep {
            u,
            p0,
            status,
            fallback,
            solve_time: b.solve_time,
            objective,
            lambda: Vec::new(),
            candidate_violation,
            wbar_margin,
            decrease_slack,
            secondary_time: None,
            secondary_slot: None,
            plan: Some(plan),
        })
    }
}

/// Shrinking-horizon controller: generic problems with horizons
/// `N, N-1, .., 2`, then the exact one-step robust problem on `S_f`.
pub struct ShrinkingController {
    templates: Vec<MpcTemplate>,
    s_f: Polytope,
    sys: UncertainLTI,
    cost: CostSpec,
}

impl ShrinkingController {
    pub fn new(sys: &UncertainLTI, cost: &CostSpec, horizon: usize, s_f: &Polytope, mode: SigmaMode) -> Result<Self> {
        let mut templates = Vec::new();
        for h in (2..=horizon).rev() {
            templates.push(MpcTemplate::generic(sys, cost, h, s_f, mode)?);
        }
        Ok(ShrinkingController { templates, s_f: s_f.clone(), sys: sys.clone(), cost: cost.clone() })
    }
}

impl Controller for ShrinkingController {
    fn name(&self) -> &'static str {
        "shrinking"
    }

    fn control(&mut self, k: usize, x: &DVector<f64>, solver: &(dyn QpSolver + Sync)) -> Result<ControlStep> {
        let empty = |u: DVector<f64>, status, t, obj, plan| ControlStep {
            u,
            p0: DVector::zeros(x.len()),
            status,
            fallback: false,
            solve_time: t,
            objective: obj,
            lambda: Vec::new(),
            candidate_violation: None,
            wbar_margin: None,
            decrease_slack: None,
            secondary_time: None,
            secondary_slot: None,
            plan,
        };
        if k < self.templates.len() {
            let b = self.templates[k].solve(x, solver);
            if b.status != SolveStatus::Optimal {
                return Err(SimError::ControllerInfeasible(k));
            }
            let mut s = empty(b.plan.v[0].clone(), b.status, b.solve_time, b.objective, None);
            s.p0 = b.plan.p[0].clone();
            s.plan = Some(b.plan);
            return Ok(s);
        }
        let start = Instant::now();
        let (status, u, obj) = robust_one_step(&self.sys, &self.cost, &self.s_f, x, solver)?;
        if status != SolveStatus::Optimal {
            return Err(SimError::ControllerInfeasible(k));
        }
        Ok(empty(u, status, start.elapsed().as_secs_f64(), obj, None))
    }
}

/// Primary process of the asynchronous scheme.
pub struct AsyncPrimary {
    pub inner: AsyncController,
}

impl Controller for AsyncPrimary {
    fn name(&self) -> &'static str {
        "async"
    }

    fn control(&mut self, k: usize, x: &DVector<f64>, solver: &(dyn QpSolver + Sync)) -> Result<ControlStep> {
        let s = self.inner.step(x, solver)?;
        if s.status != SolveStatus::Optimal && !s.fallback_used {
            return Err(SimError::ControllerInfeasible(k));
        }
        Ok(ControlStep {
            u: s.u,
            p0: s.p0,
            status: s.status,
            fallback: s.fallback_used,
            solve_time: s.solve_time,
            objective: s.objective,
            lambda: s.lambda,
            candidate_violation: s.candidate_violation,
            wbar_margin: s.wbar_margin,
            decrease_slack: None,
            secondary_time: s.secondary_time,
            secondary_slot: s.secondary_slot,
            plan: s.plan,
        })
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub status: SolveStatus,
    pub fallback: bool,
    pub solve_time: f64,
    pub objective: f64,
    pub lambda: Vec<f64>,
    pub candidate_violation: Option<f64>,
    pub wbar_margin: Option<f64>,
    pub decrease_slack: Option<f64>,
    pub secondary_time: Option<f64>,
    pub secondary_slot: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: usize,
    pub controller: String,
    pub seed: u64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
    pub delta_weights: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    pub total_cost: f64,
    pub steps: Vec<StepLog>,
    /// Step at which the run stopped for lack of a feasible control.
    pub aborted: Option<usize>,
    #[serde(skip)]
    pub plans: Vec<Option<TubePlan>>,
}

/// Simulates `steps` steps from `x0`; deterministic given `seed`.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop(
    ctrl: &mut dyn Controller,
    sys: &UncertainLTI,
    cost: &CostSpec,
    x0: &DVector<f64>,
    steps: usize,
    spec: SamplerSpec,
    seed: u64,
    solver: &(dyn QpSolver + Sync),
) -> Result<RunRecord> {
    let mut sampler = Sampler::new(sys, spec, seed)?;
    let mut rec = RunRecord {
        run_id: 0,
        controller: ctrl.name().to_string(),
        seed,
        states: vec![x0.as_slice().to_vec()],
        inputs: Vec::new(),
        disturbances: Vec::new(),
        delta_weights: Vec::new(),
        stage_costs: Vec::new(),
        total_cost: 0.0,
        steps: Vec::new(),
        aborted: None,
        plans: Vec::new(),
    };
    let mut x = x0.clone();
    for k in 0..steps {
        let s = match ctrl.control(k, &x, solver) {
            Ok(s) => s,
            Err(SimError::ControllerInfeasible(k)) => {
                rec.aborted = Some(k);
                break;
            }
            Err(e) => return Err(e),
        };
        let l = cost.stage(&x, &s.u);
        let (weights, w, next) = match spec.plant {
            Plant::Auxiliary => {
                let next = &sys.a * &x + &sys.b * &s.u + &s.p0;
                (vec![0.0; sys.n_delta()], DVector::zeros(sys.nx()), next)
            }
            Plant::True => {
                let weights = sampler.delta_weights(sys.n_delta());
                let d = mix_deltas(sys, &weights);
                let w = sampler.w(sys);
                let next = (&sys.a + &d.da) * &x + (&sys.b + &d.db) * &s.u + &w;
                (weights, w, next)
            }
        };
        rec.inputs.push(s.u.as_slice().to_vec());
        rec.disturbances.push(w.as_slice().to_vec());
        rec.delta_weights.push(weights);
        rec.stage_costs.push(l);
        rec.total_cost += l;
        rec.steps.push(StepLog {
            status: s.status,
            fallback: s.fallback,
            solve_time: s.solve_time,
            objective: s.objective,
            lambda: s.lambda,
            candidate_violation: s.candidate_violation,
            wbar_margin: s.wbar_margin,
            decrease_slack: s.decrease_slack,
            secondary_time: s.secondary_time,
            secondary_slot: s.secondary_slot,
        });
        rec.plans.push(s.plan);
        rec.states.push(next.as_slice().to_vec());
        x = next;
    }
    Ok(rec)
}

/// Largest distance of a state from satisfying its dynamics record.
pub fn replay_residual(sys: &UncertainLTI, rec: &RunRecord, plant: Plant) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..rec.inputs.len() {
        let x = DVector::from_column_slice(&rec.states[k]);
        let u = DVector::from_column_slice(&rec.inputs[k]);
        let next = DVector::from_column_slice(&rec.states[k + 1]);
        if plant == Plant::True {
            let d = mix_deltas(sys, &rec.delta_weights[k]);
            let w = DVector::from_column_slice(&rec.disturbances[k]);
            let pred = (&sys.a + &d.da) * &x + (&sys.b + &d.db) * &u + w;
            worst = worst.max((pred - next).amax());
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub state_violations: usize,
    pub input_violations: usize,
    pub max_violation: f64,
}

/// Checks every recorded state against `X` and input against `U`.
pub fn constraint_audit(sys: &UncertainLTI, rec: &RunRecord, tol: f64) -> AuditReport {
    let mut a = AuditReport::default();
    for x in &rec.states {
        let m = sys.x.margin(x);
        a.max_violation = a.max_violation.max(m);
        if m > tol {
            a.state_violations += 1;
        }
    }
    for u in &rec.inputs {
        let m = sys.u.margin(u);
        a.max_violation = a.max_violation.max(m);
        if m > tol {
            a.input_violations += 1;
        }
    }
    a
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EtaReport {
    pub checked: usize,
    pub failures: usize,
    /// Samples that needed the membership program.
    pub lp_calls: usize,
}

impl EtaReport {
    pub fn merge(&mut self, o: &EtaReport) {
        self.checked += o.checked;
        self.failures += o.failures;
        self.lp_calls += o.lp_calls;
    }
}

fn sample_wbar(wbar: &Polytope, rng: &mut impl Rng) -> DVector<f64> {
    if let Some(b) = wbar.box_bounds() {
        DVector::from_iterator(b.len(), b.iter().map(|(lo, hi)| if rng.random::<bool>() { *lo } else { *hi }))
    } else {
        let vs = wbar.vertices().expect("W̄ is bounded");
        vs.vertices[rng.random_range(0..vs.vertices.len())].clone()
    }
}

/// Whether `y ∈ ⊕_j M_j W̄`, by a feasibility program over the summands.
pub fn in_filter_image(wbar: &Polytope, maps: &[&DMatrix<f64>], y: &DVector<f64>, tol: f64) -> bool {
    let n = y.len();
    let nw = wbar.dim();
    let nv = nw * maps.len();
    // y = Σ M_j w_j + s - t, minimize Σ (s + t)
    let mut lp = DenseLp::new(nv + 2 * n);
    let mut c = vec![0.0; nv + 2 * n];
    for v in c.iter_mut().skip(nv) {
        *v = 1.0;
    }
    lp = lp.minimize(&c);
    for k in 0..2 * n {
        lp.bound(nv + k, 0.0, f64::INFINITY);
    }
    for (j, _) in maps.iter().enumerate() {
        lp.le_block(wbar.hmat(), wbar.offsets(), j * nw);
    }
    for r in 0..n {
        let mut row = vec![0.0; nv + 2 * n];
        for (j, m) in maps.iter().enumerate() {
            for c in 0..nw {
                row[j * nw + c] = m[(r, c)];
            }
        }
        row[nv + r] = 1.0;
        row[nv + n + r] = -1.0;
        lp.eq(row, y[r]);
    }
    match lp.solve() {
        LpOutcome::Optimal { value, .. } => value <= tol,
        _ => false,
    }
}

/// Samples states in the tube of `plan` and realizations of `(Δ, w)` and
/// checks `η_i - p_i ∈ ⊕_{j<=i} Σ_{i+1,j} W̄` for every stage `i < N`.
pub fn eta_containment(sys: &UncertainLTI, plan: &TubePlan, samples: usize, rng: &mut impl Rng) -> EtaReport {
    let mut rep = EtaReport::default();
    let nh = plan.v.len();
    let wbar = &sys.wbar;
    for i in 0..nh {
        let diag = DMatrix::from_diagonal(&plan.sigma[i]);
        for _ in 0..samples {
            let ws: Vec<DVector<f64>> = (0..i).map(|_| sample_wbar(wbar, rng)).collect();
            let mut x = plan.z[i].clone();
            let mut u = plan.v[i].clone();
            for (j, w) in ws.iter().enumerate() {
                x += plan.phi_e.get(i, j) * w;
                u += plan.phi_nu.get(i, j) * w;
            }
            let d = &sys.deltas[rng.random_range(0..sys.deltas.len())];
            let w = &sys.w_vertices[rng.random_range(0..sys.w_vertices.len())];
            let eta = &d.da * &x + &d.db * &u + w;
            let mut rest = &eta - &plan.p[i];
            for (j, wj) in ws.iter().enumerate() {
                rest -= plan.filter.get(i + 1, j) * wj;
            }
            rep.checked += 1;
            // witness: the sampled w̄_j together with the remainder scaled by σ
            let scaled = rest.component_div(&plan.sigma[i].map(|s| s.max(1e-300)));
            if wbar.margin(scaled.as_slice()) <= 1e-7 {
                continue;
            }
            rep.lp_calls += 1;
            let mut maps: Vec<&DMatrix<f64>> = Vec::new();
            let blocks: Vec<DMatrix<f64>> = (0..i).map(|j| plan.filter.get(i + 1, j).clone()).collect();
            maps.extend(blocks.iter());
            maps.push(&diag);
            if !in_filter_image(wbar, &maps, &(&eta - &plan.p[i]), 1e-7) {
                rep.failures += 1;
            }
        }
    }
    rep
}

/// Mean, median and extremes of a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        if values.is_empty() {
            return Stats::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Stats { count: n, mean: v.iter().sum::<f64>() / n as f64, median, min: v[0], max: v[n - 1] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub runs: usize,
    pub cost: Stats,
    pub solve_time: Stats,
    pub infeasible_solves: usize,
    pub fallbacks: usize,
    pub aborted_runs: usize,
    pub violations: usize,
}

pub fn mc_stats(sys: &UncertainLTI, records: &[RunRecord]) -> McSummary {
    let costs: Vec<f64> = records.iter().map(|r| r.total_cost).collect();
    let times: Vec<f64> = records.iter().flat_map(|r| r.steps.iter().map(|s| s.solve_time)).collect();
    let mut s = McSummary { runs: records.len(), cost: Stats::of(&costs), solve_time: Stats::of(&times), ..Default::default() };
    for r in records {
        s.infeasible_solves += r.steps.iter().filter(|st| st.status != SolveStatus::Optimal).count();
        s.fallbacks += r.steps.iter().filter(|st| st.fallback).count();
        s.aborted_runs += usize::from(r.aborted.is_some());
        let a = constraint_audit(sys, r, 1e-6);
        s.violations += a.state_violations + a.input_violations;
    }
    s
}

/// Solve-time statistics per controller.
pub fn timing_report(records: &[RunRecord]) -> Vec<(String, Stats)> {
    let mut names: Vec<String> = records.iter().map(|r| r.controller.clone()).collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .map(|n| {
            let t: Vec<f64> = records
                .iter()
                .filter(|r| r.controller == n)
                .flat_map(|r| r.steps.iter().map(|s| s.solve_time))
                .collect();
            (n, Stats::of(&t))
        })
        .collect()
}

/// Writes one JSON object per record.
pub fn write_jsonl(path: &std::path::Path, records: &[RunRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Per-step CSV: `run_id, step, x0..xn-1, u0..um-1, cost, status, lambda0..`.
pub fn write_csv(path: &std::path::Path, records: &[RunRecord], n: usize, m: usize, n_lambda: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut head = vec!["run_id".to_string(), "step".to_string()];
    head.extend((0..n).map(|k| format!("x{k}")));
    head.extend((0..m).map(|k| format!("u{k}")));
    head.push("cost".into());
    head.push("status".into());
    head.extend((0..n_lambda).map(|k| format!("lambda{k}")));
    writeln!(f, "{}", head.join(","))?;
    for r in records {
        for (k, st) in r.steps.iter().enumerate() {
            let mut row = vec![r.run_id.to_string(), k.to_string()];
            row.extend(r.states[k].iter().map(|v| format!("{v:e}")));
            row.extend(r.inputs[k].iter().map(|v| format!("{v:e}")));
            row.push(format!("{:e}", r.stage_costs[k]));
            row.push(format!("{:?}", st.status).to_lowercase());
            row.extend((0..n_lambda).map(|j| st.lambda.get(j).map_or(String::new(), |v| format!("{v:e}"))));
            writeln!(f, "{}", row.join(","))?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Grid over the bounding box of the first two state coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { nx: 101, ny: 101 }
    }
}

/// How grid points are classified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoaMethod {
    /// Every grid point inside the denominator is solved.
    Exhaustive,
    /// The feasible set is convex: each grid row is an interval found by
    /// bisection, and rows are visited outward from the centre until empty.
    #[default]
    Convex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoaResult {
    pub fraction: f64,
    pub inside: usize,
    pub feasible: usize,
    /// Feasible cells with a 4-neighbour that is not feasible.
    pub boundary: usize,
    pub solves: usize,
    /// Row-major, `-1` outside the denominator, `0` infeasible, `1` feasible.
    pub mask: Vec<Vec<i8>>,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

struct RowSolver<'a> {
    tpl: MpcTemplate,
    solver: &'a (dyn QpSolver + Sync),
    xs: &'a [f64],
    y: f64,
    solves: usize,
}

impl RowSolver<'_> {
    fn feasible(&mut self, c: usize) -> bool {
        self.solves += 1;
        let x = DVector::from_vec(vec![self.xs[c], self.y]);
        self.tpl.solve(&x, self.solver).status == SolveStatus::Optimal
    }
}

fn classify_row(rs: &mut RowSolver, cols: &[usize], hint: Option<usize>, method: RoaMethod) -> Vec<usize> {
    if cols.is_empty() {
        return Vec::new();
    }
    if method == RoaMethod::Exhaustive {
        return cols.iter().copied().filter(|c| rs.feasible(*c)).collect();
    }
    // seed search: hint, then a dyadic sweep of the admissible interval
    let mut order: Vec<usize> = Vec::new();
    if let Some(h) = hint {
        if let Ok(p) = cols.binary_search(&h) {
            order.push(p);
        }
    }
    let mut step = cols.len();
    while step > 0 {
        let mut k = step / 2;
        while k < cols.len() {
            if !order.contains(&k) {
                order.push(k);
            }
            k += step.max(1);
        }
        if step == 1 {
            break;
        }
        step /= 2;
    }
    for k in 0..cols.len() {
        if !order.contains(&k) {
            order.push(k);
        }
    }
    let Some(seed) = order.into_iter().find(|k| rs.feasible(cols[*k])) else {
        return Vec::new();
    };
    // leftmost feasible in [0, seed]
    let (mut lo, mut hi) = (0usize, seed);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if rs.feasible(cols[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let left = lo;
    let (mut lo, mut hi) = (seed, cols.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if rs.feasible(cols[mid]) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    cols[left..=lo].to_vec()
}

/// Fraction of grid points inside `denom` at which `tpl` is feasible.
pub fn roa_estimate(
    tpl: &MpcTemplate,
    grid: GridSpec,
    denom: &Polytope,
    method: RoaMethod,
    jobs: usize,
    solver: &(dyn QpSolver + Sync),
) -> Result<RoaResult> {
    let sys = &tpl.sys;
    assert_eq!(sys.nx(), 2, "grid estimation needs a planar state");
    let mut b = [(0.0, 0.0); 2];
    for (k, bk) in b.iter_mut().enumerate() {
        let mut e = vec![0.0; 2];
        e[k] = 1.0;
        let hi = sys.x.support(&e)?;
        e[k] = -1.0;
        *bk = (-sys.x.support(&e)?, hi);
    }
    let lin = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        (0..n).map(|k| if n == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 }).collect()
    };
    let xs = lin(b[0].0, b[0].1, grid.nx);
    let ys = lin(b[1].0, b[1].1, grid.ny);
    let mut mask = vec![vec![-1i8; grid.nx]; grid.ny];
    let cols_of: Vec<Vec<usize>> = ys
        .iter()
        .map(|y| (0..grid.nx).filter(|c| denom.margin(&[xs[*c], *y]) <= 1e-9).collect())
        .collect();
    for (r, cols) in cols_of.iter().enumerate() {
        for c in cols {
            mask[r][*c] = 0;
        }
    }
    let mut solves = 0;
    let jobs = jobs.max(1);
    match method {
        RoaMethod::Exhaustive => {
            let rows: Vec<usize> = (0..grid.ny).collect();
            let results: Vec<(usize, Vec<usize>, usize)> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..jobs)
                    .map(|j| {
                        let rows = &rows;
                        let (xs, ys, cols_of) = (&xs, &ys, &cols_of);
                        let tpl = tpl.clone();
                        s.spawn(move || {
                            let mut out = Vec::new();
                            let mut rs = RowSolver { tpl, solver, xs, y: 0.0, solves: 0 };
                            for r in rows.iter().skip(j).step_by(jobs) {
                                rs.y = ys[*r];
                                let before = rs.solves;
                                let f = classify_row(&mut rs, &cols_of[*r], None, method);
                                out.push((*r, f, rs.solves - before));
                            }
                            out
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            });
            for (r, f, n) in results {
                solves += n;
                for c in f {
                    mask[r][c] = 1;
                }
            }
        }
        RoaMethod::Convex => {
            // outward from the row nearest the middle of the denominator rows
            let nonempty: Vec<usize> = (0..grid.ny).filter(|r| !cols_of[*r].is_empty()).collect();
            if let (Some(first), Some(last)) = (nonempty.first(), nonempty.last()) {
                let mid = (first + last) / 2;
                let up: Vec<usize> = (mid..=*last).collect();
                let down: Vec<usize> = (*first..mid).rev().collect();
                let sweeps = [up, down];
                let results: Vec<(usize, Vec<usize>, usize)> = std::thread::scope(|s| {
                    let handles: Vec<_> = sweeps
                        .iter()
                        .enumerate()
                        .map(|(k, rows)| {
                            let (xs, ys, cols_of) = (&xs, &ys, &cols_of);
                            let tpl = tpl.clone();
                            let run = move || {
                                let mut out = Vec::new();
                                let mut rs = RowSolver { tpl, solver, xs, y: 0.0, solves: 0 };
                                let mut hint = None;
                                for r in rows {
                                    rs.y = ys[*r];
                                    let before = rs.solves;
                                    let f = classify_row(&mut rs, &cols_of[*r], hint, method);
                                    let done = f.is_empty();
                                    hint = f.get(f.len() / 2).copied();
                                    out.push((*r, f, rs.solves - before));
                                    if done && !cols_of[*r].is_empty() {
                                        break;
                                    }
                                }
                                out
                            };
                            if jobs > 1 || k == 0 {
                                Some(s.spawn(run))
                            } else {
                                // single job: still sequential, the spawn is joined below
                                Some(s.spawn(run))
                            }
                        })
                        .collect();
                    handles
                        .into_iter()
                        .flatten()
                        .flat_map(|h| h.join().expect("worker panicked"))
                        .collect()
                });
                for (r, f, n) in results {
                    solves += n;
                    for c in f {
                        mask[r][c] = 1;
                    }
                }
            }
        }
    }
    let inside = mask.iter().flatten().filter(|v| **v >= 0).count();
    let feasible = mask.iter().flatten().filter(|v| **v == 1).count();
    let mut boundary = 0;
    for r in 0..grid.ny {
        for c in 0..grid.nx {
            if mask[r][c] != 1 {
                continue;
            }
            let nb = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            if nb.iter().any(|(i, j)| mask.get(*i).and_then(|row| row.get(*j)).is_none_or(|v| *v != 1)) {
                boundary += 1;
            }
        }
    }
    Ok(RoaResult {
        fraction: if inside == 0 { 0.0 } else { feasible as f64 / inside as f64 },
        inside,
        feasible,
        boundary,
        solves,
        mask,
        xs,
        ys,
    })
}
