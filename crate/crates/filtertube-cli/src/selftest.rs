//! Quick property suites run by `filtertube selftest`.

use std::time::Instant;

use filtertube::asynchronous::{AsyncConfig, AsyncController};
use filtertube::invariant::terminal_ingredients;
use filtertube::polytope::{encode_affine_containment, encode_minkowski_containment, Polytope, Scale, TermMap};
use filtertube::qp::{ClarabelQp, LinExpr, QpProblem, QpSolver, SolveStatus};
use filtertube::sim::{
    closed_loop, constraint_audit, eta_containment, AsyncPrimary, DeltaLaw, Plant, RecedingController, SamplerSpec, WLaw,
};
use filtertube::sltmpc::{nominal_mpc, MpcTemplate, SigmaMode};
use filtertube::sysmodel::{double_integrator, DoubleIntegratorParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<String, String>;

pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 7] = [
        ("containment_encoding", containment_encoding),
        ("recursive_feasibility", recursive_feasibility),
        ("replay_determinism", replay_determinism),
        ("value_decrease", value_decrease),
        ("eta_containment", eta_check),
        ("async_memory", async_memory),
        ("nominal_reduction", nominal_reduction),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let r = f();
            let seconds = start.elapsed().as_secs_f64();
            match r {
                Ok(detail) => CheckResult { name, passed: true, detail, seconds },
                Err(detail) => CheckResult { name, passed: false, detail, seconds },
            }
        })
        .collect()
}

fn random_polytope(rng: &mut impl Rng, n: usize) -> Polytope {
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
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        rows.extend(r);
        offs.push(rng.random_range(0.3..1.5));
    }
    Polytope::new(DMatrix::from_row_slice(offs.len(), n, &rows), DVector::from_vec(offs)).expect("bounded by the box rows")
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
}

/// Row-wise support of `M P` over the facet normals of `y`, by vertices.
fn vertex_support(y: &Polytope, m: &DMatrix<f64>, p: &Polytope) -> DVector<f64> {
    let vs = p.vertices().expect("bounded").vertices;
    DVector::from_fn(y.n_facets(), |r, _| {
        vs.iter().map(|v| (y.hmat().row(r) * (m * v))[0]).fold(f64::NEG_INFINITY, f64::max)
    })
}

fn feasible(qp: &QpProblem) -> bool {
    ClarabelQp::default().solve(qp).status == SolveStatus::Optimal
}

fn containment_encoding() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    let mut disagreements = 0;
    while checked < 60 {
        let n = rng.random_range(1..=3);
        let y = random_polytope(&mut rng, n);
        let x = random_polytope(&mut rng, n);
        let z = random_polytope(&mut rng, n);
        let gamma = random_matrix(&mut rng, n, n, 0.3);
        let beta = rng.random_range(0.5..1.5);
        let (slack, enc) = if checked % 2 == 0 {
            let alpha = rng.random_range(0.1..1.0);
            let a = random_matrix(&mut rng, n, n, 1.0);
            let lhs = vertex_support(&y, &(&a * alpha), &x) + vertex_support(&y, &gamma, &z);
            let slack = (lhs - y.offsets() * beta).max();
            let mut qp = QpProblem::new();
            encode_affine_containment(
                &mut qp,
                &LinExpr::constant(alpha),
                &a,
                &LinExpr::constant(beta),
                &y,
                &TermMap::Const(gamma.clone()),
                &z,
                &x,
                0,
            )
            .map_err(|e| e.to_string())?;
            (slack, feasible(&qp))
        } else {
            let x2 = random_polytope(&mut rng, n);
            let a1 = random_matrix(&mut rng, n, n, 0.6);
            let a2 = random_matrix(&mut rng, n, n, 0.6);
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            let cv = DVector::from_column_slice(&c);
            let lhs = y.hmat() * &cv
                + vertex_support(&y, &a1, &x)
                + vertex_support(&y, &a2, &x2)
                + vertex_support(&y, &gamma, &z);
            let slack = (lhs - y.offsets() * beta).max();
            let mut qp = QpProblem::new();
            let offset: Vec<LinExpr> = c.iter().map(|v| LinExpr::constant(*v)).collect();
            encode_minkowski_containment(
                &mut qp,
                &offset,
                &[(TermMap::Const(a1), &x), (TermMap::Const(a2), &x2)],
                &Scale::Scalar(LinExpr::constant(beta)),
                &y,
                &TermMap::Const(gamma.clone()),
                &z,
                0,
            )
            .map_err(|e| e.to_string())?;
            (slack, feasible(&qp))
        };
        if slack.abs() < 1e-4 {
            continue;
        }
        checked += 1;
        if enc != (slack <= 0.0) {
            disagreements += 1;
        }
    }
    if disagreements > 0 {
        return Err(format!("{disagreements} of {checked} instances disagree"));
    }
    Ok(format!("{checked} instances agree"))
}

fn recursive_feasibility() -> Result<String, String> {
    let (sys, cost) = double_integrator(&DoubleIntegratorParams::default());
    let term = terminal_ingredients(&sys, &cost).map_err(|e| e.to_string())?;
    let solver = ClarabelQp::default();
    let x0 = DVector::from_vec(vec![-7.0, 0.0]);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut c = RecedingController::new(&sys, &cost, 5, &term, SigmaMode::Diagonal).map_err(|e| e.to_string())?;
        let r = closed_loop(&mut c, &sys, &cost, &x0, 12, SamplerSpec::default(), seed, &solver).map_err(|e| e.to_string())?;
        if r.aborted.is_some() || r.steps.iter().any(|s| s.status != SolveStatus::Optimal) {
            return Err(format!("infeasible solve in run {seed}"));
        }
        for s in &r.steps {
            worst = worst.max(s.candidate_violation.unwrap_or(0.0));
            if s.wbar_margin.is_some_and(|m| m > 1e-6) {
                return Err("reconstructed disturbance outside W̄".into());
            }
        }
        let a = constraint_audit(&sys, &r, 1e-6);
        if a.state_violations + a.input_violations > 0 {
            return Err(format!("constraint violation in run {seed}"));
        }
    }
    if worst > 1e-6 {
        return Err(format!("candidate violation {worst:.2e}"));
    }
    Ok(format!("max candidate violation {worst:.1e}"))
}

fn replay_determinism() -> Result<String, String> {
    let (sys, cost) = double_integrator(&DoubleIntegratorParams::default());
    let term = terminal_ingredients(&sys, &cost).map_err(|e| e.to_string())?;
    let solver = ClarabelQp::default();
    let x0 = DVector::from_vec(vec![-5.0, 1.0]);
    let spec = SamplerSpec { delta: DeltaLaw::StepConvex, ..Default::default() };
    let run = || {
        let mut c = RecedingController::new(&sys, &cost, 5, &term, SigmaMode::Diagonal).map_err(|e| e.to_string())?;
        closed_loop(&mut c, &sys, &cost, &x0, 8, spec, 42, &solver).map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    if a.states != b.states || a.inputs != b.inputs || a.stage_costs != b.stage_costs {
        return Err("records differ".into());
    }
    Ok("identical records".into())
}

fn value_decrease() -> Result<String, String> {
    let (sys, cost) = double_integrator(&DoubleIntegratorParams::default());
    let term = terminal_ingredients(&sys, &cost).map_err(|e| e.to_string())?;
    let solver = ClarabelQp::default();
    let mut c = RecedingController::new(&sys, &cost, 5, &term, SigmaMode::Diagonal).map_err(|e| e.to_string())?;
    let spec = SamplerSpec { w: WLaw::Zero, delta: DeltaLaw::Nominal, plant: Plant::Auxiliary };
    let x0 = DVector::from_vec(vec![-7.0, 0.0]);
    let r = closed_loop(&mut c, &sys, &cost, &x0, 15, spec, 0, &solver).map_err(|e| e.to_string())?;
    let worst = r.steps.iter().filter_map(|s| s.decrease_slack).fold(f64::NEG_INFINITY, f64::max);
    if worst > 1e-6 {
        return Err(format!("value increase {worst:.2e}"));
    }
    Ok(format!("max V(k+1) - V(k) + l = {worst:.2e}"))
}

fn eta_check() -> Result<String, String> {
    let (sys, cost) = double_integrator(&DoubleIntegratorParams::default());
    let term = terminal_ingredients(&sys, &cost).map_err(|e| e.to_string())?;
    let mut tpl = MpcTemplate::receding(&sys, &cost, 5, &term, SigmaMode::Diagonal).map_err(|e| e.to_string())?;
    let b = tpl.solve(&DVector::from_vec(vec![-7.0, 0.0]), &ClarabelQp::default());
    if b.status != SolveStatus::Optimal {
        return Err("start state infeasible".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rep = eta_containment(&sys, &b.plan, 100, &mut rng);
    if rep.failures > 0 {
        return Err(format!("{} of {} samples outside", rep.failures, rep.checked));
    }
    Ok(format!("{} samples contained", rep.checked))
}

fn async_memory() -> Result<String, String> {
    let (sys, cost) = double_integrator(&DoubleIntegratorParams::default());
    let term = terminal_ingredients(&sys, &cost).map_err(|e| e.to_string())?;
    let solver = ClarabelQp::default();
    let x0 = DVector::from_vec(vec![-7.0, 0.0]);
    let cfg = AsyncConfig { memory_size: 3, cadence: 4, ..AsyncConfig::default() };
    let inner =
        AsyncController::new(&sys, &cost, 5, &term, SigmaMode::Diagonal, cfg, &x0, &solver).map_err(|e| e.to_string())?;
    let mut c = AsyncPrimary { inner };
    let r = closed_loop(&mut c, &sys, &cost, &x0, 16, SamplerSpec::default(), 3, &solver).map_err(|e| e.to_string())?;
    if r.aborted.is_some() || r.steps.iter().any(|s| s.status != SolveStatus::Optimal) {
        return Err("primary infeasibility".into());
    }
    for s in &r.steps {
        let sum: f64 = s.lambda.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || s.lambda.iter().any(|l| *l < -1e-9) {
            return Err(format!("λ off the simplex: {:?}", s.lambda));
        }
        if s.secondary_slot == Some(0) {
            return Err("secondary wrote slot 0".into());
        }
    }
    let updates = r.steps.iter().filter(|s| s.secondary_slot.is_some()).count();
    Ok(format!("{} steps, {updates} memory updates", r.steps.len()))
}

fn nominal_reduction() -> Result<String, String> {
    let p = DoubleIntegratorParams { eps_a: 0.0, eps_b: 0.0, sigma_w: 0.0, wbar_floor: 0.0, ..Default::default() };
    let (sys, cost) = double_integrator(&p);
    let term = terminal_ingredients(&sys, &cost).map_err(|e| e.to_string())?;
    let solver = ClarabelQp::default();
    let mut tpl = MpcTemplate::receding(&sys, &cost, 5, &term, SigmaMode::Diagonal).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for x in [[-3.0, 1.0], [2.0, -1.0], [-7.0, 0.0]] {
        let x = DVector::from_vec(x.to_vec());
        let b = tpl.solve(&x, &solver);
        let (st, v) = nominal_mpc(&sys, &cost, 5, &term.z_f, &x, &solver);
        if b.status != SolveStatus::Optimal || st != SolveStatus::Optimal {
            return Err("solve failed".into());
        }
        worst = worst.max((b.objective - v).abs() / v.abs().max(1.0));
    }
    if worst > 1e-6 {
        return Err(format!("objective gap {worst:.2e}"));
    }
    Ok(format!("max relative gap {worst:.1e}"))
}
