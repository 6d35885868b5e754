mod common;

use std::sync::OnceLock;

use filtertube::invariant::{max_rci, terminal_ingredients, TerminalIngredients};
use filtertube::qp::{ClarabelQp, SolveStatus};
use filtertube::sim::{
    closed_loop, constraint_audit, eta_containment, in_filter_image, replay_residual, roa_estimate, write_csv,
    write_jsonl, DeltaLaw, GridSpec, Plant, RecedingController, RoaMethod, RunRecord, Sampler, SamplerSpec,
    ShrinkingController, WLaw,
};
use filtertube::sltmpc::{MpcTemplate, SigmaMode};
use filtertube::sysmodel::{double_integrator, CostSpec, DoubleIntegratorParams, UncertainLTI};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Setup {
    sys: UncertainLTI,
    cost: CostSpec,
    term: TerminalIngredients,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let (sys, cost) = double_integrator(&DoubleIntegratorParams::default());
        let term = terminal_ingredients(&sys, &cost).unwrap();
        Setup { sys, cost, term }
    })
}

fn receding_run(spec: SamplerSpec, seed: u64, steps: usize) -> RunRecord {
    let s = setup();
    let mut c = RecedingController::new(&s.sys, &s.cost, 5, &s.term, SigmaMode::Diagonal).unwrap();
    let x0 = DVector::from_vec(vec![-7.0, 0.0]);
    closed_loop(&mut c, &s.sys, &s.cost, &x0, steps, spec, seed, &ClarabelQp::default()).unwrap()
}

fn law(k: u8) -> DeltaLaw {
    [DeltaLaw::FixedConvex, DeltaLaw::FixedVertex, DeltaLaw::StepConvex, DeltaLaw::StepVertex, DeltaLaw::Nominal]
        [k as usize % 5]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sampled_uncertainty_is_admissible(seed in any::<u64>(), skewed in any::<bool>(), vertex in any::<bool>(), d in any::<u8>()) {
        let (sys, _) = double_integrator(&DoubleIntegratorParams { skewed, ..Default::default() });
        let delta = law(d);
        let spec = SamplerSpec { w: if vertex { WLaw::Vertex } else { WLaw::Uniform }, delta, plant: Plant::True };
        let mut smp = Sampler::new(&sys, spec, seed).unwrap();
        let first = smp.delta_weights(sys.deltas.len());
        for _ in 0..20 {
            let w = smp.w(&sys);
            prop_assert!(sys.w.margin(w.as_slice()) <= 1e-12);
            if vertex {
                prop_assert!(sys.w_vertices.iter().any(|v| (v - &w).amax() == 0.0));
            }
            let l = smp.delta_weights(sys.deltas.len());
            if delta == DeltaLaw::Nominal {
                prop_assert!(l.iter().all(|v| *v == 0.0));
            } else {
                prop_assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12 && l.iter().all(|v| *v >= 0.0));
            }
            if matches!(delta, DeltaLaw::FixedConvex | DeltaLaw::FixedVertex) {
                prop_assert_eq!(&l, &first);
            }
            if matches!(delta, DeltaLaw::FixedVertex | DeltaLaw::StepVertex) {
                prop_assert_eq!(l.iter().filter(|v| **v == 1.0).count(), 1);
            }
        }
    }
}

#[test]
fn degenerate_disturbance_samples_zero() {
    let (sys, _) = double_integrator(&DoubleIntegratorParams { sigma_w: 0.0, ..Default::default() });
    let mut smp = Sampler::new(&sys, SamplerSpec::default(), 3).unwrap();
    for _ in 0..10 {
        assert_eq!(smp.w(&sys).amax(), 0.0);
    }
}

#[test]
fn runs_replay_and_respect_constraints() {
    let s = setup();
    let spec = SamplerSpec { delta: DeltaLaw::StepVertex, w: WLaw::Vertex, ..Default::default() };
    let a = receding_run(spec, 11, 12);
    let b = receding_run(spec, 11, 12);
    let c = receding_run(spec, 12, 12);
    assert_eq!(a.states, b.states);
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.disturbances, b.disturbances);
    assert_ne!(a.disturbances, c.disturbances);
    for r in [&a, &c] {
        assert!(r.aborted.is_none());
        assert!(replay_residual(&s.sys, r, Plant::True) <= 1e-9);
        let audit = constraint_audit(&s.sys, r, 1e-6);
        assert_eq!(audit.state_violations + audit.input_violations, 0);
        // stage costs are l(x, u) of the recorded pairs
        for k in 0..r.inputs.len() {
            let x = DVector::from_column_slice(&r.states[k]);
            let u = DVector::from_column_slice(&r.inputs[k]);
            let l = (x.transpose() * &s.cost.q * &x)[0] + (u.transpose() * &s.cost.r * &u)[0];
            assert!((l - r.stage_costs[k]).abs() <= 1e-9 * l.max(1.0));
        }
        assert!((r.total_cost - r.stage_costs.iter().sum::<f64>()).abs() <= 1e-9 * r.total_cost);
    }
}

#[test]
fn auxiliary_plant_follows_nominal_prediction() {
    let spec = SamplerSpec { w: WLaw::Zero, delta: DeltaLaw::Nominal, plant: Plant::Auxiliary };
    let r = receding_run(spec, 0, 10);
    for k in 0..r.inputs.len() {
        let plan = r.plans[k].as_ref().unwrap();
        let next = DVector::from_column_slice(&r.states[k + 1]);
        assert!((&plan.z[1] - next).amax() <= 1e-6);
    }
    assert!(r.steps.iter().filter_map(|s| s.decrease_slack).all(|v| v <= 1e-6));
}

#[test]
fn shrinking_horizon_controller_is_feasible() {
    let s = setup();
    let (s_f, _) = max_rci(&s.sys).unwrap();
    let mut c = ShrinkingController::new(&s.sys, &s.cost, 5, &s_f, SigmaMode::Diagonal).unwrap();
    let x0 = DVector::from_vec(vec![-7.0, 0.0]);
    let r = closed_loop(&mut c, &s.sys, &s.cost, &x0, 15, SamplerSpec::default(), 4, &ClarabelQp::default()).unwrap();
    assert!(r.aborted.is_none());
    assert!(r.steps.iter().all(|st| st.status == SolveStatus::Optimal));
    assert_eq!(constraint_audit(&s.sys, &r, 1e-6).state_violations, 0);
    // from step N - 1 on the state stays in the robust invariant set
    for x in &r.states[4..] {
        assert!(s_f.margin(x) <= 1e-6);
    }
}

#[test]
fn filter_image_membership_against_box_oracle() {
    let wbar = filtertube::polytope::Polytope::inf_ball(2, 0.1);
    let i2 = DMatrix::identity(2, 2);
    let half = DMatrix::identity(2, 2) * 0.5;
    // I W̄ ⊕ 0.5 I W̄ is the box of radius 0.15
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let y = common::random_matrix(&mut rng, 2, 1, 0.2).column(0).into_owned();
        let inside = y.amax() <= 0.15;
        if (y.amax() - 0.15).abs() < 1e-6 {
            continue;
        }
        assert_eq!(in_filter_image(&wbar, &[&i2, &half], &y, 1e-9), inside, "{y:?}");
    }
}

#[test]
fn eta_containment_holds_and_detects_corruption() {
    let s = setup();
    let mut tpl = MpcTemplate::receding(&s.sys, &s.cost, 5, &s.term, SigmaMode::Diagonal).unwrap();
    let b = tpl.solve(&DVector::from_vec(vec![-6.0, 1.0]), &ClarabelQp::default());
    assert_eq!(b.status, SolveStatus::Optimal);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rep = eta_containment(&s.sys, &b.plan, 200, &mut rng);
    assert_eq!(rep.checked, 1000);
    assert_eq!(rep.failures, 0);
    let mut bad = b.plan.clone();
    bad.p[2] += DVector::from_vec(vec![1e3, 1e3]);
    let rep = eta_containment(&s.sys, &bad, 50, &mut rng);
    assert_eq!(rep.failures, 50);
}

#[test]
fn convex_roa_matches_exhaustive() {
    let (sys, cost) = double_integrator(&DoubleIntegratorParams { sigma_w: 0.6, ..Default::default() });
    let term = terminal_ingredients(&sys, &cost).unwrap();
    let tpl = MpcTemplate::receding(&sys, &cost, 5, &term, SigmaMode::Diagonal).unwrap();
    let grid = GridSpec { nx: 17, ny: 17 };
    let solver = ClarabelQp::default();
    let ex = roa_estimate(&tpl, grid, &sys.x, RoaMethod::Exhaustive, 1, &solver).unwrap();
    let cv = roa_estimate(&tpl, grid, &sys.x, RoaMethod::Convex, 2, &solver).unwrap();
    assert_eq!(ex.mask, cv.mask);
    assert_eq!(ex.inside, 17 * 17);
    assert!(ex.fraction > 0.0 && ex.fraction < 1.0);
    assert!(cv.solves < ex.solves);
    assert_eq!(ex.feasible, ex.mask.iter().flatten().filter(|v| **v == 1).count());
}

#[test]
fn writers_round_trip() {
    let r = receding_run(SamplerSpec::default(), 2, 5);
    let dir = std::env::temp_dir().join(format!("filtertube-sim-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let jp = dir.join("runs.jsonl");
    write_jsonl(&jp, std::slice::from_ref(&r)).unwrap();
    let back: RunRecord = serde_json::from_str(std::fs::read_to_string(&jp).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(back.states, r.states);
    assert_eq!(back.total_cost, r.total_cost);
    let cp = dir.join("steps.csv");
    write_csv(&cp, std::slice::from_ref(&r), 2, 1, 0).unwrap();
    let csv = std::fs::read_to_string(&cp).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "run_id,step,x0,x1,u0,cost,status");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    let x0: f64 = rows[3].split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(x0, r.states[3][0]);
    std::fs::remove_dir_all(&dir).unwrap();
}
