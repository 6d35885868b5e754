//! Subcommand implementations.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use filtertube::asynchronous::AsyncController;
use filtertube::invariant::{default_cache_dir, InvariantCache};
use filtertube::qp::ClarabelQp;
use filtertube::sim::{
    closed_loop, constraint_audit, mc_stats, replay_residual, roa_estimate, timing_report, write_csv, write_jsonl,
    AsyncPrimary, Controller, McSummary, Plant, RecedingController, RunRecord, ShrinkingController, Stats,
};
use filtertube::sltmpc::MpcTemplate;
use filtertube::sysmodel::{CostSpec, UncertainLTI};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{ControllerKind, ExperimentConfig, SweepParam};
use crate::manifest::OutputDir;

/// Flags shared by the experiment subcommands.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<std::path::PathBuf>,
    pub recompute_invariants: bool,
    pub jobs: usize,
}

/// Result of a command; a nonzero `audit_failures` maps to a failing exit code.
#[derive(Debug, Default)]
pub struct Outcome {
    pub audit_failures: usize,
    pub report: String,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct AuditCounts {
    pub constraint_violations: usize,
    pub replay_mismatches: usize,
    pub wbar_violations: usize,
    pub aborted_runs: usize,
}

impl AuditCounts {
    pub fn total(&self) -> usize {
        self.constraint_violations + self.replay_mismatches + self.wbar_violations + self.aborted_runs
    }
}

pub fn audit_records(sys: &UncertainLTI, records: &[RunRecord], plant: Plant) -> AuditCounts {
    let mut a = AuditCounts::default();
    for r in records {
        let c = constraint_audit(sys, r, 1e-6);
        a.constraint_violations += c.state_violations + c.input_violations;
        if plant == Plant::True && replay_residual(sys, r, plant) > 1e-9 {
            a.replay_mismatches += 1;
        }
        a.wbar_violations += r.steps.iter().filter(|s| s.wbar_margin.is_some_and(|m| m > 1e-6)).count();
        a.aborted_runs += usize::from(r.aborted.is_some());
    }
    a
}

fn cache(opts: &RunOptions) -> InvariantCache {
    InvariantCache::new(default_cache_dir(), opts.recompute_invariants)
}

fn build_controller(
    kind: ControllerKind,
    cfg: &ExperimentConfig,
    sys: &UncertainLTI,
    cost: &CostSpec,
    inv: &InvariantCache,
    x0: &DVector<f64>,
) -> Result<Box<dyn Controller>> {
    let n = cfg.horizon;
    Ok(match kind {
        ControllerKind::Receding => {
            let term = inv.terminal(sys, cost)?;
            Box::new(RecedingController::new(sys, cost, n, &term, cfg.sigma_mode)?)
        }
        ControllerKind::Shrinking => {
            let s_f = inv.max_rci(sys)?;
            Box::new(ShrinkingController::new(sys, cost, n, &s_f, cfg.sigma_mode)?)
        }
        ControllerKind::Async => {
            let term = inv.terminal(sys, cost)?;
            let inner = AsyncController::new(
                sys,
                cost,
                n,
                &term,
                cfg.sigma_mode,
                cfg.async_.scheme.clone(),
                x0,
                &ClarabelQp::default(),
            )?;
            Box::new(AsyncPrimary { inner })
        }
    })
}

/// Runs `seeds.len()` independent closed loops on up to `jobs` threads.
fn run_many(
    kind: ControllerKind,
    cfg: &ExperimentConfig,
    sys: &UncertainLTI,
    cost: &CostSpec,
    inv: &InvariantCache,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    let x0 = DVector::from_vec(cfg.initial_state());
    // warm the invariant cache once before the workers start
    match kind {
        ControllerKind::Shrinking => {
            inv.max_rci(sys)?;
        }
        _ => {
            inv.terminal(sys, cost)?;
        }
    }
    let jobs = jobs.clamp(1, seeds.len().max(1));
    let results: Vec<Result<Vec<(usize, RunRecord)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let x0 = &x0;
                s.spawn(move || -> Result<Vec<(usize, RunRecord)>> {
                    let solver = ClarabelQp::default();
                    let mut out = Vec::new();
                    for (r, seed) in seeds.iter().enumerate().skip(j).step_by(jobs) {
                        let mut ctrl = build_controller(kind, cfg, sys, cost, inv, x0)?;
                        let mut rec = closed_loop(ctrl.as_mut(), sys, cost, x0, cfg.steps, cfg.sampler, *seed, &solver)?;
                        rec.run_id = r;
                        rec.plans.clear();
                        out.push((r, rec));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    all.sort_by_key(|(r, _)| *r);
    Ok(all.into_iter().map(|(_, rec)| rec).collect())
}

fn seeds(cfg: &ExperimentConfig, opts: &RunOptions) -> Vec<u64> {
    let base = opts.seed.unwrap_or(cfg.seed);
    (0..cfg.runs as u64).map(|r| base.wrapping_add(r)).collect()
}

#[derive(Serialize)]
struct RunSummary<'a> {
    controller: &'a str,
    stats: McSummary,
    audit: AuditCounts,
}

fn summarize(name: &str, sys: &UncertainLTI, records: &[RunRecord], plant: Plant) -> (McSummary, AuditCounts, String) {
    let stats = mc_stats(sys, records);
    let audit = audit_records(sys, records, plant);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{name}: {} runs, mean cost {:.2}, median solve {:.4} s, infeasible solves {}, fallbacks {}, audit failures {}",
        stats.runs,
        stats.cost.mean,
        stats.solve_time.median,
        stats.infeasible_solves,
        stats.fallbacks,
        audit.total()
    );
    (stats, audit, s)
}

pub fn cmd_closedloop(cfg: &ExperimentConfig, text: &str, opts: &RunOptions) -> Result<Outcome> {
    let (sys, cost) = cfg.model();
    let inv = cache(opts);
    let seeds = seeds(cfg, opts);
    let start = Instant::now();
    let records = run_many(cfg.controller, cfg, &sys, &cost, &inv, &seeds, opts.jobs)?;
    let mut out = OutputDir::create(opts.out.as_ref().unwrap_or(&cfg.out))?;
    write_jsonl(&out.file("runs.jsonl"), &records)?;
    write_csv(&out.file("steps.csv"), &records, sys.nx(), sys.nu(), 0)?;
    let name = records.first().map_or("none".to_string(), |r| r.controller.clone());
    let (stats, audit, mut report) = summarize(&name, &sys, &records, cfg.sampler.plant);
    out.write("summary.json", serde_json::to_string_pretty(&RunSummary { controller: &name, stats, audit })?)?;
    out.finish("closedloop", text, seeds, opts.jobs)?;
    let _ = writeln!(report, "elapsed {:.1} s", start.elapsed().as_secs_f64());
    Ok(Outcome { audit_failures: audit.total(), report })
}

fn write_lambda_csv(path: &std::path::Path, records: &[RunRecord], m: usize) -> Result<()> {
    let mut s = String::from("run_id,step,secondary_slot");
    for k in 0..m {
        let _ = write!(s, ",lambda{k}");
    }
    s.push('\n');
    for r in records {
        for (k, st) in r.steps.iter().enumerate() {
            let _ = write!(s, "{},{},{}", r.run_id, k, st.secondary_slot.map_or(String::new(), |v| v.to_string()));
            for j in 0..m {
                let _ = write!(s, ",{}", st.lambda.get(j).map_or(String::new(), |v| format!("{v:e}")));
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Serialize)]
struct AsyncSummary<'a> {
    primary: RunSummary<'a>,
    receding: Option<RunSummary<'a>>,
    cost_ratio: Option<f64>,
    median_time_ratio: Option<f64>,
    secondary_time: Stats,
    timing: Vec<(String, Stats)>,
}

pub fn cmd_async(cfg: &ExperimentConfig, text: &str, opts: &RunOptions) -> Result<Outcome> {
    let (sys, cost) = cfg.model();
    let inv = cache(opts);
    let seeds = seeds(cfg, opts);
    let m = cfg.async_.scheme.memory_size;
    let start = Instant::now();
    let records = run_many(ControllerKind::Async, cfg, &sys, &cost, &inv, &seeds, opts.jobs)?;
    let mut out = OutputDir::create(opts.out.as_ref().unwrap_or(&cfg.out))?;
    write_jsonl(&out.file("runs.jsonl"), &records)?;
    write_csv(&out.file("steps.csv"), &records, sys.nx(), sys.nu(), m)?;
    write_lambda_csv(&out.file("lambda.csv"), &records, m)?;
    let (stats, audit, mut report) = summarize("async", &sys, &records, cfg.sampler.plant);
    let mut failures = audit.total();
    let sec: Vec<f64> = records.iter().flat_map(|r| r.steps.iter().filter_map(|s| s.secondary_time)).collect();
    let mut all = records.clone();
    let mut receding = None;
    let (mut cost_ratio, mut time_ratio) = (None, None);
    let rec_records;
    if cfg.async_.compare {
        rec_records = run_many(ControllerKind::Receding, cfg, &sys, &cost, &inv, &seeds, opts.jobs)?;
        write_jsonl(&out.file("receding_runs.jsonl"), &rec_records)?;
        let (rs, ra, rrep) = summarize("receding", &sys, &rec_records, cfg.sampler.plant);
        report.push_str(&rrep);
        failures += ra.total();
        cost_ratio = Some(stats.cost.mean / rs.cost.mean);
        time_ratio = Some(stats.solve_time.median / rs.solve_time.median);
        let _ = writeln!(
            report,
            "async/receding mean cost ratio {:.4}, median solve time ratio {:.4}",
            cost_ratio.unwrap_or(f64::NAN),
            time_ratio.unwrap_or(f64::NAN)
        );
        receding = Some(RunSummary { controller: "receding", stats: rs, audit: ra });
        all.extend(rec_records.iter().cloned());
    }
    let summary = AsyncSummary {
        primary: RunSummary { controller: "async", stats, audit },
        receding,
        cost_ratio,
        median_time_ratio: time_ratio,
        secondary_time: Stats::of(&sec),
        timing: timing_report(&all),
    };
    out.write("summary.json", serde_json::to_string_pretty(&summary)?)?;
    out.finish("async", text, seeds, opts.jobs)?;
    let _ = writeln!(report, "elapsed {:.1} s", start.elapsed().as_secs_f64());
    Ok(Outcome { audit_failures: failures, report })
}

#[derive(Serialize)]
struct RoaMask {
    param: Option<SweepParam>,
    value: Option<f64>,
    horizon: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    mask: Vec<Vec<i8>>,
}

pub fn cmd_roa(cfg: &ExperimentConfig, text: &str, opts: &RunOptions) -> Result<Outcome> {
    if cfg.system != crate::config::SystemId::DoubleIntegrator {
        bail!("region-of-attraction grids need a planar system");
    }
    let inv = cache(opts);
    let solver = ClarabelQp::default();
    let mut points: Vec<(Option<SweepParam>, Option<f64>)> = Vec::new();
    for sw in &cfg.roa.sweeps {
        points.extend(sw.values.iter().map(|v| (Some(sw.param), Some(*v))));
    }
    if points.is_empty() {
        points.push((None, None));
    }
    let mut out = OutputDir::create(opts.out.as_ref().unwrap_or(&cfg.out))?;
    let mut csv = String::from("param,value,horizon,fraction,inside,feasible,boundary,solves,seconds\n");
    let mut masks = Vec::new();
    let mut report = String::new();
    for (param, value) in &points {
        let mut di = cfg.double_integrator.clone();
        match (param, value) {
            (Some(SweepParam::EpsA), Some(v)) => di.eps_a = *v,
            (Some(SweepParam::EpsB), Some(v)) => di.eps_b = *v,
            (Some(SweepParam::SigmaW), Some(v)) => di.sigma_w = *v,
            _ => {}
        }
        let (sys, cost) = cfg.model_with(&di);
        let denom = inv.max_rci(&sys).context("maximal robust control invariant set")?;
        let term = inv.terminal(&sys, &cost).context("terminal set")?;
        for &h in &cfg.roa.horizons {
            let start = Instant::now();
            let tpl = MpcTemplate::receding(&sys, &cost, h, &term, cfg.sigma_mode)?;
            let r = roa_estimate(&tpl, cfg.roa.grid, &denom, cfg.roa.method, opts.jobs, &solver)?;
            let secs = start.elapsed().as_secs_f64();
            let pname = param.map_or("", SweepParam::name);
            let vname = value.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                csv,
                "{pname},{vname},{h},{:.6},{},{},{},{},{secs:.3}",
                r.fraction, r.inside, r.feasible, r.boundary, r.solves
            );
            let _ = writeln!(report, "{pname}={vname} N={h}: fraction {:.4} ({:.1} s)", r.fraction, secs);
            masks.push(RoaMask { param: *param, value: *value, horizon: h, xs: r.xs, ys: r.ys, mask: r.mask });
        }
    }
    out.write("roa.csv", csv)?;
    out.write("roa_masks.json", serde_json::to_string(&masks)?)?;
    out.finish("roa", text, vec![opts.seed.unwrap_or(cfg.seed)], opts.jobs)?;
    Ok(Outcome { audit_failures: 0, report })
}
