use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{BatteryInit, ControllerConfig, ControllerKind, ExperimentConfig, TraceSource};
use super::{ControllerFailure, HarnessError};
use crate::admm::{run_admm, write_iteration_trace, AdmmConfig, ConsensusState, IterationRecord};
use crate::kernel::{solve_lp, LpStatus};
use crate::lyapunov::{advance, build_p2, derive_params, LyapunovParams, OnlineError, QueueMode};
use crate::model::{
    battery_violations, check_decision, slot_cost, step_battery, step_queues, BoundKind,
    BoundViolation, ClusterParams, CostBreakdown, Decision, SlotInput, SystemState, FEAS_TOL,
};
use crate::offline::{greedy_step, solve_offline, Backend, InitialState};
use crate::scenario::{adopt_arrival_bounds, reference_params};
use crate::traces::{load_trace_csv, synth_generate, TraceSet};

/// Cluster and trace shared by every controller of one experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Cluster with the configured sharing scale applied.
    pub params: ClusterParams,
    pub trace: TraceSet,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut params = config.cluster.clone().unwrap_or_else(reference_params);
        let trace = match &config.trace {
            TraceSource::Synth { shape, seed } => synth_generate(
                seed.unwrap_or(config.seed),
                config.slots,
                params.num_front(),
                params.num_back(),
                shape,
            ),
            TraceSource::Csv { path } => load_trace_csv(path)?.prefix(config.slots)?,
        };
        if trace.num_front() != params.num_front() || trace.num_back() != params.num_back() {
            return Err(HarnessError::Config(format!(
                "trace has {} front ends and {} back ends, cluster has {} and {}",
                trace.num_front(),
                trace.num_back(),
                params.num_front(),
                params.num_back()
            )));
        }
        adopt_arrival_bounds(&mut params, &trace);
        params = params.with_share_scale(config.controller.share_scale);
        Ok(Self {
            config: config.clone(),
            params,
            trace,
        })
    }

    pub fn slots(&self) -> usize {
        self.trace.len()
    }

    /// Cluster as seen by `kind`.
    pub fn params_for(&self, kind: ControllerKind) -> ClusterParams {
        if kind == ControllerKind::NoSharing {
            self.params.with_share_scale(0.0)
        } else {
            self.params.clone()
        }
    }

    pub fn initial_battery(&self) -> Vec<f64> {
        let p = &self.params;
        match &self.config.initial_battery {
            BatteryInit::Target => p
                .back
                .iter()
                .map(|b| b.energy_max - p.eta_charge * b.charge_max)
                .collect(),
            BatteryInit::Floor => p.back.iter().map(|b| b.energy_min).collect(),
            BatteryInit::Mid => p
                .back
                .iter()
                .map(|b| 0.5 * (b.energy_min + b.energy_max))
                .collect(),
            BatteryInit::Values(v) => v.clone(),
        }
    }

    /// Lyapunov parameters for a controller, with V resolved from the
    /// controller's knobs.
    pub fn lyapunov_for(&self, ctrl: &ControllerConfig) -> Result<LyapunovParams, HarnessError> {
        let params = self.params_for(ctrl.kind);
        let base = derive_params(&params, &self.trace.price_bounds())?;
        let mode = if ctrl.kind == ControllerKind::Traditional {
            QueueMode::Traditional
        } else {
            QueueMode::Bounded
        };
        let base = base.with_mode(mode);
        let v = match (ctrl.v, ctrl.v_fraction) {
            (Some(v), _) => v,
            (None, Some(f)) => v_from_fraction(&base, f),
            (None, None) => return Ok(base),
        };
        Ok(base.with_v(v)?)
    }
}

/// `max(v_min, 0) + f (v_max - max(v_min, 0))`.
pub fn v_from_fraction(lyap: &LyapunovParams, f: f64) -> f64 {
    let lo = lyap.v_min.max(0.0);
    lo + f * (lyap.v_max - lo)
}

/// Per-slot line of a report. Queue and battery levels are those at the
/// end of the slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub cost: CostBreakdown,
    pub accumulated: f64,
    pub q_front: Vec<f64>,
    pub q_back: Vec<f64>,
    pub battery: Vec<f64>,
    /// Per-slot problem objective at the applied decision.
    pub p2_objective: Option<f64>,
    pub admm_iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounters {
    pub front_queue: usize,
    pub back_queue: usize,
    pub battery: usize,
    /// Decisions failing box, antisymmetry or power-balance checks.
    pub decision: usize,
}

impl ViolationCounters {
    pub fn total(&self) -> usize {
        self.front_queue + self.back_queue + self.battery + self.decision
    }

    fn record(&mut self, v: &BoundViolation) {
        match v.kind {
            BoundKind::FrontQueue => self.front_queue += 1,
            BoundKind::BackQueue => self.back_queue += 1,
            BoundKind::Battery => self.battery += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdmmSummary {
    /// Iterations used in each slot.
    pub iterations: Vec<usize>,
    pub truncated_slots: usize,
    pub mean_iterations: f64,
    /// Largest final primal residual over the run.
    pub max_final_residual: f64,
    /// Largest power-balance gap absorbed by the repair.
    pub max_balance_repair: f64,
    pub admission_repairs: usize,
    pub trimmed_transfers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapAudit {
    pub offline_average: f64,
    pub controller_average: f64,
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub controller: ControllerKind,
    pub v: Option<f64>,
    pub slots: usize,
    pub totals: CostBreakdown,
    pub violations: ViolationCounters,
    pub records: Vec<SlotRecord>,
    pub admm: Option<AdmmSummary>,
    pub gap_audit: Option<GapAudit>,
    /// Applied decisions, for audits.
    #[serde(skip)]
    pub decisions: Vec<Decision>,
    /// State at the start of every slot.
    #[serde(skip)]
    pub states: Vec<SystemState>,
    /// Wall-clock seconds per slot; excluded from the deterministic outputs.
    #[serde(skip)]
    pub wall_seconds: Vec<f64>,
    #[serde(skip)]
    pub iteration_records: Vec<(usize, Vec<IterationRecord>)>,
}

impl RunReport {
    pub fn average(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.totals.f_total / self.slots as f64
        }
    }

    pub fn accumulated(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accumulated).collect()
    }

    /// Whether the controller promised no bound violations and broke that.
    pub fn breaks_guarantee(&self) -> bool {
        self.controller.guarantees_bounds() && self.violations.total() > 0
    }

    pub fn total_wall_seconds(&self) -> f64 {
        self.wall_seconds.iter().sum()
    }
}

struct Applied {
    decision: Decision,
    p2_objective: Option<f64>,
    admm_iterations: Option<usize>,
}

/// Runs the configured controller and, when an output directory is set,
/// writes the report files there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let exp = Experiment::prepare(config)?;
    let report = simulate(&exp, &config.controller)?;
    if let Some(dir) = &config.output.dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Simulates `ctrl` over the experiment's trace.
pub fn simulate(exp: &Experiment, ctrl: &ControllerConfig) -> Result<RunReport, HarnessError> {
    let kind = ctrl.kind;
    let params = exp.params_for(kind);
    let slots = exp.slots();
    let battery0 = exp.initial_battery();
    if battery0.len() != params.num_back() {
        return Err(HarnessError::Config(format!(
            "initial battery has {} entries for {} back ends",
            battery0.len(),
            params.num_back()
        )));
    }
    let fail = |slot: Option<usize>, source: ControllerFailure| HarnessError::Controller {
        controller: kind,
        slot,
        source: Box::new(source),
    };

    let lyap = if kind.uses_lyapunov() {
        Some(exp.lyapunov_for(ctrl)?)
    } else {
        None
    };
    let mut state = match &lyap {
        Some(l) => l.initial_state(&params, battery0.clone()),
        None => SystemState::initial(&params, battery0.clone()),
    };

    let offline = if kind == ControllerKind::Offline {
        let init = InitialState::empty(&params, battery0.clone());
        let sol = solve_offline(
            &exp.trace,
            &params,
            slots,
            &init,
            Backend::Sparse,
            &mut |_| {},
        )
        .map_err(|e| fail(None, e.into()))?;
        Some(sol.decisions)
    } else {
        None
    };
    let p_th = ctrl.p_th.unwrap_or_else(|| exp.trace.median_buy_price());
    let admm_cfg = AdmmConfig {
        record_iterations: exp.config.output.iteration_trace,
        ..ctrl.admm.clone()
    };
    let mut consensus: Option<ConsensusState> = None;

    let mut report = RunReport {
        controller: kind,
        v: lyap.as_ref().map(|l| l.v),
        slots,
        totals: CostBreakdown::default(),
        violations: ViolationCounters::default(),
        records: Vec::with_capacity(slots),
        admm: (kind == ControllerKind::Admm).then(AdmmSummary::default),
        gap_audit: None,
        decisions: Vec::with_capacity(slots),
        states: Vec::with_capacity(slots),
        wall_seconds: Vec::with_capacity(slots),
        iteration_records: Vec::new(),
    };

    let mut accumulated = 0.0;
    for t in 0..slots {
        let input = exp.trace.slot(t);
        let started = Instant::now();
        let applied = match kind {
            ControllerKind::Offline => Applied {
                decision: offline.as_ref().expect("solved above")[t].clone(),
                p2_objective: None,
                admm_iterations: None,
            },
            ControllerKind::Greedy => Applied {
                decision: greedy_step(&state, &input, &params, p_th)
                    .map_err(|e| fail(Some(t), e.into()))?
                    .decision,
                p2_objective: None,
                admm_iterations: None,
            },
            ControllerKind::Proposed | ControllerKind::NoSharing | ControllerKind::Traditional => {
                let l = lyap.as_ref().expect("derived above");
                let (decision, objective) =
                    solve_slot(&state, &input, &params, l).map_err(|e| fail(Some(t), e.into()))?;
                Applied {
                    decision,
                    p2_objective: Some(objective),
                    admm_iterations: None,
                }
            }
            ControllerKind::Admm => {
                let l = lyap.as_ref().expect("derived above");
                let (decision, rep, cons) =
                    run_admm(&state, &input, &params, l, &admm_cfg, consensus.as_ref())
                        .map_err(|e| fail(Some(t), e.into()))?;
                consensus = Some(cons);
                let summary = report.admm.as_mut().expect("admm summary");
                summary.iterations.push(rep.iterations);
                summary.truncated_slots += rep.truncated as usize;
                if let Some(&r) = rep.residuals.last() {
                    summary.max_final_residual = summary.max_final_residual.max(r);
                }
                let gap = rep
                    .repair
                    .delta_e
                    .iter()
                    .fold(0.0_f64, |m, d| m.max(d.abs()));
                summary.max_balance_repair = summary.max_balance_repair.max(gap);
                summary.admission_repairs += rep.repair.accept_adjustments.len();
                summary.trimmed_transfers += rep.repair.trimmed_fronts.len();
                if !rep.records.is_empty() {
                    report.iteration_records.push((t, rep.records));
                }
                let objective = build_p2(&state, &input, &params, l).objective_of(&decision);
                Applied {
                    decision,
                    p2_objective: Some(objective),
                    admm_iterations: Some(rep.iterations),
                }
            }
        };
        report.wall_seconds.push(started.elapsed().as_secs_f64());

        if check_decision(&applied.decision, &input, &params, FEAS_TOL).is_err() {
            report.violations.decision += 1;
        }
        let (next, cost, violations) = match &lyap {
            Some(l) => {
                let out = advance(
                    &state,
                    applied.decision.clone(),
                    &input,
                    &params,
                    l,
                    applied.p2_objective.unwrap_or(0.0),
                );
                (out.next, out.cost, out.violations)
            }
            None => physical_step(&state, &applied.decision, &input, &params),
        };
        for v in &violations {
            report.violations.record(v);
        }
        report.totals = report.totals.add(&cost);
        accumulated += cost.f_total;
        report.records.push(SlotRecord {
            slot: t,
            cost,
            accumulated,
            q_front: next.q_front.clone(),
            q_back: next.q_back.clone(),
            battery: next.battery.clone(),
            p2_objective: applied.p2_objective,
            admm_iterations: applied.admm_iterations,
        });
        report.decisions.push(applied.decision);
        report.states.push(std::mem::replace(&mut state, next));
    }
    if let Some(s) = report.admm.as_mut() {
        if !s.iterations.is_empty() {
            s.mean_iterations =
                s.iterations.iter().sum::<usize>() as f64 / s.iterations.len() as f64;
        }
    }
    if exp.config.output.gap_audit {
        if let Some(l) = &lyap {
            let init = InitialState::empty(&params, battery0);
            let sol = solve_offline(
                &exp.trace,
                &params,
                slots,
                &init,
                Backend::Sparse,
                &mut |_| {},
            )
            .map_err(|e| fail(None, e.into()))?;
            report.gap_audit = Some(gap_audit(sol.average(), report.average(), l));
        }
    }
    Ok(report)
}

pub fn gap_audit(offline_average: f64, controller_average: f64, lyap: &LyapunovParams) -> GapAudit {
    let bound = lyap.drift.total() / lyap.v;
    let gap = controller_average - offline_average;
    GapAudit {
        offline_average,
        controller_average,
        gap,
        bound,
        holds: gap <= bound,
    }
}

/// Solves the per-slot problem centrally; returns the decision and the
/// objective including its constant.
pub fn solve_slot(
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    lyap: &LyapunovParams,
) -> Result<(Decision, f64), OnlineError> {
    let prog = build_p2(state, input, params, lyap);
    let sol = solve_lp(&prog.lp).map_err(|source| OnlineError::Lp {
        slot: state.slot,
        source,
    })?;
    if sol.status != LpStatus::Optimal {
        return Err(OnlineError::Status {
            slot: state.slot,
            status: sol.status,
        });
    }
    Ok((
        prog.layout.extract(&sol.x, 0),
        sol.objective + prog.constant,
    ))
}

fn physical_step(
    state: &SystemState,
    decision: &Decision,
    input: &SlotInput,
    params: &ClusterParams,
) -> (SystemState, CostBreakdown, Vec<BoundViolation>) {
    let queues = step_queues(&state.q_front, &state.q_back, decision, &params.topology);
    let battery = step_battery(&state.battery, decision, params);
    let mut violations = queues.violations(params);
    violations.extend(battery_violations(&battery, params));
    let next = SystemState {
        slot: state.slot + 1,
        q_front: queues.front,
        q_back: queues.back,
        battery,
        ..state.clone()
    };
    (next, slot_cost(decision, input, params), violations)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `metrics.csv`, `summary.json` and `timing.csv`, plus
/// `admm_iterations.jsonl` when iteration records were kept.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_metrics_csv(report, &dir.join("metrics.csv"))?;

    let path = dir.join("summary.json");
    let mut summary =
        serde_json::to_value(report).map_err(|e| HarnessError::Config(e.to_string()))?;
    if let Some(obj) = summary.as_object_mut() {
        obj.remove("records");
    }
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;

    let path = dir.join("timing.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Csv {
        path: path.clone(),
        source: e,
    })?;
    w.write_record(["slot", "wall_seconds"])
        .map_err(|e| HarnessError::Csv {
            path: path.clone(),
            source: e,
        })?;
    for (t, s) in report.wall_seconds.iter().enumerate() {
        w.write_record([t.to_string(), s.to_string()])
            .map_err(|e| HarnessError::Csv {
                path: path.clone(),
                source: e,
            })?;
    }
    w.flush().map_err(io_err(&path))?;

    if !report.iteration_records.is_empty() {
        let path = dir.join("admm_iterations.jsonl");
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        for (slot, records) in &report.iteration_records {
            write_iteration_trace(&mut out, *slot, records).map_err(io_err(&path))?;
        }
        out.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

fn write_metrics_csv(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    let err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let (nj, ni) = report
        .records
        .first()
        .map_or((0, 0), |r| (r.q_front.len(), r.q_back.len()));
    let mut header: Vec<String> = [
        "slot",
        "f_grid",
        "f_batt",
        "f_tran",
        "f_work",
        "f_total",
        "accumulated",
    ]
    .map(String::from)
    .to_vec();
    header.extend((0..nj).map(|j| format!("q_front_{j}")));
    header.extend((0..ni).map(|i| format!("q_back_{i}")));
    header.extend((0..ni).map(|i| format!("battery_{i}")));
    header.extend(["p2_objective", "admm_iterations"].map(String::from));
    w.write_record(&header).map_err(err)?;
    for r in &report.records {
        let c = &r.cost;
        let mut row = vec![
            r.slot.to_string(),
            c.f_grid.to_string(),
            c.f_batt.to_string(),
            c.f_tran.to_string(),
            c.f_work.to_string(),
            c.f_total.to_string(),
            r.accumulated.to_string(),
        ];
        row.extend(
            r.q_front
                .iter()
                .chain(&r.q_back)
                .chain(&r.battery)
                .map(f64::to_string),
        );
        row.push(r.p2_objective.map_or_else(String::new, |v| v.to_string()));
        row.push(
            r.admm_iterations
                .map_or_else(String::new, |v| v.to_string()),
        );
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kind: ControllerKind, slots: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            slots,
            ..ExperimentConfig::default()
        };
        cfg.controller.kind = kind;
        cfg
    }

    #[test]
    fn accumulated_is_prefix_sum_of_slot_costs() {
        for kind in [
            ControllerKind::Proposed,
            ControllerKind::Greedy,
            ControllerKind::Admm,
        ] {
            let cfg = config(kind, 40);
            let exp = Experiment::prepare(&cfg).unwrap();
            let rep = simulate(&exp, &cfg.controller).unwrap();
            let params = exp.params_for(kind);
            let mut acc = 0.0;
            for (t, (rec, d)) in rep.records.iter().zip(&rep.decisions).enumerate() {
                acc += slot_cost(d, &exp.trace.slot(t), &params).f_total;
                assert_eq!(rec.accumulated, acc, "{kind} slot {t}");
            }
        }
    }

    #[test]
    fn proposed_run_has_no_violations() {
        let rep = run_experiment(&config(ControllerKind::Proposed, 120)).unwrap();
        assert_eq!(rep.violations, ViolationCounters::default());
        assert!(!rep.breaks_guarantee());
    }

    #[test]
    fn offline_report_matches_solver_total() {
        let cfg = config(ControllerKind::Offline, 3);
        let exp = Experiment::prepare(&cfg).unwrap();
        let rep = simulate(&exp, &cfg.controller).unwrap();
        let init = InitialState::empty(&exp.params, exp.initial_battery());
        let sol = solve_offline(
            &exp.trace,
            &exp.params,
            3,
            &init,
            Backend::Sparse,
            &mut |_| {},
        )
        .unwrap();
        assert!((rep.totals.f_total - sol.total).abs() < 1e-12);
        assert_eq!(rep.violations.total(), 0);
    }

    #[test]
    fn reruns_are_identical() {
        let mut cfg = config(ControllerKind::Admm, 30);
        cfg.controller.admm.parallel = true;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.admm, b.admm);
    }

    #[test]
    fn inadmissible_v_is_an_error_for_bounded_controllers() {
        let mut cfg = config(ControllerKind::Proposed, 5);
        cfg.controller.v = Some(1e9);
        assert!(matches!(
            run_experiment(&cfg),
            Err(HarnessError::Lyapunov(_))
        ));
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(ControllerKind::Admm, 6);
        cfg.output.dir = Some(dir.path().to_path_buf());
        cfg.output.iteration_trace = true;
        run_experiment(&cfg).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 7);
        assert!(
            metrics.starts_with("slot,f_grid,f_batt,f_tran,f_work,f_total,accumulated,q_front_0")
        );
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(summary["controller"], "admm");
        assert!(summary.get("records").is_none());
        assert!(dir.path().join("timing.csv").exists());
        assert!(dir.path().join("admm_iterations.jsonl").exists());
    }

    #[test]
    fn v_fraction_spans_the_interval() {
        let exp = Experiment::prepare(&config(ControllerKind::Proposed, 5)).unwrap();
        let base = exp.lyapunov_for(&exp.config.controller).unwrap();
        assert_eq!(v_from_fraction(&base, 1.0), base.v_max);
        assert!(v_from_fraction(&base, 0.1) < base.v_max);
    }
}
