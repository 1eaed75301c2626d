//! Experiment drivers behind the browser exports. They avoid wall-clock
//! timing so they run unchanged in the browser.

use dcc_core::admm::{run_admm, AdmmConfig, AdmmError};
use dcc_core::harness::solve_slot;
use dcc_core::lyapunov::{
    advance, build_p2, derive_params, LyapunovError, LyapunovParams, OnlineError, QueueMode,
};
use dcc_core::model::{ClusterParams, CostBreakdown, SystemState};
use dcc_core::scenario::{adopt_arrival_bounds, reference_params, reference_shape};
use dcc_core::traces::{synth_generate, SynthShape, TraceSet};
use serde::Serialize;

/// Longest horizon the page may request.
pub const MAX_SLOTS: usize = 2_000;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Online(#[from] OnlineError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
}

fn check_slots(slots: usize) -> Result<(), DemoError> {
    if slots == 0 || slots > MAX_SLOTS {
        return Err(DemoError::Input(format!(
            "slots must lie in 1..={MAX_SLOTS}, got {slots}"
        )));
    }
    Ok(())
}

fn scenario(shape: &SynthShape, slots: usize, seed: u64) -> (ClusterParams, TraceSet) {
    let mut params = reference_params();
    let trace = synth_generate(seed, slots, params.num_front(), params.num_back(), shape);
    adopt_arrival_bounds(&mut params, &trace);
    (params, trace)
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub v: f64,
    /// Largest front-end queue after each slot.
    pub front_queue: Vec<f64>,
    /// Mean battery level after each slot.
    pub battery: Vec<f64>,
    pub cost: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueueComparison {
    pub queue_cap: f64,
    pub v_max: f64,
    pub bounded: Trajectory,
    pub traditional: Trajectory,
}

fn trajectory(
    params: &ClusterParams,
    trace: &TraceSet,
    lyap: &LyapunovParams,
    start: SystemState,
) -> Result<Trajectory, DemoError> {
    let mut s = start;
    let mut out = Trajectory {
        v: lyap.v,
        front_queue: Vec::with_capacity(trace.len()),
        battery: Vec::with_capacity(trace.len()),
        cost: 0.0,
        violations: 0,
    };
    for t in 0..trace.len() {
        let input = trace.slot(t);
        let (d, obj) = solve_slot(&s, &input, params, lyap)?;
        let step = advance(&s, d, &input, params, lyap, obj);
        out.cost += step.cost.f_total;
        out.violations += step.violations.len();
        s = step.next;
        out.front_queue
            .push(s.q_front.iter().copied().fold(0.0, f64::max));
        out.battery
            .push(s.battery.iter().sum::<f64>() / s.battery.len() as f64);
    }
    Ok(out)
}

/// Runs both controllers on the same trace. The traditional controller uses
/// `v_scale * V_max`; the bounded one the same V capped at `V_max`.
pub fn queue_comparison(
    arrival_base: f64,
    v_scale: f64,
    slots: usize,
    seed: u64,
) -> Result<QueueComparison, DemoError> {
    check_slots(slots)?;
    if !(arrival_base >= 0.0 && v_scale > 0.0) {
        return Err(DemoError::Input(
            "arrival level must be non-negative and the V scale positive".into(),
        ));
    }
    let shape = SynthShape {
        arrival_base,
        ..reference_shape()
    };
    let (params, trace) = scenario(&shape, slots, seed);
    let base = derive_params(&params, &trace.price_bounds())?;
    let bounded = base.with_v(base.v_max * v_scale.min(1.0))?;
    let traditional = base
        .with_mode(QueueMode::Traditional)
        .with_v_unchecked(base.v_max * v_scale);
    let b0 = base.initial_battery();
    Ok(QueueComparison {
        queue_cap: params
            .front
            .iter()
            .map(|f| f.queue_cap)
            .fold(f64::INFINITY, f64::min),
        v_max: base.v_max,
        bounded: trajectory(
            &params,
            &trace,
            &bounded,
            bounded.initial_state(&params, b0.clone()),
        )?,
        traditional: trajectory(
            &params,
            &trace,
            &traditional,
            traditional.initial_state(&params, b0),
        )?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub v: f64,
    pub totals: CostBreakdown,
}

/// `points` values of V spread over the admissible interval. Batteries start
/// half full so they have room to move either way.
pub fn v_sweep(points: usize, slots: usize, seed: u64) -> Result<Vec<SweepPoint>, DemoError> {
    check_slots(slots)?;
    if !(2..=20).contains(&points) {
        return Err(DemoError::Input(format!(
            "points must lie in 2..=20, got {points}"
        )));
    }
    let (params, trace) = scenario(&reference_shape(), slots, seed);
    let base = derive_params(&params, &trace.price_bounds())?;
    let lo = base.v_min.max(0.0);
    let mid: Vec<f64> = params
        .back
        .iter()
        .map(|b| 0.5 * (b.energy_min + b.energy_max))
        .collect();
    (1..=points)
        .map(|n| {
            let fraction = n as f64 / points as f64;
            let lyap = base.with_v(lo + fraction * (base.v_max - lo))?;
            let mut s = lyap.initial_state(&params, mid.clone());
            let mut totals = CostBreakdown::default();
            for t in 0..trace.len() {
                let input = trace.slot(t);
                let (d, obj) = solve_slot(&s, &input, &params, &lyap)?;
                let step = advance(&s, d, &input, &params, &lyap, obj);
                totals = totals.add(&step.cost);
                s = step.next;
            }
            Ok(SweepPoint {
                fraction,
                v: lyap.v,
                totals,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Convergence {
    pub iterations: usize,
    pub truncated: bool,
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub central_objective: f64,
    pub admm_objective: f64,
}

/// Follows the central controller for `slot` slots, then runs ADMM on the
/// next one.
pub fn admm_convergence(
    slot: usize,
    rho: f64,
    max_iter: usize,
    seed: u64,
) -> Result<Convergence, DemoError> {
    check_slots(slot + 1)?;
    let (params, trace) = scenario(&reference_shape(), slot + 1, seed);
    let lyap = derive_params(&params, &trace.price_bounds())?;
    let mut s = lyap.initial_state(&params, lyap.initial_battery());
    for t in 0..slot {
        let input = trace.slot(t);
        let (d, obj) = solve_slot(&s, &input, &params, &lyap)?;
        s = advance(&s, d, &input, &params, &lyap, obj).next;
    }
    let input = trace.slot(slot);
    let (_, central) = solve_slot(&s, &input, &params, &lyap)?;
    let cfg = AdmmConfig {
        rho,
        max_iter,
        record_iterations: true,
        parallel: false,
        ..AdmmConfig::default()
    };
    let (d, report, _) = run_admm(&s, &input, &params, &lyap, &cfg, None)?;
    Ok(Convergence {
        iterations: report.iterations,
        truncated: report.truncated,
        primal: report
            .records
            .iter()
            .map(|r| r.primal_m.max(r.primal_u))
            .collect(),
        dual: report.records.iter().map(|r| r.dual).collect(),
        central_objective: central,
        admm_objective: build_p2(&s, &input, &params, &lyap).objective_of(&d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overload_separates_the_two_controllers() {
        let c = queue_comparison(9.0, 1.4, 150, 1).unwrap();
        assert_eq!(c.bounded.violations, 0);
        assert!(c
            .bounded
            .front_queue
            .iter()
            .all(|&q| q <= c.queue_cap + 1e-9));
        assert!(c.traditional.violations > 0);
        assert!(c.traditional.front_queue.iter().any(|&q| q > c.queue_cap));
        assert_eq!(c.bounded.front_queue.len(), 150);
    }

    #[test]
    fn sweep_spans_the_admissible_interval() {
        let pts = v_sweep(4, 60, 2).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts.windows(2).all(|w| w[0].v < w[1].v));
        assert_eq!(pts[3].fraction, 1.0);
        assert!(v_sweep(1, 60, 2).is_err());
    }

    #[test]
    fn convergence_trace_ends_at_the_central_value() {
        let c = admm_convergence(10, 1.0, 100_000, 3).unwrap();
        assert!(!c.truncated);
        assert_eq!(c.primal.len(), c.iterations);
        assert!(
            (c.admm_objective - c.central_objective).abs()
                <= 1e-3 * c.central_objective.abs().max(1.0)
        );
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(queue_comparison(2.0, 1.0, 0, 1).is_err());
        assert!(queue_comparison(-1.0, 1.0, 10, 1).is_err());
        assert!(admm_convergence(MAX_SLOTS, 1.0, 10, 1).is_err());
        assert!(admm_convergence(0, -1.0, 10, 1).is_err());
    }

    #[test]
    fn results_serialize_to_json() {
        let c = admm_convergence(0, 1.0, 20, 1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert!(v["primal"].is_array());
    }
}
