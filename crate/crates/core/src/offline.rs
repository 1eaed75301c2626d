//! Benchmarks with hindsight or without lookahead: the full-horizon linear
//! program over a known trace, and a greedy threshold-charging policy.

use thiserror::Error;

use crate::kernel::{solve_lp, solve_lp_sparse, LinearProgram, LpError, LpStatus};
use crate::layout::SlotLayout;
use crate::model::{slot_cost, ClusterParams, CostBreakdown, Decision, SlotInput, SystemState};
use crate::traces::TraceSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OfflineError {
    #[error("trace has {have} slots, {need} requested")]
    TraceTooShort { have: usize, need: usize },
    #[error("horizon program: {0}")]
    Lp(#[from] LpError),
    #[error("horizon program is {0:?}")]
    Status(LpStatus),
    #[error("slot {slot}: greedy problem is {status:?}")]
    InfeasibleSlot { slot: usize, status: LpStatus },
}

/// Starting point of a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub q_front: Vec<f64>,
    pub q_back: Vec<f64>,
    pub battery: Vec<f64>,
}

impl InitialState {
    /// Empty queues and the given battery levels.
    pub fn empty(params: &ClusterParams, battery: Vec<f64>) -> Self {
        Self {
            q_front: vec![0.0; params.num_front()],
            q_back: vec![0.0; params.num_back()],
            battery,
        }
    }
}

/// Column and row counts of a horizon program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Census {
    pub decision_cols: usize,
    pub state_cols: usize,
    pub balance_rows: usize,
    pub dynamics_rows: usize,
}

/// The horizon program: per-slot decision blocks, end-of-slot state columns
/// bounded by the queue and battery limits, and the dynamics rows linking
/// consecutive slots.
#[derive(Debug, Clone)]
pub struct HorizonProblem {
    pub lp: LinearProgram,
    pub layout: SlotLayout,
    pub slots: usize,
    pub census: Census,
    /// Sum over slots of the constant part of the slot cost.
    pub constant: f64,
    decision_offsets: Vec<usize>,
}

impl HorizonProblem {
    pub fn decision_offset(&self, t: usize) -> usize {
        self.decision_offsets[t]
    }
}

/// Builds the horizon program over the first `slots` slots of `trace`.
pub fn build_p1(
    trace: &TraceSet,
    params: &ClusterParams,
    slots: usize,
    init: &InitialState,
) -> Result<HorizonProblem, OfflineError> {
    if trace.len() < slots {
        return Err(OfflineError::TraceTooShort {
            have: trace.len(),
            need: slots,
        });
    }
    let layout = SlotLayout::new(params);
    let (ni, nj) = (params.num_back(), params.num_front());
    let topo = &params.topology;
    let mut lp = LinearProgram::new();
    let mut decision_offsets = Vec::with_capacity(slots);
    let mut constant = 0.0;
    // Columns of the state at the start of the current slot; None means the
    // value is the fixed initial condition.
    let mut prev_front: Vec<Option<usize>> = vec![None; nj];
    let mut prev_back: Vec<Option<usize>> = vec![None; ni];
    let mut prev_batt: Vec<Option<usize>> = vec![None; ni];
    let mut dynamics_rows = 0;
    let mut state_cols = 0;

    for t in 0..slots {
        let input = trace.slot(t);
        let cost = layout.cost_vector(&input, params);
        constant += SlotLayout::cost_constant(&input, params);
        let tag = format!("@{t}");
        let off = layout.add_columns(&mut lp, &tag, &input, params, &cost);
        decision_offsets.push(off);
        layout.add_balance_rows(&mut lp, off, &input);

        let link_row = |lp: &mut LinearProgram,
                        next: usize,
                        prev: Option<usize>,
                        init: f64,
                        mut terms: Vec<(usize, f64)>| {
            terms.push((next, 1.0));
            let rhs = match prev {
                Some(col) => {
                    terms.push((col, -1.0));
                    0.0
                }
                None => init,
            };
            lp.add_eq(terms, rhs);
        };
        for (j, f) in params.front.iter().enumerate() {
            let next = lp.add_var(format!("qF@{}[{j}]", t + 1), 0.0, 0.0, f.queue_cap);
            let mut terms = vec![(off + layout.a(j), -1.0)];
            terms.extend(topo.links_of_front(j).map(|l| (off + layout.m(l), 1.0)));
            link_row(&mut lp, next, prev_front[j], init.q_front[j], terms);
            prev_front[j] = Some(next);
        }
        for (i, b) in params.back.iter().enumerate() {
            let next = lp.add_var(format!("qB@{}[{i}]", t + 1), 0.0, 0.0, b.queue_cap);
            let mut terms = vec![(off + layout.e(i), 1.0)];
            terms.extend(topo.links_of_back(i).map(|l| (off + layout.m(l), -1.0)));
            link_row(&mut lp, next, prev_back[i], init.q_back[i], terms);
            prev_back[i] = Some(next);
        }
        for (i, b) in params.back.iter().enumerate() {
            let next = lp.add_var(format!("b@{}[{i}]", t + 1), 0.0, b.energy_min, b.energy_max);
            let terms = vec![
                (off + layout.c(i), -params.eta_charge),
                (off + layout.d(i), 1.0 / params.eta_discharge),
            ];
            link_row(&mut lp, next, prev_batt[i], init.battery[i], terms);
            prev_batt[i] = Some(next);
        }
        dynamics_rows += nj + 2 * ni;
        state_cols += nj + 2 * ni;
    }
    let census = Census {
        decision_cols: slots * layout.width(),
        state_cols,
        balance_rows: slots * ni,
        dynamics_rows,
    };
    Ok(HorizonProblem {
        lp,
        layout,
        slots,
        census,
        constant,
        decision_offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Sparse LU simplex; the default for horizons.
    #[default]
    Sparse,
    /// The dense bounded simplex; practical only for short horizons.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfflinePhase {
    Built { rows: usize, cols: usize },
    Solved { iterations: usize },
    Extracted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSolution {
    pub decisions: Vec<Decision>,
    pub costs: Vec<CostBreakdown>,
    /// Sum of per-slot totals.
    pub total: f64,
    pub lp_iterations: usize,
}

impl OfflineSolution {
    pub fn average(&self) -> f64 {
        if self.costs.is_empty() {
            0.0
        } else {
            self.total / self.costs.len() as f64
        }
    }
}

/// Solves the horizon program and returns per-slot decisions and costs.
pub fn solve_offline(
    trace: &TraceSet,
    params: &ClusterParams,
    slots: usize,
    init: &InitialState,
    backend: Backend,
    progress: &mut dyn FnMut(OfflinePhase),
) -> Result<OfflineSolution, OfflineError> {
    let prob = build_p1(trace, params, slots, init)?;
    progress(OfflinePhase::Built {
        rows: prob.lp.num_rows(),
        cols: prob.lp.num_vars(),
    });
    let sol = match backend {
        Backend::Sparse => solve_lp_sparse(&prob.lp)?,
        Backend::Dense => solve_lp(&prob.lp)?,
    };
    if sol.status != LpStatus::Optimal {
        return Err(OfflineError::Status(sol.status));
    }
    progress(OfflinePhase::Solved {
        iterations: sol.iterations,
    });
    let mut decisions = Vec::with_capacity(slots);
    let mut costs = Vec::with_capacity(slots);
    for t in 0..slots {
        let d = prob.layout.extract(&sol.x, prob.decision_offset(t));
        costs.push(slot_cost(&d, &trace.slot(t), params));
        decisions.push(d);
    }
    progress(OfflinePhase::Extracted);
    let total = costs.iter().map(|c| c.f_total).sum();
    Ok(OfflineSolution {
        decisions,
        costs,
        total,
        lp_iterations: sol.iterations,
    })
}

/// Output of one greedy slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyStep {
    pub decision: Decision,
    /// Back ends whose forced charge was cut to the battery headroom.
    pub reduced_charge: Vec<usize>,
}

/// Greedy policy: back ends whose buy price is below `threshold` charge at
/// full rate (or up to the battery headroom), then the slot cost is
/// minimized subject to the slot's constraints and next-state bounds.
pub fn greedy_step(
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    threshold: f64,
) -> Result<GreedyStep, OfflineError> {
    let layout = SlotLayout::new(params);
    let topo = &params.topology;
    let mut lp = LinearProgram::new();
    let cost = layout.cost_vector(input, params);
    let off = layout.add_columns(&mut lp, "", input, params, &cost);
    layout.add_balance_rows(&mut lp, off, input);

    let mut reduced_charge = Vec::new();
    for (i, b) in params.back.iter().enumerate() {
        if input.price_buy[i] < threshold {
            let headroom = ((b.energy_max - state.battery[i]) / params.eta_charge).max(0.0);
            let c = if b.charge_max > headroom {
                reduced_charge.push(i);
                headroom
            } else {
                b.charge_max
            };
            lp.set_bounds(off + layout.c(i), c, c);
        }
    }
    for (j, f) in params.front.iter().enumerate() {
        let next = lp.add_var(format!("qF'[{j}]"), 0.0, 0.0, f.queue_cap);
        let mut terms = vec![(next, 1.0), (off + layout.a(j), -1.0)];
        terms.extend(topo.links_of_front(j).map(|l| (off + layout.m(l), 1.0)));
        lp.add_eq(terms, state.q_front[j]);
    }
    for (i, b) in params.back.iter().enumerate() {
        let next = lp.add_var(format!("qB'[{i}]"), 0.0, 0.0, b.queue_cap);
        let mut terms = vec![(next, 1.0), (off + layout.e(i), 1.0)];
        terms.extend(topo.links_of_back(i).map(|l| (off + layout.m(l), -1.0)));
        lp.add_eq(terms, state.q_back[i]);
    }
    for (i, b) in params.back.iter().enumerate() {
        let next = lp.add_var(format!("b'[{i}]"), 0.0, b.energy_min, b.energy_max);
        lp.add_eq(
            vec![
                (next, 1.0),
                (off + layout.c(i), -params.eta_charge),
                (off + layout.d(i), 1.0 / params.eta_discharge),
            ],
            state.battery[i],
        );
    }
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(OfflineError::InfeasibleSlot {
            slot: state.slot,
            status: sol.status,
        });
    }
    Ok(GreedyStep {
        decision: layout.extract(&sol.x, off),
        reduced_charge,
    })
}
