//! Drift-plus-penalty online controller.
//!
//! Each slot minimizes `g(t) + V f(t)` over the single-slot constraints,
//! where `g` weights the workload and battery flows by virtual queues. In
//! bounded mode the virtual queues are shifted physical queues
//!
//! ```text
//!   h_F = q_F - θ,   h_B = q_B - φ,   l = b - (δ + r V)
//! ```
//!
//! and, with θ, φ, δ, r, V chosen by [`derive_params`], the per-slot optimum
//! keeps every physical queue and battery inside its bounds. Traditional
//! mode rectifies the workload queues at zero instead and carries no such
//! guarantee.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{solve_lp, LinearProgram, LpError, LpStatus};
use crate::layout::SlotLayout;
use crate::model::{
    battery_violations, check_assumptions, slot_cost, step_battery, step_queues, AssumptionCheck,
    BoundViolation, ClusterParams, CostBreakdown, Decision, PriceBounds, SlotInput, SystemState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    #[default]
    Bounded,
    Traditional,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error("assumption {} fails at index {}: margin {}", .0.name, .0.index, .0.margin)]
    Assumption(AssumptionCheck),
    #[error("empty battery target interval at back end {index}: ({lo}, {hi})")]
    EmptyTargetInterval { index: usize, lo: f64, hi: f64 },
    #[error("empty V interval [{lo}, {hi}] (lower bound set by {binding})")]
    EmptyVInterval { lo: f64, hi: f64, binding: String },
    #[error("V = {v} outside the admissible interval [{lo}, {hi}]")]
    InadmissibleV { v: f64, lo: f64, hi: f64 },
    #[error("V must be positive, got {0}")]
    NonPositiveV(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OnlineError {
    #[error("slot {slot}: {source}")]
    Lp {
        slot: usize,
        #[source]
        source: LpError,
    },
    #[error("slot {slot}: per-slot problem reported {status:?}")]
    Status { slot: usize, status: LpStatus },
    #[error("slot {slot}: bounded-mode guarantee broken: {violation}")]
    ProofViolation {
        slot: usize,
        violation: BoundViolation,
    },
}

/// Drift constants bounding the one-slot Lyapunov drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
}

impl DriftConstants {
    pub fn total(&self) -> f64 {
        self.n1 + self.n2 + self.n3
    }
}

pub fn drift_constants(params: &ClusterParams) -> DriftConstants {
    let topo = &params.topology;
    let n1 = 0.5
        * params
            .front
            .iter()
            .enumerate()
            .map(|(j, f)| f.arrival_max.powi(2).max(topo.front_capacity(j).powi(2)))
            .sum::<f64>();
    let n2 = 0.5
        * params
            .back
            .iter()
            .enumerate()
            .map(|(i, b)| b.service_cap.powi(2).max(topo.back_capacity(i).powi(2)))
            .sum::<f64>();
    let n3 = 0.5
        * params
            .back
            .iter()
            .map(|b| {
                (params.eta_charge * b.charge_max)
                    .powi(2)
                    .max((b.discharge_max / params.eta_discharge).powi(2))
            })
            .sum::<f64>();
    DriftConstants { n1, n2, n3 }
}

/// One lower bound on V with the constraint that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VBound {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovParams {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
    pub r: Vec<f64>,
    pub v: f64,
    /// Largest lower bound on V (may be non-positive, in which case any V > 0 works).
    pub v_min: f64,
    pub v_max: f64,
    pub drift: DriftConstants,
    pub mode: QueueMode,
    pub prices: PriceBounds,
    /// Every lower bound on V, for audits.
    pub lower_bounds: Vec<VBound>,
}

/// `num / den` with the convention that a non-positive numerator over a
/// zero denominator imposes nothing.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num <= 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Open interval for the battery target offset `r_i`.
pub fn target_interval(params: &ClusterParams, prices: &PriceBounds, i: usize) -> (f64, f64) {
    let b = &params.back[i];
    let lo = prices.buy_max * params.eta_discharge - b.wear_cost * params.eta_discharge;
    let hi = (prices.sell_min + b.wear_cost) / params.eta_charge;
    (lo, hi)
}

/// Every lower bound on V implied by the parameter choice.
pub fn v_lower_bounds(
    params: &ClusterParams,
    prices: &PriceBounds,
    theta: &[f64],
    phi: &[f64],
    delta: &[f64],
    r: &[f64],
) -> Vec<VBound> {
    let topo = &params.topology;
    let (ec, ed) = (params.eta_charge, params.eta_discharge);
    let mut out = Vec::new();
    for link in &topo.links {
        let (j, i) = (link.front, link.back);
        out.push(VBound {
            label: format!("front-queue floor link ({j},{i})"),
            value: (topo.front_capacity(j) - theta[j] + phi[i]) / link.bandwidth_cost,
        });
        out.push(VBound {
            label: format!("back-queue ceiling link ({j},{i})"),
            value: (params.front[j].queue_cap - params.back[i].queue_cap + topo.back_capacity(i)
                - theta[j]
                + phi[i])
                / link.bandwidth_cost,
        });
    }
    for (i, b) in params.back.iter().enumerate() {
        out.push(VBound {
            label: format!("back-queue floor {i}"),
            value: ratio(b.service_cap - phi[i], prices.sell_min),
        });
        out.push(VBound {
            label: format!("battery ceiling {i}"),
            value: ratio(
                ec * (delta[i] + ec * b.charge_max - b.energy_max),
                prices.sell_min + b.wear_cost - ec * r[i],
            ),
        });
        out.push(VBound {
            label: format!("battery floor {i}"),
            value: ratio(
                (b.energy_min + b.discharge_max / ed - delta[i]) / ed,
                -prices.buy_max + b.wear_cost + r[i] / ed,
            ),
        });
    }
    out
}

/// Upper bound on V from the front-end queue ceilings.
pub fn v_upper_bound(params: &ClusterParams, theta: &[f64]) -> f64 {
    params
        .front
        .iter()
        .enumerate()
        .map(|(j, f)| (f.queue_cap - f.arrival_max - theta[j]) / f.rejection_cost)
        .fold(f64::INFINITY, f64::min)
}

/// Derives θ, φ, δ, r and the admissible V interval; V defaults to its
/// upper end.
pub fn derive_params(
    params: &ClusterParams,
    prices: &PriceBounds,
) -> Result<LyapunovParams, LyapunovError> {
    let report = check_assumptions(params, prices);
    if let Some(fail) = report.failures().next() {
        return Err(LyapunovError::Assumption(fail.clone()));
    }
    let topo = &params.topology;
    let e_max = params.max_service_cap();
    let theta: Vec<f64> = (0..params.num_front())
        .map(|j| e_max + topo.front_capacity(j))
        .collect();
    let phi: Vec<f64> = params.back.iter().map(|b| b.service_cap).collect();
    let delta: Vec<f64> = params
        .back
        .iter()
        .map(|b| b.energy_max - params.eta_charge * b.charge_max)
        .collect();
    let mut r = Vec::with_capacity(params.num_back());
    for i in 0..params.num_back() {
        let (lo, hi) = target_interval(params, prices, i);
        if !(lo < hi) {
            return Err(LyapunovError::EmptyTargetInterval { index: i, lo, hi });
        }
        r.push(0.5 * (lo + hi));
    }
    let lower_bounds = v_lower_bounds(params, prices, &theta, &phi, &delta, &r);
    let binding = lower_bounds
        .iter()
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .cloned()
        .unwrap_or(VBound {
            label: "none".into(),
            value: f64::NEG_INFINITY,
        });
    let v_max = v_upper_bound(params, &theta);
    let v_min = binding.value;
    if !(v_max > 0.0) || v_min > v_max {
        return Err(LyapunovError::EmptyVInterval {
            lo: v_min.max(0.0),
            hi: v_max,
            binding: binding.label,
        });
    }
    Ok(LyapunovParams {
        theta,
        phi,
        delta,
        r,
        v: v_max,
        v_min,
        v_max,
        drift: drift_constants(params),
        mode: QueueMode::Bounded,
        prices: *prices,
        lower_bounds,
    })
}

impl LyapunovParams {
    /// Same parameters with a different V, checked against the admissible
    /// interval in bounded mode.
    pub fn with_v(&self, v: f64) -> Result<Self, LyapunovError> {
        if !(v > 0.0) {
            return Err(LyapunovError::NonPositiveV(v));
        }
        if self.mode == QueueMode::Bounded && (v < self.v_min || v > self.v_max) {
            return Err(LyapunovError::InadmissibleV {
                v,
                lo: self.v_min,
                hi: self.v_max,
            });
        }
        Ok(Self { v, ..self.clone() })
    }

    /// Same parameters with a different V and no admissibility check.
    pub fn with_v_unchecked(&self, v: f64) -> Self {
        Self { v, ..self.clone() }
    }

    pub fn with_mode(&self, mode: QueueMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    /// `(N1 + N2 + N3) / V`.
    pub fn gap_bound(&self) -> Result<f64, LyapunovError> {
        gap_bound(&self.drift, self.v)
    }

    /// Battery levels at which every `l_i` equals `-r_i V`.
    pub fn initial_battery(&self) -> Vec<f64> {
        self.delta.clone()
    }

    pub fn battery_target(&self, i: usize) -> f64 {
        self.delta[i] + self.r[i] * self.v
    }

    /// Initial state with empty queues and freshly computed virtual queues.
    pub fn initial_state(&self, params: &ClusterParams, battery: Vec<f64>) -> SystemState {
        let mut s = SystemState::initial(params, battery);
        self.refresh_bounded_queues(&mut s);
        if self.mode == QueueMode::Traditional {
            s.h_front.iter_mut().for_each(|h| *h = 0.0);
            s.h_back.iter_mut().for_each(|h| *h = 0.0);
        }
        s
    }

    fn refresh_bounded_queues(&self, s: &mut SystemState) {
        s.h_front = s
            .q_front
            .iter()
            .zip(&self.theta)
            .map(|(q, t)| q - t)
            .collect();
        s.h_back = s.q_back.iter().zip(&self.phi).map(|(q, p)| q - p).collect();
        s.l = s
            .battery
            .iter()
            .enumerate()
            .map(|(i, b)| b - self.battery_target(i))
            .collect();
    }
}

pub fn gap_bound(drift: &DriftConstants, v: f64) -> Result<f64, LyapunovError> {
    if !(v > 0.0) {
        return Err(LyapunovError::NonPositiveV(v));
    }
    Ok(drift.total() / v)
}

/// Recomputes the virtual queues of `next` after `decision` moved the
/// physical state from `prev`.
pub fn update_virtual_queues(
    prev: &SystemState,
    next: &mut SystemState,
    decision: &Decision,
    params: &ClusterParams,
    lyap: &LyapunovParams,
) {
    lyap.refresh_bounded_queues(next);
    if lyap.mode == QueueMode::Traditional {
        let topo = &params.topology;
        next.h_front = (0..params.num_front())
            .map(|j| {
                (prev.h_front[j] + decision.accept[j] - decision.outflow_front(topo, j)).max(0.0)
            })
            .collect();
        next.h_back = (0..params.num_back())
            .map(|i| {
                (prev.h_back[i] + decision.inflow_back(topo, i) - decision.process[i]).max(0.0)
            })
            .collect();
    }
}

/// Per-column coefficients of `g(t) + V f(t)`, less the constant
/// `V Σ γ_j A_j(t)`.
pub fn p2_cost_vector(
    layout: &SlotLayout,
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    lyap: &LyapunovParams,
) -> Vec<f64> {
    let mut cost: Vec<f64> = layout
        .cost_vector(input, params)
        .into_iter()
        .map(|c| lyap.v * c)
        .collect();
    for j in 0..params.num_front() {
        cost[layout.a(j)] += state.h_front[j];
    }
    for (l, link) in params.topology.links.iter().enumerate() {
        cost[layout.m(l)] += -state.h_front[link.front] + state.h_back[link.back];
    }
    for i in 0..params.num_back() {
        cost[layout.e(i)] += -state.h_back[i];
        cost[layout.c(i)] += state.l[i] * params.eta_charge;
        cost[layout.d(i)] += -state.l[i] / params.eta_discharge;
    }
    cost
}

/// The per-slot problem with its layout and objective constant.
#[derive(Debug, Clone)]
pub struct SlotProgram {
    pub lp: LinearProgram,
    pub layout: SlotLayout,
    pub constant: f64,
}

impl SlotProgram {
    /// Objective value including the constant.
    pub fn objective_of(&self, decision: &Decision) -> f64 {
        self.lp.objective_at(&self.layout.flatten(decision)) + self.constant
    }
}

pub fn build_p2(
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    lyap: &LyapunovParams,
) -> SlotProgram {
    let layout = SlotLayout::new(params);
    let cost = p2_cost_vector(&layout, state, input, params, lyap);
    let mut lp = LinearProgram::new();
    let offset = layout.add_columns(&mut lp, "", input, params, &cost);
    layout.add_balance_rows(&mut lp, offset, input);
    SlotProgram {
        lp,
        layout,
        constant: lyap.v * SlotLayout::cost_constant(input, params),
    }
}

/// Result of advancing one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub decision: Decision,
    pub next: SystemState,
    pub cost: CostBreakdown,
    /// Optimal value of the per-slot problem, constant included.
    pub objective: f64,
    pub violations: Vec<BoundViolation>,
}

/// Advances the physical state under `decision` and recomputes the virtual
/// queues. Bound violations are returned, not raised.
pub fn advance(
    state: &SystemState,
    decision: Decision,
    input: &SlotInput,
    params: &ClusterParams,
    lyap: &LyapunovParams,
    objective: f64,
) -> StepOutcome {
    let queues = step_queues(&state.q_front, &state.q_back, &decision, &params.topology);
    let battery = step_battery(&state.battery, &decision, params);
    let mut violations = queues.violations(params);
    violations.extend(battery_violations(&battery, params));
    let mut next = SystemState {
        slot: state.slot + 1,
        q_front: queues.front,
        q_back: queues.back,
        battery,
        h_front: Vec::new(),
        h_back: Vec::new(),
        l: Vec::new(),
    };
    update_virtual_queues(state, &mut next, &decision, params, lyap);
    let cost = slot_cost(&decision, input, params);
    StepOutcome {
        decision,
        next,
        cost,
        objective,
        violations,
    }
}

/// Solves the per-slot problem and advances the state. In bounded mode any
/// bound violation is an error; in traditional mode it is reported in the
/// outcome.
pub fn online_step(
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    lyap: &LyapunovParams,
) -> Result<StepOutcome, OnlineError> {
    let slot = state.slot;
    let prog = build_p2(state, input, params, lyap);
    let sol = solve_lp(&prog.lp).map_err(|source| OnlineError::Lp { slot, source })?;
    if sol.status != LpStatus::Optimal {
        return Err(OnlineError::Status {
            slot,
            status: sol.status,
        });
    }
    let decision = prog.layout.extract(&sol.x, 0);
    let out = advance(
        state,
        decision,
        input,
        params,
        lyap,
        sol.objective + prog.constant,
    );
    if lyap.mode == QueueMode::Bounded {
        if let Some(v) = out.violations.first() {
            return Err(OnlineError::ProofViolation {
                slot,
                violation: v.clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackEndParams, ClusterTopology, FrontEndParams};
    use crate::scenario::reference_scenario;
    use approx::assert_abs_diff_eq;

    fn single(link: f64) -> ClusterParams {
        ClusterParams {
            topology: ClusterTopology::fully_linked(1, 1, link, 0.01, 0.0),
            front: vec![FrontEndParams {
                queue_cap: 200.0,
                rejection_cost: 0.5,
                arrival_max: 4.0,
            }],
            back: vec![BackEndParams {
                queue_cap: 200.0,
                service_cap: 10.0,
                charge_max: 4.0,
                discharge_max: 4.5,
                energy_min: 10.0,
                energy_max: 85_000.0,
                wear_cost: 0.04,
            }],
            eta_charge: 0.9,
            eta_discharge: 0.95,
        }
    }

    const PRICES: PriceBounds = PriceBounds {
        buy_max: 0.09,
        sell_min: 0.015,
    };

    #[test]
    fn recipe_values() {
        let lp = derive_params(&single(2.0), &PRICES).unwrap();
        assert_eq!(lp.theta, vec![12.0]);
        assert_abs_diff_eq!(lp.delta[0], 84_996.4, epsilon = 1e-9);
        assert_eq!(lp.phi, vec![10.0]);
        assert_abs_diff_eq!(lp.v, (200.0 - 4.0 - 12.0) / 0.5, epsilon = 1e-12);
        let (lo, hi) = target_interval(&single(2.0), &PRICES, 0);
        assert!(lo < lp.r[0] && lp.r[0] < hi);
    }

    #[test]
    fn arbitrage_prices_are_rejected() {
        let mut p = single(2.0);
        p.back[0].wear_cost = 0.0;
        let err = derive_params(
            &p,
            &PriceBounds {
                buy_max: 1.0,
                sell_min: 0.1,
            },
        )
        .unwrap_err();
        assert!(matches!(err, LyapunovError::Assumption(ref c) if c.name == "A4"));
    }

    #[test]
    fn empty_v_interval_is_reported() {
        let mut p = single(2.0);
        p.front[0].queue_cap = 16.5;
        p.back[0].queue_cap = 12.5;
        assert!(matches!(
            derive_params(&p, &PRICES),
            Err(LyapunovError::EmptyVInterval { .. })
        ));
    }

    #[test]
    fn drift_constant_examples() {
        let mut p = single(3.0);
        p.back[0].service_cap = 5.0;
        p.topology.links[0].capacity = 3.0;
        let d = drift_constants(&p);
        assert_abs_diff_eq!(d.n1, 8.0);
        p.topology.links[0].capacity = 5.0;
        assert_abs_diff_eq!(drift_constants(&p).n2, 12.5);
        p.back[0].charge_max = 0.0;
        p.back[0].discharge_max = 0.0;
        assert_eq!(drift_constants(&p).n3, 0.0);
    }

    #[test]
    fn gap_bound_arithmetic() {
        let d = DriftConstants {
            n1: 8.0,
            n2: 12.5,
            n3: 0.0,
        };
        assert_abs_diff_eq!(gap_bound(&d, 10.0).unwrap(), 2.05, epsilon = 1e-12);
        assert!(gap_bound(&d, 1e9).unwrap() < 1e-7);
        assert!(gap_bound(&d, 0.0).is_err());
    }

    #[test]
    fn bounded_queue_shift() {
        let p = single(2.0);
        let mut lyap = derive_params(&p, &PRICES).unwrap();
        lyap.theta = vec![3.0];
        let s = lyap.initial_state(&p, vec![lyap.battery_target(0)]);
        assert_eq!(s.h_front, vec![-3.0]);
        assert_eq!(s.l, vec![0.0]);
    }

    #[test]
    fn traditional_queue_rectifies() {
        let p = single(5.0);
        let lyap = derive_params(&p, &PRICES)
            .unwrap()
            .with_mode(QueueMode::Traditional);
        let prev = lyap.initial_state(&p, lyap.initial_battery());
        let mut d = Decision::zeros(&p);
        d.accept[0] = 2.0;
        d.transfer[0] = 5.0;
        let mut next = prev.clone();
        next.q_front = vec![-3.0];
        update_virtual_queues(&prev, &mut next, &d, &p, &lyap);
        assert_eq!(next.h_front, vec![0.0]);
    }

    #[test]
    fn zero_inputs_at_target_are_a_fixed_point() {
        let p = single(2.0);
        let lyap = derive_params(&p, &PRICES).unwrap();
        // Keep the target inside the battery range so it is reachable.
        let lyap = lyap.with_v(1.0).unwrap();
        let s = lyap.initial_state(&p, vec![lyap.battery_target(0)]);
        let input = SlotInput::with_midpoint_trade(vec![0.0], vec![0.0], vec![0.05], vec![0.02]);
        let out = online_step(&s, &input, &p, &lyap).unwrap();
        assert_eq!(out.decision, Decision::zeros(&p));
        assert_eq!(out.next.q_front, s.q_front);
        assert_eq!(out.next.battery, s.battery);
    }

    #[test]
    fn zero_queues_reduce_objective_to_scaled_cost() {
        let (p, t) = reference_scenario(3, 10);
        let lyap = derive_params(&p, &t.price_bounds()).unwrap();
        let mut s = lyap.initial_state(&p, lyap.initial_battery());
        s.h_front.iter_mut().for_each(|h| *h = 0.0);
        s.h_back.iter_mut().for_each(|h| *h = 0.0);
        s.l.iter_mut().for_each(|l| *l = 0.0);
        let input = t.slot(4);
        let prog = build_p2(&s, &input, &p, &lyap);
        let layout = SlotLayout::new(&p);
        let f: Vec<f64> = layout
            .cost_vector(&input, &p)
            .iter()
            .map(|c| c * lyap.v)
            .collect();
        assert_eq!(prog.lp.cost(), &f[..]);
    }

    #[test]
    fn reference_trajectory_stays_in_bounds() {
        let (p, t) = reference_scenario(11, 300);
        let lyap = derive_params(&p, &t.price_bounds()).unwrap();
        let mut s = lyap.initial_state(&p, lyap.initial_battery());
        for k in 0..t.len() {
            s = online_step(&s, &t.slot(k), &p, &lyap).unwrap().next;
        }
    }
}
