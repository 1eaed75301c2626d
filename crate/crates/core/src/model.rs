//! Domain model of the cluster: topology, per-site parameters, per-slot
//! inputs and decisions, queue and battery dynamics, and cost accounting.
//!
//! Units are normalized on ingestion: energies in kWh, workloads in abstract
//! request units (one unit of processed workload draws one unit of energy),
//! prices in $/kWh. All rates are per-slot quantities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used for box and equality feasibility checks.
pub const FEAS_TOL: f64 = 1e-6;

/// Slack allowed on physical queue and battery bounds when stepping state.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Dense row-major square matrix, used for the pairwise sharing quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(ModelError::Dimension(format!(
                "expected {n} columns in every row of a {n}x{n} matrix"
            )));
        }
        Ok(Self {
            n,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// Matrix with every off-diagonal entry equal to `value`.
    pub fn uniform_off_diagonal(n: usize, value: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                if i != k {
                    m.set(i, k, value);
                }
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.n + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, k: usize, value: f64) {
        self.data[i * self.n + k] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// Largest |a_ik - b_ik| over off-diagonal entries.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sum of squared entry differences.
    pub fn dist_sq(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Exact antisymmetry: u_ik == -u_ki bit-for-bit and a zero diagonal.
    pub fn is_antisymmetric(&self) -> bool {
        (0..self.n).all(|i| {
            self.get(i, i) == 0.0 && (0..self.n).all(|k| self.get(i, k) == -self.get(k, i))
        })
    }
}

/// A front-end to back-end transfer link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub front: usize,
    pub back: usize,
    /// Transfer capacity per slot.
    pub capacity: f64,
    /// Bandwidth cost per unit of transferred workload.
    pub bandwidth_cost: f64,
}

/// Bipartite front-end/back-end link structure plus pairwise sharing capacities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub back_ends: usize,
    pub front_ends: usize,
    pub links: Vec<Link>,
    /// Symmetric sharing capacity between back ends, zero diagonal.
    pub share_cap: SquareMatrix,
}

impl ClusterTopology {
    /// Every front end linked to every back end with the same capacity and cost.
    pub fn fully_linked(
        back_ends: usize,
        front_ends: usize,
        capacity: f64,
        bandwidth_cost: f64,
        share_cap: f64,
    ) -> Self {
        let links = (0..front_ends)
            .flat_map(|j| {
                (0..back_ends).map(move |i| Link {
                    front: j,
                    back: i,
                    capacity,
                    bandwidth_cost,
                })
            })
            .collect();
        Self {
            back_ends,
            front_ends,
            links,
            share_cap: SquareMatrix::uniform_off_diagonal(back_ends, share_cap),
        }
    }

    /// Link indices leaving front end `j`.
    pub fn links_of_front(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.links
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.front == j)
            .map(|(idx, _)| idx)
    }

    /// Link indices entering back end `i`.
    pub fn links_of_back(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.links
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.back == i)
            .map(|(idx, _)| idx)
    }

    /// Total transfer capacity leaving front end `j`.
    pub fn front_capacity(&self, j: usize) -> f64 {
        self.links_of_front(j).map(|l| self.links[l].capacity).sum()
    }

    /// Total transfer capacity entering back end `i`.
    pub fn back_capacity(&self, i: usize) -> f64 {
        self.links_of_back(i).map(|l| self.links[l].capacity).sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidParams(msg));
        if self.back_ends == 0 || self.front_ends == 0 {
            return bad("cluster needs at least one front end and one back end".into());
        }
        if self.share_cap.dim() != self.back_ends {
            return bad(format!(
                "sharing capacity matrix is {0}x{0}, expected {1}x{1}",
                self.share_cap.dim(),
                self.back_ends
            ));
        }
        for (idx, l) in self.links.iter().enumerate() {
            if l.front >= self.front_ends || l.back >= self.back_ends {
                return bad(format!("link {idx} references a missing node"));
            }
            if !(l.capacity > 0.0) {
                return bad(format!("link {idx} has non-positive capacity"));
            }
            if !(l.bandwidth_cost > 0.0) {
                return bad(format!("link {idx} has non-positive bandwidth cost"));
            }
        }
        for (a, la) in self.links.iter().enumerate() {
            if self.links[..a]
                .iter()
                .any(|lb| lb.front == la.front && lb.back == la.back)
            {
                return bad(format!("link {a} duplicates an earlier link"));
            }
        }
        for j in 0..self.front_ends {
            if self.links_of_front(j).next().is_none() {
                return bad(format!("front end {j} has no link"));
            }
        }
        for i in 0..self.back_ends {
            if self.links_of_back(i).next().is_none() {
                return bad(format!("back end {i} has no link"));
            }
        }
        for i in 0..self.back_ends {
            if self.share_cap.get(i, i) != 0.0 {
                return bad(format!("sharing capacity diagonal entry {i} is non-zero"));
            }
            for k in 0..self.back_ends {
                let v = self.share_cap.get(i, k);
                if !(v >= 0.0) || v != self.share_cap.get(k, i) {
                    return bad(format!(
                        "sharing capacity ({i},{k}) must be non-negative and symmetric"
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEndParams {
    /// Queue capacity Q^F.
    pub queue_cap: f64,
    /// Disutility per rejected workload unit.
    pub rejection_cost: f64,
    /// Upper bound on arrivals per slot.
    pub arrival_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackEndParams {
    /// Queue capacity Q^B.
    pub queue_cap: f64,
    /// Processing capacity per slot.
    pub service_cap: f64,
    pub charge_max: f64,
    pub discharge_max: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    /// Battery wear cost per unit of charge or discharge.
    pub wear_cost: f64,
}

/// Everything static about the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub topology: ClusterTopology,
    pub front: Vec<FrontEndParams>,
    pub back: Vec<BackEndParams>,
    pub eta_charge: f64,
    pub eta_discharge: f64,
}

impl ClusterParams {
    pub fn num_back(&self) -> usize {
        self.topology.back_ends
    }

    pub fn num_front(&self) -> usize {
        self.topology.front_ends
    }

    pub fn num_links(&self) -> usize {
        self.topology.links.len()
    }

    pub fn max_service_cap(&self) -> f64 {
        self.back.iter().map(|b| b.service_cap).fold(0.0, f64::max)
    }

    /// Same cluster with every sharing capacity multiplied by `scale`.
    pub fn with_share_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        out.topology.share_cap = self.topology.share_cap.scaled(scale);
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.topology.validate()?;
        let bad = |msg: String| Err(ModelError::InvalidParams(msg));
        if self.front.len() != self.num_front() || self.back.len() != self.num_back() {
            return bad("parameter blocks do not match the topology size".into());
        }
        for (j, f) in self.front.iter().enumerate() {
            if !(f.queue_cap > 0.0) || !(f.rejection_cost > 0.0) || !(f.arrival_max >= 0.0) {
                return bad(format!(
                    "front end {j}: need queue_cap > 0, rejection_cost > 0, arrival_max >= 0"
                ));
            }
        }
        for (i, b) in self.back.iter().enumerate() {
            if !(b.queue_cap > 0.0) || !(b.service_cap > 0.0) {
                return bad(format!(
                    "back end {i}: need queue_cap > 0 and service_cap > 0"
                ));
            }
            if !(b.charge_max >= 0.0) || !(b.discharge_max >= 0.0) {
                return bad(format!("back end {i}: negative battery rate"));
            }
            if !(b.energy_min < b.energy_max) {
                return bad(format!("back end {i}: energy_min must be below energy_max"));
            }
            if !(b.wear_cost >= 0.0) {
                return bad(format!("back end {i}: negative wear cost"));
            }
        }
        for (name, eta) in [
            ("eta_charge", self.eta_charge),
            ("eta_discharge", self.eta_discharge),
        ] {
            if !(eta > 0.0 && eta <= 1.0) {
                return bad(format!("{name} must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Declared worst-case prices over the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBounds {
    pub buy_max: f64,
    pub sell_min: f64,
}

/// Exogenous data for one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotInput {
    pub arrivals: Vec<f64>,
    pub pv: Vec<f64>,
    pub price_buy: Vec<f64>,
    pub price_sell: Vec<f64>,
    /// Price of energy shared between back ends.
    pub price_trade: f64,
}

impl SlotInput {
    /// Builds an input whose sharing price is the midpoint of
    /// `[max_i p_sell_i, min_i p_buy_i]`.
    pub fn with_midpoint_trade(
        arrivals: Vec<f64>,
        pv: Vec<f64>,
        price_buy: Vec<f64>,
        price_sell: Vec<f64>,
    ) -> Self {
        let lo = price_sell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hi = price_buy.iter().copied().fold(f64::INFINITY, f64::min);
        let price_trade = if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            0.0
        };
        Self {
            arrivals,
            pv,
            price_buy,
            price_sell,
            price_trade,
        }
    }

    pub fn zeros(params: &ClusterParams) -> Self {
        let (i, j) = (params.num_back(), params.num_front());
        Self {
            arrivals: vec![0.0; j],
            pv: vec![0.0; i],
            price_buy: vec![0.0; i],
            price_sell: vec![0.0; i],
            price_trade: 0.0,
        }
    }

    pub fn validate(&self, params: &ClusterParams) -> Result<(), ModelError> {
        let (ni, nj) = (params.num_back(), params.num_front());
        if self.arrivals.len() != nj
            || self.pv.len() != ni
            || self.price_buy.len() != ni
            || self.price_sell.len() != ni
        {
            return Err(ModelError::Dimension(
                "slot input does not match the cluster".into(),
            ));
        }
        let bad = |msg: String| Err(ModelError::InvalidParams(msg));
        if self.arrivals.iter().any(|a| !(*a >= 0.0)) || self.pv.iter().any(|z| !(*z >= 0.0)) {
            return bad("arrivals and PV must be non-negative".into());
        }
        for i in 0..ni {
            if self.price_sell[i] > self.price_buy[i] {
                return bad(format!("back end {i}: sell price exceeds buy price"));
            }
        }
        let max_sell = self
            .price_sell
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let min_buy = self.price_buy.iter().copied().fold(f64::INFINITY, f64::min);
        if self.price_trade < max_sell - FEAS_TOL || self.price_trade > min_buy + FEAS_TOL {
            return bad("sharing price outside [max sell, min buy]".into());
        }
        Ok(())
    }
}

/// Physical and virtual queue state at the start of a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub slot: usize,
    pub q_front: Vec<f64>,
    pub q_back: Vec<f64>,
    pub battery: Vec<f64>,
    pub h_front: Vec<f64>,
    pub h_back: Vec<f64>,
    pub l: Vec<f64>,
}

impl SystemState {
    /// Empty queues, the given battery levels, zero virtual queues.
    pub fn initial(params: &ClusterParams, battery: Vec<f64>) -> Self {
        let (ni, nj) = (params.num_back(), params.num_front());
        Self {
            slot: 0,
            q_front: vec![0.0; nj],
            q_back: vec![0.0; ni],
            battery,
            h_front: vec![0.0; nj],
            h_back: vec![0.0; ni],
            l: vec![0.0; ni],
        }
    }
}

/// All per-slot controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Accepted workload per front end.
    pub accept: Vec<f64>,
    /// Transferred workload per link.
    pub transfer: Vec<f64>,
    /// Processed workload per back end.
    pub process: Vec<f64>,
    pub buy: Vec<f64>,
    pub sell: Vec<f64>,
    pub charge: Vec<f64>,
    pub discharge: Vec<f64>,
    /// u_ik: energy back end i receives from back end k.
    pub share: SquareMatrix,
}

impl Decision {
    pub fn zeros(params: &ClusterParams) -> Self {
        let (ni, nj, nl) = (params.num_back(), params.num_front(), params.num_links());
        Self {
            accept: vec![0.0; nj],
            transfer: vec![0.0; nl],
            process: vec![0.0; ni],
            buy: vec![0.0; ni],
            sell: vec![0.0; ni],
            charge: vec![0.0; ni],
            discharge: vec![0.0; ni],
            share: SquareMatrix::zeros(ni),
        }
    }

    /// Workload leaving front end `j`.
    pub fn outflow_front(&self, topo: &ClusterTopology, j: usize) -> f64 {
        topo.links_of_front(j).map(|l| self.transfer[l]).sum()
    }

    /// Workload entering back end `i`.
    pub fn inflow_back(&self, topo: &ClusterTopology, i: usize) -> f64 {
        topo.links_of_back(i).map(|l| self.transfer[l]).sum()
    }

    /// Component-wise affine combination `w * self + (1 - w) * other`.
    pub fn blend(&self, other: &Self, w: f64) -> Self {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(x, y)| w * x + (1.0 - w) * y)
                .collect()
        };
        let n = self.share.dim();
        let mut share = SquareMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                share.set(
                    i,
                    k,
                    w * self.share.get(i, k) + (1.0 - w) * other.share.get(i, k),
                );
            }
        }
        Self {
            accept: mix(&self.accept, &other.accept),
            transfer: mix(&self.transfer, &other.transfer),
            process: mix(&self.process, &other.process),
            buy: mix(&self.buy, &other.buy),
            sell: mix(&self.sell, &other.sell),
            charge: mix(&self.charge, &other.charge),
            discharge: mix(&self.discharge, &other.discharge),
            share,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub f_grid: f64,
    pub f_batt: f64,
    pub f_tran: f64,
    pub f_work: f64,
    pub f_total: f64,
}

impl CostBreakdown {
    pub fn new(f_grid: f64, f_batt: f64, f_tran: f64, f_work: f64) -> Self {
        Self {
            f_grid,
            f_batt,
            f_tran,
            f_work,
            f_total: f_grid + f_batt + f_tran + f_work,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(
            self.f_grid + other.f_grid,
            self.f_batt + other.f_batt,
            self.f_tran + other.f_tran,
            self.f_work + other.f_work,
        )
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::new(
            self.f_grid * factor,
            self.f_batt * factor,
            self.f_tran * factor,
            self.f_work * factor,
        )
    }
}

/// Per-slot system cost. Sharing payments cancel across back ends and do
/// not appear.
pub fn slot_cost(decision: &Decision, input: &SlotInput, params: &ClusterParams) -> CostBreakdown {
    let topo = &params.topology;
    let f_grid = (0..params.num_back())
        .map(|i| input.price_buy[i] * decision.buy[i] - input.price_sell[i] * decision.sell[i])
        .sum();
    let f_batt = params
        .back
        .iter()
        .enumerate()
        .map(|(i, b)| b.wear_cost * (decision.charge[i] + decision.discharge[i]))
        .sum();
    let f_tran = topo
        .links
        .iter()
        .zip(&decision.transfer)
        .map(|(l, m)| l.bandwidth_cost * m)
        .sum();
    let f_work = params
        .front
        .iter()
        .enumerate()
        .map(|(j, f)| f.rejection_cost * (input.arrivals[j] - decision.accept[j]))
        .sum();
    CostBreakdown::new(f_grid, f_batt, f_tran, f_work)
}

/// Residual of the per-back-end power balance:
/// `x - y + d - c + z + sum_k u_ik - e`.
pub fn power_balance_residual(decision: &Decision, input: &SlotInput) -> Vec<f64> {
    (0..decision.process.len())
        .map(|i| {
            decision.buy[i] - decision.sell[i] + decision.discharge[i] - decision.charge[i]
                + input.pv[i]
                + decision.share.row_sum(i)
                - decision.process[i]
        })
        .collect()
}

/// Which physical bound was crossed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    FrontQueue,
    BackQueue,
    Battery,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{kind:?}[{index}] = {value} outside [{lo}, {hi}]")]
pub struct BoundViolation {
    pub kind: BoundKind,
    pub index: usize,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

fn collect_violations(
    kind: BoundKind,
    values: &[f64],
    bounds: impl Iterator<Item = (f64, f64)>,
    out: &mut Vec<BoundViolation>,
) {
    for (index, (&value, (lo, hi))) in values.iter().zip(bounds).enumerate() {
        if value < lo - BOUND_SLACK || value > hi + BOUND_SLACK {
            out.push(BoundViolation {
                kind,
                index,
                value,
                lo,
                hi,
            });
        }
    }
}

/// Next-slot queue lengths, unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueStep {
    pub front: Vec<f64>,
    pub back: Vec<f64>,
}

impl QueueStep {
    pub fn violations(&self, params: &ClusterParams) -> Vec<BoundViolation> {
        let mut out = Vec::new();
        collect_violations(
            BoundKind::FrontQueue,
            &self.front,
            params.front.iter().map(|f| (0.0, f.queue_cap)),
            &mut out,
        );
        collect_violations(
            BoundKind::BackQueue,
            &self.back,
            params.back.iter().map(|b| (0.0, b.queue_cap)),
            &mut out,
        );
        out
    }

    /// Errors on the first bound crossed.
    pub fn check(&self, params: &ClusterParams) -> Result<(), BoundViolation> {
        match self.violations(params).into_iter().next() {
            Some(v) => Err(v),
            None => Ok(()),
        }
    }
}

/// Advances the front- and back-end workload queues by one slot.
pub fn step_queues(
    q_front: &[f64],
    q_back: &[f64],
    decision: &Decision,
    topology: &ClusterTopology,
) -> QueueStep {
    let front = q_front
        .iter()
        .enumerate()
        .map(|(j, q)| q + decision.accept[j] - decision.outflow_front(topology, j))
        .collect();
    let back = q_back
        .iter()
        .enumerate()
        .map(|(i, q)| q + decision.inflow_back(topology, i) - decision.process[i])
        .collect();
    QueueStep { front, back }
}

/// Advances the battery levels by one slot: `b + eta_c c - d / eta_d`.
pub fn step_battery(battery: &[f64], decision: &Decision, params: &ClusterParams) -> Vec<f64> {
    battery
        .iter()
        .enumerate()
        .map(|(i, b)| {
            b + params.eta_charge * decision.charge[i]
                - decision.discharge[i] / params.eta_discharge
        })
        .collect()
}

pub fn battery_violations(battery: &[f64], params: &ClusterParams) -> Vec<BoundViolation> {
    let mut out = Vec::new();
    collect_violations(
        BoundKind::Battery,
        battery,
        params.back.iter().map(|b| (b.energy_min, b.energy_max)),
        &mut out,
    );
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeasibilityError {
    #[error("{field}[{index}] = {value} outside [{lo}, {hi}]")]
    Box {
        field: &'static str,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("sharing matrix is not antisymmetric at ({0},{1})")]
    Antisymmetry(usize, usize),
    #[error("power balance residual {residual} at back end {index}")]
    Balance { index: usize, residual: f64 },
    #[error("dimension mismatch in decision")]
    Dimension,
}

/// Checks boxes, antisymmetry and the power balance of a decision.
/// Box and balance checks use `tol`; antisymmetry is exact.
pub fn check_decision(
    decision: &Decision,
    input: &SlotInput,
    params: &ClusterParams,
    tol: f64,
) -> Result<(), FeasibilityError> {
    let (ni, nj, nl) = (params.num_back(), params.num_front(), params.num_links());
    if decision.accept.len() != nj
        || decision.transfer.len() != nl
        || decision.share.dim() != ni
        || [
            &decision.process,
            &decision.buy,
            &decision.sell,
            &decision.charge,
            &decision.discharge,
        ]
        .iter()
        .any(|v| v.len() != ni)
    {
        return Err(FeasibilityError::Dimension);
    }
    let check = |field: &'static str, index: usize, value: f64, lo: f64, hi: f64| {
        if value < lo - tol || value > hi + tol || value.is_nan() {
            Err(FeasibilityError::Box {
                field,
                index,
                value,
                lo,
                hi,
            })
        } else {
            Ok(())
        }
    };
    for j in 0..nj {
        check("accept", j, decision.accept[j], 0.0, input.arrivals[j])?;
    }
    for (l, link) in params.topology.links.iter().enumerate() {
        check("transfer", l, decision.transfer[l], 0.0, link.capacity)?;
    }
    for (i, b) in params.back.iter().enumerate() {
        check("process", i, decision.process[i], 0.0, b.service_cap)?;
        check("buy", i, decision.buy[i], 0.0, f64::INFINITY)?;
        check("sell", i, decision.sell[i], 0.0, f64::INFINITY)?;
        check("charge", i, decision.charge[i], 0.0, b.charge_max)?;
        check("discharge", i, decision.discharge[i], 0.0, b.discharge_max)?;
    }
    let cap = &params.topology.share_cap;
    for i in 0..ni {
        for k in 0..ni {
            let u = decision.share.get(i, k);
            if decision.share.get(k, i) != -u || (i == k && u != 0.0) {
                return Err(FeasibilityError::Antisymmetry(i, k));
            }
            check("share", i * ni + k, u, -cap.get(i, k), cap.get(i, k))?;
        }
    }
    for (index, residual) in power_balance_residual(decision, input)
        .into_iter()
        .enumerate()
    {
        if residual.abs() > tol {
            return Err(FeasibilityError::Balance { index, residual });
        }
    }
    Ok(())
}

/// One evaluated assumption inequality `lhs >= rhs` (or `lhs < rhs` for A4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub index: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// Positive when satisfied.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn by_name<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a AssumptionCheck> {
        self.checks.iter().filter(move |c| c.name == name)
    }
}

/// Evaluates the capacity (A1-A3) and price (A4) assumptions under which
/// the online controller keeps queues and batteries within bounds.
pub fn check_assumptions(params: &ClusterParams, prices: &PriceBounds) -> AssumptionReport {
    let topo = &params.topology;
    let mut checks = Vec::new();
    let mut ge = |name: &str, index: usize, lhs: f64, rhs: f64| {
        checks.push(AssumptionCheck {
            name: name.to_string(),
            index,
            lhs,
            rhs,
            margin: lhs - rhs,
            pass: lhs >= rhs,
        })
    };
    for (j, f) in params.front.iter().enumerate() {
        ge("A1", j, f.queue_cap, f.arrival_max + topo.front_capacity(j));
    }
    for (i, b) in params.back.iter().enumerate() {
        ge("A2", i, b.queue_cap, b.service_cap + topo.back_capacity(i));
    }
    for (i, b) in params.back.iter().enumerate() {
        ge(
            "A3",
            i,
            b.energy_max - b.energy_min,
            params.eta_charge * b.charge_max + b.discharge_max / params.eta_discharge,
        );
    }
    let eta = params.eta_charge * params.eta_discharge;
    for (i, b) in params.back.iter().enumerate() {
        let lhs = prices.buy_max * eta;
        let rhs = prices.sell_min + b.wear_cost * (1.0 + eta);
        checks.push(AssumptionCheck {
            name: "A4".into(),
            index: i,
            lhs,
            rhs,
            margin: rhs - lhs,
            pass: lhs < rhs,
        });
    }
    AssumptionReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_by_one() -> ClusterParams {
        ClusterParams {
            topology: ClusterTopology::fully_linked(1, 1, 3.0, 0.1, 0.0),
            front: vec![FrontEndParams {
                queue_cap: 200.0,
                rejection_cost: 1.0,
                arrival_max: 4.0,
            }],
            back: vec![BackEndParams {
                queue_cap: 200.0,
                service_cap: 5.0,
                charge_max: 4.0,
                discharge_max: 4.5,
                energy_min: 10.0,
                energy_max: 85.0,
                wear_cost: 0.0,
            }],
            eta_charge: 0.9,
            eta_discharge: 0.95,
        }
    }

    #[test]
    fn a1_passes_with_room() {
        let p = one_by_one();
        let r = check_assumptions(
            &p,
            &PriceBounds {
                buy_max: 0.1,
                sell_min: 0.05,
            },
        );
        let a1 = r.by_name("A1").next().unwrap();
        assert!(a1.pass);
        assert_eq!(a1.rhs, 7.0);
    }

    #[test]
    fn a3_uses_efficiency_scaled_rates() {
        let p = one_by_one();
        let r = check_assumptions(
            &p,
            &PriceBounds {
                buy_max: 0.1,
                sell_min: 0.05,
            },
        );
        let a3 = r.by_name("A3").next().unwrap();
        assert!(a3.pass);
        assert_relative_eq!(a3.lhs, 75.0);
        assert_relative_eq!(a3.rhs, 3.6 + 4.5 / 0.95, epsilon = 1e-12);
    }

    #[test]
    fn a4_fails_when_arbitrage_pays() {
        let mut p = one_by_one();
        p.eta_charge = 1.0;
        p.eta_discharge = 1.0;
        let r = check_assumptions(
            &p,
            &PriceBounds {
                buy_max: 1.0,
                sell_min: 0.1,
            },
        );
        let a4 = r.by_name("A4").next().unwrap();
        assert!(!a4.pass);
        assert!(!r.all_pass());
    }

    #[test]
    fn queue_arithmetic() {
        let p = ClusterParams {
            topology: ClusterTopology {
                back_ends: 1,
                front_ends: 1,
                links: vec![Link {
                    front: 0,
                    back: 0,
                    capacity: 10.0,
                    bandwidth_cost: 1.0,
                }],
                share_cap: SquareMatrix::zeros(1),
            },
            ..one_by_one()
        };
        let mut d = Decision::zeros(&p);
        d.accept[0] = 2.0;
        d.transfer[0] = 3.0;
        let s = step_queues(&[5.0], &[0.0], &d, &p.topology);
        assert_eq!(s.front, vec![4.0]);

        let d0 = Decision::zeros(&p);
        assert_eq!(
            step_queues(&[0.0], &[0.0], &d0, &p.topology).back,
            vec![0.0]
        );

        let mut d2 = Decision::zeros(&p);
        d2.transfer[0] = 4.0;
        d2.process[0] = 6.0;
        assert_eq!(
            step_queues(&[10.0], &[10.0], &d2, &p.topology).back,
            vec![8.0]
        );
    }

    #[test]
    fn queue_step_flags_negative_queue() {
        let p = one_by_one();
        let mut d = Decision::zeros(&p);
        d.transfer[0] = 3.0;
        let s = step_queues(&[1.0], &[0.0], &d, &p.topology);
        let err = s.check(&p).unwrap_err();
        assert_eq!(err.kind, BoundKind::FrontQueue);
        assert_relative_eq!(err.value, -2.0);
    }

    #[test]
    fn battery_arithmetic() {
        let mut p = one_by_one();
        let mut d = Decision::zeros(&p);
        d.charge[0] = 2.0;
        assert_relative_eq!(step_battery(&[50.0], &d, &p)[0], 51.8, epsilon = 1e-12);

        let mut d = Decision::zeros(&p);
        d.discharge[0] = 1.9;
        assert_relative_eq!(step_battery(&[50.0], &d, &p)[0], 48.0, epsilon = 1e-12);

        p.eta_charge = 1.0;
        assert_eq!(step_battery(&[50.0], &Decision::zeros(&p), &p), vec![50.0]);
    }

    fn two_back_ends() -> ClusterParams {
        let mut p = one_by_one();
        p.topology = ClusterTopology::fully_linked(2, 1, 3.0, 0.1, 5.0);
        p.back.push(p.back[0].clone());
        p
    }

    #[test]
    fn grid_cost_nets_sales() {
        let p = two_back_ends();
        let mut d = Decision::zeros(&p);
        d.buy = vec![1.0, 0.0];
        d.sell = vec![0.0, 2.0];
        let input =
            SlotInput::with_midpoint_trade(vec![0.0], vec![0.0; 2], vec![3.0; 2], vec![1.0; 2]);
        assert_relative_eq!(slot_cost(&d, &input, &p).f_grid, 1.0);
    }

    #[test]
    fn full_acceptance_has_no_work_cost() {
        let p = two_back_ends();
        let mut d = Decision::zeros(&p);
        d.accept = vec![3.5];
        let input =
            SlotInput::with_midpoint_trade(vec![3.5], vec![0.0; 2], vec![3.0; 2], vec![1.0; 2]);
        assert_eq!(slot_cost(&d, &input, &p).f_work, 0.0);
    }

    #[test]
    fn sharing_payments_cancel() {
        let p = two_back_ends();
        let mut d = Decision::zeros(&p);
        d.share.set(0, 1, 2.5);
        d.share.set(1, 0, -2.5);
        let input = SlotInput::zeros(&p);
        let c = slot_cost(&d, &input, &p);
        assert_eq!(c.f_total, 0.0);
    }

    #[test]
    fn balance_residuals() {
        let p = two_back_ends();
        let input = SlotInput::zeros(&p);
        let mut d = Decision::zeros(&p);
        d.process[0] = 5.0;
        d.buy[0] = 5.0;
        assert_eq!(power_balance_residual(&d, &input)[0], 0.0);

        d.buy[0] = 3.0;
        d.share.set(0, 1, 2.0);
        d.share.set(1, 0, -2.0);
        assert_eq!(power_balance_residual(&d, &input)[0], 0.0);

        let mut d = Decision::zeros(&p);
        d.process[0] = 5.0;
        let mut input = SlotInput::zeros(&p);
        input.pv[0] = 4.0;
        assert_eq!(power_balance_residual(&d, &input)[0], -1.0);
    }

    #[test]
    fn check_decision_rejects_asymmetric_share() {
        let p = two_back_ends();
        let input =
            SlotInput::with_midpoint_trade(vec![0.0], vec![0.0; 2], vec![3.0; 2], vec![1.0; 2]);
        let mut d = Decision::zeros(&p);
        d.share.set(0, 1, 1.0);
        d.share.set(1, 0, -0.5);
        assert!(matches!(
            check_decision(&d, &input, &p, FEAS_TOL),
            Err(FeasibilityError::Antisymmetry(_, _))
        ));
    }

    #[test]
    fn topology_validation() {
        let mut t = ClusterTopology::fully_linked(2, 2, 1.0, 1.0, 1.0);
        assert!(t.validate().is_ok());
        t.links.retain(|l| l.front != 1);
        assert!(t.validate().is_err());
        let mut t = ClusterTopology::fully_linked(2, 1, 1.0, 1.0, 1.0);
        t.share_cap.set(0, 1, 2.0);
        assert!(t.validate().is_err());
    }
}
