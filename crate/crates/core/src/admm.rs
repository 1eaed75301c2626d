//! Consensus ADMM for the per-slot problem.
//!
//! Front ends own `(a_j, m_·j)`, back ends own `(m'_·i, e, x, y, c, d, u_i·)`
//! and the grid owns the antisymmetric copy `u'`. The coupling constraints
//! `m = m'` and `u = u'` carry scaled duals `λ` and `μ`. One iteration is a
//! front-end sweep, a back-end sweep, a grid projection and a dual update;
//! agents within a tier read the same snapshot, so running a tier in
//! parallel cannot change the result.
//!
//! Whether the run converges or is cut off at the iteration cap, the final
//! iterate is repaired into a feasible decision: sharing and transfers are
//! taken from the consensus copies, the grid absorbs any power-balance gap,
//! and admissions are adjusted to keep front-end queues within bounds.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    project_pairwise_antisymmetric, solve_balance_subproblem, BalanceError, Coord,
};
use crate::lyapunov::LyapunovParams;
use crate::model::{ClusterParams, Decision, SlotInput, SquareMatrix, SystemState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdmmError {
    #[error("iteration {iteration}: back end {index}: {source}")]
    BackEnd {
        iteration: usize,
        index: usize,
        #[source]
        source: BalanceError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub rho: f64,
    /// Iteration cap; hitting it marks the run as truncated.
    pub max_iter: usize,
    /// Stop once primal and dual residuals (max norm) are both at most this.
    pub tol: f64,
    /// Carry duals and consensus copies over from the previous slot.
    pub warm_start: bool,
    pub parallel: bool,
    /// Keep per-iteration records in the report.
    pub record_iterations: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iter: 100_000,
            tol: 1e-4,
            warm_start: false,
            parallel: false,
            record_iterations: false,
        }
    }
}

impl AdmmConfig {
    pub fn truncated_at(n: usize) -> Self {
        Self {
            max_iter: n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AdmmError> {
        if !(self.rho > 0.0) {
            return Err(AdmmError::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if self.max_iter == 0 {
            return Err(AdmmError::Config("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(AdmmError::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Consensus copies and scaled duals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub m: Vec<f64>,
    pub m_prime: Vec<f64>,
    pub u: SquareMatrix,
    pub u_prime: SquareMatrix,
    pub lambda: Vec<f64>,
    pub mu: SquareMatrix,
    pub rho: f64,
    pub n: usize,
}

impl ConsensusState {
    pub fn new(params: &ClusterParams, rho: f64) -> Self {
        let (ni, nl) = (params.num_back(), params.num_links());
        Self {
            m: vec![0.0; nl],
            m_prime: vec![0.0; nl],
            u: SquareMatrix::zeros(ni),
            u_prime: SquareMatrix::zeros(ni),
            lambda: vec![0.0; nl],
            mu: SquareMatrix::zeros(ni),
            rho,
            n: 0,
        }
    }

    /// Largest `|m - m'|` and `|u - u'|`.
    pub fn primal_residuals(&self) -> (f64, f64) {
        let rm = self
            .m
            .iter()
            .zip(&self.m_prime)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (rm, self.u.max_abs_diff(&self.u_prime))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontEndResult {
    pub accept: f64,
    /// Transfers on the links leaving this front end, in link order.
    pub transfers: Vec<(usize, f64)>,
    pub objective: f64,
}

/// Closed-form front-end update.
pub fn front_end_solve(
    j: usize,
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    cons: &ConsensusState,
    lyap: &LyapunovParams,
) -> FrontEndResult {
    let topo = &params.topology;
    let f = &params.front[j];
    let h = state.h_front[j];
    let accept_coef = h - lyap.v * f.rejection_cost;
    let accept = if accept_coef >= 0.0 {
        0.0
    } else {
        input.arrivals[j]
    };
    let mut objective = accept_coef * accept + lyap.v * f.rejection_cost * input.arrivals[j];
    let transfers = topo
        .links_of_front(j)
        .map(|l| {
            let link = &topo.links[l];
            let coef = lyap.v * link.bandwidth_cost - h;
            let m = (cons.m_prime[l] - cons.lambda[l] - coef / cons.rho).clamp(0.0, link.capacity);
            objective += coef * m;
            (l, m)
        })
        .collect();
    FrontEndResult {
        accept,
        transfers,
        objective,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackEndResult {
    /// Back end's copies of the transfers on its incoming links.
    pub transfers: Vec<(usize, f64)>,
    pub process: f64,
    pub buy: f64,
    pub sell: f64,
    pub charge: f64,
    pub discharge: f64,
    /// Row `i` of the sharing matrix (diagonal zero).
    pub share: Vec<f64>,
    pub objective: f64,
}

/// Back-end update: one separable problem with the power-balance row.
/// `m` holds the front ends' transfers from the current sweep.
pub fn back_end_solve(
    i: usize,
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    cons: &ConsensusState,
    m: &[f64],
    lyap: &LyapunovParams,
) -> Result<BackEndResult, BalanceError> {
    let topo = &params.topology;
    let b = &params.back[i];
    let v = lyap.v;
    let rho = cons.rho;
    let hb = state.h_back[i];
    let l = state.l[i];
    let (ec, ed) = (params.eta_charge, params.eta_discharge);
    let ni = params.num_back();
    let cap = &topo.share_cap;
    let share_room: f64 = (0..ni).map(|k| cap.get(i, k)).sum();

    let links: Vec<usize> = topo.links_of_back(i).collect();
    let mut coords: Vec<Coord> = links
        .iter()
        .map(|&lk| {
            Coord::quadratic(
                rho,
                hb - rho * (m[lk] + cons.lambda[lk]),
                0.0,
                0.0,
                topo.links[lk].capacity,
            )
        })
        .collect();
    let base = coords.len();
    coords.push(Coord::linear(-hb, -1.0, 0.0, b.service_cap));
    coords.push(Coord::linear(
        v * input.price_buy[i],
        1.0,
        0.0,
        b.service_cap + b.charge_max + share_room,
    ));
    coords.push(Coord::linear(
        -v * input.price_sell[i],
        -1.0,
        0.0,
        input.pv[i] + b.discharge_max + share_room,
    ));
    coords.push(Coord::linear(
        l * ec + v * b.wear_cost,
        -1.0,
        0.0,
        b.charge_max,
    ));
    coords.push(Coord::linear(
        -l / ed + v * b.wear_cost,
        1.0,
        0.0,
        b.discharge_max,
    ));
    let peers: Vec<usize> = (0..ni).filter(|&k| k != i).collect();
    for &k in &peers {
        let c = cap.get(i, k);
        let g = v * input.price_trade + rho * (cons.mu.get(i, k) - cons.u_prime.get(i, k));
        coords.push(Coord::quadratic(rho, g, 1.0, -c, c));
    }
    let sol = solve_balance_subproblem(&coords, -input.pv[i])?;
    let x = &sol.v;
    let mut share = vec![0.0; ni];
    for (n, &k) in peers.iter().enumerate() {
        share[k] = x[base + 5 + n];
    }
    let transfers: Vec<(usize, f64)> = links
        .iter()
        .enumerate()
        .map(|(n, &lk)| (lk, x[n]))
        .collect();
    let objective = transfers.iter().map(|(_, mp)| hb * mp).sum::<f64>()
        + coords[base..base + 5]
            .iter()
            .zip(&x[base..base + 5])
            .map(|(c, val)| c.g * val)
            .sum::<f64>()
        + v * input.price_trade * share.iter().sum::<f64>();
    Ok(BackEndResult {
        transfers,
        process: x[base],
        buy: x[base + 1],
        sell: x[base + 2],
        charge: x[base + 3],
        discharge: x[base + 4],
        share,
        objective,
    })
}

/// Grid update: projection of `u + μ` onto the antisymmetric box.
pub fn grid_solve(cons: &ConsensusState, share_cap: &SquareMatrix) -> SquareMatrix {
    let n = cons.u.dim();
    let mut w = SquareMatrix::zeros(n);
    for i in 0..n {
        for k in 0..n {
            w.set(i, k, cons.u.get(i, k) + cons.mu.get(i, k));
        }
    }
    project_pairwise_antisymmetric(&w, share_cap)
}

/// `λ += m - m'`, `μ += u - u'`, `n += 1`.
pub fn dual_update(cons: &mut ConsensusState) {
    for ((lam, m), mp) in cons.lambda.iter_mut().zip(&cons.m).zip(&cons.m_prime) {
        *lam += m - mp;
    }
    let n = cons.u.dim();
    for i in 0..n {
        for k in 0..n {
            let v = cons.mu.get(i, k) + cons.u.get(i, k) - cons.u_prime.get(i, k);
            cons.mu.set(i, k, v);
        }
    }
    cons.n += 1;
}

/// Changes made when turning the final iterate into a feasible decision.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairDeltas {
    /// Power-balance gap per back end, absorbed by buying (negative) or selling (positive).
    pub delta_e: Vec<f64>,
    /// `(front end, before, after)` for every adjusted admission.
    pub accept_adjustments: Vec<(usize, f64, f64)>,
    /// Front ends whose transfers had to be scaled down to stay serviceable.
    pub trimmed_fronts: Vec<usize>,
}

/// Raw primal iterate gathered from all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentIterate {
    pub accept: Vec<f64>,
    pub m_prime: Vec<f64>,
    pub u_prime: SquareMatrix,
    pub process: Vec<f64>,
    pub buy: Vec<f64>,
    pub sell: Vec<f64>,
    pub charge: Vec<f64>,
    pub discharge: Vec<f64>,
}

/// Builds a decision from the consensus copies that satisfies the power
/// balance exactly and keeps front-end queues within `[0, Q_F]`.
pub fn truncation_repair(
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    it: &AgentIterate,
) -> (Decision, RepairDeltas) {
    let topo = &params.topology;
    let ni = params.num_back();
    let mut d = Decision {
        accept: it.accept.clone(),
        transfer: it.m_prime.clone(),
        process: it.process.clone(),
        buy: it.buy.clone(),
        sell: it.sell.clone(),
        charge: it.charge.clone(),
        discharge: it.discharge.clone(),
        share: it.u_prime.clone(),
    };
    let mut deltas = RepairDeltas {
        delta_e: vec![0.0; ni],
        ..RepairDeltas::default()
    };
    for i in 0..ni {
        let gap =
            d.buy[i] - d.sell[i] + d.discharge[i] - d.charge[i] + input.pv[i] + d.share.row_sum(i)
                - d.process[i];
        deltas.delta_e[i] = gap;
        if gap < 0.0 {
            d.buy[i] -= gap;
        } else {
            d.sell[i] += gap;
        }
    }
    for (j, f) in params.front.iter().enumerate() {
        let out = d.outflow_front(topo, j);
        let q = state.q_front[j];
        let tentative = q + d.accept[j] - out;
        let before = d.accept[j];
        if tentative < 0.0 {
            let need = out - q;
            if need > input.arrivals[j] {
                // Even full admission cannot cover the outflow; shrink it.
                let target = q + input.arrivals[j];
                let scale = if out > 0.0 { target / out } else { 0.0 };
                for l in topo.links_of_front(j) {
                    d.transfer[l] *= scale;
                }
                deltas.trimmed_fronts.push(j);
                d.accept[j] = input.arrivals[j];
            } else {
                d.accept[j] = need.max(0.0);
            }
        } else if tentative > f.queue_cap {
            d.accept[j] = (f.queue_cap - q + out).clamp(0.0, input.arrivals[j]);
        }
        if d.accept[j] != before {
            deltas.accept_adjustments.push((j, before, d.accept[j]));
        }
    }
    (d, deltas)
}

/// One iteration's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    pub primal_m: f64,
    pub primal_u: f64,
    pub dual: f64,
    pub front_objectives: Vec<f64>,
    pub back_objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmReport {
    pub iterations: usize,
    /// Max primal residual after each iteration.
    pub residuals: Vec<f64>,
    pub truncated: bool,
    pub repair: RepairDeltas,
    pub front_objectives: Vec<f64>,
    pub back_objectives: Vec<f64>,
    pub records: Vec<IterationRecord>,
}

impl AdmmReport {
    pub fn agent_objective_sum(&self) -> f64 {
        self.front_objectives
            .iter()
            .chain(&self.back_objectives)
            .sum()
    }
}

/// Runs ADMM for one slot. `warm` supplies consensus state from a previous
/// slot when warm starting.
pub fn run_admm(
    state: &SystemState,
    input: &SlotInput,
    params: &ClusterParams,
    lyap: &LyapunovParams,
    cfg: &AdmmConfig,
    warm: Option<&ConsensusState>,
) -> Result<(Decision, AdmmReport, ConsensusState), AdmmError> {
    cfg.validate()?;
    let (ni, nj) = (params.num_back(), params.num_front());
    let mut cons = match (cfg.warm_start, warm) {
        (true, Some(w)) => ConsensusState {
            rho: cfg.rho,
            n: 0,
            ..w.clone()
        },
        _ => ConsensusState::new(params, cfg.rho),
    };
    let mut residuals = Vec::new();
    let mut records = Vec::new();
    let mut fronts: Vec<FrontEndResult> = Vec::new();
    let mut backs: Vec<BackEndResult> = Vec::new();
    let mut converged = false;

    while cons.n < cfg.max_iter {
        fronts = if cfg.parallel {
            (0..nj)
                .into_par_iter()
                .map(|j| front_end_solve(j, state, input, params, &cons, lyap))
                .collect()
        } else {
            (0..nj)
                .map(|j| front_end_solve(j, state, input, params, &cons, lyap))
                .collect()
        };
        for fr in &fronts {
            for &(l, m) in &fr.transfers {
                cons.m[l] = m;
            }
        }
        let iteration = cons.n;
        let solve = |i: usize| {
            back_end_solve(i, state, input, params, &cons, &cons.m, lyap).map_err(|source| {
                AdmmError::BackEnd {
                    iteration,
                    index: i,
                    source,
                }
            })
        };
        backs = if cfg.parallel {
            (0..ni)
                .into_par_iter()
                .map(solve)
                .collect::<Result<_, _>>()?
        } else {
            (0..ni).map(solve).collect::<Result<_, _>>()?
        };
        let old_m_prime = cons.m_prime.clone();
        let old_u_prime = cons.u_prime.clone();
        for (i, br) in backs.iter().enumerate() {
            for &(l, mp) in &br.transfers {
                cons.m_prime[l] = mp;
            }
            for k in 0..ni {
                cons.u.set(i, k, br.share[k]);
            }
        }
        cons.u_prime = grid_solve(&cons, &params.topology.share_cap);
        let (rm, ru) = cons.primal_residuals();
        let dm = cons
            .m_prime
            .iter()
            .zip(&old_m_prime)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let dual = cons.rho * dm.max(cons.u_prime.max_abs_diff(&old_u_prime));
        dual_update(&mut cons);
        let r = rm.max(ru);
        residuals.push(r);
        if cfg.record_iterations {
            records.push(IterationRecord {
                n: cons.n,
                primal_m: rm,
                primal_u: ru,
                dual,
                front_objectives: fronts.iter().map(|f| f.objective).collect(),
                back_objectives: backs.iter().map(|b| b.objective).collect(),
            });
        }
        // Zero primal residual alone is not a fixed point: both copies can
        // sit on a common bound while the duals are still moving.
        if r <= cfg.tol && dual <= cfg.tol {
            converged = true;
            break;
        }
    }

    let mut accept = vec![0.0; nj];
    for (j, fr) in fronts.iter().enumerate() {
        accept[j] = fr.accept;
    }
    let iterate = AgentIterate {
        accept,
        m_prime: cons.m_prime.clone(),
        u_prime: cons.u_prime.clone(),
        process: backs.iter().map(|b| b.process).collect(),
        buy: backs.iter().map(|b| b.buy).collect(),
        sell: backs.iter().map(|b| b.sell).collect(),
        charge: backs.iter().map(|b| b.charge).collect(),
        discharge: backs.iter().map(|b| b.discharge).collect(),
    };
    let (decision, repair) = truncation_repair(state, input, params, &iterate);
    let report = AdmmReport {
        iterations: cons.n,
        residuals,
        truncated: !converged,
        repair,
        front_objectives: fronts.iter().map(|f| f.objective).collect(),
        back_objectives: backs.iter().map(|b| b.objective).collect(),
        records,
    };
    Ok((decision, report, cons))
}

/// Writes iteration records as JSON lines, each tagged with its slot.
pub fn write_iteration_trace<W: Write>(
    out: &mut W,
    slot: usize,
    records: &[IterationRecord],
) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        slot: usize,
        #[serde(flatten)]
        record: &'a IterationRecord,
    }
    for record in records {
        serde_json::to_writer(&mut *out, &Line { slot, record })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
