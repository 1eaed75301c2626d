//! Column layout of one slot's decision inside a linear program.
//!
//! Block order: `a[J] m[L] e[I] x[I] y[I] c[I] d[I] u[P]`, where `P` is the
//! number of unordered back-end pairs `i < k` with a positive sharing
//! capacity. Column `u_p` carries `u_ik`; `u_ki = -u_p` is implicit, so
//! antisymmetry holds by construction.

use crate::kernel::LinearProgram;
use crate::model::{ClusterParams, Decision, SlotInput, SquareMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SlotLayout {
    nj: usize,
    nl: usize,
    ni: usize,
    pairs: Vec<(usize, usize)>,
}

impl SlotLayout {
    pub fn new(params: &ClusterParams) -> Self {
        let ni = params.num_back();
        let cap = &params.topology.share_cap;
        let pairs = (0..ni)
            .flat_map(|i| ((i + 1)..ni).map(move |k| (i, k)))
            .filter(|&(i, k)| cap.get(i, k) > 0.0)
            .collect();
        Self {
            nj: params.num_front(),
            nl: params.num_links(),
            ni,
            pairs,
        }
    }

    pub fn width(&self) -> usize {
        self.nj + self.nl + 5 * self.ni + self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn a(&self, j: usize) -> usize {
        j
    }

    pub fn m(&self, l: usize) -> usize {
        self.nj + l
    }

    fn back_block(&self, block: usize, i: usize) -> usize {
        self.nj + self.nl + block * self.ni + i
    }

    pub fn e(&self, i: usize) -> usize {
        self.back_block(0, i)
    }

    pub fn x(&self, i: usize) -> usize {
        self.back_block(1, i)
    }

    pub fn y(&self, i: usize) -> usize {
        self.back_block(2, i)
    }

    pub fn c(&self, i: usize) -> usize {
        self.back_block(3, i)
    }

    pub fn d(&self, i: usize) -> usize {
        self.back_block(4, i)
    }

    pub fn u(&self, p: usize) -> usize {
        self.nj + self.nl + 5 * self.ni + p
    }

    /// Per-column objective of the slot cost `f(t)` without its constant
    /// `Σ γ_j A_j(t)`.
    pub fn cost_vector(&self, input: &SlotInput, params: &ClusterParams) -> Vec<f64> {
        let mut cost = vec![0.0; self.width()];
        for (j, f) in params.front.iter().enumerate() {
            cost[self.a(j)] = -f.rejection_cost;
        }
        for (l, link) in params.topology.links.iter().enumerate() {
            cost[self.m(l)] = link.bandwidth_cost;
        }
        for (i, b) in params.back.iter().enumerate() {
            cost[self.x(i)] = input.price_buy[i];
            cost[self.y(i)] = -input.price_sell[i];
            cost[self.c(i)] = b.wear_cost;
            cost[self.d(i)] = b.wear_cost;
        }
        cost
    }

    /// The constant part of `f(t)`.
    pub fn cost_constant(input: &SlotInput, params: &ClusterParams) -> f64 {
        params
            .front
            .iter()
            .zip(&input.arrivals)
            .map(|(f, a)| f.rejection_cost * a)
            .sum()
    }

    /// Appends this slot's columns with their box bounds and the given
    /// objective; returns the offset of the first column.
    pub fn add_columns(
        &self,
        lp: &mut LinearProgram,
        tag: &str,
        input: &SlotInput,
        params: &ClusterParams,
        cost: &[f64],
    ) -> usize {
        debug_assert_eq!(cost.len(), self.width());
        let offset = lp.num_vars();
        let inf = f64::INFINITY;
        let mut add = |name: String, col: usize, lo: f64, hi: f64| {
            let idx = lp.add_var(name, cost[col], lo, hi);
            debug_assert_eq!(idx, offset + col);
        };
        for j in 0..self.nj {
            add(format!("a{tag}[{j}]"), self.a(j), 0.0, input.arrivals[j]);
        }
        for (l, link) in params.topology.links.iter().enumerate() {
            add(
                format!("m{tag}[{},{}]", link.front, link.back),
                self.m(l),
                0.0,
                link.capacity,
            );
        }
        for (i, b) in params.back.iter().enumerate() {
            add(format!("e{tag}[{i}]"), self.e(i), 0.0, b.service_cap);
        }
        for i in 0..self.ni {
            add(format!("x{tag}[{i}]"), self.x(i), 0.0, inf);
        }
        for i in 0..self.ni {
            add(format!("y{tag}[{i}]"), self.y(i), 0.0, inf);
        }
        for (i, b) in params.back.iter().enumerate() {
            add(format!("c{tag}[{i}]"), self.c(i), 0.0, b.charge_max);
        }
        for (i, b) in params.back.iter().enumerate() {
            add(format!("d{tag}[{i}]"), self.d(i), 0.0, b.discharge_max);
        }
        let cap = &params.topology.share_cap;
        for (p, &(i, k)) in self.pairs.iter().enumerate() {
            let u = cap.get(i, k);
            add(format!("u{tag}[{i},{k}]"), self.u(p), -u, u);
        }
        offset
    }

    /// Adds the per-back-end power balance rows
    /// `x - y + d - c + Σ_k u_ik - e = -z_i`.
    pub fn add_balance_rows(&self, lp: &mut LinearProgram, offset: usize, input: &SlotInput) {
        for i in 0..self.ni {
            let mut terms = vec![
                (offset + self.x(i), 1.0),
                (offset + self.y(i), -1.0),
                (offset + self.d(i), 1.0),
                (offset + self.c(i), -1.0),
                (offset + self.e(i), -1.0),
            ];
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                if a == i {
                    terms.push((offset + self.u(p), 1.0));
                } else if b == i {
                    terms.push((offset + self.u(p), -1.0));
                }
            }
            lp.add_eq(terms, -input.pv[i]);
        }
    }

    /// Reads a decision out of a solution vector.
    pub fn extract(&self, x: &[f64], offset: usize) -> Decision {
        let col = |c: usize| x[offset + c];
        let mut share = SquareMatrix::zeros(self.ni);
        for (p, &(i, k)) in self.pairs.iter().enumerate() {
            let u = col(self.u(p));
            share.set(i, k, u);
            share.set(k, i, -u);
        }
        Decision {
            accept: (0..self.nj).map(|j| col(self.a(j))).collect(),
            transfer: (0..self.nl).map(|l| col(self.m(l))).collect(),
            process: (0..self.ni).map(|i| col(self.e(i))).collect(),
            buy: (0..self.ni).map(|i| col(self.x(i))).collect(),
            sell: (0..self.ni).map(|i| col(self.y(i))).collect(),
            charge: (0..self.ni).map(|i| col(self.c(i))).collect(),
            discharge: (0..self.ni).map(|i| col(self.d(i))).collect(),
            share,
        }
    }

    /// Writes a decision into a vector laid out like this slot.
    pub fn flatten(&self, decision: &Decision) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        for j in 0..self.nj {
            v[self.a(j)] = decision.accept[j];
        }
        for l in 0..self.nl {
            v[self.m(l)] = decision.transfer[l];
        }
        for i in 0..self.ni {
            v[self.e(i)] = decision.process[i];
            v[self.x(i)] = decision.buy[i];
            v[self.y(i)] = decision.sell[i];
            v[self.c(i)] = decision.charge[i];
            v[self.d(i)] = decision.discharge[i];
        }
        for (p, &(i, k)) in self.pairs.iter().enumerate() {
            v[self.u(p)] = decision.share.get(i, k);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::solve_lp;
    use crate::model::{
        check_decision, slot_cost, BackEndParams, ClusterTopology, FrontEndParams, FEAS_TOL,
    };

    fn params(ni: usize, nj: usize, share: f64) -> ClusterParams {
        ClusterParams {
            topology: ClusterTopology::fully_linked(ni, nj, 2.0, 0.01, share),
            front: vec![
                FrontEndParams {
                    queue_cap: 100.0,
                    rejection_cost: 0.5,
                    arrival_max: 4.0,
                };
                nj
            ],
            back: vec![
                BackEndParams {
                    queue_cap: 100.0,
                    service_cap: 5.0,
                    charge_max: 3.0,
                    discharge_max: 3.0,
                    energy_min: 0.0,
                    energy_max: 50.0,
                    wear_cost: 0.01,
                };
                ni
            ],
            eta_charge: 0.9,
            eta_discharge: 0.9,
        }
    }

    #[test]
    fn single_site_census() {
        let p = params(1, 1, 0.0);
        let lay = SlotLayout::new(&p);
        assert!(lay.pairs().is_empty());
        assert_eq!(lay.width(), 1 + 1 + 5);
    }

    #[test]
    fn zero_capacity_pairs_are_dropped() {
        let mut p = params(3, 1, 1.0);
        p.topology.share_cap.set(0, 2, 0.0);
        p.topology.share_cap.set(2, 0, 0.0);
        assert_eq!(SlotLayout::new(&p).pairs(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn flatten_extract_round_trip() {
        let p = params(3, 2, 1.0);
        let lay = SlotLayout::new(&p);
        let v: Vec<f64> = (0..lay.width()).map(|k| k as f64 * 0.25).collect();
        let d = lay.extract(&v, 0);
        assert!(d.share.is_antisymmetric());
        assert_eq!(lay.flatten(&d), v);
    }

    #[test]
    fn myopic_slot_solution_is_feasible_and_costed() {
        let p = params(3, 2, 1.0);
        let lay = SlotLayout::new(&p);
        let input = SlotInput::with_midpoint_trade(
            vec![3.0, 1.0],
            vec![4.0, 0.0, 1.0],
            vec![0.05, 0.08, 0.06],
            vec![0.02, 0.03, 0.03],
        );
        let mut lp = LinearProgram::new();
        let cost = lay.cost_vector(&input, &p);
        let off = lay.add_columns(&mut lp, "", &input, &p, &cost);
        lay.add_balance_rows(&mut lp, off, &input);
        let sol = solve_lp(&lp).unwrap();
        let d = lay.extract(&sol.x, off);
        check_decision(&d, &input, &p, FEAS_TOL).unwrap();
        let f = slot_cost(&d, &input, &p).f_total;
        assert!((f - (sol.objective + SlotLayout::cost_constant(&input, &p))).abs() < 1e-9);
    }
}
