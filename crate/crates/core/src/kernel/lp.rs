//! Linear programs in equality form with variable bounds, and a dense
//! bounded-variable revised simplex to solve them.
//!
//! ```text
//!   min  c'x
//!   s.t. A x = b
//!        lo <= x <= hi      (either side may be infinite)
//! ```
//!
//! Phase one starts from an all-artificial basis with every structural
//! variable at a finite bound (or zero when free). The basis inverse is kept
//! explicitly and updated in product form, with a fresh Gauss-Jordan
//! inversion every [`REFACTOR_EVERY`] pivots. Pricing is Dantzig's rule;
//! after a run of degenerate pivots it falls back to Bland's rule until the
//! objective moves again, which rules out cycling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const REFACTOR_EVERY: usize = 64;
const DEGENERATE_STREAK: usize = 40;
const PIVOT_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-9;
const PRIMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid bounds on variable {name}: [{lo}, {hi}]")]
    InvalidBounds { name: String, lo: f64, hi: f64 },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// A linear program with sparse equality rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    cost: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    names: Vec<String>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a column and returns its index.
    pub fn add_var(&mut self, name: impl Into<String>, cost: f64, lo: f64, hi: f64) -> usize {
        self.cost.push(cost);
        self.lower.push(lo);
        self.upper.push(hi);
        self.names.push(name.into());
        self.cost.len() - 1
    }

    /// Adds the row `sum coef * x[col] = rhs`; repeated columns are summed.
    pub fn add_eq(&mut self, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (col, coef) in terms {
            match merged.iter_mut().find(|(c, _)| *c == col) {
                Some(entry) => entry.1 += coef,
                None => merged.push((col, coef)),
            }
        }
        self.rows.push(merged);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn set_cost(&mut self, col: usize, cost: f64) {
        self.cost[col] = cost;
    }

    pub fn bounds(&self, col: usize) -> (f64, f64) {
        (self.lower[col], self.upper[col])
    }

    pub fn set_bounds(&mut self, col: usize, lo: f64, hi: f64) {
        self.lower[col] = lo;
        self.upper[col] = hi;
    }

    pub fn name(&self, col: usize) -> &str {
        &self.names[col]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest absolute equality residual at `x`.
    pub fn max_row_residual(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, b)| (row.iter().map(|&(c, a)| a * x[c]).sum::<f64>() - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest bound violation at `x`.
    pub fn max_bound_violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n || self.names.len() != n {
            return Err(LpError::DimensionMismatch(
                "column arrays differ in length".into(),
            ));
        }
        if self.rhs.len() != self.rows.len() {
            return Err(LpError::DimensionMismatch(
                "rhs length differs from row count".into(),
            ));
        }
        for (r, row) in self.rows.iter().enumerate() {
            if let Some(&(c, _)) = row.iter().find(|(c, _)| *c >= n) {
                return Err(LpError::DimensionMismatch(format!(
                    "row {r} references column {c} of {n}"
                )));
            }
            if row.iter().any(|(_, a)| !a.is_finite()) || !self.rhs[r].is_finite() {
                return Err(LpError::DimensionMismatch(format!(
                    "row {r} has a non-finite entry"
                )));
            }
        }
        for c in 0..n {
            let (lo, hi) = (self.lower[c], self.upper[c]);
            if lo.is_nan()
                || hi.is_nan()
                || lo > hi
                || lo == f64::INFINITY
                || hi == f64::NEG_INFINITY
            {
                return Err(LpError::InvalidBounds {
                    name: self.names[c].clone(),
                    lo,
                    hi,
                });
            }
            if !self.cost[c].is_finite() {
                return Err(LpError::DimensionMismatch(format!(
                    "column {} has a non-finite cost",
                    self.names[c]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarState {
    Basic(usize),
    AtLower,
    AtUpper,
    /// Free variable held at zero.
    Zero,
}

struct Simplex {
    m: usize,
    n_struct: usize,
    /// Dense constraint matrix for structural columns, row-major m x n_struct.
    a: Vec<f64>,
    /// Sign of each artificial column (artificial k is sign_k * e_k).
    art_sign: Vec<f64>,
    b: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    state: Vec<VarState>,
    x: Vec<f64>,
    basis: Vec<usize>,
    binv: Vec<f64>,
    pivots_since_refactor: usize,
    iterations: usize,
    max_iterations: usize,
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
}

impl Simplex {
    fn new(lp: &LinearProgram) -> Self {
        let m = lp.num_rows();
        let n = lp.num_vars();
        let mut a = vec![0.0; m * n];
        for (r, row) in lp.rows.iter().enumerate() {
            for &(c, coef) in row {
                a[r * n + c] += coef;
            }
        }
        let total = n + m;
        let mut lo = lp.lower.clone();
        let mut hi = lp.upper.clone();
        lo.extend(std::iter::repeat_n(0.0, m));
        hi.extend(std::iter::repeat_n(f64::INFINITY, m));
        let mut state = Vec::with_capacity(total);
        let mut x = vec![0.0; total];
        for c in 0..n {
            let (st, val) = if lo[c].is_finite() {
                (VarState::AtLower, lo[c])
            } else if hi[c].is_finite() {
                (VarState::AtUpper, hi[c])
            } else {
                (VarState::Zero, 0.0)
            };
            state.push(st);
            x[c] = val;
        }
        let mut art_sign = vec![1.0; m];
        let mut basis = Vec::with_capacity(m);
        for r in 0..m {
            let ax: f64 = (0..n).map(|c| a[r * n + c] * x[c]).sum();
            let resid = lp.rhs[r] - ax;
            art_sign[r] = if resid >= 0.0 { 1.0 } else { -1.0 };
            x[n + r] = resid.abs();
            state.push(VarState::Basic(r));
            basis.push(n + r);
        }
        let mut binv = vec![0.0; m * m];
        for r in 0..m {
            binv[r * m + r] = art_sign[r];
        }
        Self {
            m,
            n_struct: n,
            a,
            art_sign,
            b: lp.rhs.clone(),
            lo,
            hi,
            cost: vec![0.0; total],
            state,
            x,
            basis,
            binv,
            pivots_since_refactor: 0,
            iterations: 0,
            max_iterations: 200 * (total + 10),
        }
    }

    fn total(&self) -> usize {
        self.n_struct + self.m
    }

    /// Column `j` of the full matrix [A | diag(art_sign)] as a dense vector.
    fn column(&self, j: usize, out: &mut [f64]) {
        if j < self.n_struct {
            for r in 0..self.m {
                out[r] = self.a[r * self.n_struct + j];
            }
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
            let r = j - self.n_struct;
            out[r] = self.art_sign[r];
        }
    }

    fn col_dot(&self, j: usize, y: &[f64]) -> f64 {
        if j < self.n_struct {
            (0..self.m)
                .map(|r| self.a[r * self.n_struct + j] * y[r])
                .sum()
        } else {
            let r = j - self.n_struct;
            self.art_sign[r] * y[r]
        }
    }

    /// Rebuilds the basis inverse from scratch and recomputes basic values.
    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let mut bmat = vec![0.0; m * m];
        let mut col = vec![0.0; m];
        for (pos, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut col);
            for r in 0..m {
                bmat[r * m + pos] = col[r];
            }
        }
        let mut inv = vec![0.0; m * m];
        for r in 0..m {
            inv[r * m + r] = 1.0;
        }
        for c in 0..m {
            let piv = (c..m)
                .max_by(|&p, &q| bmat[p * m + c].abs().total_cmp(&bmat[q * m + c].abs()))
                .unwrap_or(c);
            if bmat[piv * m + c].abs() < 1e-12 {
                return Err(LpError::NumericalFailure("singular basis matrix".into()));
            }
            if piv != c {
                for k in 0..m {
                    bmat.swap(piv * m + k, c * m + k);
                    inv.swap(piv * m + k, c * m + k);
                }
            }
            let d = bmat[c * m + c];
            for k in 0..m {
                bmat[c * m + k] /= d;
                inv[c * m + k] /= d;
            }
            for r in 0..m {
                if r != c {
                    let f = bmat[r * m + c];
                    if f != 0.0 {
                        for k in 0..m {
                            bmat[r * m + k] -= f * bmat[c * m + k];
                            inv[r * m + k] -= f * inv[c * m + k];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        self.pivots_since_refactor = 0;
        self.recompute_basic_values();
        Ok(())
    }

    fn recompute_basic_values(&mut self) {
        let m = self.m;
        let mut resid = self.b.clone();
        let mut col = vec![0.0; m];
        for j in 0..self.total() {
            if matches!(self.state[j], VarState::Basic(_)) || self.x[j] == 0.0 {
                continue;
            }
            self.column(j, &mut col);
            for r in 0..m {
                resid[r] -= col[r] * self.x[j];
            }
        }
        for pos in 0..m {
            let v: f64 = (0..m).map(|k| self.binv[pos * m + k] * resid[k]).sum();
            self.x[self.basis[pos]] = v;
        }
    }

    fn duals(&self) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (pos, &j) in self.basis.iter().enumerate() {
            let cb = self.cost[j];
            if cb != 0.0 {
                for k in 0..m {
                    y[k] += cb * self.binv[pos * m + k];
                }
            }
        }
        y
    }

    /// Picks an entering variable and its direction of motion.
    fn price(&self, y: &[f64], bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.total() {
            let dir = match self.state[j] {
                VarState::Basic(_) => continue,
                _ if self.hi[j] - self.lo[j] <= 0.0 => continue,
                st => {
                    let d = self.cost[j] - self.col_dot(j, y);
                    match st {
                        VarState::AtLower if d < -DUAL_TOL => (1.0, -d),
                        VarState::AtUpper if d > DUAL_TOL => (-1.0, d),
                        VarState::Zero if d.abs() > DUAL_TOL => (-d.signum(), d.abs()),
                        _ => continue,
                    }
                }
            };
            if bland {
                return Some((j, dir.0));
            }
            if best.is_none_or(|(_, _, score)| dir.1 > score) {
                best = Some((j, dir.0, dir.1));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    fn run_phase(&mut self, bland_start: bool) -> Result<PhaseOutcome, LpError> {
        let m = self.m;
        let mut alpha = vec![0.0; m];
        let mut col = vec![0.0; m];
        let mut degenerate = 0usize;
        let mut bland = bland_start;
        loop {
            if self.iterations >= self.max_iterations {
                return Err(LpError::NumericalFailure(format!(
                    "iteration limit {} reached",
                    self.max_iterations
                )));
            }
            let y = self.duals();
            let Some((q, dir)) = self.price(&y, bland) else {
                return Ok(PhaseOutcome::Optimal);
            };
            self.iterations += 1;

            self.column(q, &mut col);
            for pos in 0..m {
                alpha[pos] = (0..m).map(|k| self.binv[pos * m + k] * col[k]).sum();
            }

            // Basic variable at position pos moves by -dir * alpha[pos] * t.
            let mut t_best = f64::INFINITY;
            let mut leave: Option<(usize, bool)> = None;
            let mut leave_score = 0.0;
            for pos in 0..m {
                let rate = -dir * alpha[pos];
                if rate.abs() <= PIVOT_TOL {
                    continue;
                }
                let j = self.basis[pos];
                let (limit, to_upper) = if rate < 0.0 {
                    if !self.lo[j].is_finite() {
                        continue;
                    }
                    (((self.x[j] - self.lo[j]) / -rate).max(0.0), false)
                } else {
                    if !self.hi[j].is_finite() {
                        continue;
                    }
                    (((self.hi[j] - self.x[j]) / rate).max(0.0), true)
                };
                let score = if bland { -(j as f64) } else { rate.abs() };
                let better = limit < t_best - 1e-12
                    || (limit <= t_best + 1e-12 && (leave.is_none() || score > leave_score));
                if better {
                    t_best = t_best.min(limit);
                    leave = Some((pos, to_upper));
                    leave_score = score;
                }
            }
            let span = self.hi[q] - self.lo[q];
            let flip = span.is_finite() && span <= t_best;
            if flip {
                t_best = span;
            }
            if !t_best.is_finite() {
                return Ok(PhaseOutcome::Unbounded);
            }

            if t_best <= 1e-12 {
                degenerate += 1;
                if degenerate > DEGENERATE_STREAK {
                    bland = true;
                }
            } else {
                degenerate = 0;
                bland = bland_start;
            }

            let step = dir * t_best;
            for pos in 0..m {
                let j = self.basis[pos];
                self.x[j] -= alpha[pos] * step;
            }
            if flip {
                self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                self.state[q] = if dir > 0.0 {
                    VarState::AtUpper
                } else {
                    VarState::AtLower
                };
                continue;
            }
            let (r, to_upper) = leave.expect("finite step implies a blocking row");
            let leaving = self.basis[r];
            self.x[q] += step;
            self.x[leaving] = if to_upper {
                self.hi[leaving]
            } else {
                self.lo[leaving]
            };
            self.state[leaving] = if to_upper {
                VarState::AtUpper
            } else {
                VarState::AtLower
            };
            self.state[q] = VarState::Basic(r);
            self.basis[r] = q;

            let piv = alpha[r];
            if piv.abs() < PIVOT_TOL {
                return Err(LpError::NumericalFailure("pivot element vanished".into()));
            }
            for k in 0..m {
                self.binv[r * m + k] /= piv;
            }
            for pos in 0..m {
                if pos != r && alpha[pos] != 0.0 {
                    let f = alpha[pos];
                    for k in 0..m {
                        self.binv[pos * m + k] -= f * self.binv[r * m + k];
                    }
                }
            }
            self.pivots_since_refactor += 1;
            if self.pivots_since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
        }
    }

    /// Swaps basic artificials at zero for structural columns where possible.
    fn drive_out_artificials(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let mut col = vec![0.0; m];
        for r in 0..m {
            let j = self.basis[r];
            if j < self.n_struct {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for c in 0..self.n_struct {
                if matches!(self.state[c], VarState::Basic(_)) {
                    continue;
                }
                self.column(c, &mut col);
                let a_rc: f64 = (0..m).map(|k| self.binv[r * m + k] * col[k]).sum();
                if a_rc.abs() > 1e-7 && best.is_none_or(|(_, v)| a_rc.abs() > v) {
                    best = Some((c, a_rc.abs()));
                }
            }
            if let Some((c, _)) = best {
                self.state[j] = VarState::AtLower;
                self.x[j] = 0.0;
                self.state[c] = VarState::Basic(r);
                self.basis[r] = c;
                self.refactor()?;
            }
        }
        Ok(())
    }
}

/// Solves `lp` with the dense bounded-variable revised simplex.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.validate()?;
    let n = lp.num_vars();
    let m = lp.num_rows();
    let mut sx = Simplex::new(lp);

    // Phase one: minimize the sum of artificials.
    for r in 0..m {
        sx.cost[n + r] = 1.0;
    }
    match sx.run_phase(false)? {
        PhaseOutcome::Optimal => {}
        PhaseOutcome::Unbounded => {
            return Err(LpError::NumericalFailure(
                "phase one reported unbounded".into(),
            ))
        }
    }
    sx.refactor()?;
    let infeas: f64 = (0..m).map(|r| sx.x[n + r].abs()).sum();
    let scale = 1.0 + lp.rhs.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    if infeas > 1e-7 * scale {
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            x: sx.x[..n].to_vec(),
            objective: f64::NAN,
            iterations: sx.iterations,
        });
    }

    // Phase two: artificials pinned to zero.
    for r in 0..m {
        sx.cost[n + r] = 0.0;
        sx.hi[n + r] = 0.0;
        if !matches!(sx.state[n + r], VarState::Basic(_)) {
            sx.x[n + r] = 0.0;
            sx.state[n + r] = VarState::AtLower;
        }
    }
    sx.drive_out_artificials()?;
    sx.cost[..n].copy_from_slice(&lp.cost);
    let outcome = sx.run_phase(false)?;
    if let PhaseOutcome::Unbounded = outcome {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: sx.x[..n].to_vec(),
            objective: f64::NEG_INFINITY,
            iterations: sx.iterations,
        });
    }
    sx.refactor()?;

    let mut x = sx.x[..n].to_vec();
    for c in 0..n {
        let (lo, hi) = (lp.lower[c], lp.upper[c]);
        if x[c] < lo {
            if lo - x[c] > 1e3 * PRIMAL_TOL * (1.0 + lo.abs()) {
                return Err(LpError::NumericalFailure(format!(
                    "{} ends {} below its lower bound",
                    lp.names[c],
                    lo - x[c]
                )));
            }
            x[c] = lo;
        } else if x[c] > hi {
            if x[c] - hi > 1e3 * PRIMAL_TOL * (1.0 + hi.abs()) {
                return Err(LpError::NumericalFailure(format!(
                    "{} ends {} above its upper bound",
                    lp.names[c],
                    x[c] - hi
                )));
            }
            x[c] = hi;
        }
    }
    let objective = lp.objective_at(&x);
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
        iterations: sx.iterations,
    })
}

/// Solves `lp` with the sparse LU simplex from `microlp`. Used for the
/// multi-slot horizon program, whose row count makes a dense basis inverse
/// impractical.
pub fn solve_lp_sparse(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    use microlp::{ComparisonOp, Error as MlpError, OptimizationDirection, Problem};
    lp.validate()?;
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..lp.num_vars())
        .map(|c| problem.add_var(lp.cost[c], (lp.lower[c], lp.upper[c])))
        .collect();
    for (row, &rhs) in lp.rows.iter().zip(&lp.rhs) {
        let expr: Vec<_> = row.iter().map(|&(c, a)| (vars[c], a)).collect();
        problem.add_constraint(expr, ComparisonOp::Eq, rhs);
    }
    let failed = |status| LpSolution {
        status,
        x: vec![f64::NAN; lp.num_vars()],
        objective: f64::NAN,
        iterations: 0,
    };
    match problem.solve() {
        Ok(outcome) => {
            let stats = outcome.stats();
            let solution = outcome
                .into_solution()
                .map_err(|_| LpError::NumericalFailure("sparse solve interrupted".into()))?;
            let mut x: Vec<f64> = vars.iter().map(|&v| solution.var_value_raw(v)).collect();
            for (c, v) in x.iter_mut().enumerate() {
                *v = v.clamp(lp.lower[c], lp.upper[c]);
            }
            let objective = lp.objective_at(&x);
            Ok(LpSolution {
                status: LpStatus::Optimal,
                x,
                objective,
                iterations: stats.lp_iterations as usize,
            })
        }
        Err(MlpError::Infeasible) => Ok(failed(LpStatus::Infeasible)),
        Err(MlpError::Unbounded) => Ok(failed(LpStatus::Unbounded)),
        Err(e) => Err(LpError::NumericalFailure(e.to_string())),
    }
}
