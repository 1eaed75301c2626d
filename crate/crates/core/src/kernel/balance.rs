//! Separable box-constrained problem with a single linear equality:
//!
//! ```text
//!   min  sum_k ½ q_k v_k² + g_k v_k
//!   s.t. sum_k s_k v_k = rhs,   lo_k <= v_k <= hi_k
//! ```
//!
//! with `q_k >= 0` and `s_k ∈ {-1, 0, +1}`. For a fixed multiplier `ν` each
//! coordinate minimizes `½ q v² + (g - ν s) v` over its box in closed form,
//! and the aggregate `S(ν) = Σ s_k v_k(ν)` is non-decreasing. Bisection on
//! `ν` brackets the root; the residual left by bang-bang coordinates tied at
//! the root is redistributed along the bracket.

use thiserror::Error;

const MAX_BISECTIONS: usize = 200;
const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coord {
    /// Quadratic weight; zero for a linear coordinate.
    pub q: f64,
    pub g: f64,
    /// Coefficient in the equality row.
    pub s: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Coord {
    pub fn linear(g: f64, s: f64, lo: f64, hi: f64) -> Self {
        Self {
            q: 0.0,
            g,
            s,
            lo,
            hi,
        }
    }

    pub fn quadratic(q: f64, g: f64, s: f64, lo: f64, hi: f64) -> Self {
        Self { q, g, s, lo, hi }
    }

    pub fn value(&self, v: f64) -> f64 {
        0.5 * self.q * v * v + self.g * v
    }

    /// Minimizer of `½ q v² + (g - ν s) v` on the box. Linear coordinates
    /// with zero reduced cost sit at `lo`.
    fn respond(&self, nu: f64) -> f64 {
        let slope = self.g - nu * self.s;
        if self.q > 0.0 {
            (-slope / self.q).clamp(self.lo, self.hi)
        } else if slope >= 0.0 {
            self.lo
        } else {
            self.hi
        }
    }

    /// Multipliers at which the response changes regime.
    fn breakpoints(&self) -> [f64; 2] {
        if self.s == 0.0 {
            return [0.0, 0.0];
        }
        if self.q > 0.0 {
            [
                (self.g + self.q * self.lo) / self.s,
                (self.g + self.q * self.hi) / self.s,
            ]
        } else {
            [self.g / self.s, self.g / self.s]
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("balance {rhs} outside the achievable interval [{min}, {max}]")]
    Infeasible { rhs: f64, min: f64, max: f64 },
    #[error("invalid coordinate {index}: {reason}")]
    InvalidCoord { index: usize, reason: &'static str },
    #[error("bisection did not close the balance residual {residual}")]
    NumericalFailure { residual: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceSolution {
    pub v: Vec<f64>,
    /// Multiplier of the equality row.
    pub nu: f64,
    pub objective: f64,
    pub bisections: usize,
}

fn aggregate(coords: &[Coord], nu: f64) -> f64 {
    coords.iter().map(|c| c.s * c.respond(nu)).sum()
}

fn validate(coords: &[Coord]) -> Result<(), BalanceError> {
    for (index, c) in coords.iter().enumerate() {
        let bad = |reason| Err(BalanceError::InvalidCoord { index, reason });
        if !(c.q >= 0.0) || !c.q.is_finite() {
            return bad("quadratic weight must be finite and non-negative");
        }
        if !c.g.is_finite() || !c.s.is_finite() {
            return bad("non-finite coefficient");
        }
        if !(c.lo.is_finite() && c.hi.is_finite() && c.lo <= c.hi) {
            return bad("box must be finite with lo <= hi");
        }
    }
    Ok(())
}

/// Solves the separable balance problem described in the module docs.
pub fn solve_balance_subproblem(
    coords: &[Coord],
    rhs: f64,
) -> Result<BalanceSolution, BalanceError> {
    validate(coords)?;
    let s_min: f64 = coords.iter().map(|c| (c.s * c.lo).min(c.s * c.hi)).sum();
    let s_max: f64 = coords.iter().map(|c| (c.s * c.lo).max(c.s * c.hi)).sum();
    let slack = BALANCE_TOL * (1.0 + rhs.abs());
    if rhs < s_min - slack || rhs > s_max + slack {
        return Err(BalanceError::Infeasible {
            rhs,
            min: s_min,
            max: s_max,
        });
    }
    let rhs = rhs.clamp(s_min, s_max);

    let (mut lo, mut hi) = coords
        .iter()
        .flat_map(|c| c.breakpoints())
        .fold((0.0_f64, 0.0_f64), |(a, b), p| (a.min(p), b.max(p)));
    lo -= 1.0;
    hi += 1.0;

    let mut bisections = 0;
    if aggregate(coords, lo) < rhs && aggregate(coords, hi) > rhs {
        while bisections < MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            bisections += 1;
            let s = aggregate(coords, mid);
            if s < rhs {
                lo = mid;
            } else if s > rhs {
                hi = mid;
            } else {
                lo = mid;
                hi = mid;
                break;
            }
        }
    } else if aggregate(coords, lo) >= rhs {
        hi = lo;
    } else {
        lo = hi;
    }

    // v(lo) undershoots and v(hi) overshoots; move coordinates from the
    // former toward the latter until the row balances.
    let v_hi: Vec<f64> = coords.iter().map(|c| c.respond(hi)).collect();
    let mut v: Vec<f64> = coords.iter().map(|c| c.respond(lo)).collect();
    let mut deficit = rhs - coords.iter().zip(&v).map(|(c, x)| c.s * x).sum::<f64>();
    let order = (0..coords.len())
        .filter(|&k| coords[k].q == 0.0)
        .chain((0..coords.len()).filter(|&k| coords[k].q > 0.0));
    for k in order {
        if deficit.abs() <= 0.0 {
            break;
        }
        let c = &coords[k];
        let gain = c.s * (v_hi[k] - v[k]);
        if gain == 0.0 || gain.signum() != deficit.signum() {
            continue;
        }
        let frac = (deficit / gain).min(1.0);
        v[k] += frac * (v_hi[k] - v[k]);
        v[k] = v[k].clamp(c.lo, c.hi);
        deficit = rhs - coords.iter().zip(&v).map(|(c, x)| c.s * x).sum::<f64>();
    }
    // Rounding dust lands on any coordinate with room.
    if deficit.abs() > 0.0 {
        for (k, c) in coords.iter().enumerate() {
            if c.s == 0.0 {
                continue;
            }
            let target = (v[k] + deficit / c.s).clamp(c.lo, c.hi);
            deficit -= c.s * (target - v[k]);
            v[k] = target;
            if deficit.abs() <= 0.0 {
                break;
            }
        }
    }
    let residual = rhs - coords.iter().zip(&v).map(|(c, x)| c.s * x).sum::<f64>();
    if residual.abs() > slack {
        return Err(BalanceError::NumericalFailure { residual });
    }
    let objective = coords.iter().zip(&v).map(|(c, x)| c.value(*x)).sum();
    Ok(BalanceSolution {
        v,
        nu: 0.5 * (lo + hi),
        objective,
        bisections,
    })
}
