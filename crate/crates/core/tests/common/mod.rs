//! Independent reference solvers used by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use dcc_core::kernel::{solve_lp, Coord, LinearProgram, LpStatus};
use rand::Rng;

/// Dense equality-form LP with finite boxes: `min c·x, A x = b, lo <= x <= hi`.
#[derive(Debug, Clone)]
pub struct SmallLp {
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SmallLp {
    pub fn to_program(&self) -> LinearProgram {
        let mut lp = LinearProgram::new();
        for k in 0..self.c.len() {
            lp.add_var(format!("x{k}"), self.c[k], self.lo[k], self.hi[k]);
        }
        for (row, &rhs) in self.a.iter().zip(&self.b) {
            let terms = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(k, v)| (k, *v))
                .collect();
            lp.add_eq(terms, rhs);
        }
        lp
    }
}

/// Rank of a small dense matrix by elimination with partial pivoting.
pub fn rank(rows: &[Vec<f64>]) -> usize {
    let mut m: Vec<Vec<f64>> = rows.to_vec();
    let (nr, nc) = (m.len(), m.first().map_or(0, Vec::len));
    let mut r = 0;
    for col in 0..nc {
        if r == nr {
            break;
        }
        let piv = (r..nr)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[piv][col].abs() < 1e-9 {
            continue;
        }
        m.swap(r, piv);
        for i in (r + 1)..nr {
            let f = m[i][col] / m[r][col];
            for k in col..nc {
                m[i][k] -= f * m[r][k];
            }
        }
        r += 1;
    }
    r
}

/// Solves a square system; `None` when (numerically) singular.
pub fn solve_square(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &v)| {
            let mut r = row.clone();
            r.push(v);
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-10 {
            return None;
        }
        m.swap(col, piv);
        for i in 0..n {
            if i != col {
                let f = m[i][col] / m[col][col];
                for k in col..=n {
                    m[i][k] -= f * m[col][k];
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Optimal value by enumerating every basic solution: `m` basic columns,
/// the rest at one of their bounds. Requires full row rank. `None` means
/// infeasible.
pub fn vertex_enumeration(p: &SmallLp) -> Option<f64> {
    let (m, n) = (p.a.len(), p.c.len());
    let mut best: Option<f64> = None;
    for basis in combinations(n, m) {
        let nonbasic: Vec<usize> = (0..n).filter(|k| !basis.contains(k)).collect();
        let a_b: Vec<Vec<f64>> =
            p.a.iter()
                .map(|row| basis.iter().map(|&k| row[k]).collect())
                .collect();
        for mask in 0..(1u32 << nonbasic.len()) {
            let mut x = vec![0.0; n];
            for (bit, &k) in nonbasic.iter().enumerate() {
                x[k] = if mask >> bit & 1 == 1 {
                    p.hi[k]
                } else {
                    p.lo[k]
                };
            }
            let rhs: Vec<f64> =
                p.a.iter()
                    .zip(&p.b)
                    .map(|(row, &b)| b - nonbasic.iter().map(|&k| row[k] * x[k]).sum::<f64>())
                    .collect();
            let Some(xb) = solve_square(&a_b, &rhs) else {
                continue;
            };
            let feasible = basis
                .iter()
                .zip(&xb)
                .all(|(&k, &v)| v >= p.lo[k] - 1e-9 && v <= p.hi[k] + 1e-9);
            if !feasible {
                continue;
            }
            for (&k, &v) in basis.iter().zip(&xb) {
                x[k] = v;
            }
            let obj: f64 = p.c.iter().zip(&x).map(|(c, v)| c * v).sum();
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
    }
    best
}

/// Random full-row-rank LP; about one in ten has an arbitrary right-hand
/// side and may be infeasible. Integer data in a third of the cases makes
/// degenerate vertices and ties common.
pub fn random_small_lp<R: Rng>(rng: &mut R) -> SmallLp {
    loop {
        let n: usize = rng.gen_range(2..=6);
        let m = rng.gen_range(1..=n.saturating_sub(1).min(3));
        let integer = rng.gen_bool(0.33);
        let mut draw = |lo: f64, hi: f64| {
            if integer {
                rng.gen_range(lo as i64..=hi as i64) as f64
            } else {
                rng.gen_range(lo..hi)
            }
        };
        let a: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| draw(-3.0, 3.0)).collect())
            .collect();
        if rank(&a) < m {
            continue;
        }
        let c: Vec<f64> = (0..n).map(|_| draw(-5.0, 5.0)).collect();
        let lo: Vec<f64> = (0..n).map(|_| draw(-3.0, 1.0)).collect();
        let hi: Vec<f64> = lo
            .iter()
            .map(|&l| {
                if rng.gen_bool(0.1) {
                    l
                } else {
                    l + rng.gen_range(0.5..4.0)
                }
            })
            .collect();
        let b: Vec<f64> = if rng.gen_bool(0.1) {
            (0..m).map(|_| rng.gen_range(-10.0..10.0)).collect()
        } else {
            let x0: Vec<f64> = lo
                .iter()
                .zip(&hi)
                .map(|(&l, &h)| rng.gen_range(l..=h))
                .collect();
            a.iter()
                .map(|row| row.iter().zip(&x0).map(|(r, x)| r * x).sum())
                .collect()
        };
        return SmallLp { c, a, b, lo, hi };
    }
}

/// Outcome of the epigraph oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpigraphResult {
    Optimal(f64),
    Infeasible,
}

/// Solves the balance subproblem as a sequence of LPs: each quadratic term
/// `½ q v²` is replaced by an epigraph variable bounded below by tangent
/// cuts, and cuts are added at the LP solution until the outer
/// approximation is tight.
pub fn epigraph_oracle(coords: &[Coord], rhs: f64) -> EpigraphResult {
    let mut cuts: Vec<Vec<f64>> = coords
        .iter()
        .map(|c| {
            if c.q > 0.0 {
                vec![c.lo, 0.5 * (c.lo + c.hi), c.hi]
            } else {
                Vec::new()
            }
        })
        .collect();
    for _ in 0..2000 {
        let mut lp = LinearProgram::new();
        let vars: Vec<usize> = coords
            .iter()
            .enumerate()
            .map(|(k, c)| lp.add_var(format!("v{k}"), c.g, c.lo, c.hi))
            .collect();
        let mut epi = vec![None; coords.len()];
        for (k, c) in coords.iter().enumerate() {
            if c.q == 0.0 {
                continue;
            }
            let cap = 0.5 * c.q * c.lo.abs().max(c.hi.abs()).powi(2);
            let t = lp.add_var(format!("t{k}"), 1.0, 0.0, cap);
            epi[k] = Some(t);
            for &p in &cuts[k] {
                // t >= q p v - q p²/2, written with a non-negative slack.
                let s = lp.add_var(format!("s{k}"), 0.0, 0.0, f64::INFINITY);
                lp.add_eq(
                    vec![(t, 1.0), (vars[k], -c.q * p), (s, -1.0)],
                    -0.5 * c.q * p * p,
                );
            }
        }
        let row: Vec<(usize, f64)> = coords
            .iter()
            .zip(&vars)
            .filter(|(c, _)| c.s != 0.0)
            .map(|(c, &v)| (v, c.s))
            .collect();
        if row.is_empty() {
            if rhs.abs() > 1e-9 {
                return EpigraphResult::Infeasible;
            }
        } else {
            lp.add_eq(row, rhs);
        }
        let sol = solve_lp(&lp).expect("well-formed epigraph program");
        match sol.status {
            LpStatus::Infeasible => return EpigraphResult::Infeasible,
            LpStatus::Unbounded => panic!("epigraph program cannot be unbounded"),
            LpStatus::Optimal => {}
        }
        // The LP value bounds the optimum from below; the true objective at
        // the LP point bounds it from above.
        let lower = sol.objective;
        let upper: f64 = coords
            .iter()
            .zip(&vars)
            .map(|(c, &v)| c.value(sol.x[v]))
            .sum();
        if upper - lower <= 1e-9 * upper.abs().max(1.0) {
            return EpigraphResult::Optimal(upper);
        }
        for (k, c) in coords.iter().enumerate() {
            if let Some(t) = epi[k] {
                let v = sol.x[vars[k]];
                if 0.5 * c.q * v * v - sol.x[t] > 1e-12 {
                    cuts[k].push(v);
                }
            }
        }
    }
    panic!("epigraph oracle did not converge");
}

/// Random balance instance: a mix of linear and quadratic coordinates with
/// row coefficients in {-1, 0, 1}; the right-hand side is usually
/// achievable.
pub fn random_balance_instance<R: Rng>(rng: &mut R) -> (Vec<Coord>, f64) {
    let n = rng.gen_range(1..=8);
    let coords: Vec<Coord> = (0..n)
        .map(|_| {
            let lo = if rng.gen_bool(0.4) {
                0.0
            } else {
                rng.gen_range(-4.0..0.0)
            };
            let hi = lo + rng.gen_range(0.0..6.0);
            let s = [-1.0, 0.0, 1.0, 1.0, -1.0][rng.gen_range(0..5)];
            let g = rng.gen_range(-5.0..5.0);
            if rng.gen_bool(0.5) {
                Coord::quadratic(rng.gen_range(0.1..5.0), g, s, lo, hi)
            } else {
                Coord::linear(g, s, lo, hi)
            }
        })
        .collect();
    let (min, max) = coords.iter().fold((0.0, 0.0), |(a, b), c| {
        let (x, y) = (c.s * c.lo, c.s * c.hi);
        (a + x.min(y), b + x.max(y))
    });
    let rhs = if rng.gen_bool(0.1) {
        rng.gen_range(min - 5.0..max + 5.0)
    } else {
        rng.gen_range(min..=max)
    };
    (coords, rhs)
}
