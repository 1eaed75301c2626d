mod common;

use dcc_core::admm::{run_admm, AdmmConfig};
use dcc_core::harness::solve_slot;
use dcc_core::kernel::{solve_balance_subproblem, Coord};
use dcc_core::lyapunov::{advance, derive_params, LyapunovParams};
use dcc_core::model::{
    battery_violations, check_decision, power_balance_residual, slot_cost, step_battery,
    step_queues, ClusterParams, Decision, SquareMatrix, SystemState,
};
use dcc_core::offline::{greedy_step, solve_offline, Backend, InitialState};
use dcc_core::scenario::{random_scenario, reference_scenario, tiny_scenario};
use dcc_core::traces::{load_trace_csv, write_trace_csv};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_decision(p: &ClusterParams, rng: &mut ChaCha8Rng) -> Decision {
    let ni = p.num_back();
    let mut d = Decision::zeros(p);
    for x in d
        .accept
        .iter_mut()
        .chain(&mut d.process)
        .chain(&mut d.buy)
        .chain(&mut d.sell)
    {
        *x = rng.gen_range(0.0..5.0);
    }
    for (l, x) in d.transfer.iter_mut().enumerate() {
        *x = rng.gen_range(0.0..=p.topology.links[l].capacity);
    }
    for i in 0..ni {
        d.charge[i] = rng.gen_range(0.0..=p.back[i].charge_max);
        d.discharge[i] = rng.gen_range(0.0..=p.back[i].discharge_max);
        for k in (i + 1)..ni {
            let c = p.topology.share_cap.get(i, k);
            let u = rng.gen_range(-c..=c);
            d.share.set(i, k, u);
            d.share.set(k, i, -u);
        }
    }
    d
}

/// A random in-bound state with matching virtual queues.
fn random_state(p: &ClusterParams, lyap: &LyapunovParams, rng: &mut ChaCha8Rng) -> SystemState {
    let bat = p
        .back
        .iter()
        .map(|b| rng.gen_range(b.energy_min..=b.energy_max))
        .collect();
    let mut s = lyap.initial_state(p, bat);
    s.q_front = p
        .front
        .iter()
        .map(|f| rng.gen_range(0.0..=f.queue_cap))
        .collect();
    s.q_back = p
        .back
        .iter()
        .map(|b| rng.gen_range(0.0..=b.queue_cap))
        .collect();
    s.h_front = s
        .q_front
        .iter()
        .zip(&lyap.theta)
        .map(|(q, t)| q - t)
        .collect();
    s.h_back = s.q_back.iter().zip(&lyap.phi).map(|(q, f)| q - f).collect();
    s
}

fn scenario(seed: u64, slots: usize) -> (ClusterParams, dcc_core::traces::TraceSet) {
    random_scenario(
        seed,
        1 + (seed % 3) as usize,
        1 + (seed / 3 % 2) as usize,
        slots,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn state_updates_are_affine(seed in any::<u64>()) {
        let (p, _) = scenario(seed, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d1, d2) = (random_decision(&p, &mut rng), random_decision(&p, &mut rng));
        let mid = d1.blend(&d2, 0.5);
        let qf: Vec<f64> = p.front.iter().map(|f| f.queue_cap / 2.0).collect();
        let qb: Vec<f64> = p.back.iter().map(|b| b.queue_cap / 2.0).collect();
        let bat: Vec<f64> = p.back.iter().map(|b| (b.energy_min + b.energy_max) / 2.0).collect();
        let (s1, s2, sm) = (
            step_queues(&qf, &qb, &d1, &p.topology),
            step_queues(&qf, &qb, &d2, &p.topology),
            step_queues(&qf, &qb, &mid, &p.topology),
        );
        for ((a, b), m) in s1.front.iter().chain(&s1.back).zip(s2.front.iter().chain(&s2.back)).zip(sm.front.iter().chain(&sm.back)) {
            prop_assert!((0.5 * (a + b) - m).abs() < 1e-9);
        }
        let (b1, b2, bm) = (step_battery(&bat, &d1, &p), step_battery(&bat, &d2, &p), step_battery(&bat, &mid, &p));
        for ((a, b), m) in b1.iter().zip(&b2).zip(&bm) {
            prop_assert!((0.5 * (a + b) - m).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_ignores_antisymmetric_sharing_changes(seed in any::<u64>()) {
        let (p, t) = scenario(seed, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let d = random_decision(&p, &mut rng);
        let mut e = d.clone();
        let n = p.num_back();
        let mut delta = SquareMatrix::zeros(n);
        for i in 0..n {
            for k in (i + 1)..n {
                let x = rng.gen_range(-1.0..1.0);
                delta.set(i, k, x);
                delta.set(k, i, -x);
            }
        }
        for i in 0..n {
            for k in 0..n {
                e.share.set(i, k, d.share.get(i, k) + delta.get(i, k));
            }
        }
        let input = t.slot(0);
        let (a, b) = (slot_cost(&d, &input, &p), slot_cost(&e, &input, &p));
        prop_assert!((a.f_total - b.f_total).abs() <= 1e-9 * a.f_total.abs().max(1.0));
    }

    #[test]
    fn per_slot_costs_have_expected_signs(seed in any::<u64>()) {
        let (p, t) = scenario(seed, 1);
        let lyap = derive_params(&p, &t.price_bounds()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&p, &lyap, &mut rng);
        let input = t.slot(0);
        let (d, _) = solve_slot(&s, &input, &p, &lyap).unwrap();
        check_decision(&d, &input, &p, 1e-9).unwrap();
        prop_assert!(d.share.is_antisymmetric());
        for r in power_balance_residual(&d, &input) {
            prop_assert!(r.abs() <= 1e-6);
        }
        let c = slot_cost(&d, &input, &p);
        prop_assert!(c.f_batt >= 0.0 && c.f_tran >= 0.0 && c.f_work >= 0.0);
        let floor: f64 = p
            .back
            .iter()
            .enumerate()
            .map(|(i, b)| -input.price_sell[i] * (input.pv[i] + b.discharge_max + p.topology.share_cap.row_sum(i)))
            .sum();
        prop_assert!(c.f_grid >= floor - 1e-9);
    }

    #[test]
    fn repaired_admm_iterates_are_feasible(seed in any::<u64>(), cap in 1usize..25) {
        let (p, t) = scenario(seed, 1);
        let lyap = derive_params(&p, &t.price_bounds()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&p, &lyap, &mut rng);
        let input = t.slot(0);
        let (d, _, _) = run_admm(&s, &input, &p, &lyap, &AdmmConfig::truncated_at(cap), None).unwrap();
        for r in power_balance_residual(&d, &input) {
            prop_assert!(r.abs() <= 1e-9);
        }
        prop_assert!(d.share.is_antisymmetric());
        for (l, &m) in d.transfer.iter().enumerate() {
            prop_assert!((0.0..=p.topology.links[l].capacity).contains(&m));
        }
        for (j, &a) in d.accept.iter().enumerate() {
            prop_assert!((0.0..=input.arrivals[j]).contains(&a));
        }
        for (i, b) in p.back.iter().enumerate() {
            prop_assert!((0.0..=b.service_cap).contains(&d.process[i]));
            prop_assert!((0.0..=b.charge_max).contains(&d.charge[i]));
            prop_assert!((0.0..=b.discharge_max).contains(&d.discharge[i]));
            prop_assert!(d.buy[i] >= 0.0 && d.sell[i] >= 0.0);
        }
        let q = step_queues(&s.q_front, &s.q_back, &d, &p.topology);
        for (j, f) in p.front.iter().enumerate() {
            prop_assert!(q.front[j] >= -1e-9 && q.front[j] <= f.queue_cap + 1e-9);
        }
    }

    #[test]
    fn greedy_steps_stay_within_bounds(seed in 0u64..1000) {
        let (p, t) = tiny_scenario(seed, 30);
        let lyap = derive_params(&p, &t.price_bounds()).unwrap();
        let threshold = t.median_buy_price();
        let mut s = lyap.initial_state(&p, lyap.initial_battery());
        for k in 0..t.len() {
            let input = t.slot(k);
            let g = greedy_step(&s, &input, &p, threshold).unwrap();
            check_decision(&g.decision, &input, &p, 1e-9).unwrap();
            let out = advance(&s, g.decision, &input, &p, &lyap, 0.0);
            prop_assert!(out.violations.is_empty(), "slot {k}: {:?}", out.violations);
            prop_assert!(battery_violations(&out.next.battery, &p).is_empty());
            s = out.next;
        }
    }
}

/// Checks that no feasible move along the balance row, or along a free
/// coordinate, lowers the objective.
fn locally_optimal(coords: &[Coord], rhs: f64, v: &[f64]) -> bool {
    let obj = |x: &[f64]| coords.iter().zip(x).map(|(c, &y)| c.value(y)).sum::<f64>();
    let base = obj(v);
    let row: f64 = coords.iter().zip(v).map(|(c, &y)| c.s * y).sum();
    if (row - rhs).abs() > 1e-8 {
        return false;
    }
    let inside = |c: &Coord, y: f64| y >= c.lo - 1e-15 && y <= c.hi + 1e-15;
    for eps in [1e-6, 1e-4, 1e-2, 1e-1] {
        for a in 0..coords.len() {
            for sign in [-1.0, 1.0] {
                let step = sign * eps;
                if coords[a].s == 0.0 {
                    let mut x = v.to_vec();
                    x[a] += step;
                    if inside(&coords[a], x[a]) && obj(&x) < base - 1e-8 {
                        return false;
                    }
                    continue;
                }
                for b in 0..coords.len() {
                    if b == a || coords[b].s == 0.0 {
                        continue;
                    }
                    let mut x = v.to_vec();
                    x[a] += step / coords[a].s;
                    x[b] -= step / coords[b].s;
                    if inside(&coords[a], x[a]) && inside(&coords[b], x[b]) && obj(&x) < base - 1e-8
                    {
                        return false;
                    }
                }
            }
        }
    }
    true
}

#[test]
fn balance_solutions_admit_no_improving_move() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut solved = 0;
    for _ in 0..2000 {
        let (coords, rhs) = common::random_balance_instance(&mut rng);
        if let Ok(sol) = solve_balance_subproblem(&coords, rhs) {
            solved += 1;
            assert!(
                locally_optimal(&coords, rhs, &sol.v),
                "{coords:?} {rhs} {:?}",
                sol.v
            );
        }
    }
    assert!(solved > 1500);
}

#[test]
fn offline_cost_does_not_increase_with_capacity() {
    let knobs: [fn(&mut ClusterParams); 7] = [
        |p| p.front.iter_mut().for_each(|f| f.queue_cap *= 1.5),
        |p| p.back.iter_mut().for_each(|b| b.queue_cap *= 1.5),
        |p| p.topology.links.iter_mut().for_each(|l| l.capacity *= 1.5),
        |p| p.back.iter_mut().for_each(|b| b.service_cap *= 1.5),
        |p| p.back.iter_mut().for_each(|b| b.charge_max *= 1.5),
        |p| p.back.iter_mut().for_each(|b| b.discharge_max *= 1.5),
        |p| p.topology.share_cap = p.topology.share_cap.scaled(1.5),
    ];
    for seed in 0..6 {
        let (p, t) = tiny_scenario(seed, 24);
        let bat: Vec<f64> = p
            .back
            .iter()
            .map(|b| (b.energy_min + b.energy_max) / 2.0)
            .collect();
        let init = InitialState::empty(&p, bat.clone());
        let base = solve_offline(&t, &p, t.len(), &init, Backend::Sparse, &mut |_| {})
            .unwrap()
            .total;
        for (n, knob) in knobs.iter().enumerate() {
            let mut q = p.clone();
            knob(&mut q);
            let init = InitialState::empty(&q, bat.clone());
            let bigger = solve_offline(&t, &q, t.len(), &init, Backend::Sparse, &mut |_| {})
                .unwrap()
                .total;
            assert!(
                bigger <= base + 1e-7 * base.abs().max(1.0),
                "seed {seed} knob {n}: {bigger} > {base}"
            );
        }
    }
}

#[test]
fn virtual_queues_grow_sublinearly() {
    let slots = 2000;
    let (p, t) = reference_scenario(21, slots);
    let lyap = derive_params(&p, &t.price_bounds()).unwrap();
    let mut s = lyap.initial_state(&p, lyap.initial_battery());
    let norm = |s: &SystemState| {
        s.h_front
            .iter()
            .chain(&s.h_back)
            .chain(&s.l)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    };
    let initial = norm(&s);
    for k in 0..slots {
        let input = t.slot(k);
        let (d, obj) = solve_slot(&s, &input, &p, &lyap).unwrap();
        s = advance(&s, d, &input, &p, &lyap, obj).next;
    }
    assert!(
        norm(&s) / slots as f64 <= 0.01 * initial,
        "{} vs {initial}",
        norm(&s)
    );
}

#[test]
fn trace_files_round_trip_byte_identical() {
    let (_, t) = reference_scenario(8, 40);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_trace_csv(&t, a.path()).unwrap();
    let loaded = load_trace_csv(a.path()).unwrap();
    write_trace_csv(&loaded, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
}
