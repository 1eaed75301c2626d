//! Ready-made clusters: the three-site reference deployment and seeded
//! random instances that satisfy the capacity and price assumptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    BackEndParams, ClusterParams, ClusterTopology, FrontEndParams, Link, SquareMatrix,
};
use crate::traces::{synth_generate, SynthShape, TraceSet};

/// Three back ends, two front ends, every pair linked.
pub fn reference_params() -> ClusterParams {
    let back = [(4.0, 6.0, 5.0), (5.0, 7.5, 5.0), (3.0, 4.5, 4.0)]
        .into_iter()
        .map(|(charge_max, discharge_max, service_cap)| BackEndParams {
            queue_cap: 200.0,
            service_cap,
            charge_max,
            discharge_max,
            energy_min: 10.0,
            energy_max: 85.0,
            wear_cost: 0.04,
        })
        .collect();
    let mut topology = ClusterTopology::fully_linked(3, 2, 2.0, 0.01, 2.0);
    for (idx, link) in topology.links.iter_mut().enumerate() {
        link.bandwidth_cost = 0.01 + 0.002 * idx as f64;
    }
    ClusterParams {
        topology,
        front: vec![
            FrontEndParams {
                queue_cap: 200.0,
                rejection_cost: 0.5,
                arrival_max: 0.0,
            };
            2
        ],
        back,
        eta_charge: 0.9,
        eta_discharge: 0.95,
    }
}

pub fn reference_shape() -> SynthShape {
    SynthShape::default()
}

/// Reference cluster and a synthetic trace whose declared arrival bounds
/// are copied into the front-end parameters.
pub fn reference_scenario(seed: u64, slots: usize) -> (ClusterParams, TraceSet) {
    let mut params = reference_params();
    let trace = synth_generate(seed, slots, 2, 3, &reference_shape());
    adopt_arrival_bounds(&mut params, &trace);
    (params, trace)
}

pub fn adopt_arrival_bounds(params: &mut ClusterParams, trace: &TraceSet) {
    for (f, &a) in params.front.iter_mut().zip(&trace.bounds.arrival_max) {
        f.arrival_max = a;
    }
}

/// Two back ends and one front end with reference-like parameters jittered
/// by up to 20%, on a synthetic trace with a jittered shape.
pub fn tiny_scenario(seed: u64, slots: usize) -> (ClusterParams, TraceSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn jitter(rng: &mut ChaCha8Rng, x: f64) -> f64 {
        x * rng.gen_range(0.8..1.2)
    }
    let back = (0..2)
        .map(|_| {
            let charge_max = jitter(&mut rng, 4.0);
            BackEndParams {
                queue_cap: 200.0,
                service_cap: jitter(&mut rng, 5.0),
                charge_max,
                discharge_max: 1.5 * charge_max,
                energy_min: 10.0,
                energy_max: jitter(&mut rng, 85.0),
                wear_cost: 0.04,
            }
        })
        .collect();
    let mut topology =
        ClusterTopology::fully_linked(2, 1, jitter(&mut rng, 2.0), 0.0, jitter(&mut rng, 2.0));
    for link in &mut topology.links {
        link.bandwidth_cost = jitter(&mut rng, 0.012);
    }
    let shape = SynthShape {
        period: rng.gen_range(48..=288),
        arrival_base: jitter(&mut rng, 2.0),
        pv_peak: jitter(&mut rng, 3.0),
        price_base: jitter(&mut rng, 0.06),
        phase_step: rng.gen_range(0.0..1.0),
        ..SynthShape::default()
    };
    let mut params = ClusterParams {
        topology,
        front: vec![FrontEndParams {
            queue_cap: 200.0,
            rejection_cost: jitter(&mut rng, 0.5),
            arrival_max: 0.0,
        }],
        back,
        eta_charge: 0.9,
        eta_discharge: 0.95,
    };
    let trace = synth_generate(rng.gen(), slots, 1, 2, &shape);
    adopt_arrival_bounds(&mut params, &trace);
    (params, trace)
}

/// Random cluster with `back_ends` x `front_ends` sites and a matching
/// synthetic trace. Capacities are drawn so that the capacity assumptions
/// hold and the admissible V interval is non-empty; the wear cost is set so
/// the price assumption holds with margin.
pub fn random_scenario(
    seed: u64,
    back_ends: usize,
    front_ends: usize,
    slots: usize,
) -> (ClusterParams, TraceSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = SynthShape {
        period: rng.gen_range(24..=288),
        arrival_base: rng.gen_range(1.0..3.0),
        arrival_amp: rng.gen_range(0.0..1.5),
        arrival_noise: rng.gen_range(0.0..0.8),
        pv_peak: rng.gen_range(0.0..5.0),
        pv_noise: rng.gen_range(0.0..0.5),
        price_base: rng.gen_range(0.04..0.08),
        price_amp: rng.gen_range(0.0..0.02),
        price_noise: rng.gen_range(0.0..0.005),
        sell_fraction: rng.gen_range(0.3..0.8),
        phase_step: rng.gen_range(0.0..1.0),
    };
    let trace = synth_generate(rng.gen(), slots, front_ends, back_ends, &shape);

    let mut links = Vec::new();
    for j in 0..front_ends {
        for i in 0..back_ends {
            // Keep at least one link per node; drop others at random.
            if i == j % back_ends || j == i % front_ends || rng.gen_bool(0.7) {
                links.push(Link {
                    front: j,
                    back: i,
                    capacity: rng.gen_range(0.5..3.0),
                    bandwidth_cost: rng.gen_range(0.005..0.03),
                });
            }
        }
    }
    let mut share_cap = SquareMatrix::zeros(back_ends);
    for i in 0..back_ends {
        for k in (i + 1)..back_ends {
            let u = if rng.gen_bool(0.8) {
                rng.gen_range(0.0..3.0)
            } else {
                0.0
            };
            share_cap.set(i, k, u);
            share_cap.set(k, i, u);
        }
    }
    let topology = ClusterTopology {
        back_ends,
        front_ends,
        links,
        share_cap,
    };
    let eta_charge = rng.gen_range(0.85..1.0);
    let eta_discharge = rng.gen_range(0.85..1.0);
    let eta = eta_charge * eta_discharge;
    let pb = trace.bounds.buy_max;
    let ps = trace.bounds.sell_min;
    let beta_floor = ((pb * eta - ps) / (1.0 + eta)).max(0.0);

    let service_caps: Vec<f64> = (0..back_ends).map(|_| rng.gen_range(3.0..7.0)).collect();
    let e_max = service_caps.iter().copied().fold(0.0, f64::max);
    let front: Vec<FrontEndParams> = (0..front_ends)
        .map(|j| {
            let arrival_max = trace.bounds.arrival_max[j];
            let out = topology.front_capacity(j);
            let rejection_cost = rng.gen_range(0.2..1.0);
            // Room for the upper V bound: Q_F - A_max - (E_max + ΣM) > 0.
            let floor = arrival_max + e_max + out;
            FrontEndParams {
                queue_cap: floor * rng.gen_range(1.5..20.0) + 10.0,
                rejection_cost,
                arrival_max,
            }
        })
        .collect();
    let qf_max = front.iter().map(|f| f.queue_cap).fold(0.0, f64::max);
    let back: Vec<BackEndParams> = service_caps
        .iter()
        .enumerate()
        .map(|(i, &service_cap)| {
            let charge_max = rng.gen_range(0.0..5.0);
            let discharge_max = rng.gen_range(0.0..6.0);
            let energy_min = rng.gen_range(0.0..20.0);
            let span = (eta_charge * charge_max + discharge_max / eta_discharge)
                * rng.gen_range(1.2..6.0)
                + 1.0;
            let inflow = topology.back_capacity(i);
            BackEndParams {
                // A back queue at least as deep as every front queue keeps
                // the lower V bounds non-positive.
                queue_cap: qf_max + inflow + rng.gen_range(0.0..50.0),
                service_cap,
                charge_max,
                discharge_max,
                energy_min,
                energy_max: energy_min + span,
                wear_cost: beta_floor * rng.gen_range(1.05..1.6) + rng.gen_range(0.0..0.01),
            }
        })
        .collect();
    let params = ClusterParams {
        topology,
        front,
        back,
        eta_charge,
        eta_discharge,
    };
    (params, trace)
}
