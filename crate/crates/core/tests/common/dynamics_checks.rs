//! Randomized invariant checks on the neuron dynamics. Each returns the
//! first counterexample found over `cases` proptest cases.
#![allow(dead_code)]

use ncp_core::dynamics::{
    electrical_derivative, electrical_rearranged_derivative, ltc_derivative, rollout, step, SolverConfig, SolverMethod,
};
use ncp_core::params::ModelParams;
use ncp_core::scalar::sigmoid;
use ncp_core::wiring::{build_fully_connected, WiringGraph};
use ncp_core::ModelKind;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Net {
    pub wiring: WiringGraph,
    pub params: ModelParams<f64>,
    pub state: Vec<f64>,
    pub inputs: Vec<f64>,
}

/// Random wiring (a random subset of all-to-all edges) with randomized
/// parameters in their valid ranges.
pub fn random_net(kind: ModelKind, seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=4);
    let mut wiring = build_fully_connected(n, m).unwrap();
    let keep = rng.random_range(0.2..=1.0);
    wiring.edges.retain(|_| rng.random_bool(keep));
    let mut params = ModelParams::init(kind, &wiring, rng.random());
    let r = params.g_leak_range();
    for v in &mut params.values[r] {
        *v = rng.random_range(0.0..1.0);
    }
    let r = params.e_leak_range();
    for v in &mut params.values[r] {
        let mag = rng.random_range(0.1..1.0);
        *v = if rng.random_bool(0.5) { mag } else { -mag };
    }
    let r = params.syn_g_range();
    for v in &mut params.values[r] {
        *v = rng.random_range(0.0..1.0);
    }
    if kind.is_chemical() {
        let r = params.syn_a_range();
        for v in &mut params.values[r] {
            *v = rng.random_range(-10.0..10.0);
        }
        let r = params.syn_b_range();
        for v in &mut params.values[r] {
            *v = rng.random_range(-3.0..3.0);
        }
        let r = params.syn_erev_range();
        for v in &mut params.values[r] {
            *v = rng.random_range(-1.0..1.0);
        }
        let r = params.capacitance_range();
        for v in &mut params.values[r] {
            *v = rng.random_range(0.1..2.0);
        }
    }
    let state = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let inputs = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    Net {
        wiring,
        params,
        state,
        inputs,
    }
}

fn run(cases: u32, f: impl Fn(u64) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&any::<u64>(), f).map_err(|e| e.to_string())
}

fn presynaptic(net: &Net, state: &[f64], k: usize) -> f64 {
    let slot = net.wiring.source_slot(&net.wiring.edges[k]);
    if slot < state.len() {
        state[slot]
    } else {
        net.inputs[slot - state.len()]
    }
}

/// Ohmic form and its rearrangement around the leak reversal agree.
pub fn electrical_forms_agree(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let net = random_net(ModelKind::Electrical, seed);
        let a = electrical_derivative(&net.state, &net.inputs, &net.params, &net.wiring).unwrap();
        let b = electrical_rearranged_derivative(&net.state, &net.inputs, &net.params, &net.wiring).unwrap();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            prop_assert!((x - y).abs() <= 1e-10, "neuron {i}: {x} vs {y}");
        }
        Ok(())
    })
}

/// Pushes a random subset of neurons onto or beyond their hull bounds.
fn place_outside(net: &mut Net, hull: &[(f64, f64)], rng: &mut ChaCha8Rng) {
    for (i, &(lo, hi)) in hull.iter().enumerate() {
        let overshoot = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) };
        match rng.random_range(0..3) {
            0 => net.state[i] = hi + overshoot,
            1 => net.state[i] = lo - overshoot,
            _ => {}
        }
    }
}

fn check_hull_signs(dx: &[f64], state: &[f64], hull: &[(f64, f64)]) -> Result<(), TestCaseError> {
    for (i, &(lo, hi)) in hull.iter().enumerate() {
        if state[i] >= hi {
            prop_assert!(dx[i] <= 0.0, "neuron {i} at {} above hull max {hi} has dx {}", state[i], dx[i]);
        }
        if state[i] <= lo {
            prop_assert!(dx[i] >= 0.0, "neuron {i} at {} below hull min {lo} has dx {}", state[i], dx[i]);
        }
    }
    Ok(())
}

/// Above the largest reversal potential feeding a neuron the chemical
/// network pulls it down; below the smallest it pushes it up.
pub fn ltc_hull_signs(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let mut net = random_net(ModelKind::Ltc, seed);
        let n = net.state.len();
        let mut hull: Vec<(f64, f64)> = (0..n).map(|i| (net.params.neuron(i).e_leak, net.params.neuron(i).e_leak)).collect();
        for (k, e) in net.wiring.edges.iter().enumerate() {
            let r = net.params.chemical(k).e_rev;
            hull[e.target] = (hull[e.target].0.min(r), hull[e.target].1.max(r));
        }
        place_outside(&mut net, &hull, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let dx = ltc_derivative(&net.state, &net.inputs, &net.params, &net.wiring).unwrap();
        check_hull_signs(&dx, &net.state, &hull)
    })
}

/// Same property for the Ohmic network, with the hull spanned by the leak
/// reversal and the current presynaptic values. Each neuron is moved on
/// its own so that the other potentials, and hence the hull, stay fixed.
pub fn electrical_hull_signs(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let net = random_net(ModelKind::Electrical, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for i in 0..net.state.len() {
            let e_l = net.params.neuron(i).e_leak;
            let mut hull = (e_l, e_l);
            for (k, e) in net.wiring.edges.iter().enumerate() {
                // A self-loop contributes g (x - x) = 0 wherever x is.
                if e.target == i && net.wiring.source_slot(e) != i {
                    let y = presynaptic(&net, &net.state, k);
                    hull = (hull.0.min(y), hull.1.max(y));
                }
            }
            let overshoot = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) };
            for x_i in [hull.1 + overshoot, hull.0 - overshoot] {
                let mut state = net.state.clone();
                state[i] = x_i;
                let dx = electrical_derivative(&state, &net.inputs, &net.params, &net.wiring).unwrap();
                if x_i >= hull.1 {
                    prop_assert!(dx[i] <= 0.0, "neuron {i} at {x_i} above hull max {} has dx {}", hull.1, dx[i]);
                }
                if x_i <= hull.0 {
                    prop_assert!(dx[i] >= 0.0, "neuron {i} at {x_i} below hull min {} has dx {}", hull.0, dx[i]);
                }
            }
        }
        Ok(())
    })
}

/// Semi-implicit SLTC potentials never exceed
/// `max(|x(0)|, |e_l| / S(g_l))` over long random-input rollouts.
pub fn sltc_bound(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let net = random_net(ModelKind::Sltc, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let solver = SolverConfig {
            method: SolverMethod::SemiImplicitEuler,
            dt: rng.random_range(0.01..3.0),
            unfold_steps: rng.random_range(1..=6),
        };
        let bound: Vec<f64> = (0..net.state.len())
            .map(|i| {
                let p = net.params.neuron(i);
                net.state[i].abs().max(p.e_leak.abs() / sigmoid(p.g_leak))
            })
            .collect();
        let mut x = net.state.clone();
        for t in 0..200 {
            let u: Vec<f64> = (0..net.inputs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            x = step(ModelKind::Sltc, &x, &u, &net.params, &net.wiring, &solver).unwrap();
            for (i, v) in x.iter().enumerate() {
                prop_assert!(v.abs() <= bound[i] * (1.0 + 1e-12), "t {t} neuron {i}: |{v}| > {}", bound[i]);
            }
        }
        Ok(())
    })
}

/// States after every frame, concatenated.
fn trajectory(net: &Net, kind: ModelKind, frames: &[Vec<f64>], frame_dt: f64, unfold_steps: usize) -> Vec<f64> {
    let solver = SolverConfig {
        method: SolverMethod::ExplicitEuler,
        dt: frame_dt,
        unfold_steps,
    };
    let mut x = net.state.clone();
    let mut out = Vec::with_capacity(frames.len() * x.len());
    for u in frames {
        x = step(kind, &x, u, &net.params, &net.wiring, &solver).unwrap();
        out.extend_from_slice(&x);
    }
    out
}

/// Gershgorin bound on the Jacobian's spectral radius over the state box the
/// tests use (|x| <= 2, |e_rev| <= 1).
fn stiffness_bound(net: &Net, kind: ModelKind) -> f64 {
    let p = &net.params;
    let n = net.state.len();
    let mut row: Vec<f64> = p.values[p.g_leak_range()].to_vec();
    let g = p.syn_g_range();
    for (k, e) in net.wiring.edges.iter().enumerate() {
        let slope = if kind.is_chemical() {
            1.0 + 0.75 * p.values[p.syn_a_range().start + k].abs()
        } else {
            2.0
        };
        row[e.target] += p.values[g.start + k] * slope;
    }
    let c = p.capacitance_range();
    (0..n)
        .map(|i| row[i] / if c.is_empty() { 1.0 } else { p.values[c.start + i] })
        .fold(0.0, f64::max)
}

/// Ratio `err(h) / err(h / 2)` of explicit Euler against a run at `h / 100`,
/// in the max norm over the whole trajectory, for one random net and smooth
/// inputs. The base step keeps `h * stiffness <= 0.2` so the comparison sits
/// in the asymptotic regime. `None` when the error is too small to measure, or when the signed
/// error at the worst entry flips between the two step sizes (a zero
/// crossing, so not yet in the asymptotic regime).
pub fn euler_error_ratio(kind: ModelKind, seed: u64) -> Option<f64> {
    let mut net = random_net(kind, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    net.state.iter_mut().for_each(|x| *x *= 0.5);
    let frame_dt = 0.5;
    let phase: Vec<f64> = (0..net.inputs.len()).map(|_| rng.random_range(0.0..6.3)).collect();
    let frames: Vec<Vec<f64>> = (0..8)
        .map(|t| phase.iter().map(|p| (0.7 * t as f64 * frame_dt + p).sin()).collect())
        .collect();
    let n = ((frame_dt * stiffness_bound(&net, kind) / 0.2).ceil() as usize).max(32);
    let reference = trajectory(&net, kind, &frames, frame_dt, 100 * n);
    let signed = |steps| -> Vec<f64> {
        let x = trajectory(&net, kind, &frames, frame_dt, steps);
        x.iter().zip(&reference).map(|(a, b)| a - b).collect()
    };
    let (coarse, fine) = (signed(n), signed(2 * n));
    let worst = (0..fine.len()).max_by(|&i, &j| fine[i].abs().total_cmp(&fine[j].abs()))?;
    if coarse[worst] * fine[worst] <= 0.0 {
        return None;
    }
    let norm = |e: &[f64]| e.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let (c, f) = (norm(&coarse), norm(&fine));
    (c > 1e-9).then(|| c / f)
}

pub fn convergence_order(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let kind = ModelKind::ALL[(seed % 4) as usize];
        if let Some(r) = euler_error_ratio(kind, seed) {
            prop_assert!((1.5..=2.5).contains(&r), "{kind}: error ratio {r}");
        }
        Ok(())
    })
}

/// Rolling out twice gives bitwise identical traces.
pub fn rollout_determinism(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let kind = ModelKind::ALL[(seed % 4) as usize];
        let net = random_net(kind, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let frames: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..net.inputs.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let solver = SolverConfig::default();
        let a = rollout(kind, &net.params, &net.wiring, &frames, &solver).unwrap();
        let b = rollout(kind, &net.params, &net.wiring, &frames, &solver).unwrap();
        prop_assert!(a == b);
        Ok(())
    })
}
