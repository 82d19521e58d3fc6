//! Finite-difference oracles for the analytic BPTT gradients.
#![allow(dead_code)]

use ncp_core::dynamics::SolverConfig;
use ncp_core::network::{Policy, Sequence, SequenceInput};
use ncp_core::params::{ModelParams, REVERSAL_EPS};
use ncp_core::wiring::{build_fully_connected, WiringGraph};
use ncp_core::ModelKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const RIDDERS_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-8;

pub fn loss(policy: &Policy<f64>, seq: &Sequence<f64>, solver: &SolverConfig) -> f64 {
    let r = policy.predict(&seq.inputs, solver).unwrap();
    r.outputs.iter().zip(&seq.labels).map(|(p, y)| (p - y).powi(2)).sum()
}

/// Ridders' extrapolation of central differences: successively smaller
/// steps combined in a Neville tableau, keeping the estimate with the
/// smallest internal error.
pub fn ridders(mut f: impl FnMut(f64) -> f64, h0: f64) -> f64 {
    const CON: f64 = 1.4;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let mut a = [[0.0; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = (f(h) - f(-h)) / (2.0 * h);
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for i in 1..NTAB {
        h /= CON;
        a[0][i] = (f(h) - f(-h)) / (2.0 * h);
        let mut fac = CON * CON;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON * CON;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    best
}

/// Finite-difference gradient of the plain (untaped) forward pass, either
/// a single central difference with step `FD_STEP` or Ridders' scheme.
pub fn numeric_gradient_with(policy: &Policy<f64>, seq: &Sequence<f64>, solver: &SolverConfig, extrapolate: bool) -> Vec<f64> {
    let base = policy.flat();
    let mut probe = policy.clone();
    let guarded = if policy.rnn.kind.divides_by_reversal() {
        policy.rnn.e_leak_range()
    } else {
        0..0
    };
    (0..base.len())
        .map(|i| {
            // Leak reversals must stay clear of the degeneracy guard.
            let h0 = if guarded.contains(&i) {
                RIDDERS_STEP.min(0.5 * (base[i].abs() - REVERSAL_EPS))
            } else {
                RIDDERS_STEP
            };
            let mut at = |delta: f64| {
                let mut v = base.clone();
                v[i] = base[i] + delta;
                probe.set_flat(&v).unwrap();
                loss(&probe, seq, solver)
            };
            if extrapolate {
                ridders(at, h0)
            } else {
                (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP)
            }
        })
        .collect()
}

pub fn numeric_gradient(policy: &Policy<f64>, seq: &Sequence<f64>, solver: &SolverConfig) -> Vec<f64> {
    numeric_gradient_with(policy, seq, solver, true)
}

/// Largest relative error over entries whose gradient exceeds the floor.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs().max(n.abs()) <= GRAD_FLOOR {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}

pub fn random_wiring(rng: &mut ChaCha8Rng) -> WiringGraph {
    let n = rng.random_range(2..=8);
    let n_sensory = rng.random_range(1..=4);
    build_fully_connected(n, n_sensory).unwrap()
}

pub fn random_sequence(rng: &mut ChaCha8Rng, n_sensory: usize, len: usize) -> Sequence<f64> {
    Sequence {
        inputs: SequenceInput::Features(
            (0..len)
                .map(|_| (0..n_sensory).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        ),
        labels: (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
    }
}

/// Worst relative error over `n_nets` random fully connected nets, or the
/// first parameter that exceeds the tolerance.
pub fn check_random_nets(kind: ModelKind, n_nets: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for net in 0..n_nets {
        let wiring = random_wiring(&mut rng);
        let params = ModelParams::init(kind, &wiring, rng.random());
        let t = rng.random_range(1..=5);
        let seq = random_sequence(&mut rng, wiring.n_sensory, t);
        let policy = Policy::new(wiring, params, None).unwrap();
        let solver = SolverConfig::default();
        let (_, analytic) = policy.loss_and_gradient(&seq, &solver).unwrap();
        let numeric = numeric_gradient(&policy, &seq, &solver);
        let (rel, at) = worst_relative_error(&analytic, &numeric);
        if rel > REL_TOL {
            return Err(format!(
                "{kind} net {net}: parameter {at} analytic {} numeric {} (rel {rel:e})",
                analytic[at], numeric[at]
            ));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}
