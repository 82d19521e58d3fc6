use ncp_core::dynamics::SolverConfig;
use ncp_core::network::{Policy, Sequence, SequenceInput};
use ncp_core::params::{ModelKind, ModelParams};
use ncp_core::trainer::{adamw_step, train, AdamState, EpochSelection, TrainConfig, TrainHistory};
use ncp_core::wiring::build_fully_connected;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sine_task(n_seq: usize, len: usize) -> Vec<Sequence<f64>> {
    (0..n_seq)
        .map(|k| {
            let phase = k as f64 * 0.7;
            let xs: Vec<f64> = (0..len).map(|t| (0.3 * t as f64 + phase).sin()).collect();
            Sequence {
                labels: xs.iter().map(|x| 0.5 * x).collect(),
                inputs: SequenceInput::Features(xs.iter().map(|&x| vec![x]).collect()),
            }
        })
        .collect()
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr0: 5e-2,
        seed,
        solver: SolverConfig {
            dt: 1.0,
            ..SolverConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn two_neurons(kind: ModelKind) -> Policy<f64> {
    let wiring = build_fully_connected(2, 1).unwrap();
    let params = ModelParams::init(kind, &wiring, 3);
    Policy::new(wiring, params, None).unwrap()
}

#[test]
fn sine_tracking_converges() {
    let data = sine_task(8, 32);
    for kind in ModelKind::ALL {
        let mut history = TrainHistory::default();
        let out = train(two_neurons(kind), &data, &data, &config(200, 2), &mut history).unwrap();
        let best = history.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(best < 0.01, "{kind}: best loss {best}");
        assert_eq!(history.val_loss[out.selected_epoch.unwrap()], best);
    }
}

#[test]
fn zero_epochs_returns_initial_policy() {
    let data = sine_task(2, 8);
    let init = two_neurons(ModelKind::Ltc);
    let mut history = TrainHistory::default();
    let out = train(init.clone(), &data, &data, &config(0, 1), &mut history).unwrap();
    assert!(history.is_empty());
    assert_eq!(out.selected_epoch, None);
    assert_eq!(out.policy.flat(), init.flat());
}

#[test]
fn training_is_deterministic() {
    let data = sine_task(6, 16);
    let run = || {
        let mut h = TrainHistory::default();
        let out = train(two_neurons(ModelKind::Sltc), &data, &data[..2].to_vec(), &config(5, 9), &mut h).unwrap();
        (h, out.policy.flat())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let mut h = TrainHistory::default();
    train(two_neurons(ModelKind::Sltc), &data, &data[..2].to_vec(), &config(5, 10), &mut h).unwrap();
    assert_ne!(h.train_loss, a.0.train_loss);
}

#[test]
fn last_epoch_selection() {
    let data = sine_task(4, 8);
    let cfg = TrainConfig {
        selection: EpochSelection::Last,
        ..config(3, 0)
    };
    let mut h = TrainHistory::default();
    let out = train(two_neurons(ModelKind::CtRnn), &data, &data, &cfg, &mut h).unwrap();
    assert_eq!(out.selected_epoch, Some(2));
}

#[test]
fn decay_only_is_exponential_shrink() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let lr: f64 = rng.random_range(1e-4..1e-1);
        let wd: f64 = rng.random_range(1e-6..1e-1);
        let p0: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut p = p0.clone();
        let mut s = AdamState::new(5);
        for _ in 0..20 {
            adamw_step(&mut p, &[0.0; 5], lr, wd, &mut s).unwrap();
        }
        let f = (1.0 - lr * wd).powi(20);
        for (a, b) in p.iter().zip(&p0) {
            assert!((a - b * f).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_decreases_over_first_steps() {
    // Ten full-batch steps on a fixed batch at lr 1e-3.
    let data = sine_task(4, 16);
    let mut decreased = 0;
    let n = 40;
    for seed in 0..n {
        let wiring = build_fully_connected(4, 1).unwrap();
        let kind = ModelKind::ALL[seed as usize % 4];
        let mut policy = Policy::new(wiring.clone(), ModelParams::init(kind, &wiring, seed), None).unwrap();
        let solver = SolverConfig::default();
        let mut flat = policy.flat();
        let mut adam = AdamState::new(flat.len());
        let (first, _) = ncp_core::trainer::loss_and_gradient(&policy, &data, &solver).unwrap();
        for _ in 0..10 {
            let (_, g) = ncp_core::trainer::loss_and_gradient(&policy, &data, &solver).unwrap();
            adamw_step(&mut flat, &g, 1e-3, 0.0, &mut adam).unwrap();
            policy.project_flat(&mut flat);
            policy.set_flat(&flat).unwrap();
        }
        let last = ncp_core::trainer::forward_loss(&policy, &data, &solver).unwrap();
        decreased += (last < first) as usize;
    }
    assert!(decreased as f64 >= 0.95 * n as f64, "{decreased}/{n}");
}

#[test]
fn projection_leaves_valid_parameters_alone() {
    let wiring = build_fully_connected(5, 2).unwrap();
    for kind in ModelKind::ALL {
        let policy = Policy::<f64>::new(wiring.clone(), ModelParams::init(kind, &wiring, 3), None).unwrap();
        let flat = policy.flat();
        let mut projected = flat.clone();
        policy.project_flat(&mut projected);
        assert_eq!(projected, flat);
    }
}
