//! Imitation-learning trainer: mini-batch BPTT with AdamW and a cosine
//! learning-rate schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SolverConfig;
use crate::error::{check_len, Error, Result};
use crate::network::{Policy, Sequence};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpochSelection {
    /// Lowest validation loss.
    #[default]
    MinVal,
    /// Highest validation loss.
    MaxVal,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sequence_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub solver: SolverConfig,
    pub clip_norm: f64,
    pub selection: EpochSelection,
    /// Fraction of episodes held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sequence_length: 32,
            batch_size: 32,
            epochs: 100,
            lr0: 1e-3,
            weight_decay: 1e-6,
            seed: 0,
            solver: SolverConfig::default(),
            clip_norm: 10.0,
            selection: EpochSelection::MinVal,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 || self.batch_size == 0 {
            return Err(Error::Config("sequence_length and batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "lr0 and clip_norm must be positive, weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr: Vec<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,lr")?;
        for e in 0..self.len() {
            writeln!(w, "{},{:e},{:e},{:e}", e, self.train_loss[e], self.val_loss[e], self.lr[e])?;
        }
        Ok(())
    }
}

pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// Picks an epoch from the validation curve. Epochs without a validation
/// loss (NaN) are skipped; if none has one, the last epoch is returned.
pub fn select_epoch(history: &TrainHistory, mode: EpochSelection) -> Option<usize> {
    let n = history.val_loss.len();
    if n == 0 {
        return None;
    }
    let scored = history.val_loss.iter().enumerate().filter(|(_, v)| !v.is_nan());
    let pick = match mode {
        EpochSelection::Last => None,
        EpochSelection::MinVal => scored.fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        }),
        EpochSelection::MaxVal => scored.fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        }),
    };
    Some(pick.map_or(n - 1, |(i, _)| i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay. Box constraints are not
/// applied here; see [`Policy::project_flat`].
pub fn adamw_step<T: Scalar>(params: &mut [T], grads: &[T], lr: T, weight_decay: T, state: &mut AdamState<T>) -> Result<()> {
    check_len("gradient", params.len(), grads.len())?;
    check_len("first moment", params.len(), state.m.len())?;
    check_len("second moment", params.len(), state.v.len())?;
    state.t += 1;
    let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
    let c1 = T::one() - b1.powi(state.t as i32);
    let c2 = T::one() - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] - lr * weight_decay * params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Rescales `grads` to at most `max_norm` in L2; returns the original norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [T], max_norm: T) -> T {
    let norm = grads.iter().map(|&g| g * g).sum::<T>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}

/// Source of training or validation sequences. `augment` carries a seed
/// when the caller wants a randomly augmented variant.
pub trait SequenceSource<T> {
    fn len(&self) -> usize;

    fn get(&self, index: usize, augment: Option<u64>) -> Result<Sequence<T>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Clone> SequenceSource<T> for [Sequence<T>] {
    fn len(&self) -> usize {
        <[Sequence<T>]>::len(self)
    }

    fn get(&self, index: usize, _augment: Option<u64>) -> Result<Sequence<T>> {
        Ok(self[index].clone())
    }
}

impl<T: Clone> SequenceSource<T> for Vec<Sequence<T>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize, augment: Option<u64>) -> Result<Sequence<T>> {
        SequenceSource::get(self.as_slice(), index, augment)
    }
}

fn frames_in(batch: &[Sequence<impl Sized>]) -> usize {
    batch.iter().map(|s| s.labels.len()).sum()
}

/// Mean over batch and time of the squared prediction error.
pub fn forward_loss<T: Scalar>(policy: &Policy<T>, batch: &[Sequence<T>], solver: &SolverConfig) -> Result<T> {
    let mut total = T::zero();
    for seq in batch {
        check_len("labels", seq.inputs.len(), seq.labels.len())?;
        let r = policy.predict(&seq.inputs, solver)?;
        for (p, y) in r.outputs.iter().zip(&seq.labels) {
            total = total + (*p - *y) * (*p - *y);
        }
    }
    let loss = total / T::lit(frames_in(batch).max(1) as f64);
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    Ok(loss)
}

/// Mean loss over a batch and its gradient with respect to [`Policy::flat`].
/// Per-sequence gradients are accumulated in batch order.
pub fn loss_and_gradient<T: Scalar>(policy: &Policy<T>, batch: &[Sequence<T>], solver: &SolverConfig) -> Result<(T, Vec<T>)> {
    let mut total = T::zero();
    let mut grad = vec![T::zero(); policy.n_params()];
    for seq in batch {
        let (l, g) = policy.loss_and_gradient(seq, solver)?;
        total = total + l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    let inv = T::one() / T::lit(frames_in(batch).max(1) as f64);
    grad.iter_mut().for_each(|g| *g = *g * inv);
    Ok((total * inv, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    /// Policy carrying the selected epoch's parameters.
    pub policy: Policy<T>,
    pub selected_epoch: Option<usize>,
}

fn mean_loss<T: Scalar>(policy: &Policy<T>, source: &dyn SequenceSource<T>, solver: &SolverConfig) -> Result<f64> {
    if source.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..source.len() {
        let seq = source.get(i, None)?;
        let n = seq.labels.len();
        total += forward_loss(policy, std::slice::from_ref(&seq), solver)?.as_f64() * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Runs `config.epochs` epochs of shuffled mini-batch BPTT. History entries
/// are appended to `history` as epochs complete, so a diverged run leaves
/// the epochs before the failure in place.
pub fn train<T: Scalar>(
    mut policy: Policy<T>,
    train_set: &dyn SequenceSource<T>,
    val_set: &dyn SequenceSource<T>,
    config: &TrainConfig,
    history: &mut TrainHistory,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if config.epochs > 0 && train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut flat = policy.flat();
    policy.project_flat(&mut flat);
    policy.set_flat(&flat)?;
    let mut adam = AdamState::new(flat.len());
    let mut snapshots = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let diverged = |epoch: usize, reason: String| Error::TrainingDivergence { epoch, reason };

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr0);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_frames = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| train_set.get(i, Some(rng.random())))
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut grad) = loss_and_gradient(&policy, &batch, &config.solver).map_err(|e| diverged(epoch, e.to_string()))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, "non-finite loss or gradient".into()));
            }
            clip_global_norm(&mut grad, T::lit(config.clip_norm));
            adamw_step(&mut flat, &grad, T::lit(lr), T::lit(config.weight_decay), &mut adam)?;
            policy.project_flat(&mut flat);
            policy.set_flat(&flat)?;
            let n = frames_in(&batch);
            epoch_loss += loss.as_f64() * n as f64;
            epoch_frames += n;
        }
        let val = mean_loss(&policy, val_set, &config.solver).map_err(|e| diverged(epoch, e.to_string()))?;
        history.train_loss.push(epoch_loss / epoch_frames.max(1) as f64);
        history.val_loss.push(val);
        history.lr.push(lr);
        snapshots.push(flat.clone());
    }

    let selected_epoch = select_epoch(history, config.selection);
    if let Some(e) = selected_epoch {
        policy.set_flat(&snapshots[e])?;
    }
    Ok(TrainOutcome { policy, selected_epoch })
}
