//! A full policy (optional conv head + recurrent network) and its
//! differentiable unrolled form.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::convhead::{ConvHead, FeatureMap};
use crate::dynamics::{self, Rollout, SolverConfig, SolverMethod};
use crate::error::{check_len, Error, Result};
use crate::params::{project_values, ModelKind, ModelParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::wiring::WiringGraph;

/// Inputs of one training sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceInput<T> {
    /// Sensory vectors fed straight into the recurrent network.
    Features(Vec<Vec<T>>),
    /// Standardized `[3, H, W]` tensors passed through the conv head first.
    Frames(Vec<Vec<T>>),
}

impl<T> SequenceInput<T> {
    pub fn len(&self) -> usize {
        match self {
            SequenceInput::Features(v) | SequenceInput::Frames(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence<T> {
    pub inputs: SequenceInput<T>,
    pub labels: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy<T> {
    pub wiring: WiringGraph,
    pub rnn: ModelParams<T>,
    pub head: Option<ConvHead<T>>,
    /// Affine read-out `[gain, bias]` from the output neuron's potential to
    /// the predicted curvature.
    pub readout: [T; 2],
}

impl<T: Scalar> Policy<T> {
    pub fn new(wiring: WiringGraph, rnn: ModelParams<T>, head: Option<ConvHead<T>>) -> Result<Self> {
        check_len("parameter synapses", wiring.n_synapses(), rnn.n_synapses)?;
        check_len("parameter neurons", wiring.n_neurons(), rnn.n_neurons)?;
        if let Some(h) = &head {
            check_len("conv head features vs sensory units", wiring.n_sensory, h.config.n_features)?;
        }
        Ok(Self {
            wiring,
            rnn,
            head,
            readout: [T::one(), T::zero()],
        })
    }

    pub fn with_output_gain(mut self, gain: T) -> Self {
        self.readout[0] = gain;
        self
    }

    pub fn read_out(&self, potential: T) -> T {
        self.readout[0] * potential + self.readout[1]
    }

    pub fn kind(&self) -> ModelKind {
        self.rnn.kind
    }

    pub fn n_params(&self) -> usize {
        self.rnn.len() + 2 + self.head.as_ref().map_or(0, |h| h.params.len())
    }

    /// All trainable values: recurrent block, read-out, then conv head.
    pub fn flat(&self) -> Vec<T> {
        let mut v = self.rnn.values.clone();
        v.extend_from_slice(&self.readout);
        if let Some(h) = &self.head {
            v.extend_from_slice(&h.params);
        }
        v
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        check_len("flat policy parameters", self.n_params(), values.len())?;
        let n = self.rnn.len();
        self.rnn.values.copy_from_slice(&values[..n]);
        self.readout.copy_from_slice(&values[n..n + 2]);
        if let Some(h) = &mut self.head {
            h.params.copy_from_slice(&values[n + 2..]);
        }
        Ok(())
    }

    /// Clamps the recurrent block of a flat vector into its box constraints.
    pub fn project_flat(&self, values: &mut [T]) {
        let n = self.rnn.len();
        project_values(self.rnn.kind, self.rnn.n_neurons, self.rnn.n_synapses, &mut values[..n]);
    }

    /// Sensory vector for one input; frames go through the head.
    pub fn sense(&self, input: &[T]) -> Result<(Vec<T>, Vec<FeatureMap<T>>)> {
        match &self.head {
            Some(h) => h.forward(input),
            None => Ok((input.to_vec(), Vec::new())),
        }
    }

    /// Plain (untaped) prediction over a sequence from the zero state;
    /// `outputs` are read out, `activities` are raw potentials.
    pub fn predict(&self, inputs: &SequenceInput<T>, solver: &SolverConfig) -> Result<Rollout<T>> {
        let sensory: Vec<Vec<T>> = match inputs {
            SequenceInput::Features(f) => f.clone(),
            SequenceInput::Frames(frames) => {
                let head = self
                    .head
                    .as_ref()
                    .ok_or_else(|| Error::Structural("frame inputs need a conv head".into()))?;
                frames.iter().map(|f| head.forward(f).map(|(x, _)| x)).collect::<Result<_>>()?
            }
        };
        let mut r = dynamics::rollout(self.rnn.kind, &self.rnn, &self.wiring, &sensory, solver)?;
        r.outputs.iter_mut().for_each(|y| *y = self.read_out(*y));
        Ok(r)
    }

    /// Advances a running state by one sensory vector.
    pub fn step(&self, state: &[T], sensory: &[T], solver: &SolverConfig) -> Result<Vec<T>> {
        dynamics::step(self.rnn.kind, state, sensory, &self.rnn, &self.wiring, solver)
    }

    /// Sum over time of squared prediction errors, and its gradient with
    /// respect to [`Policy::flat`].
    pub fn loss_and_gradient(&self, seq: &Sequence<T>, solver: &SolverConfig) -> Result<(T, Vec<T>)> {
        solver.validate()?;
        check_len("labels", seq.inputs.len(), seq.labels.len())?;
        if seq.inputs.is_empty() {
            return Err(Error::Structural("empty sequence".into()));
        }
        let mut tape = Tape::new();
        let rnn = tape.leaf(self.rnn.values.clone());
        let readout = tape.leaf(self.readout.to_vec());
        let gain = tape.slice(readout, 0, 1);
        let bias = tape.slice(readout, 1, 1);
        let n_s = self.wiring.n_sensory;
        let (head_var, sensory): (Option<Var>, Vec<Var>) = match &seq.inputs {
            SequenceInput::Features(f) => {
                let vars = f
                    .iter()
                    .map(|u| {
                        check_len("sensory input", n_s, u.len())?;
                        Ok(tape.data(u.clone()))
                    })
                    .collect::<Result<_>>()?;
                (None, vars)
            }
            SequenceInput::Frames(frames) => {
                let head = self
                    .head
                    .as_ref()
                    .ok_or_else(|| Error::Structural("frame inputs need a conv head".into()))?;
                let mut stacked = Vec::with_capacity(frames.len() * head.config.input_len());
                for f in frames {
                    check_len("frame tensor", head.config.input_len(), f.len())?;
                    stacked.extend_from_slice(f);
                }
                let hp = tape.leaf(head.params.clone());
                let x = tape.data(stacked);
                let feats = head.forward_tape(&mut tape, hp, x, frames.len());
                let vars = (0..frames.len()).map(|t| tape.slice(feats, t * n_s, n_s)).collect();
                (Some(hp), vars)
            }
        };
        let cell = TapedCell::bind(&mut tape, &self.rnn, &self.wiring, rnn);
        let out = self.wiring.output_neuron();
        let mut x = tape.constant(T::zero(), self.wiring.n_neurons());
        let mut sq = Vec::with_capacity(sensory.len());
        for (t, &u) in sensory.iter().enumerate() {
            x = cell.frame(&mut tape, x, u, solver);
            let v = tape.slice(x, out, 1);
            let gv = tape.mul(gain, v);
            let y = tape.add(gv, bias);
            let label = tape.data(vec![seq.labels[t]]);
            let d = tape.sub(y, label);
            sq.push(tape.mul(d, d));
        }
        let all = tape.concat(&sq);
        let loss = tape.sum(all);
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss);
        let mut g = grads.get(rnn);
        g.extend(grads.get(readout));
        if let Some(hp) = head_var {
            g.extend(grads.get(hp));
        }
        Ok((value, g))
    }
}

/// Recurrent cell bound to parameter slices on a tape.
struct TapedCell {
    kind: ModelKind,
    n: usize,
    src: Arc<[usize]>,
    tgt: Arc<[usize]>,
    g_leak: Var,
    e_leak: Var,
    inv_cap: Option<Var>,
    g: Var,
    a: Option<Var>,
    b: Option<Var>,
    /// Per-synapse drive coefficient multiplying the gate in `B`.
    coupling: Option<Var>,
}

impl TapedCell {
    fn bind<T: Scalar>(tape: &mut Tape<T>, p: &ModelParams<T>, w: &WiringGraph, flat: Var) -> Self {
        let src: Arc<[usize]> = w.edges.iter().map(|e| w.source_slot(e)).collect();
        let tgt: Arc<[usize]> = w.edges.iter().map(|e| e.target).collect();
        let sl = |tape: &mut Tape<T>, r: std::ops::Range<usize>| tape.slice(flat, r.start, r.len());
        let g_leak = sl(tape, p.g_leak_range());
        let e_leak = sl(tape, p.e_leak_range());
        let g = sl(tape, p.syn_g_range());
        let inv_cap = if p.kind.is_chemical() {
            let c = sl(tape, p.capacitance_range());
            Some(tape.recip(c))
        } else {
            None
        };
        let (a, b, e_rev) = if p.kind.is_chemical() {
            (
                Some(sl(tape, p.syn_a_range())),
                Some(sl(tape, p.syn_b_range())),
                Some(sl(tape, p.syn_erev_range())),
            )
        } else {
            (None, None, None)
        };
        let coupling = match p.kind {
            ModelKind::Electrical => None,
            ModelKind::Ltc => Some(tape.mul(g, e_rev.unwrap())),
            ModelKind::CtRnn | ModelKind::Sltc => {
                let inv_el = tape.recip(e_leak);
                let per_edge = tape.gather(inv_el, tgt.clone());
                let gh = match e_rev {
                    Some(e) => tape.mul(g, e),
                    None => g,
                };
                Some(tape.mul(gh, per_edge))
            }
        };
        Self {
            kind: p.kind,
            n: p.n_neurons,
            src,
            tgt,
            g_leak,
            e_leak,
            inv_cap,
            g,
            a,
            b,
            coupling,
        }
    }

    fn scatter<T: Scalar>(&self, tape: &mut Tape<T>, per_edge: Var) -> Var {
        tape.scatter_add(per_edge, self.tgt.clone(), self.n)
    }

    /// `(A, B)` with `dx/dt = -A x + B`.
    fn linear_form<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, u: Var) -> (Var, Var) {
        let y = tape.concat(&[x, u]);
        let pre = tape.gather(y, self.src.clone());
        match self.kind {
            ModelKind::Electrical => {
                let sg = self.scatter(tape, self.g);
                let a = tape.add(self.g_leak, sg);
                let gy = tape.mul(self.g, pre);
                let sgy = self.scatter(tape, gy);
                let gle = tape.mul(self.g_leak, self.e_leak);
                let b = tape.add(gle, sgy);
                (a, b)
            }
            ModelKind::CtRnn => {
                let sg = self.scatter(tape, self.g);
                let fa = tape.add(self.g_leak, sg);
                let a = tape.sigmoid(fa);
                let hy = tape.mul(self.coupling.unwrap(), pre);
                let shy = self.scatter(tape, hy);
                let gb = tape.add(self.g_leak, shy);
                let tb = tape.tanh(gb);
                let b = tape.mul(tb, self.e_leak);
                (a, b)
            }
            ModelKind::Ltc | ModelKind::Sltc => {
                let ay = tape.mul(self.a.unwrap(), pre);
                let z = tape.add(ay, self.b.unwrap());
                let open = tape.sigmoid(z);
                let w = tape.mul(self.g, open);
                let sw = self.scatter(tape, w);
                let decay = tape.add(self.g_leak, sw);
                let cw = tape.mul(self.coupling.unwrap(), open);
                let scw = self.scatter(tape, cw);
                let (a, b) = if self.kind == ModelKind::Ltc {
                    let gle = tape.mul(self.g_leak, self.e_leak);
                    (decay, tape.add(gle, scw))
                } else {
                    let a = tape.sigmoid(decay);
                    let gi = tape.add(self.g_leak, scw);
                    let tg = tape.tanh(gi);
                    (a, tape.mul(tg, self.e_leak))
                };
                let ic = self.inv_cap.unwrap();
                (tape.mul(a, ic), tape.mul(b, ic))
            }
        }
    }

    fn frame<T: Scalar>(&self, tape: &mut Tape<T>, mut x: Var, u: Var, solver: &SolverConfig) -> Var {
        let h = T::lit(solver.substep());
        for _ in 0..solver.unfold_steps {
            let (a, b) = self.linear_form(tape, x, u);
            x = match solver.method {
                SolverMethod::SemiImplicitEuler => {
                    let hb = tape.scale(b, h);
                    let num = tape.add(x, hb);
                    let ha = tape.scale(a, h);
                    let den = tape.add_const(ha, T::one());
                    let inv = tape.recip(den);
                    tape.mul(num, inv)
                }
                SolverMethod::ExplicitEuler => {
                    let ax = tape.mul(a, x);
                    let d = tape.sub(b, ax);
                    let hd = tape.scale(d, h);
                    tape.add(x, hd)
                }
            };
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convhead::ConvHeadConfig;
    use crate::wiring::build_fully_connected;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn taped_loss_matches_plain_rollout() {
        for kind in ModelKind::ALL {
            for method in [SolverMethod::SemiImplicitEuler, SolverMethod::ExplicitEuler] {
                let w = build_fully_connected(4, 3).unwrap();
                let p = ModelParams::<f64>::init(kind, &w, 3);
                let policy = Policy::new(w, p, None).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let frames: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let labels: Vec<f64> = (0..5).map(|_| rng.random_range(-0.2..0.2)).collect();
                let solver = SolverConfig {
                    method,
                    ..SolverConfig::default()
                };
                let seq = Sequence {
                    inputs: SequenceInput::Features(frames.clone()),
                    labels: labels.clone(),
                };
                let (loss, g) = policy.loss_and_gradient(&seq, &solver).unwrap();
                assert_eq!(g.len(), policy.n_params());
                let r = policy.predict(&seq.inputs, &solver).unwrap();
                let plain: f64 = r.outputs.iter().zip(&labels).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((loss - plain).abs() < 1e-12, "{kind} {loss} {plain}");
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let w = build_fully_connected(3, 32).unwrap();
        let p = ModelParams::<f64>::init(ModelKind::Ltc, &w, 1);
        let head = ConvHead::init(ConvHeadConfig::default(), 2).unwrap();
        let mut policy = Policy::new(w, p, Some(head)).unwrap();
        let mut flat = policy.flat();
        flat.iter_mut().for_each(|v| *v *= 0.5);
        policy.set_flat(&flat).unwrap();
        assert_eq!(policy.flat(), flat);
        assert!(policy.set_flat(&flat[1..]).is_err());
    }
}
