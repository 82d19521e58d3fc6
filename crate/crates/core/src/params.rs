//! Trainable parameters of a recurrent network, stored flat for the optimizer.
//!
//! Layout (`N` neurons, `E` synapses):
//!
//! | block          | length | models                 |
//! |----------------|--------|------------------------|
//! | leak conductance | N    | all                    |
//! | leak reversal    | N    | all                    |
//! | capacitance      | N    | ltc, sltc              |
//! | synapse conductance | E | all                    |
//! | gate slope       | E    | ltc, sltc              |
//! | gate offset      | E    | ltc, sltc              |
//! | synapse reversal | E    | ltc, sltc              |

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::wiring::WiringGraph;

/// Guard keeping leak reversal potentials away from zero wherever they divide.
pub const REVERSAL_EPS: f64 = 1e-3;
/// Lower bound for trainable capacitances.
pub const MIN_CAPACITANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Ohmic electrical synapses, unsaturated.
    Electrical,
    /// Saturated electrical synapses (classic continuous-time RNN).
    CtRnn,
    /// Chemical synapses (liquid time-constant network).
    Ltc,
    /// Saturated chemical synapses with an input-dependent forget gate.
    Sltc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Electrical, ModelKind::CtRnn, ModelKind::Ltc, ModelKind::Sltc];

    pub fn is_chemical(self) -> bool {
        matches!(self, ModelKind::Ltc | ModelKind::Sltc)
    }

    pub fn params_per_synapse(self) -> usize {
        if self.is_chemical() {
            4
        } else {
            1
        }
    }

    pub fn params_per_neuron(self) -> usize {
        if self.is_chemical() {
            3
        } else {
            2
        }
    }

    /// Whether the model divides by the leak reversal potential.
    pub fn divides_by_reversal(self) -> bool {
        !matches!(self, ModelKind::Ltc)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Electrical => "electrical",
            ModelKind::CtRnn => "ctrnn",
            ModelKind::Ltc => "ltc",
            ModelKind::Sltc => "sltc",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "electrical" => Ok(ModelKind::Electrical),
            "ctrnn" => Ok(ModelKind::CtRnn),
            "ltc" => Ok(ModelKind::Ltc),
            "sltc" => Ok(ModelKind::Sltc),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams<T> {
    pub g_leak: T,
    pub e_leak: T,
    pub capacitance: T,
}

impl<T: Scalar> NeuronParams<T> {
    pub fn new(g_leak: T, e_leak: T, capacitance: T) -> Result<Self> {
        let unit = T::zero()..=T::one();
        if !unit.contains(&g_leak) || e_leak.abs() > T::one() || !(capacitance > T::zero()) {
            return Err(Error::Config(format!(
                "neuron parameters out of range: g_leak={g_leak}, e_leak={e_leak}, C={capacitance}"
            )));
        }
        Ok(Self {
            g_leak,
            e_leak,
            capacitance,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectricalSynapseParams<T> {
    pub g: T,
}

impl<T: Scalar> ElectricalSynapseParams<T> {
    /// Tied coupling `g / e_leak` of the rearranged form.
    pub fn coupling(&self, post: &NeuronParams<T>) -> Result<T> {
        if post.e_leak.abs() < T::lit(REVERSAL_EPS) {
            return Err(Error::DegenerateReversal {
                neuron: usize::MAX,
                value: post.e_leak.as_f64(),
            });
        }
        Ok(self.g / post.e_leak)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChemicalSynapseParams<T> {
    pub g: T,
    pub a: T,
    pub b: T,
    pub e_rev: T,
}

impl<T: Scalar> ChemicalSynapseParams<T> {
    /// Probability that the channel is open for presynaptic potential `y`.
    pub fn open_probability(&self, y: T) -> T {
        crate::scalar::sigmoid(self.a * y + self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub kind: ModelKind,
    pub n_neurons: usize,
    pub n_synapses: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn len_for(kind: ModelKind, n_neurons: usize, n_synapses: usize) -> usize {
        crate::wiring::parameter_count(n_synapses, n_neurons, kind)
    }

    pub fn zeros(kind: ModelKind, wiring: &WiringGraph) -> Self {
        let (n, e) = (wiring.n_neurons(), wiring.n_synapses());
        let mut p = Self {
            kind,
            n_neurons: n,
            n_synapses: e,
            values: vec![T::zero(); Self::len_for(kind, n, e)],
        };
        if kind.is_chemical() {
            let c = p.capacitance_range();
            for v in &mut p.values[c] {
                *v = T::one();
            }
        }
        p
    }

    pub fn from_values(kind: ModelKind, wiring: &WiringGraph, values: Vec<T>) -> Result<Self> {
        let (n, e) = (wiring.n_neurons(), wiring.n_synapses());
        crate::error::check_len("parameter vector", Self::len_for(kind, n, e), values.len())?;
        Ok(Self {
            kind,
            n_neurons: n,
            n_synapses: e,
            values,
        })
    }

    /// Random initialization that keeps gates in their responsive region.
    pub fn init(kind: ModelKind, wiring: &WiringGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(kind, wiring);
        let mut fill = |range: Range<usize>, values: &mut [T], f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
            for v in &mut values[range] {
                *v = T::lit(f(&mut rng));
            }
        };
        let (gl, el) = (p.g_leak_range(), p.e_leak_range());
        fill(gl, &mut p.values, &mut |r| r.random_range(0.1..1.0));
        fill(el, &mut p.values, &mut |r| r.random_range(-0.2..0.2));
        if kind.is_chemical() {
            let (c, g, a, b, e) = (
                p.capacitance_range(),
                p.syn_g_range(),
                p.syn_a_range(),
                p.syn_b_range(),
                p.syn_erev_range(),
            );
            fill(c, &mut p.values, &mut |r| 2.0 * r.random_range(0.4..0.6));
            fill(g, &mut p.values, &mut |r| r.random_range(0.001..1.0));
            fill(a, &mut p.values, &mut |r| r.random_range(3.0..8.0));
            fill(b, &mut p.values, &mut |r| r.random_range(-0.3..0.3));
            fill(e, &mut p.values, &mut |r| if r.random_bool(0.5) { 1.0 } else { -1.0 });
        } else {
            let g = p.syn_g_range();
            fill(g, &mut p.values, &mut |r| r.random_range(0.001..1.0));
        }
        p.project();
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn g_leak_range(&self) -> Range<usize> {
        0..self.n_neurons
    }

    pub fn e_leak_range(&self) -> Range<usize> {
        self.n_neurons..2 * self.n_neurons
    }

    /// Empty for electrical models, whose capacitance is fixed at 1.
    pub fn capacitance_range(&self) -> Range<usize> {
        if self.kind.is_chemical() {
            2 * self.n_neurons..3 * self.n_neurons
        } else {
            2 * self.n_neurons..2 * self.n_neurons
        }
    }

    fn synapse_base(&self) -> usize {
        self.kind.params_per_neuron() * self.n_neurons
    }

    fn syn_block(&self, k: usize) -> Range<usize> {
        let start = self.synapse_base() + k * self.n_synapses;
        start..start + self.n_synapses
    }

    pub fn syn_g_range(&self) -> Range<usize> {
        self.syn_block(0)
    }

    pub fn syn_a_range(&self) -> Range<usize> {
        assert!(self.kind.is_chemical());
        self.syn_block(1)
    }

    pub fn syn_b_range(&self) -> Range<usize> {
        assert!(self.kind.is_chemical());
        self.syn_block(2)
    }

    pub fn syn_erev_range(&self) -> Range<usize> {
        assert!(self.kind.is_chemical());
        self.syn_block(3)
    }

    pub fn neuron(&self, i: usize) -> NeuronParams<T> {
        let capacitance = if self.kind.is_chemical() {
            self.values[2 * self.n_neurons + i]
        } else {
            T::one()
        };
        NeuronParams {
            g_leak: self.values[i],
            e_leak: self.values[self.n_neurons + i],
            capacitance,
        }
    }

    pub fn electrical(&self, k: usize) -> ElectricalSynapseParams<T> {
        ElectricalSynapseParams {
            g: self.values[self.syn_g_range().start + k],
        }
    }

    pub fn chemical(&self, k: usize) -> ChemicalSynapseParams<T> {
        let e = self.n_synapses;
        let base = self.synapse_base();
        ChemicalSynapseParams {
            g: self.values[base + k],
            a: self.values[base + e + k],
            b: self.values[base + 2 * e + k],
            e_rev: self.values[base + 3 * e + k],
        }
    }

    /// Checks that every leak reversal used as a divisor is away from zero.
    pub fn check_reversal_guard(&self) -> Result<()> {
        if !self.kind.divides_by_reversal() {
            return Ok(());
        }
        let eps = T::lit(REVERSAL_EPS);
        for (i, &e) in self.values[self.e_leak_range()].iter().enumerate() {
            if e.abs() < eps {
                return Err(Error::DegenerateReversal {
                    neuron: i,
                    value: e.as_f64(),
                });
            }
        }
        Ok(())
    }

    /// Clamps bounded parameters back into their ranges; values already inside are untouched.
    pub fn project(&mut self) {
        project_values(self.kind, self.n_neurons, self.n_synapses, &mut self.values);
    }
}

/// In-place projection of a flat parameter vector onto its box constraints.
pub fn project_values<T: Scalar>(kind: ModelKind, n_neurons: usize, n_synapses: usize, values: &mut [T]) {
    let (zero, one) = (T::zero(), T::one());
    let unit = |v: &mut T| {
        if *v < zero {
            *v = zero;
        } else if *v > one {
            *v = one;
        }
    };
    let sym = |v: &mut T| {
        if *v < -one {
            *v = -one;
        } else if *v > one {
            *v = one;
        }
    };
    let n = n_neurons;
    values[..n].iter_mut().for_each(unit);
    let eps = T::lit(REVERSAL_EPS);
    for v in &mut values[n..2 * n] {
        sym(v);
        if kind.divides_by_reversal() && v.abs() < eps {
            *v = if *v < zero { -eps } else { eps };
        }
    }
    let mut base = 2 * n;
    if kind.is_chemical() {
        let cmin = T::lit(MIN_CAPACITANCE);
        for v in &mut values[2 * n..3 * n] {
            if !(*v >= cmin) {
                *v = cmin;
            }
        }
        base = 3 * n;
    }
    let e = n_synapses;
    values[base..base + e].iter_mut().for_each(unit);
    if kind.is_chemical() {
        values[base + 3 * e..base + 4 * e].iter_mut().for_each(sym);
    }
}
