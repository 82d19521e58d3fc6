//! Synapse graphs: four-layer sparse circuit policies and all-to-all wirings.
//!
//! Neurons are indexed `0..n_neurons` in layer order (inter, command, motor
//! for circuit wirings). Sensory units live in their own index space
//! `0..n_sensory`; an [`Edge`] records which space its source belongs to.
//! The network output is read from the first motor neuron.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Sensory,
    Neuron,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Inter,
    Command,
    Motor,
    /// Unlayered neuron of an all-to-all network.
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub kind: SourceKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiringGraph {
    pub n_sensory: usize,
    pub layers: Vec<Layer>,
    pub edges: Vec<Edge>,
}

impl WiringGraph {
    pub fn n_neurons(&self) -> usize {
        self.layers.len()
    }

    pub fn n_synapses(&self) -> usize {
        self.edges.len()
    }

    pub fn count(&self, layer: Layer) -> usize {
        self.layers.iter().filter(|&&l| l == layer).count()
    }

    /// Index of the neuron whose potential is the network output.
    pub fn output_neuron(&self) -> usize {
        self.layers
            .iter()
            .position(|&l| l == Layer::Motor)
            .unwrap_or(self.layers.len().saturating_sub(1))
    }

    /// Position of an edge's source inside the concatenated vector `[x, u]`.
    pub fn source_slot(&self, edge: &Edge) -> usize {
        match edge.kind {
            SourceKind::Neuron => edge.source,
            SourceKind::Sensory => self.n_neurons() + edge.source,
        }
    }

    /// Checks index bounds and duplicate edges.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_neurons();
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            let bound = match e.kind {
                SourceKind::Neuron => n,
                SourceKind::Sensory => self.n_sensory,
            };
            if e.source >= bound || e.target >= n {
                return Err(Error::Structural(format!("edge {:?} references an index out of range", e)));
            }
            if !seen.insert((e.kind, e.source, e.target)) {
                return Err(Error::Structural(format!("duplicate edge {:?}", e)));
            }
        }
        Ok(())
    }

    /// Human-readable adjacency list, one edge per line.
    pub fn adjacency_list(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# sensory={} neurons={} synapses={}",
            self.n_sensory,
            self.n_neurons(),
            self.n_synapses()
        );
        for e in &self.edges {
            let src = match e.kind {
                SourceKind::Sensory => format!("s{}", e.source),
                SourceKind::Neuron => format!("n{}", e.source),
            };
            let layer = match self.layers[e.target] {
                Layer::Inter => "inter",
                Layer::Command => "command",
                Layer::Motor => "motor",
                Layer::Hidden => "hidden",
            };
            let _ = writeln!(out, "{} -> n{} ({})", src, e.target, layer);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiringConfig {
    pub n_sensory: usize,
    pub n_inter: usize,
    pub n_command: usize,
    pub n_motor: usize,
    pub sensory_fanout: usize,
    pub inter_fanout: usize,
    pub command_recurrence: usize,
    pub motor_fanin: usize,
    pub seed: u64,
}

impl WiringConfig {
    /// 19-neuron circuit (12 inter, 6 command, 1 motor) with 444 synapses.
    pub fn ncp19() -> Self {
        serde_json::from_str(include_str!("../../../configs/wiring_ncp19.json")).expect("shipped wiring config parses")
    }

    /// 64-neuron circuit (42 inter, 21 command, 1 motor) with 1700 synapses.
    pub fn ncp64() -> Self {
        serde_json::from_str(include_str!("../../../configs/wiring_ncp64.json")).expect("shipped wiring config parses")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_sensory", self.n_sensory),
            ("n_inter", self.n_inter),
            ("n_command", self.n_command),
            ("n_motor", self.n_motor),
            ("sensory_fanout", self.sensory_fanout),
            ("inter_fanout", self.inter_fanout),
            ("motor_fanin", self.motor_fanin),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.sensory_fanout > self.n_inter {
            return Err(Error::Config(format!(
                "sensory_fanout {} exceeds {} interneurons",
                self.sensory_fanout, self.n_inter
            )));
        }
        if self.inter_fanout > self.n_command {
            return Err(Error::Config(format!(
                "inter_fanout {} exceeds {} command neurons",
                self.inter_fanout, self.n_command
            )));
        }
        if self.motor_fanin > self.n_command {
            return Err(Error::Config(format!(
                "motor_fanin {} exceeds {} command neurons",
                self.motor_fanin, self.n_command
            )));
        }
        if self.command_recurrence > self.n_command * self.n_command {
            return Err(Error::Config(format!(
                "command_recurrence {} exceeds {} possible command pairs",
                self.command_recurrence,
                self.n_command * self.n_command
            )));
        }
        Ok(())
    }
}

/// Builds a four-layer sparse circuit: sensory → inter → command (recurrent) → motor.
pub fn build_ncp(config: &WiringConfig) -> Result<WiringGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inter0 = 0;
    let command0 = config.n_inter;
    let motor0 = command0 + config.n_command;
    let n = motor0 + config.n_motor;

    let mut layers = Vec::with_capacity(n);
    layers.extend(std::iter::repeat(Layer::Inter).take(config.n_inter));
    layers.extend(std::iter::repeat(Layer::Command).take(config.n_command));
    layers.extend(std::iter::repeat(Layer::Motor).take(config.n_motor));

    let mut edges = Vec::new();
    let mut has_input = vec![false; n];

    for s in 0..config.n_sensory {
        let mut targets = sample(&mut rng, config.n_inter, config.sensory_fanout).into_vec();
        targets.sort_unstable();
        for t in targets {
            edges.push(Edge {
                source: s,
                target: inter0 + t,
                kind: SourceKind::Sensory,
            });
            has_input[inter0 + t] = true;
        }
    }
    for i in 0..config.n_inter {
        let mut targets = sample(&mut rng, config.n_command, config.inter_fanout).into_vec();
        targets.sort_unstable();
        for t in targets {
            edges.push(Edge {
                source: inter0 + i,
                target: command0 + t,
                kind: SourceKind::Neuron,
            });
            has_input[command0 + t] = true;
        }
    }
    let mut pairs = sample(&mut rng, config.n_command * config.n_command, config.command_recurrence).into_vec();
    pairs.sort_unstable();
    for p in pairs {
        let (src, dst) = (p / config.n_command, p % config.n_command);
        edges.push(Edge {
            source: command0 + src,
            target: command0 + dst,
            kind: SourceKind::Neuron,
        });
        has_input[command0 + dst] = true;
    }
    for m in 0..config.n_motor {
        let mut sources = sample(&mut rng, config.n_command, config.motor_fanin).into_vec();
        sources.sort_unstable();
        for s in sources {
            edges.push(Edge {
                source: command0 + s,
                target: motor0 + m,
                kind: SourceKind::Neuron,
            });
            has_input[motor0 + m] = true;
        }
    }

    // Repair pass: any neuron still without an in-edge gets one from the previous layer.
    for i in 0..config.n_inter {
        if !has_input[inter0 + i] {
            edges.push(Edge {
                source: rng.random_range(0..config.n_sensory),
                target: inter0 + i,
                kind: SourceKind::Sensory,
            });
        }
    }
    for c in 0..config.n_command {
        if !has_input[command0 + c] {
            edges.push(Edge {
                source: inter0 + rng.random_range(0..config.n_inter),
                target: command0 + c,
                kind: SourceKind::Neuron,
            });
        }
    }

    let graph = WiringGraph {
        n_sensory: config.n_sensory,
        layers,
        edges,
    };
    graph.validate()?;
    Ok(graph)
}

/// All-to-all wiring including self-loops; the last neuron is the motor output.
pub fn build_fully_connected(n_neurons: usize, n_sensory: usize) -> Result<WiringGraph> {
    if n_neurons == 0 {
        return Err(Error::Config("fully connected wiring needs at least one neuron".into()));
    }
    let mut layers = vec![Layer::Hidden; n_neurons];
    layers[n_neurons - 1] = Layer::Motor;
    let mut edges = Vec::with_capacity(n_sensory * n_neurons + n_neurons * n_neurons);
    for t in 0..n_neurons {
        for s in 0..n_sensory {
            edges.push(Edge {
                source: s,
                target: t,
                kind: SourceKind::Sensory,
            });
        }
        for s in 0..n_neurons {
            edges.push(Edge {
                source: s,
                target: t,
                kind: SourceKind::Neuron,
            });
        }
    }
    Ok(WiringGraph { n_sensory, layers, edges })
}

/// Trainable parameter count of the recurrent network (perception head excluded).
pub fn count_parameters(wiring: &WiringGraph, kind: ModelKind) -> usize {
    parameter_count(wiring.n_synapses(), wiring.n_neurons(), kind)
}

pub fn parameter_count(synapses: usize, neurons: usize, kind: ModelKind) -> usize {
    kind.params_per_synapse() * synapses + kind.params_per_neuron() * neurons
}
