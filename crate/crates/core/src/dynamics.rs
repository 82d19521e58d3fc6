//! Membrane dynamics of electrical and chemical synapse networks and their
//! fixed-step solvers.
//!
//! Every model can be written as `dx/dt = -A(x, u) * x + B(x, u)` with
//! `A > 0`; [`linear_form`] exposes that split and the semi-implicit solver
//! updates `x <- (x + h*B) / (1 + h*A)` on it.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::params::{ModelKind, ModelParams, REVERSAL_EPS};
use crate::scalar::{sigmoid, Scalar};
use crate::wiring::WiringGraph;

/// Membrane potentials, one per non-sensory neuron.
pub type NeuronState<T> = Vec<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    ExplicitEuler,
    SemiImplicitEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Time covered by one input frame, in seconds.
    pub dt: f64,
    /// ODE substeps per frame.
    pub unfold_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::SemiImplicitEuler,
            dt: 1.0 / 30.0,
            unfold_steps: 6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("solver dt must be positive, got {}", self.dt)));
        }
        if self.unfold_steps == 0 {
            return Err(Error::Config("unfold_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn substep(&self) -> f64 {
        self.dt / self.unfold_steps as f64
    }
}

fn check_dims<T: Scalar>(state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<()> {
    check_len("state", wiring.n_neurons(), state.len())?;
    check_len("inputs", wiring.n_sensory, inputs.len())?;
    check_len("parameter neurons", wiring.n_neurons(), params.n_neurons)?;
    check_len("parameter synapses", wiring.n_synapses(), params.n_synapses)?;
    check_len(
        "parameter vector",
        ModelParams::<T>::len_for(params.kind, params.n_neurons, params.n_synapses),
        params.values.len(),
    )
}

#[inline]
fn presynaptic<T: Scalar>(state: &[T], inputs: &[T], wiring: &WiringGraph, k: usize) -> T {
    let slot = wiring.source_slot(&wiring.edges[k]);
    if slot < state.len() {
        state[slot]
    } else {
        inputs[slot - state.len()]
    }
}

fn guard_reversal<T: Scalar>(params: &ModelParams<T>) -> Result<()> {
    let eps = T::lit(REVERSAL_EPS);
    for i in 0..params.n_neurons {
        let e = params.neuron(i).e_leak;
        if !(e.abs() >= eps) {
            return Err(Error::DegenerateReversal {
                neuron: i,
                value: e.as_f64(),
            });
        }
    }
    Ok(())
}

/// Ohmic network: `g_l (e_l - x_i) + sum_j g_ji (y_j - x_i)`.
pub fn electrical_derivative<T: Scalar>(state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<Vec<T>> {
    check_dims(state, inputs, params, wiring)?;
    let mut dx: Vec<T> = (0..state.len())
        .map(|i| {
            let n = params.neuron(i);
            n.g_leak * (n.e_leak - state[i])
        })
        .collect();
    for (k, edge) in wiring.edges.iter().enumerate() {
        let y = presynaptic(state, inputs, wiring, k);
        let g = params.electrical(k).g;
        dx[edge.target] = dx[edge.target] + g * (y - state[edge.target]);
    }
    Ok(dx)
}

/// Same network collected around `x_i` and `e_l`:
/// `-(g_l + sum g) x_i + (g_l + sum (g / e_l) y_j) e_l`.
pub fn electrical_rearranged_derivative<T: Scalar>(
    state: &[T],
    inputs: &[T],
    params: &ModelParams<T>,
    wiring: &WiringGraph,
) -> Result<Vec<T>> {
    check_dims(state, inputs, params, wiring)?;
    guard_reversal(params)?;
    let n = state.len();
    let mut decay: Vec<T> = (0..n).map(|i| params.neuron(i).g_leak).collect();
    let mut drive = decay.clone();
    for (k, edge) in wiring.edges.iter().enumerate() {
        let y = presynaptic(state, inputs, wiring, k);
        let g = params.electrical(k).g;
        let e_l = params.neuron(edge.target).e_leak;
        decay[edge.target] = decay[edge.target] + g;
        drive[edge.target] = drive[edge.target] + g / e_l * y;
    }
    Ok((0..n).map(|i| -decay[i] * state[i] + drive[i] * params.neuron(i).e_leak).collect())
}

/// Saturated electrical network:
/// `-S(g_l + sum g) x_i + T(g_l + sum h y_j) e_l` with `h = g / e_l`.
pub fn ctrnn_derivative<T: Scalar>(state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<Vec<T>> {
    let (a, b) = ctrnn_linear(state, inputs, params, wiring)?;
    Ok(combine(state, &a, &b))
}

fn ctrnn_linear<T: Scalar>(state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<(Vec<T>, Vec<T>)> {
    check_dims(state, inputs, params, wiring)?;
    guard_reversal(params)?;
    let n = state.len();
    let mut decay: Vec<T> = (0..n).map(|i| params.neuron(i).g_leak).collect();
    let mut drive = decay.clone();
    for (k, edge) in wiring.edges.iter().enumerate() {
        let y = presynaptic(state, inputs, wiring, k);
        let g = params.electrical(k).g;
        let h = g / params.neuron(edge.target).e_leak;
        decay[edge.target] = decay[edge.target] + g;
        drive[edge.target] = drive[edge.target] + h * y;
    }
    let a = decay.into_iter().map(sigmoid).collect();
    let b = drive
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.tanh() * params.neuron(i).e_leak)
        .collect();
    Ok((a, b))
}

/// Chemical synapse network:
/// `[g_l (e_l - x_i) + sum_j g_ji S(a_ji y_j + b_ji) (e_ji - x_i)] / C_i`.
pub fn ltc_derivative<T: Scalar>(state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<Vec<T>> {
    check_dims(state, inputs, params, wiring)?;
    let mut current: Vec<T> = (0..state.len())
        .map(|i| {
            let n = params.neuron(i);
            n.g_leak * (n.e_leak - state[i])
        })
        .collect();
    for (k, edge) in wiring.edges.iter().enumerate() {
        let y = presynaptic(state, inputs, wiring, k);
        let syn = params.chemical(k);
        let i = edge.target;
        current[i] = current[i] + syn.g * syn.open_probability(y) * (syn.e_rev - state[i]);
    }
    Ok(current
        .into_iter()
        .enumerate()
        .map(|(i, c)| c / params.neuron(i).capacitance)
        .collect())
}

/// Forget-gate and drive pre-activations of the saturated chemical model:
/// `f_i = g_l + sum g S(.)`, `g_i = g_l + sum h S(.)` with `h = g e_rev / e_l`.
pub fn sltc_gates<T: Scalar>(state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<(Vec<T>, Vec<T>)> {
    check_dims(state, inputs, params, wiring)?;
    guard_reversal(params)?;
    let n = state.len();
    let mut f: Vec<T> = (0..n).map(|i| params.neuron(i).g_leak).collect();
    let mut g = f.clone();
    for (k, edge) in wiring.edges.iter().enumerate() {
        let y = presynaptic(state, inputs, wiring, k);
        let syn = params.chemical(k);
        let open = syn.open_probability(y);
        let h = syn.g * syn.e_rev / params.neuron(edge.target).e_leak;
        f[edge.target] = f[edge.target] + syn.g * open;
        g[edge.target] = g[edge.target] + h * open;
    }
    Ok((f, g))
}

/// `[-S(f_i) x_i + T(g_i) e_l] / C_i`.
pub fn sltc_derivative<T: Scalar>(state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<Vec<T>> {
    let (a, b) = sltc_linear(state, inputs, params, wiring)?;
    Ok(combine(state, &a, &b))
}

fn sltc_linear<T: Scalar>(state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<(Vec<T>, Vec<T>)> {
    let (f, g) = sltc_gates(state, inputs, params, wiring)?;
    let mut a = Vec::with_capacity(f.len());
    let mut b = Vec::with_capacity(f.len());
    for i in 0..f.len() {
        let n = params.neuron(i);
        a.push(sigmoid(f[i]) / n.capacitance);
        b.push(g[i].tanh() * n.e_leak / n.capacitance);
    }
    Ok((a, b))
}

fn combine<T: Scalar>(state: &[T], a: &[T], b: &[T]) -> Vec<T> {
    state.iter().zip(a.iter().zip(b)).map(|(&x, (&a, &b))| -a * x + b).collect()
}

/// Time derivative of the given model.
pub fn derivative<T: Scalar>(kind: ModelKind, state: &[T], inputs: &[T], params: &ModelParams<T>, wiring: &WiringGraph) -> Result<Vec<T>> {
    match kind {
        ModelKind::Electrical => electrical_derivative(state, inputs, params, wiring),
        ModelKind::CtRnn => ctrnn_derivative(state, inputs, params, wiring),
        ModelKind::Ltc => ltc_derivative(state, inputs, params, wiring),
        ModelKind::Sltc => sltc_derivative(state, inputs, params, wiring),
    }
}

/// Decay rate `A` and drive `B` such that `dx/dt = -A x + B`, with `A > 0`.
pub fn linear_form<T: Scalar>(
    kind: ModelKind,
    state: &[T],
    inputs: &[T],
    params: &ModelParams<T>,
    wiring: &WiringGraph,
) -> Result<(Vec<T>, Vec<T>)> {
    match kind {
        ModelKind::CtRnn => ctrnn_linear(state, inputs, params, wiring),
        ModelKind::Sltc => sltc_linear(state, inputs, params, wiring),
        ModelKind::Electrical | ModelKind::Ltc => {
            check_dims(state, inputs, params, wiring)?;
            let n = state.len();
            let mut a: Vec<T> = (0..n).map(|i| params.neuron(i).g_leak).collect();
            let mut b: Vec<T> = (0..n)
                .map(|i| {
                    let p = params.neuron(i);
                    p.g_leak * p.e_leak
                })
                .collect();
            for (k, edge) in wiring.edges.iter().enumerate() {
                let y = presynaptic(state, inputs, wiring, k);
                let i = edge.target;
                if kind == ModelKind::Ltc {
                    let syn = params.chemical(k);
                    let w = syn.g * syn.open_probability(y);
                    a[i] = a[i] + w;
                    b[i] = b[i] + w * syn.e_rev;
                } else {
                    let g = params.electrical(k).g;
                    a[i] = a[i] + g;
                    b[i] = b[i] + g * y;
                }
            }
            for i in 0..n {
                let c = params.neuron(i).capacitance;
                a[i] = a[i] / c;
                b[i] = b[i] / c;
            }
            Ok((a, b))
        }
    }
}

/// Advances the state across one input frame, holding the inputs constant.
pub fn step<T: Scalar>(
    kind: ModelKind,
    state: &[T],
    inputs: &[T],
    params: &ModelParams<T>,
    wiring: &WiringGraph,
    solver: &SolverConfig,
) -> Result<NeuronState<T>> {
    solver.validate()?;
    if params.kind != kind {
        return Err(Error::Config(format!(
            "parameters are for {} but {} was requested",
            params.kind, kind
        )));
    }
    let h = T::lit(solver.substep());
    let mut x = state.to_vec();
    for _ in 0..solver.unfold_steps {
        match solver.method {
            SolverMethod::ExplicitEuler => {
                let dx = derivative(kind, &x, inputs, params, wiring)?;
                for (xi, d) in x.iter_mut().zip(dx) {
                    *xi = *xi + h * d;
                }
            }
            SolverMethod::SemiImplicitEuler => {
                let (a, b) = linear_form(kind, &x, inputs, params, wiring)?;
                for i in 0..x.len() {
                    x[i] = (x[i] + h * b[i]) / (T::one() + h * a[i]);
                }
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T> {
    /// Output-neuron potential after each frame.
    pub outputs: Vec<T>,
    /// `activities[i][t]`: potential of neuron `i` after frame `t`.
    pub activities: Vec<Vec<T>>,
}

/// Runs the network from the zero state over a sequence of input frames.
pub fn rollout<T: Scalar>(
    kind: ModelKind,
    params: &ModelParams<T>,
    wiring: &WiringGraph,
    frames: &[Vec<T>],
    solver: &SolverConfig,
) -> Result<Rollout<T>> {
    if frames.is_empty() {
        return Err(Error::Structural("rollout needs at least one frame".into()));
    }
    let n = wiring.n_neurons();
    let out = wiring.output_neuron();
    let mut x = vec![T::zero(); n];
    let mut outputs = Vec::with_capacity(frames.len());
    let mut activities = vec![Vec::with_capacity(frames.len()); n];
    for (t, u) in frames.iter().enumerate() {
        x = step(kind, &x, u, params, wiring, solver)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: t });
        }
        outputs.push(x[out]);
        for (trace, &v) in activities.iter_mut().zip(&x) {
            trace.push(v);
        }
    }
    Ok(Rollout { outputs, activities })
}
