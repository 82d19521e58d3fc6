//! Reverse-mode differentiation over flat tensor primitives.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; [`Tape::backward`] walks it once in reverse. Every
//! value is a flat `Vec<T>`; shapes are implied by the operation.

use std::sync::Arc;

use crate::scalar::{sigmoid, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a batched 2-d convolution over `[batch, channels, height, width]` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_height * self.in_width
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_height() * self.out_width()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Recip(Var),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    op: Op<T>,
    /// False for data leaves whose adjoint nobody reads.
    tracked: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of every node reached from a root.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Vec<T>>,
    lens: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; a zero vector when the root does not depend on it.
    pub fn get(&self, v: Var) -> Vec<T> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            vec![T::zero(); self.lens[v.0]]
        } else {
            g.clone()
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op, tracked: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Input or parameter; gradients flow into it but not beyond.
    pub fn leaf(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf whose adjoint is never needed (images, labels); lets convolutions skip work.
    pub fn data(&mut self, value: Vec<T>) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].tracked = false;
        v
    }

    pub fn constant(&mut self, value: T, len: usize) -> Var {
        self.data(vec![value; len])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "elementwise operands differ in length");
        x.iter().zip(y).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Vec<T> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.recip());
        self.push(v, Op::Recip(a))
    }

    /// `out[k] = a[index[k]]`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>) -> Var {
        let src = self.value(a);
        let v = index.iter().map(|&i| src[i]).collect();
        self.push(v, Op::Gather(a, index))
    }

    /// `out[index[k]] += a[k]` into a zero vector of length `len`.
    pub fn scatter_add(&mut self, a: Var, index: Arc<[usize]>, len: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), index.len(), "scatter source and index differ in length");
        let mut v = vec![T::zero(); len];
        for (&i, &x) in index.iter().zip(src) {
            v[i] = v[i] + x;
        }
        self.push(v, Op::ScatterAdd(a, index))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for &p in parts {
            v.extend_from_slice(self.value(p));
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a)[start..start + len].to_vec();
        self.push(v, Op::Slice(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], Op::Sum(a))
    }

    /// Batched cross-correlation with zero padding; weight is `[out, in, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let v = conv2d_forward(self.value(input), self.value(weight), self.value(bias), &geom);
        self.push(v, Op::Conv2d { input, weight, bias, geom })
    }

    /// Row-wise affine map: `out[r, o] = bias[o] + sum_i weight[o, i] * input[r, i]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var, n_in: usize, n_out: usize) -> Var {
        let x = self.value(input);
        assert_eq!(x.len() % n_in, 0, "linear input is not a whole number of rows");
        let rows = x.len() / n_in;
        let v = linear_forward(x, self.value(weight), self.value(bias), n_in, n_out);
        self.push(
            v,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                n_in,
                n_out,
            },
        )
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let n = self.nodes.len();
        let mut grads: Vec<Vec<T>> = vec![Vec::new(); n];
        grads[root.0] = vec![T::one()];

        for idx in (0..=root.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            let lens = NodeValues(&self.nodes);
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    lens.acc(&mut grads, *a, |i| g[i]);
                    lens.acc(&mut grads, *b, |i| g[i]);
                }
                Op::Sub(a, b) => {
                    lens.acc(&mut grads, *a, |i| g[i]);
                    lens.acc(&mut grads, *b, |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    lens.acc(&mut grads, *a, |i| g[i] * y[i]);
                    lens.acc(&mut grads, *b, |i| g[i] * x[i]);
                }
                Op::Scale(a, c) => lens.acc(&mut grads, *a, |i| g[i] * *c),
                Op::AddConst(a) => lens.acc(&mut grads, *a, |i| g[i]),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    lens.acc(&mut grads, *a, |i| g[i] * y[i] * (T::one() - y[i]));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    lens.acc(&mut grads, *a, |i| g[i] * (T::one() - y[i] * y[i]));
                }
                Op::Recip(a) => {
                    let y = &node.value;
                    lens.acc(&mut grads, *a, |i| -g[i] * y[i] * y[i]);
                }
                Op::Gather(a, index) => {
                    let mut back = vec![T::zero(); val(*a).len()];
                    for (k, &i) in index.iter().enumerate() {
                        back[i] = back[i] + g[k];
                    }
                    lens.acc(&mut grads, *a, |i| back[i]);
                }
                Op::ScatterAdd(a, index) => lens.acc(&mut grads, *a, |k| g[index[k]]),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        lens.acc(&mut grads, p, |i| g[off + i]);
                        off += len;
                    }
                }
                Op::Slice(a, start) => {
                    let (start, len) = (*start, g.len());
                    lens.acc(
                        &mut grads,
                        *a,
                        |i| {
                            if i >= start && i < start + len {
                                g[i - start]
                            } else {
                                T::zero()
                            }
                        },
                    );
                }
                Op::Sum(a) => lens.acc(&mut grads, *a, |_| g[0]),
                Op::Conv2d { input, weight, bias, geom } => {
                    let need_input = self.nodes[input.0].tracked;
                    let (gi, gw, gb) = conv2d_backward(val(*input), val(*weight), &g, geom, need_input);
                    if let Some(gi) = gi {
                        lens.acc(&mut grads, *input, |i| gi[i]);
                    }
                    lens.acc(&mut grads, *weight, |i| gw[i]);
                    lens.acc(&mut grads, *bias, |i| gb[i]);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                    rows,
                    n_in,
                    n_out,
                } => {
                    let (x, w) = (val(*input), val(*weight));
                    let (rows, n_in, n_out) = (*rows, *n_in, *n_out);
                    let mut gx = vec![T::zero(); rows * n_in];
                    let mut gw = vec![T::zero(); n_out * n_in];
                    let mut gb = vec![T::zero(); n_out];
                    for r in 0..rows {
                        let xr = &x[r * n_in..(r + 1) * n_in];
                        let gxr = &mut gx[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            let go = g[r * n_out + o];
                            gb[o] = gb[o] + go;
                            let wo = &w[o * n_in..(o + 1) * n_in];
                            let gwo = &mut gw[o * n_in..(o + 1) * n_in];
                            for i in 0..n_in {
                                gxr[i] = gxr[i] + go * wo[i];
                                gwo[i] = gwo[i] + go * xr[i];
                            }
                        }
                    }
                    lens.acc(&mut grads, *input, |i| gx[i]);
                    lens.acc(&mut grads, *weight, |i| gw[i]);
                    lens.acc(&mut grads, *bias, |i| gb[i]);
                }
            }
            grads[idx] = g;
        }
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        Gradients { grads, lens }
    }
}

struct NodeValues<'a, T>(&'a [Node<T>]);

impl<T: Scalar> NodeValues<'_, T> {
    fn acc(&self, grads: &mut [Vec<T>], v: Var, f: impl Fn(usize) -> T) {
        let len = self.0[v.0].value.len();
        let g = &mut grads[v.0];
        if g.is_empty() {
            *g = (0..len).map(f).collect();
        } else {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = *gi + f(i);
            }
        }
    }
}

pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], n_in: usize, n_out: usize) -> Vec<T> {
    assert_eq!(w.len(), n_in * n_out, "linear weight shape");
    assert_eq!(b.len(), n_out, "linear bias shape");
    let rows = x.len() / n_in;
    let mut out = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let wo = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o];
            for i in 0..n_in {
                acc = acc + wo[i] * xr[i];
            }
            out.push(acc);
        }
    }
    out
}

/// Weights rearranged to `[ic * k * k][oc]` so that the inner loops run
/// over output channels.
fn transpose_weight<T: Scalar>(weight: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.in_channels * g.kernel * g.kernel;
    let mut wt = vec![T::zero(); weight.len()];
    for o in 0..g.out_channels {
        for j in 0..kk {
            wt[j * g.out_channels + o] = weight[o * kk + j];
        }
    }
    wt
}

/// Calls `f(j, input index)` for every in-bounds tap of output `(oy, ox)`.
#[inline(always)]
fn for_each_tap(g: &ConvGeom, n: usize, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    let (ih, iw, k) = (g.in_height as isize, g.in_width as isize, g.kernel);
    let y0 = (oy * g.stride) as isize - g.padding as isize;
    let x0 = (ox * g.stride) as isize - g.padding as isize;
    for c in 0..g.in_channels {
        let plane = (n * g.in_channels + c) * g.in_height * g.in_width;
        for ky in 0..k {
            let iy = y0 + ky as isize;
            if iy < 0 || iy >= ih {
                continue;
            }
            let row = plane + iy as usize * g.in_width;
            for kx in 0..k {
                let ix = x0 + kx as isize;
                if ix < 0 || ix >= iw {
                    continue;
                }
                f((c * k + ky) * k + kx, row + ix as usize);
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    assert_eq!(input.len(), g.input_len(), "conv input shape");
    assert_eq!(weight.len(), g.weight_len(), "conv weight shape");
    assert_eq!(bias.len(), g.out_channels, "conv bias shape");
    let (oh, ow, oc) = (g.out_height(), g.out_width(), g.out_channels);
    let npos = oh * ow;
    let wt = transpose_weight(weight, g);
    let mut out = vec![T::zero(); g.output_len()];
    let mut acc = vec![T::zero(); oc];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(bias);
                for_each_tap(g, n, oy, ox, |j, i| {
                    let v = input[i];
                    for (a, w) in acc.iter_mut().zip(&wt[j * oc..(j + 1) * oc]) {
                        *a = *a + v * *w;
                    }
                });
                let pos = oy * ow + ox;
                for (o, a) in acc.iter().enumerate() {
                    out[(n * oc + o) * npos + pos] = *a;
                }
            }
        }
    }
    out
}

/// Returns `(d input, d weight, d bias)`; the input adjoint is skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow, oc) = (g.out_height(), g.out_width(), g.out_channels);
    let npos = oh * ow;
    let kk = g.in_channels * g.kernel * g.kernel;
    let wt = transpose_weight(weight, g);
    let mut gi = if need_input { Some(vec![T::zero(); input.len()]) } else { None };
    let mut gwt = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); oc];
    let mut go = vec![T::zero(); oc];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let pos = oy * ow + ox;
                for o in 0..oc {
                    go[o] = grad_out[(n * oc + o) * npos + pos];
                    gb[o] = gb[o] + go[o];
                }
                for_each_tap(g, n, oy, ox, |j, i| {
                    let v = input[i];
                    for (a, d) in gwt[j * oc..(j + 1) * oc].iter_mut().zip(&go) {
                        *a = *a + v * *d;
                    }
                    if let Some(gi) = gi.as_mut() {
                        let dot = wt[j * oc..(j + 1) * oc].iter().zip(&go).fold(T::zero(), |s, (w, d)| s + *w * *d);
                        gi[i] = gi[i] + dot;
                    }
                });
            }
        }
    }
    let mut gw = vec![T::zero(); weight.len()];
    for o in 0..oc {
        for j in 0..kk {
            gw[o * kk + j] = gwt[j * oc + o];
        }
    }
    (gi, gw, gb)
}
