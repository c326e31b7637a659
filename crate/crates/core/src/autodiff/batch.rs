//! Matrix-valued reverse-mode graph for full-batch training.
//!
//! Node values are stored feature-major: a layer state of width `m` on a
//! batch of `B` samples is an `m × B` matrix, so every kernel runs over long
//! contiguous rows. The graph is built once; each training step overwrites
//! the parameter values, calls [`Graph::forward`] to recompute every node in
//! place and [`Graph::backward`] to accumulate parameter gradients.
//!
//! Input derivatives needed by stress losses are recorded as forward
//! tangents ([`record_network`]), so gradients of those derivatives with
//! respect to the parameters come out of the same reverse sweep.

use std::collections::HashMap;

use crate::isnn::{sigmoid, Activation, Constraint, Group, IsnnParams, Layout, Source};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    /// `w · x` (`w` is `m × k`, `x` is `k × B`)
    Linear(NodeId, NodeId),
    /// `a + b` with `b` holding one value per row of `a`
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a ⊙ c` with `c` a single row broadcast over the rows of `a`
    MulRow(NodeId, NodeId),
    /// `a · s` with `s` a 1×1 node
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Softplus(NodeId),
    Sigmoid(NodeId),
    /// `σ(a)(1 − σ(a))`
    SigmoidPrime(NodeId),
    Powf(NodeId, f64),
    /// mean of squared entries (1×1)
    MeanSq(NodeId),
    /// columns of `a` picked by index
    Gather(NodeId, Vec<usize>),
    /// Binary gate: value `1` if `σ(γ g) > 0.5` else `0`, backward
    /// through `γ σ (1 − σ)`.
    Gate(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Mat,
    /// softplus nodes keep σ(a) here for the reverse sweep
    aux: Mat,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    adj: Vec<Mat>,
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

#[inline]
fn fma_into(dst: &mut [f64], a: &[f64], b: &[f64]) {
    for ((x, &p), &q) in dst.iter_mut().zip(a).zip(b) {
        *x += p * q;
    }
}

/// `c = a · b + beta · c` for an `m × k` by `k × n` product into a
/// row-major `m × n` buffer; operand strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(a: &Mat, b: &Mat, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Param => vec![],
        Op::Linear(a, b)
        | Op::AddBias(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MulRow(a, b)
        | Op::MulScalar(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Offset(a, _)
        | Op::Softplus(a)
        | Op::Sigmoid(a)
        | Op::SigmoidPrime(a)
        | Op::Powf(a, _)
        | Op::MeanSq(a)
        | Op::Gather(a, _)
        | Op::Gate(a, _) => vec![*a],
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, op: Op, value: Mat, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, aux: Mat::zeros(0, 0), needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs_grad = inputs_of(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        let mut value = Mat::zeros(0, 0);
        let mut aux = Mat::zeros(0, 0);
        compute(&op, &self.nodes, &mut value, &mut aux);
        self.nodes.push(Node { op, value, aux, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.leaf(Op::Input, value, false)
    }

    pub fn param(&mut self, value: Mat) -> NodeId {
        self.leaf(Op::Param, value, true)
    }

    /// Overwrites the value of an input or parameter node.
    pub fn set_value(&mut self, id: NodeId, value: &[f64]) {
        let node = &mut self.nodes[id.0];
        assert!(matches!(node.op, Op::Input | Op::Param), "only leaves can be set");
        node.value.as_mut_slice().copy_from_slice(value);
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.as_slice()[0]
    }

    /// Gradient of the last [`Graph::backward`] output with respect to `id`.
    pub fn grad(&self, id: NodeId) -> &Mat {
        &self.adj[id.0]
    }

    pub fn linear(&mut self, w: NodeId, x: NodeId) -> NodeId {
        assert_eq!(self.value(w).cols(), self.value(x).rows(), "linear: inner dimension");
        self.push(Op::Linear(w, x))
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(b).len(), self.value(a).rows(), "add_bias: bias length");
        self.push(Op::AddBias(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self.value(a), self.value(b), "add");
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self.value(a), self.value(b), "sub");
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        same_shape(self.value(a), self.value(b), "mul");
        self.push(Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: NodeId, c: NodeId) -> NodeId {
        assert_eq!(self.value(c).shape(), (1, self.value(a).cols()), "mul_row: row shape");
        self.push(Op::MulRow(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).shape(), (1, 1), "mul_scalar: scalar shape");
        self.push(Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Offset(a, c))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn sigmoid_prime(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SigmoidPrime(a))
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        self.push(Op::Powf(a, p))
    }

    pub fn mean_sq(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanSq(a))
    }

    pub fn gather(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        let n = self.value(a).cols();
        assert!(cols.iter().all(|&c| c < n), "gather: column index out of range");
        self.push(Op::Gather(a, cols))
    }

    pub fn gate(&mut self, g: NodeId, gamma: f64) -> NodeId {
        assert_eq!(self.value(g).shape(), (1, 1), "gate: scalar shape");
        self.push(Op::Gate(g, gamma))
    }

    pub fn activate(&mut self, act: Activation, a: NodeId) -> NodeId {
        match act {
            Activation::Softplus => self.softplus(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Identity => a,
        }
    }

    /// Derivative of the activation evaluated at `a`; `None` for identity.
    pub fn activation_slope(&mut self, act: Activation, a: NodeId) -> Option<NodeId> {
        match act {
            Activation::Softplus => Some(self.sigmoid(a)),
            Activation::Sigmoid => Some(self.sigmoid_prime(a)),
            Activation::Identity => None,
        }
    }

    /// Recomputes every derived node from the current leaf values.
    pub fn forward(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            compute(&node.op, before, &mut node.value, &mut node.aux);
        }
    }

    /// Reverse sweep from the 1×1 node `out`; results via [`Graph::grad`].
    pub fn backward(&mut self, out: NodeId) {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        self.adj.resize_with(self.nodes.len(), || Mat::zeros(0, 0));
        for (a, n) in self.adj.iter_mut().zip(&self.nodes) {
            if n.needs_grad {
                if a.shape() != n.value.shape() {
                    *a = Mat::zeros(n.value.rows(), n.value.cols());
                } else {
                    a.as_mut_slice().fill(0.0);
                }
            }
        }
        self.adj[out.0].as_mut_slice()[0] = 1.0;
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (adj_before, adj_rest) = self.adj.split_at_mut(i);
            backprop(&self.nodes, i, &adj_rest[0], adj_before);
        }
    }
}

fn ensure(out: &mut Mat, r: usize, c: usize) {
    if out.shape() != (r, c) {
        *out = Mat::zeros(r, c);
    }
}

fn map(out: &mut Mat, a: &Mat, f: impl Fn(f64) -> f64) {
    ensure(out, a.rows(), a.cols());
    for (o, &x) in out.as_mut_slice().iter_mut().zip(a.as_slice()) {
        *o = f(x);
    }
}

fn zip(out: &mut Mat, a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) {
    ensure(out, a.rows(), a.cols());
    for ((o, &x), &y) in out.as_mut_slice().iter_mut().zip(a.as_slice()).zip(b.as_slice()) {
        *o = f(x, y);
    }
}

fn compute(op: &Op, nodes: &[Node], out: &mut Mat, aux: &mut Mat) {
    let v = |id: &NodeId| &nodes[id.0].value;
    match op {
        Op::Input | Op::Param => {}
        Op::Linear(w, x) => {
            let (w, x) = (v(w), v(x));
            let (m, k, b) = (w.rows(), w.cols(), x.cols());
            ensure(out, m, b);
            gemm(m, k, b, w.as_slice(), (k, 1), x.as_slice(), (b, 1), 0.0, out.as_mut_slice());
        }
        Op::AddBias(a, bias) => {
            let (a, bias) = (v(a), v(bias));
            ensure(out, a.rows(), a.cols());
            let b = a.cols().max(1);
            for ((orow, arow), &c) in out.as_mut_slice().chunks_mut(b).zip(a.as_slice().chunks(b)).zip(bias.as_slice()) {
                for (o, &x) in orow.iter_mut().zip(arow) {
                    *o = x + c;
                }
            }
        }
        Op::Add(a, b) => zip(out, v(a), v(b), |x, y| x + y),
        Op::Sub(a, b) => zip(out, v(a), v(b), |x, y| x - y),
        Op::Mul(a, b) => zip(out, v(a), v(b), |x, y| x * y),
        Op::MulRow(a, c) => {
            let (a, c) = (v(a), v(c));
            ensure(out, a.rows(), a.cols());
            let b = a.cols().max(1);
            for (orow, arow) in out.as_mut_slice().chunks_mut(b).zip(a.as_slice().chunks(b)) {
                for ((o, &x), &s) in orow.iter_mut().zip(arow).zip(c.as_slice()) {
                    *o = x * s;
                }
            }
        }
        Op::MulScalar(a, s) => {
            let s = v(s).as_slice()[0];
            map(out, v(a), |x| x * s)
        }
        Op::Scale(a, c) => map(out, v(a), |x| x * c),
        Op::Offset(a, c) => map(out, v(a), |x| x + c),
        Op::Softplus(a) => {
            let a = v(a);
            ensure(out, a.rows(), a.cols());
            ensure(aux, a.rows(), a.cols());
            for ((o, s), &x) in out.as_mut_slice().iter_mut().zip(aux.as_mut_slice()).zip(a.as_slice()) {
                let e = (-x.abs()).exp();
                *o = x.max(0.0) + e.ln_1p();
                *s = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            }
        }
        Op::Sigmoid(a) => map(out, v(a), sigmoid),
        Op::SigmoidPrime(a) => map(out, v(a), |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        }),
        Op::Powf(a, p) => map(out, v(a), |x| x.powf(*p)),
        Op::MeanSq(a) => {
            let a = v(a);
            ensure(out, 1, 1);
            let n = a.len().max(1) as f64;
            out.as_mut_slice()[0] = dot(a.as_slice(), a.as_slice()) / n;
        }
        Op::Gather(a, cols) => {
            let a = v(a);
            let b = a.cols();
            ensure(out, a.rows(), cols.len());
            for (r, orow) in out.as_mut_slice().chunks_mut(cols.len().max(1)).enumerate().take(a.rows()) {
                let arow = &a.as_slice()[r * b..(r + 1) * b];
                for (o, &c) in orow.iter_mut().zip(cols) {
                    *o = arow[c];
                }
            }
        }
        Op::Gate(g, gamma) => {
            ensure(out, 1, 1);
            let s = sigmoid(gamma * v(g).as_slice()[0]);
            out.as_mut_slice()[0] = if s > 0.5 { 1.0 } else { 0.0 };
        }
    }
}

/// Pushes the adjoint `dy` of node `i` to its inputs.
fn backprop(nodes: &[Node], i: usize, dy: &Mat, adj: &mut [Mat]) {
    let node = &nodes[i];
    let val = |id: &NodeId| &nodes[id.0].value;
    let wants = |id: &NodeId| nodes[id.0].needs_grad;
    let dyv = dy.as_slice();
    match &node.op {
        Op::Input | Op::Param => {}
        Op::Linear(w, x) => {
            let (wm, xm) = (val(w), val(x));
            let (m, k, b) = (wm.rows(), wm.cols(), xm.cols());
            if wants(w) {
                // dW += dY · Xᵀ
                gemm(m, b, k, dyv, (b, 1), xm.as_slice(), (1, b), 1.0, adj[w.0].as_mut_slice());
            }
            if wants(x) {
                // dX += Wᵀ · dY
                gemm(k, m, b, wm.as_slice(), (1, k), dyv, (b, 1), 1.0, adj[x.0].as_mut_slice());
            }
        }
        Op::AddBias(a, bias) => {
            if wants(a) {
                add_into(adj[a.0].as_mut_slice(), dyv);
            }
            if wants(bias) {
                let b = dy.cols().max(1);
                for (d, row) in adj[bias.0].as_mut_slice().iter_mut().zip(dyv.chunks(b)) {
                    *d += row.iter().sum::<f64>();
                }
            }
        }
        Op::Add(a, b) => {
            if wants(a) {
                add_into(adj[a.0].as_mut_slice(), dyv);
            }
            if wants(b) {
                add_into(adj[b.0].as_mut_slice(), dyv);
            }
        }
        Op::Sub(a, b) => {
            if wants(a) {
                add_into(adj[a.0].as_mut_slice(), dyv);
            }
            if wants(b) {
                for (x, &d) in adj[b.0].as_mut_slice().iter_mut().zip(dyv) {
                    *x -= d;
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(a) {
                fma_into(adj[a.0].as_mut_slice(), dyv, val(b).as_slice());
            }
            if wants(b) {
                fma_into(adj[b.0].as_mut_slice(), dyv, val(a).as_slice());
            }
        }
        Op::MulRow(a, c) => {
            let am = val(a);
            let b = am.cols().max(1);
            if wants(a) {
                let cv = val(c).as_slice();
                for (darow, dyrow) in adj[a.0].as_mut_slice().chunks_mut(b).zip(dyv.chunks(b)) {
                    fma_into(darow, dyrow, cv);
                }
            }
            if wants(c) {
                let dc = adj[c.0].as_mut_slice();
                for (dyrow, arow) in dyv.chunks(b).zip(am.as_slice().chunks(b)) {
                    fma_into(dc, dyrow, arow);
                }
            }
        }
        Op::MulScalar(a, s) => {
            let sv = val(s).as_slice()[0];
            if wants(a) {
                axpy(adj[a.0].as_mut_slice(), sv, dyv);
            }
            if wants(s) {
                adj[s.0].as_mut_slice()[0] += dot(dyv, val(a).as_slice());
            }
        }
        Op::Scale(a, c) => {
            if wants(a) {
                axpy(adj[a.0].as_mut_slice(), *c, dyv);
            }
        }
        Op::Offset(a, _) => {
            if wants(a) {
                add_into(adj[a.0].as_mut_slice(), dyv);
            }
        }
        Op::Softplus(a) => {
            if wants(a) {
                fma_into(adj[a.0].as_mut_slice(), dyv, node.aux.as_slice());
            }
        }
        Op::Sigmoid(a) => {
            if wants(a) {
                for ((x, &d), &s) in adj[a.0].as_mut_slice().iter_mut().zip(dyv).zip(node.value.as_slice()) {
                    *x += d * s * (1.0 - s);
                }
            }
        }
        Op::SigmoidPrime(a) => {
            if wants(a) {
                for ((x, &d), &p) in adj[a.0].as_mut_slice().iter_mut().zip(dyv).zip(val(a).as_slice()) {
                    let s = sigmoid(p);
                    *x += d * s * (1.0 - s) * (1.0 - 2.0 * s);
                }
            }
        }
        Op::Powf(a, p) => {
            if wants(a) {
                for ((x, &d), &base) in adj[a.0].as_mut_slice().iter_mut().zip(dyv).zip(val(a).as_slice()) {
                    *x += d * p * base.powf(p - 1.0);
                }
            }
        }
        Op::MeanSq(a) => {
            if wants(a) {
                let am = val(a);
                let c = 2.0 * dyv[0] / am.len().max(1) as f64;
                axpy(adj[a.0].as_mut_slice(), c, am.as_slice());
            }
        }
        Op::Gather(a, cols) => {
            if wants(a) {
                let b = val(a).cols();
                let nc = cols.len().max(1);
                let da = adj[a.0].as_mut_slice();
                for (r, dyrow) in dyv.chunks(nc).enumerate() {
                    let darow = &mut da[r * b..(r + 1) * b];
                    for (&d, &c) in dyrow.iter().zip(cols) {
                        darow[c] += d;
                    }
                }
            }
        }
        Op::Gate(g, gamma) => {
            if wants(g) {
                let s = sigmoid(gamma * val(g).as_slice()[0]);
                adj[g.0].as_mut_slice()[0] += dyv[0] * gamma * s * (1.0 - s);
            }
        }
    }
}

/// Parameter nodes of one network: raw leaves and their constraint-mapped
/// effective values.
#[derive(Debug, Clone)]
pub struct NetNodes {
    pub raw: Vec<NodeId>,
    pub eff: Vec<NodeId>,
}

impl NetNodes {
    pub fn new(g: &mut Graph, params: &IsnnParams) -> Self {
        let mut raw = Vec::new();
        let mut eff = Vec::new();
        for p in &params.raw_params {
            let r = g.param(p.values.clone());
            let e = match p.constraint {
                Constraint::NonNegative => g.softplus(r),
                Constraint::Free => r,
            };
            raw.push(r);
            eff.push(e);
        }
        NetNodes { raw, eff }
    }

    pub fn load(&self, g: &mut Graph, params: &IsnnParams) {
        for (&id, p) in self.raw.iter().zip(&params.raw_params) {
            g.set_value(id, p.values.as_slice());
        }
    }

    /// Copies accumulated gradients into one buffer per raw tensor.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.raw.iter().map(|&id| g.grad(id).as_slice().to_vec()).collect()
    }
}

/// One input group on its distinct columns.
#[derive(Debug, Clone)]
pub struct GroupInput {
    /// `dim × U` with one column per distinct sample of this group
    pub node: NodeId,
    /// column of `node` for each sample; `None` when all samples are distinct
    pub index: Option<Vec<usize>>,
}

/// Input nodes for each group of a batch, feature-major.
///
/// Samples that agree on a group (e.g. one deformation paired with many
/// design parameters) share a column, so branch layers run once per
/// distinct value and are gathered back to the full batch where they feed
/// the main chain.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub groups: [Option<GroupInput>; 4],
    pub all: NodeId,
    pub samples: usize,
}

impl BatchInputs {
    /// Splits a sample-major `samples × n_inputs` matrix by group.
    pub fn new(g: &mut Graph, layout: &Layout, data: &Mat) -> Self {
        let samples = data.rows();
        let mut groups: [Option<GroupInput>; 4] = Default::default();
        for grp in Group::ALL {
            let r = layout.group_range(grp);
            if r.is_empty() {
                continue;
            }
            let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
            let mut cols: Vec<usize> = Vec::new();
            let index: Vec<usize> = (0..samples)
                .map(|i| {
                    let key = data.row(i)[r.clone()].iter().map(|v| v.to_bits()).collect();
                    *seen.entry(key).or_insert_with(|| {
                        cols.push(i);
                        cols.len() - 1
                    })
                })
                .collect();
            let mut block = Mat::zeros(r.len(), cols.len());
            for (c, &i) in cols.iter().enumerate() {
                for (d, k) in r.clone().enumerate() {
                    block[(d, c)] = data[(i, k)];
                }
            }
            let node = g.input(block);
            let index = (cols.len() < samples).then_some(index);
            groups[grp.index()] = Some(GroupInput { node, index });
        }
        let all = g.input(data.transpose());
        BatchInputs { groups, all, samples }
    }
}

/// Network output and its derivatives along requested input directions,
/// each `1 × samples`.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub value: NodeId,
    /// `∂P/∂input[k]` for each requested `k`; `None` where the output
    /// cannot depend on that input.
    pub slopes: Vec<Option<NodeId>>,
}

type Tangents = Vec<Option<NodeId>>;

fn linear_tangent(g: &mut Graph, acc: Option<NodeId>, w: NodeId, src: Option<NodeId>) -> Option<NodeId> {
    let Some(src) = src else { return acc };
    let t = g.linear(w, src);
    Some(match acc {
        Some(a) => g.add(a, t),
        None => t,
    })
}

fn activate_tangent(g: &mut Graph, slope: Option<NodeId>, t: Option<NodeId>) -> Option<NodeId> {
    let t = t?;
    Some(match slope {
        Some(s) => g.mul(s, t),
        None => t,
    })
}

/// Records the network on a batch, with forward tangents for the flattened
/// input indices in `dirs`.
pub fn record_network(g: &mut Graph, layout: &Layout, eff: &[NodeId], inputs: &BatchInputs, dirs: &[usize]) -> BatchOutput {
    let seed = |g: &mut Graph, start: usize, len: usize, cols: usize, k: usize| -> Option<NodeId> {
        if k < start || k >= start + len {
            return None;
        }
        let mut m = Mat::zeros(len, cols);
        m.row_mut(k - start).fill(1.0);
        Some(g.input(m))
    };
    let group_start = |g: &mut Graph, grp: Group| -> Option<(NodeId, Tangents)> {
        let inp = inputs.groups[grp.index()].as_ref()?;
        let r = layout.group_range(grp);
        let cols = g.value(inp.node).cols();
        Some((inp.node, dirs.iter().map(|&k| seed(g, r.start, r.len(), cols, k)).collect()))
    };

    let mut branch_states: [Vec<(NodeId, Tangents)>; 4] = Default::default();
    for br in &layout.branches {
        let mut states = vec![group_start(g, br.group).expect("branch group has inputs")];
        for l in &br.layers {
            let (sv, st) = states.last().unwrap().clone();
            let lin = g.linear(eff[l.weight], sv);
            let pre = g.add_bias(lin, eff[l.bias]);
            let slope = if st.iter().any(Option::is_some) { g.activation_slope(br.act, pre) } else { None };
            let post = g.activate(br.act, pre);
            let tangents = st
                .iter()
                .map(|&t| {
                    let lt = linear_tangent(g, None, eff[l.weight], t);
                    activate_tangent(g, slope, lt)
                })
                .collect();
            states.push((post, tangents));
        }
        branch_states[br.group.index()] = states;
    }

    let x0 = group_start(g, Group::X);
    let reads_all = layout.x_layers[0].terms.iter().any(|t| t.source == Source::All);
    let all = reads_all.then(|| {
        let n = layout.n_inputs();
        (inputs.all, dirs.iter().map(|&k| seed(g, 0, n, inputs.samples, k)).collect::<Tangents>())
    });
    let index_of = |grp: Group| inputs.groups[grp.index()].as_ref().and_then(|i| i.index.as_ref());

    let mut x: Option<(NodeId, Tangents)> = None;
    for layer in &layout.x_layers {
        let mut pre: Option<NodeId> = None;
        let mut pre_t: Tangents = vec![None; dirs.len()];
        for term in &layer.terms {
            let ((sv, st), index) = match term.source {
                Source::PrevX => (x.clone().expect("previous layer"), None),
                Source::X0 => (x0.clone().expect("x inputs"), index_of(Group::X)),
                Source::All => (all.clone().expect("flattened inputs"), None),
                Source::Branch(grp, d) => (branch_states[grp.index()][d].clone(), index_of(grp)),
            };
            let w = eff[term.weight];
            let expand = |g: &mut Graph, n: NodeId| match index {
                Some(ix) => g.gather(n, ix.clone()),
                None => n,
            };
            let lin = g.linear(w, sv);
            let lin = expand(g, lin);
            pre = Some(match pre {
                Some(p) => g.add(p, lin),
                None => lin,
            });
            for (acc, &t) in pre_t.iter_mut().zip(&st) {
                let Some(t) = t else { continue };
                let lt = g.linear(w, t);
                let lt = expand(g, lt);
                *acc = Some(match *acc {
                    Some(a) => g.add(a, lt),
                    None => lt,
                });
            }
        }
        let pre = g.add_bias(pre.expect("layer has at least one term"), eff[layer.bias]);
        let slope = if pre_t.iter().any(Option::is_some) { g.activation_slope(layer.act, pre) } else { None };
        let post = g.activate(layer.act, pre);
        let tangents = pre_t.into_iter().map(|t| activate_tangent(g, slope, t)).collect();
        x = Some((post, tangents));
    }
    let (value, slopes) = x.expect("at least one layer");
    BatchOutput { value, slopes }
}
