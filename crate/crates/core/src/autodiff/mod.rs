//! Reverse-mode automatic differentiation.
//!
//! [`Tape`] records scalar operations in evaluation order and sweeps them
//! backwards to get adjoints. Second derivatives come from
//! [`Tape::grad_recorded`], which writes the reverse sweep itself onto the
//! tape so it can be differentiated again.
//!
//! [`batch`] holds a matrix-valued graph used by the training loops, and
//! [`bench`] times manual against tape derivatives.

pub mod batch;
pub mod bench;

use crate::isnn::{softplus, sigmoid, Activation, Constraint, IsnnParams, Layout, Network, Source};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
}

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Var {
    pub id: usize,
    pub value: f64,
}

/// Adjoints of one reverse sweep, indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints[v.id]
    }

    pub fn wrt_all(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        self.nodes.push(Node { op, value });
        Var { id: self.nodes.len() - 1, value }
    }

    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn leaves(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a.id, b.id), a.value + b.value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a.id, b.id), a.value - b.value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a.id, b.id), a.value * b.value)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a.id, b.id), a.value / b.value)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a.id), -a.value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a.id, c), c * a.value)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Offset(a.id, c), a.value + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a.id), a.value.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Op::Ln(a.id), a.value.ln())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a.id), softplus(a.value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a.id), sigmoid(a.value))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a.id), a.value.tanh())
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.push(Op::Sin(a.id), a.value.sin())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.push(Op::Cos(a.id), a.value.cos())
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut it = xs.iter();
        let Some(&first) = it.next() else {
            return self.constant(0.0);
        };
        it.fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot of unequal lengths");
        let prods: Vec<Var> = a.iter().zip(b).map(|(&x, &y)| self.mul(x, y)).collect();
        self.sum(&prods)
    }

    /// `w · x + b` for a row-major `rows × x.len()` weight slice.
    pub fn affine(&mut self, w: &[Var], x: &[Var], b: &[Var]) -> Vec<Var> {
        let cols = x.len();
        b.iter()
            .enumerate()
            .map(|(r, &bias)| {
                let d = self.dot(&w[r * cols..(r + 1) * cols], x);
                self.add(d, bias)
            })
            .collect()
    }

    pub fn activate(&mut self, act: Activation, a: Var) -> Var {
        match act {
            Activation::Softplus => self.softplus(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Identity => a,
        }
    }

    /// Recomputes every node from new leaf values (in creation order).
    pub fn replay(&mut self, leaf_values: &[f64]) -> f64 {
        let mut leaves = leaf_values.iter();
        for i in 0..self.nodes.len() {
            let v = |j: usize| self.nodes[j].value;
            let value = match self.nodes[i].op {
                Op::Leaf => *leaves.next().expect("too few leaf values for replay"),
                Op::Const => self.nodes[i].value,
                Op::Add(a, b) => v(a) + v(b),
                Op::Sub(a, b) => v(a) - v(b),
                Op::Mul(a, b) => v(a) * v(b),
                Op::Div(a, b) => v(a) / v(b),
                Op::Neg(a) => -v(a),
                Op::Scale(a, c) => c * v(a),
                Op::Offset(a, c) => v(a) + c,
                Op::Exp(a) => v(a).exp(),
                Op::Ln(a) => v(a).ln(),
                Op::Softplus(a) => softplus(v(a)),
                Op::Sigmoid(a) => sigmoid(v(a)),
                Op::Tanh(a) => v(a).tanh(),
                Op::Sin(a) => v(a).sin(),
                Op::Cos(a) => v(a).cos(),
            };
            self.nodes[i].value = value;
        }
        self.nodes.last().map_or(0.0, |n| n.value)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.id].value
    }

    /// Adjoints of `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut adj = vec![0.0; out.id + 1];
        adj[out.id] = 1.0;
        for i in (0..=out.id).rev() {
            let a_i = adj[i];
            if a_i == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            let v = |j: usize| self.nodes[j].value;
            match node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a] += a_i;
                    adj[b] += a_i;
                }
                Op::Sub(a, b) => {
                    adj[a] += a_i;
                    adj[b] -= a_i;
                }
                Op::Mul(a, b) => {
                    adj[a] += a_i * v(b);
                    adj[b] += a_i * v(a);
                }
                Op::Div(a, b) => {
                    adj[a] += a_i / v(b);
                    adj[b] -= a_i * node.value / v(b);
                }
                Op::Neg(a) => adj[a] -= a_i,
                Op::Scale(a, c) => adj[a] += a_i * c,
                Op::Offset(a, _) => adj[a] += a_i,
                Op::Exp(a) => adj[a] += a_i * node.value,
                Op::Ln(a) => adj[a] += a_i / v(a),
                Op::Softplus(a) => adj[a] += a_i * sigmoid(v(a)),
                Op::Sigmoid(a) => adj[a] += a_i * node.value * (1.0 - node.value),
                Op::Tanh(a) => adj[a] += a_i * (1.0 - node.value * node.value),
                Op::Sin(a) => adj[a] += a_i * v(a).cos(),
                Op::Cos(a) => adj[a] -= a_i * v(a).sin(),
            }
        }
        adj.resize(self.nodes.len(), 0.0);
        Gradients { adjoints: adj }
    }

    /// Records the reverse sweep of `out` onto the tape and returns the
    /// adjoint variables of `wrt`. The result can be differentiated again.
    pub fn grad_recorded(&mut self, out: Var, wrt: &[Var]) -> Vec<Var> {
        let n = out.id + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[out.id] = Some(self.constant(1.0));
        for i in (0..n).rev() {
            let Some(a_i) = adj[i] else { continue };
            let node = self.nodes[i];
            let me = Var { id: i, value: node.value };
            let var = |t: &Tape, j: usize| Var { id: j, value: t.nodes[j].value };
            let mut contrib: Vec<(usize, Var)> = Vec::with_capacity(2);
            match node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    contrib.push((a, a_i));
                    contrib.push((b, a_i));
                }
                Op::Sub(a, b) => {
                    contrib.push((a, a_i));
                    let neg = self.neg(a_i);
                    contrib.push((b, neg));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (var(self, a), var(self, b));
                    let da = self.mul(a_i, vb);
                    let db = self.mul(a_i, va);
                    contrib.push((a, da));
                    contrib.push((b, db));
                }
                Op::Div(a, b) => {
                    let vb = var(self, b);
                    let da = self.div(a_i, vb);
                    let q = self.div(me, vb);
                    let t = self.mul(a_i, q);
                    let db = self.neg(t);
                    contrib.push((a, da));
                    contrib.push((b, db));
                }
                Op::Neg(a) => {
                    let d = self.neg(a_i);
                    contrib.push((a, d));
                }
                Op::Scale(a, c) => {
                    let d = self.scale(a_i, c);
                    contrib.push((a, d));
                }
                Op::Offset(a, _) => contrib.push((a, a_i)),
                Op::Exp(a) => {
                    let d = self.mul(a_i, me);
                    contrib.push((a, d));
                }
                Op::Ln(a) => {
                    let va = var(self, a);
                    let d = self.div(a_i, va);
                    contrib.push((a, d));
                }
                Op::Softplus(a) => {
                    let va = var(self, a);
                    let s = self.sigmoid(va);
                    let d = self.mul(a_i, s);
                    contrib.push((a, d));
                }
                Op::Sigmoid(a) => {
                    let one_minus = {
                        let n = self.neg(me);
                        self.offset(n, 1.0)
                    };
                    let ds = self.mul(me, one_minus);
                    let d = self.mul(a_i, ds);
                    contrib.push((a, d));
                }
                Op::Tanh(a) => {
                    let sq = self.mul(me, me);
                    let n = self.neg(sq);
                    let dt = self.offset(n, 1.0);
                    let d = self.mul(a_i, dt);
                    contrib.push((a, d));
                }
                Op::Sin(a) => {
                    let va = var(self, a);
                    let c = self.cos(va);
                    let d = self.mul(a_i, c);
                    contrib.push((a, d));
                }
                Op::Cos(a) => {
                    let va = var(self, a);
                    let s = self.sin(va);
                    let t = self.mul(a_i, s);
                    let d = self.neg(t);
                    contrib.push((a, d));
                }
            }
            for (j, d) in contrib {
                adj[j] = Some(match adj[j] {
                    Some(prev) => self.add(prev, d),
                    None => d,
                });
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.id).copied().flatten() {
                Some(v) => v,
                None => self.constant(0.0),
            })
            .collect()
    }
}

/// Hessian of a scalar function recorded by `build` at `x`: one recorded
/// gradient, then one reverse sweep per gradient entry.
pub fn hessian(build: impl FnOnce(&mut Tape, &[Var]) -> Var, x: &[f64]) -> crate::tensor::Mat {
    let mut tape = Tape::new();
    let leaves = tape.leaves(x);
    let out = build(&mut tape, &leaves);
    let grads = tape.grad_recorded(out, &leaves);
    let n = x.len();
    let mut h = crate::tensor::Mat::zeros(n, n);
    for (i, &g) in grads.iter().enumerate() {
        let second = tape.backward(g);
        for (j, &l) in leaves.iter().enumerate() {
            h[(i, j)] = second.wrt(l);
        }
    }
    h
}

/// Records the network forward pass given effective weights as tape
/// variables (one variable list per parameter tensor, row-major).
pub fn record_forward(tape: &mut Tape, layout: &Layout, weights: &[Vec<Var>], input: &[Var]) -> Var {
    let mut branch_states: [Vec<Vec<Var>>; 4] = Default::default();
    for br in &layout.branches {
        let mut states = vec![input[layout.group_range(br.group)].to_vec()];
        for l in &br.layers {
            let pre = tape.affine(&weights[l.weight], states.last().unwrap(), &weights[l.bias]);
            states.push(pre.into_iter().map(|p| tape.activate(br.act, p)).collect());
        }
        branch_states[br.group.index()] = states;
    }
    let x0 = input[layout.group_range(crate::isnn::Group::X)].to_vec();
    let mut x: Vec<Var> = Vec::new();
    for layer in &layout.x_layers {
        let mut pre: Vec<Var> = weights[layer.bias].clone();
        for term in &layer.terms {
            let src: &[Var] = match term.source {
                Source::PrevX => &x,
                Source::X0 => &x0,
                Source::All => input,
                Source::Branch(g, d) => &branch_states[g.index()][d],
            };
            let w = &weights[term.weight];
            let cols = src.len();
            for (r, p) in pre.iter_mut().enumerate() {
                let d = tape.dot(&w[r * cols..(r + 1) * cols], src);
                *p = tape.add(*p, d);
            }
        }
        x = pre.into_iter().map(|p| tape.activate(layer.act, p)).collect();
    }
    x[0]
}

/// Effective weights of a network as tape constants.
pub fn constant_weights(tape: &mut Tape, net: &Network) -> Vec<Vec<Var>> {
    net.weights.iter().map(|w| w.as_slice().iter().map(|&v| tape.constant(v)).collect()).collect()
}

/// Raw parameters as leaves, mapped through softplus on the tape where the
/// constraint requires it. Returns `(effective, raw leaves)`.
pub fn parameter_leaves(tape: &mut Tape, params: &IsnnParams) -> (Vec<Vec<Var>>, Vec<Vec<Var>>) {
    let mut eff = Vec::new();
    let mut raw = Vec::new();
    for p in &params.raw_params {
        let leaves = tape.leaves(p.values.as_slice());
        let mapped = match p.constraint {
            Constraint::NonNegative => leaves.iter().map(|&l| tape.softplus(l)).collect(),
            Constraint::Free => leaves.clone(),
        };
        eff.push(mapped);
        raw.push(leaves);
    }
    (eff, raw)
}
