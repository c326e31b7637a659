//! Manual derivatives of network outputs with respect to the inputs.
//!
//! Value, gradient and Hessian are produced in one forward sweep: every
//! layer state carries its value, its Jacobian with respect to the full
//! flattened input and (optionally) its Hessian. An affine term maps all
//! three linearly; an activation applies the chain rule
//!
//! ```text
//! J' = σ'(a) J_a
//! H' = σ''(a) J_a J_aᵀ + σ'(a) H_a
//! ```
//!
//! Branch states start as selections of the raw inputs, so the same sweep
//! covers the x-chain recursion, the skip terms of ISNN-2 and every branch.
//!
//! Finite-difference oracles [`fd_grad`] and [`fd_hess`] live here too.

use crate::error::{Error, Result};
use crate::isnn::{ArchKind, BranchInput, Group, IsnnParams, Network, Source};
use crate::tensor::Mat;

/// How many derivative orders to propagate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

/// Output value with input derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBundle {
    pub kind: ArchKind,
    pub dims: [usize; 4],
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub grad_t: Vec<f64>,
    pub grad_z: Vec<f64>,
    /// Full Hessian over the flattened input `[x, y, t, z]`; empty when only
    /// first derivatives were requested.
    pub hess: Mat,
}

impl EvalBundle {
    pub fn grad(&self) -> Vec<f64> {
        [&self.grad_x[..], &self.grad_y, &self.grad_t, &self.grad_z].concat()
    }

    fn offsets(&self) -> [usize; 4] {
        let d = self.dims;
        [0, d[0], d[0] + d[1], d[0] + d[1] + d[2]]
    }

    /// Hessian block `∂²P / ∂a ∂b`.
    pub fn hess_block(&self, a: Group, b: Group) -> Mat {
        let o = self.offsets();
        let (ra, rb) = (o[a.index()], o[b.index()]);
        let (na, nb) = (self.dims[a.index()], self.dims[b.index()]);
        if self.hess.is_empty() {
            return Mat::zeros(0, 0);
        }
        self.hess.block(ra, rb, na, nb)
    }

    pub fn hess_xx(&self) -> Mat {
        self.hess_block(Group::X, Group::X)
    }

    pub fn hess_yy(&self) -> Mat {
        self.hess_block(Group::Y, Group::Y)
    }

    pub fn hess_tt(&self) -> Mat {
        self.hess_block(Group::T, Group::T)
    }

    pub fn hess_zz(&self) -> Mat {
        self.hess_block(Group::Z, Group::Z)
    }

    pub fn hess_xy(&self) -> Mat {
        self.hess_block(Group::X, Group::Y)
    }
}

/// Value, Jacobian (`w × n`) and Hessian (`w × n × n`) of one layer state.
struct State {
    v: Vec<f64>,
    j: Vec<f64>,
    h: Vec<f64>,
}

impl State {
    fn zeros(w: usize, n: usize, order: Order) -> Self {
        let hn = if order == Order::Second { w * n * n } else { 0 };
        State { v: vec![0.0; w], j: vec![0.0; w * n], h: vec![0.0; hn] }
    }

    fn selection(input: &[f64], start: usize, len: usize, n: usize, order: Order) -> Self {
        let mut s = State::zeros(len, n, order);
        for k in 0..len {
            s.v[k] = input[start + k];
            s.j[k * n + start + k] = 1.0;
        }
        s
    }

    /// `self += W · src`
    fn add_affine(&mut self, w: &Mat, src: &State, n: usize) {
        let nn = n * n;
        let second = !self.h.is_empty();
        let cols = w.cols();
        for r in 0..w.rows() {
            let row = &w.as_slice()[r * cols..(r + 1) * cols];
            let jr = &mut self.j[r * n..(r + 1) * n];
            let mut acc = 0.0;
            for (k, &wk) in row.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                acc += wk * src.v[k];
                for (d, s) in jr.iter_mut().zip(&src.j[k * n..(k + 1) * n]) {
                    *d += wk * s;
                }
            }
            self.v[r] += acc;
            if second {
                let hr = &mut self.h[r * nn..(r + 1) * nn];
                for (k, &wk) in row.iter().enumerate() {
                    if wk == 0.0 {
                        continue;
                    }
                    for (d, s) in hr.iter_mut().zip(&src.h[k * nn..(k + 1) * nn]) {
                        *d += wk * s;
                    }
                }
            }
        }
    }

    fn activate(&mut self, act: crate::isnn::Activation, n: usize) {
        let nn = n * n;
        let second = !self.h.is_empty();
        for r in 0..self.v.len() {
            let (s, d1, d2) = act.with_derivatives(self.v[r]);
            self.v[r] = s;
            let jr = &mut self.j[r * n..(r + 1) * n];
            if second {
                let hr = &mut self.h[r * nn..(r + 1) * nn];
                for a in 0..n {
                    for b in 0..n {
                        hr[a * n + b] = d2 * jr[a] * jr[b] + d1 * hr[a * n + b];
                    }
                }
            }
            for v in jr.iter_mut() {
                *v *= d1;
            }
        }
    }
}

/// Evaluates the network and its input derivatives on a flattened input.
pub fn eval(net: &Network, input: &[f64], order: Order) -> Result<EvalBundle> {
    let lay = &net.layout;
    let n = lay.n_inputs();
    if input.len() != n {
        return Err(Error::DimMismatch { what: "input", expected: n, found: input.len() });
    }
    let mut branch_states: [Vec<State>; 4] = Default::default();
    for br in &lay.branches {
        let r = lay.group_range(br.group);
        let mut states = vec![State::selection(input, r.start, r.len(), n, order)];
        for l in &br.layers {
            let w = &net.weights[l.weight];
            let mut s = State::zeros(w.rows(), n, order);
            s.v.copy_from_slice(net.weights[l.bias].as_slice());
            s.add_affine(w, states.last().unwrap(), n);
            s.activate(br.act, n);
            states.push(s);
        }
        branch_states[br.group.index()] = states;
    }
    let xr = lay.group_range(Group::X);
    let x0 = State::selection(input, xr.start, xr.len(), n, order);
    let reads_all = lay.x_layers[0].terms.iter().any(|t| t.source == Source::All);
    let all_state = reads_all.then(|| State::selection(input, 0, n, n, order));
    let mut x = State::zeros(0, n, order);
    for layer in &lay.x_layers {
        let mut s = State::zeros(layer.width, n, order);
        s.v.copy_from_slice(net.weights[layer.bias].as_slice());
        for term in &layer.terms {
            let src = match term.source {
                Source::PrevX => &x,
                Source::X0 => &x0,
                Source::All => all_state.as_ref().unwrap(),
                Source::Branch(g, d) => &branch_states[g.index()][d],
            };
            s.add_affine(&net.weights[term.weight], src, n);
        }
        s.activate(layer.act, n);
        x = s;
    }

    let o = lay.offsets;
    let d = lay.dims;
    let part = |g: usize| x.j[o[g]..o[g] + d[g]].to_vec();
    let hess = match order {
        Order::Second => Mat::from_vec(n, n, x.h[..n * n].to_vec())?,
        Order::First => Mat::zeros(0, 0),
    };
    Ok(EvalBundle {
        kind: net.kind,
        dims: d,
        value: x.v[0],
        grad_x: part(0),
        grad_y: part(1),
        grad_t: part(2),
        grad_z: part(3),
        hess,
    })
}

fn eval_kind(params: &IsnnParams, inp: &BranchInput, kind: ArchKind) -> Result<EvalBundle> {
    if params.kind() != kind {
        return Err(Error::InvalidSpec(format!("expected a {kind:?} network, got {:?}", params.kind())));
    }
    let net = params.effective();
    let flat = BranchInput::flatten(inp);
    if flat.len() != net.n_inputs() || inp.x0.len() != params.arch_spec.n_x {
        return Err(Error::DimMismatch { what: "input", expected: net.n_inputs(), found: flat.len() });
    }
    eval(&net, &flat, Order::Second)
}

pub fn eval_full_isnn1(params: &IsnnParams, inp: &BranchInput) -> Result<EvalBundle> {
    eval_kind(params, inp, ArchKind::Isnn1)
}

pub fn eval_full_isnn2(params: &IsnnParams, inp: &BranchInput) -> Result<EvalBundle> {
    eval_kind(params, inp, ArchKind::Isnn2)
}

/// Central-difference gradient.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian: three-point stencil on the diagonal,
/// four-point stencil off it, symmetrized.
pub fn fd_hess(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Mat {
    assert!(h > 0.0, "step must be positive");
    let n = x.len();
    let mut out = Mat::zeros(n, n);
    let mut p = x.to_vec();
    let f0 = f(x);
    for i in 0..n {
        p[i] = x[i] + h;
        let fp = f(&p);
        p[i] = x[i] - h;
        let fm = f(&p);
        p[i] = x[i];
        out[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in i + 1..n {
            let mut at = |si: f64, sj: f64| {
                p[i] = x[i] + si * h;
                p[j] = x[j] + sj * h;
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isnn::{new_params, ArchSpec, Init};

    #[test]
    fn fd_grad_reference_cases() {
        let g = fd_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-9);
        let g = fd_grad(|_| 4.2, &[1.0, 2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
        let g = fd_grad(|x| x[0].sin(), &[0.0], 1e-5);
        assert!((g[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fd_hess_reference_cases() {
        let h = fd_hess(|x| x[0] * x[0], &[0.7], 1e-3);
        assert!((h[(0, 0)] - 2.0).abs() < 1e-6);
        let h = fd_hess(|x| 3.0 * x[0] - x[1] + 1.0, &[0.2, 0.5], 1e-3);
        assert!(h.max_abs() < 1e-6);
        let h = fd_hess(|x| x[0] * x[1], &[0.2, 0.5], 1e-3);
        assert!((h[(0, 1)] - 1.0).abs() < 1e-6 && (h[(1, 0)] - 1.0).abs() < 1e-6);
        assert!(h[(0, 0)].abs() < 1e-6);
    }

    #[test]
    fn affine_isnn2_derivatives_are_its_weights() {
        let spec = ArchSpec::isnn2_uniform([2, 2, 1, 1], 3, 1);
        let p = new_params(&spec, 5, Init::Uniform(1.0)).unwrap();
        let inp = BranchInput::new(vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5], vec![0.6]);
        let b = eval_full_isnn2(&p, &inp).unwrap();
        let net = p.effective();
        let w = |name: &str| {
            let i = p.raw_params.iter().position(|t| t.name == name).unwrap();
            net.weights[i].as_slice().to_vec()
        };
        assert_eq!(b.grad_x, w("W_xx_0"));
        assert_eq!(b.grad_y, w("W_xy_0"));
        assert_eq!(b.grad_t, w("W_xt_0"));
        assert_eq!(b.grad_z, w("W_xz_0"));
        assert_eq!(b.hess.max_abs(), 0.0);
    }

    #[test]
    fn single_x_layer_isnn1_gradient_is_first_weight_row() {
        let mut spec = ArchSpec::isnn1_uniform([3, 1, 1, 1], 4, 2);
        spec.x_widths.clear();
        let p = new_params(&spec, 6, Init::Uniform(1.0)).unwrap();
        let inp = BranchInput::new(vec![0.1, -0.2, 0.3], vec![1.0], vec![0.5], vec![-1.0]);
        let b = eval_full_isnn1(&p, &inp).unwrap();
        assert_eq!(b.grad_x, p.raw_params.iter().find(|t| t.name == "W_xx_0").unwrap().values.as_slice());
        assert_eq!(b.hess_xx().max_abs(), 0.0);
    }

    #[test]
    fn first_order_mode_matches_second_order_gradients() {
        let spec = ArchSpec::isnn1_uniform([1, 2, 1, 1], 4, 3);
        let p = new_params(&spec, 11, Init::Uniform(1.5)).unwrap();
        let net = p.effective();
        let x = [0.4, 1.1, -0.3, 0.2, 0.9];
        let a = eval(&net, &x, Order::First).unwrap();
        let b = eval(&net, &x, Order::Second).unwrap();
        assert_eq!(a.grad(), b.grad());
        assert_eq!(a.value, b.value);
        assert!(a.hess.is_empty());
    }

    #[test]
    fn wrong_arch_or_dims_rejected() {
        let spec = ArchSpec::isnn1_uniform([1, 1, 1, 1], 4, 2);
        let p = new_params(&spec, 1, Init::Glorot).unwrap();
        let inp = BranchInput::new(vec![0.0], vec![0.0], vec![0.0], vec![0.0]);
        assert!(eval_full_isnn2(&p, &inp).is_err());
        let bad = BranchInput::new(vec![0.0, 1.0], vec![], vec![0.0], vec![0.0]);
        assert!(matches!(eval_full_isnn1(&p, &bad), Err(Error::DimMismatch { .. })));
    }
}
