//! Input specific neural networks (ISNN-1, ISNN-2) and a plain feed-forward
//! baseline.
//!
//! The scalar output `P(x₀, y₀, t₀, z₀)` is
//!
//! * convex in `x₀`,
//! * convex and non-decreasing in `y₀`,
//! * non-decreasing in `t₀`,
//! * unconstrained in `z₀`.
//!
//! All three architectures are lowered to one [`Layout`]: a set of side
//! branches (`y`, `t`, `z`), each a plain chain of affine + activation layers,
//! and a main `x` chain whose layers sum affine terms drawn from the previous
//! `x` state, the raw `x₀` input, or some branch state. The forward pass, the
//! manual derivative recursions and the autodiff recorders all walk this
//! layout.
//!
//! Raw parameters are unconstrained; weights tagged
//! [`Constraint::NonNegative`] are mapped through softplus by
//! [`IsnnParams::effective`] before use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Isnn1,
    Isnn2,
    Ffnn,
}

impl std::str::FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "isnn1" | "isnn-1" => Ok(ArchKind::Isnn1),
            "isnn2" | "isnn-2" => Ok(ArchKind::Isnn2),
            "ffnn" => Ok(ArchKind::Ffnn),
            other => Err(Error::InvalidConfig(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Linear,
    Softplus,
}

/// Input groups, in the order they appear in a flattened input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// convex
    X,
    /// convex and non-decreasing
    Y,
    /// non-decreasing
    T,
    /// free
    Z,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::X, Group::Y, Group::T, Group::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    NonNegative,
    Free,
}

/// Activation functions. `Softplus` is the convex non-decreasing σ_mc, and
/// `Sigmoid` serves as both the monotone σ_m and the arbitrary σ_a.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Sigmoid,
    Identity,
}

/// Named activation roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    /// monotone and convex
    Mc,
    /// monotone
    M,
    /// arbitrary
    A,
}

impl From<ActivationKind> for Activation {
    fn from(k: ActivationKind) -> Self {
        match k {
            ActivationKind::Mc => Activation::Softplus,
            ActivationKind::M | ActivationKind::A => Activation::Sigmoid,
        }
    }
}

/// `log(1 + exp(x))` without overflow or loss of the small tail.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Value, first and second derivative at `x`.
    #[inline]
    pub fn with_derivatives(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::Softplus => {
                let s = sigmoid(x);
                (softplus(x), s, s * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                let d = s * (1.0 - s);
                (s, d, d * (1.0 - 2.0 * s))
            }
            Activation::Identity => (x, 1.0, 0.0),
        }
    }
}

/// Applies one of the named activations elementwise.
pub fn activations(x: &[f64], kind: ActivationKind) -> Vec<f64> {
    let act = Activation::from(kind);
    x.iter().map(|&v| act.apply(v)).collect()
}

/// Architecture description.
///
/// `x_widths` are the hidden widths of the main chain; a width-1 output
/// layer is always appended. For ISNN-1 each branch depth is the length of
/// its width list (`H_y`, `H_t`, `H_z`, possibly zero) and `H_x` is
/// `x_widths.len() + 1`. For ISNN-2 every active branch must have exactly
/// `H - 1` layers where `H = x_widths.len() + 1`. The feed-forward baseline
/// reads the whole flattened input and ignores the branch widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub n_x: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub n_z: usize,
    pub x_widths: Vec<usize>,
    #[serde(default)]
    pub y_widths: Vec<usize>,
    #[serde(default)]
    pub t_widths: Vec<usize>,
    #[serde(default)]
    pub z_widths: Vec<usize>,
    #[serde(default)]
    pub output: OutputActivation,
}

impl ArchSpec {
    /// ISNN-1 with every branch `depth` layers of `width` and `H_x = depth`.
    pub fn isnn1_uniform(dims: [usize; 4], width: usize, depth: usize) -> Self {
        let hidden = vec![width; depth.saturating_sub(1)];
        let branch = |n: usize| if n > 0 { vec![width; depth] } else { Vec::new() };
        ArchSpec {
            kind: ArchKind::Isnn1,
            n_x: dims[0],
            n_y: dims[1],
            n_t: dims[2],
            n_z: dims[3],
            x_widths: hidden,
            y_widths: branch(dims[1]),
            t_widths: branch(dims[2]),
            z_widths: branch(dims[3]),
            output: OutputActivation::Linear,
        }
    }

    /// ISNN-2 with `h` main-chain layers and branches of `h - 1` layers, all
    /// of `width`.
    pub fn isnn2_uniform(dims: [usize; 4], width: usize, h: usize) -> Self {
        let inner = vec![width; h.saturating_sub(1)];
        let branch = |n: usize| if n > 0 { inner.clone() } else { Vec::new() };
        ArchSpec {
            kind: ArchKind::Isnn2,
            n_x: dims[0],
            n_y: dims[1],
            n_t: dims[2],
            n_z: dims[3],
            x_widths: inner.clone(),
            y_widths: branch(dims[1]),
            t_widths: branch(dims[2]),
            z_widths: branch(dims[3]),
            output: OutputActivation::Linear,
        }
    }

    /// The four-input networks of the toy regression study: a 30-30-30
    /// feed-forward baseline (2041 parameters), ISNN-1 with four layers of
    /// width 10 (1601) and ISNN-2 with width 15 and three layers (1877).
    pub fn toy(kind: ArchKind) -> Self {
        match kind {
            ArchKind::Ffnn => ArchSpec::ffnn(4, vec![30, 30, 30]),
            ArchKind::Isnn1 => ArchSpec::isnn1_uniform([1, 1, 1, 1], 10, 4),
            ArchKind::Isnn2 => ArchSpec::isnn2_uniform([1, 1, 1, 1], 15, 3),
        }
    }

    /// Feed-forward network on `n_inputs` inputs.
    pub fn ffnn(n_inputs: usize, hidden: Vec<usize>) -> Self {
        ArchSpec {
            kind: ArchKind::Ffnn,
            n_x: n_inputs,
            n_y: 0,
            n_t: 0,
            n_z: 0,
            x_widths: hidden,
            y_widths: Vec::new(),
            t_widths: Vec::new(),
            z_widths: Vec::new(),
            output: OutputActivation::Linear,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n_x, self.n_y, self.n_t, self.n_z]
    }

    pub fn n_inputs(&self) -> usize {
        self.dims().iter().sum()
    }

    pub fn group_dim(&self, g: Group) -> usize {
        self.dims()[g.index()]
    }

    /// Offset of each group inside a flattened input vector.
    pub fn offsets(&self) -> [usize; 4] {
        let d = self.dims();
        [0, d[0], d[0] + d[1], d[0] + d[1] + d[2]]
    }

    fn branch_widths(&self, g: Group) -> &[usize] {
        match g {
            Group::X => &self.x_widths,
            Group::Y => &self.y_widths,
            Group::T => &self.t_widths,
            Group::Z => &self.z_widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_inputs() == 0 {
            return Err(Error::InvalidSpec("network has no inputs".into()));
        }
        let all_widths = self
            .x_widths
            .iter()
            .chain(&self.y_widths)
            .chain(&self.t_widths)
            .chain(&self.z_widths);
        if all_widths.into_iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec("layer widths must be at least 1".into()));
        }
        if self.kind == ArchKind::Isnn2 {
            let h = self.x_widths.len() + 1;
            for g in [Group::Y, Group::T, Group::Z] {
                let len = self.branch_widths(g).len();
                if self.group_dim(g) > 0 && len != h - 1 {
                    return Err(Error::InvalidSpec(format!(
                        "ISNN-2 branch {g:?} needs {} layers, has {len}",
                        h - 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Where an affine term of a main-chain layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// previous main-chain state
    PrevX,
    /// raw `x₀`
    X0,
    /// the whole flattened input (feed-forward baseline)
    All,
    /// state of a side branch after `depth` layers (0 = raw group input)
    Branch(Group, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct BranchLayer {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub group: Group,
    pub act: Activation,
    pub layers: Vec<BranchLayer>,
}

#[derive(Debug, Clone, Copy)]
pub struct Term {
    pub source: Source,
    pub weight: usize,
}

#[derive(Debug, Clone)]
pub struct XLayer {
    pub terms: Vec<Term>,
    pub bias: usize,
    pub act: Activation,
    pub width: usize,
}

/// Computation graph shared by every evaluator. Weight and bias fields are
/// indices into the parameter tensor list.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dims: [usize; 4],
    pub offsets: [usize; 4],
    pub branches: Vec<Branch>,
    pub x_layers: Vec<XLayer>,
}

impl Layout {
    pub fn n_inputs(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn branch(&self, g: Group) -> Option<&Branch> {
        self.branches.iter().find(|b| b.group == g)
    }

    pub fn group_range(&self, g: Group) -> std::ops::Range<usize> {
        let o = self.offsets[g.index()];
        o..o + self.dims[g.index()]
    }
}

/// One raw parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub constraint: Constraint,
    pub values: Mat,
}

/// Initialization schemes for [`new_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot-uniform free weights, non-negative weights with effective
    /// values uniform in `(0, 2 / fan_in]`, zero biases.
    Glorot,
    /// Every raw entry (biases included) uniform in `[-a, a]`.
    Uniform(f64),
}

/// Raw trainable parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsnnParams {
    pub format_version: u32,
    pub arch_spec: ArchSpec,
    pub seed: u64,
    pub raw_params: Vec<Param>,
}

struct LayoutBuilder {
    params: Vec<Param>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, constraint: Constraint, rows: usize, cols: usize) -> usize {
        self.params.push(Param { name, constraint, values: Mat::zeros(rows, cols) });
        self.params.len() - 1
    }

    fn bias(&mut self, name: String, width: usize) -> usize {
        self.push(name, Constraint::Free, 1, width)
    }
}

/// Builds the layout and zero-valued parameter list for a spec.
pub fn build_layout(spec: &ArchSpec) -> Result<(Layout, Vec<Param>)> {
    use Constraint::{Free, NonNegative};
    spec.validate()?;
    let mut b = LayoutBuilder { params: Vec::new() };
    let dims = spec.dims();
    let mut branches = Vec::new();
    let mut branch_out = [0usize; 4];

    if spec.kind != ArchKind::Ffnn {
        for (g, tag, act, label) in [
            (Group::Y, NonNegative, Activation::Softplus, "y"),
            (Group::T, NonNegative, Activation::Sigmoid, "t"),
            (Group::Z, Free, Activation::Sigmoid, "z"),
        ] {
            let n = dims[g.index()];
            if n == 0 {
                continue;
            }
            let mut prev = n;
            let mut layers = Vec::new();
            for (k, &w) in spec.branch_widths(g).iter().enumerate() {
                let weight = b.push(format!("W_{label}{label}_{k}"), tag, w, prev);
                let bias = b.bias(format!("b_{label}_{k}"), w);
                layers.push(BranchLayer { weight, bias });
                prev = w;
            }
            branch_out[g.index()] = prev;
            branches.push(Branch { group: g, act, layers });
        }
    }

    let n_layers = spec.x_widths.len() + 1;
    let hidden_act = match spec.kind {
        ArchKind::Ffnn => Activation::Sigmoid,
        _ => Activation::Softplus,
    };
    let out_act = match spec.output {
        OutputActivation::Linear => Activation::Identity,
        OutputActivation::Softplus => Activation::Softplus,
    };
    let mut x_layers = Vec::with_capacity(n_layers);
    let mut prev_width = 0;
    for h in 0..n_layers {
        let width = spec.x_widths.get(h).copied().unwrap_or(1);
        let mut terms = Vec::new();
        let cross = |b: &mut LayoutBuilder, terms: &mut Vec<Term>, h: usize, depth: usize, per_layer: bool| {
            for (g, tag, label) in [(Group::Y, NonNegative, "y"), (Group::Z, Free, "z"), (Group::T, NonNegative, "t")] {
                let n = dims[g.index()];
                if n == 0 {
                    continue;
                }
                let in_width = if depth == 0 {
                    n
                } else {
                    spec.branch_widths(g)[depth - 1]
                };
                let name = if per_layer { format!("W_x{label}_{h}") } else { format!("W_x{label}") };
                let weight = b.push(name, tag, width, in_width);
                terms.push(Term { source: Source::Branch(g, depth), weight });
            }
        };
        match spec.kind {
            ArchKind::Ffnn => {
                let (source, cols, name) = if h == 0 {
                    (Source::All, spec.n_inputs(), "W_0".to_string())
                } else {
                    (Source::PrevX, prev_width, format!("W_{h}"))
                };
                let weight = b.push(name, Free, width, cols);
                terms.push(Term { source, weight });
            }
            ArchKind::Isnn1 => {
                if h == 0 {
                    if dims[0] > 0 {
                        let weight = b.push("W_xx_0".into(), Free, width, dims[0]);
                        terms.push(Term { source: Source::X0, weight });
                    }
                    // cross terms enter the first main-chain layer only, from
                    // the end of each branch
                    for (g, tag, label) in
                        [(Group::Y, NonNegative, "y"), (Group::Z, Free, "z"), (Group::T, NonNegative, "t")]
                    {
                        let n = dims[g.index()];
                        if n == 0 {
                            continue;
                        }
                        let depth = spec.branch_widths(g).len();
                        let weight = b.push(format!("W_x{label}"), tag, width, branch_out[g.index()]);
                        terms.push(Term { source: Source::Branch(g, depth), weight });
                    }
                } else {
                    let weight = b.push(format!("W_xx_{h}"), NonNegative, width, prev_width);
                    terms.push(Term { source: Source::PrevX, weight });
                }
            }
            ArchKind::Isnn2 => {
                if h == 0 {
                    if dims[0] > 0 {
                        let weight = b.push("W_xx_0".into(), Free, width, dims[0]);
                        terms.push(Term { source: Source::X0, weight });
                    }
                    cross(&mut b, &mut terms, 0, 0, true);
                } else {
                    let weight = b.push(format!("W_xx_{h}"), NonNegative, width, prev_width);
                    terms.push(Term { source: Source::PrevX, weight });
                    if dims[0] > 0 {
                        let weight = b.push(format!("W_xx0_{h}"), Free, width, dims[0]);
                        terms.push(Term { source: Source::X0, weight });
                    }
                    cross(&mut b, &mut terms, h, h, true);
                }
            }
        }
        let bias = b.bias(format!("b_x_{h}"), width);
        let act = if h + 1 == n_layers { out_act } else { hidden_act };
        x_layers.push(XLayer { terms, bias, act, width });
        prev_width = width;
    }

    let layout = Layout { dims, offsets: spec.offsets(), branches, x_layers };
    Ok((layout, b.params))
}

/// Creates reproducibly initialized raw parameters.
pub fn new_params(spec: &ArchSpec, seed: u64, init: Init) -> Result<IsnnParams> {
    let (_, mut params) = build_layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut params {
        let (rows, cols) = p.values.shape();
        let is_bias = p.name.starts_with("b_");
        match init {
            Init::Glorot => {
                if is_bias {
                    continue;
                }
                match p.constraint {
                    Constraint::Free => {
                        let limit = (6.0 / (rows + cols) as f64).sqrt();
                        for v in p.values.as_mut_slice() {
                            *v = rng.gen_range(-limit..limit);
                        }
                    }
                    Constraint::NonNegative => {
                        // effective weights uniform in (0, 2/fan_in] keep sums of
                        // positive terms O(1) with depth
                        let top = 2.0 / cols as f64;
                        for v in p.values.as_mut_slice() {
                            let w: f64 = top * (1.0 - rng.gen::<f64>());
                            *v = inverse_softplus(w);
                        }
                    }
                }
            }
            Init::Uniform(a) => {
                for v in p.values.as_mut_slice() {
                    *v = rng.gen_range(-a..=a);
                }
            }
        }
    }
    Ok(IsnnParams { format_version: MODEL_FORMAT_VERSION, arch_spec: spec.clone(), seed, raw_params: params })
}

impl IsnnParams {
    pub fn kind(&self) -> ArchKind {
        self.arch_spec.kind
    }

    pub fn n_params(&self) -> usize {
        self.raw_params.iter().map(|p| p.values.len()).sum()
    }

    pub fn layout(&self) -> Layout {
        build_layout(&self.arch_spec).expect("params were built from a validated spec").0
    }

    /// Raw values in storage order, for optimizers.
    pub fn tensors(&self) -> Vec<&Mat> {
        self.raw_params.iter().map(|p| &p.values).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.raw_params.iter_mut().map(|p| &mut p.values).collect()
    }

    /// Constraint-mapped weights ready for evaluation.
    pub fn effective(&self) -> Network {
        Network { layout: self.layout(), kind: self.kind(), weights: effective_weights(self) }
    }

    /// Checks that the parameter list matches the layout of `arch_spec`.
    pub fn check(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion { expected: MODEL_FORMAT_VERSION, found: self.format_version });
        }
        let (_, expected) = build_layout(&self.arch_spec)?;
        if expected.len() != self.raw_params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.raw_params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&self.raw_params) {
            if e.name != p.name || e.constraint != p.constraint || e.values.shape() != p.values.shape() {
                return Err(Error::Data(format!("parameter `{}` does not match the architecture", p.name)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: IsnnParams = serde_json::from_str(s)?;
        p.check()?;
        Ok(p)
    }
}

/// Maps `NonNegative` raw tensors through softplus; everything else passes
/// through unchanged.
pub fn effective_weights(params: &IsnnParams) -> Vec<Mat> {
    params
        .raw_params
        .iter()
        .map(|p| match p.constraint {
            Constraint::NonNegative => p.values.map(softplus),
            Constraint::Free => p.values.clone(),
        })
        .collect()
}

/// Per-group inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchInput {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub t0: Vec<f64>,
    pub z0: Vec<f64>,
}

impl BranchInput {
    pub fn new(x0: Vec<f64>, y0: Vec<f64>, t0: Vec<f64>, z0: Vec<f64>) -> Self {
        BranchInput { x0, y0, t0, z0 }
    }

    /// Concatenation in group order `x, y, t, z`.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.x0[..], &self.y0, &self.t0, &self.z0].concat()
    }

    pub fn from_flat(v: &[f64], dims: [usize; 4]) -> Result<Self> {
        let total: usize = dims.iter().sum();
        if v.len() != total {
            return Err(Error::DimMismatch { what: "input", expected: total, found: v.len() });
        }
        let mut it = v.iter().copied();
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        Ok(BranchInput { x0: take(dims[0]), y0: take(dims[1]), t0: take(dims[2]), z0: take(dims[3]) })
    }

    fn check(&self, dims: [usize; 4]) -> Result<()> {
        for (what, v, d) in [
            ("x0", &self.x0, dims[0]),
            ("y0", &self.y0, dims[1]),
            ("t0", &self.t0, dims[2]),
            ("z0", &self.z0, dims[3]),
        ] {
            if v.len() != d {
                return Err(Error::DimMismatch { what, expected: d, found: v.len() });
            }
        }
        Ok(())
    }
}

/// A network with effective (constraint-mapped) weights.
#[derive(Debug, Clone)]
pub struct Network {
    pub layout: Layout,
    pub kind: ArchKind,
    pub weights: Vec<Mat>,
}

/// `out += W · v`
#[inline]
pub(crate) fn add_matvec(out: &mut [f64], w: &Mat, v: &[f64]) {
    for (o, row) in out.iter_mut().zip(w.as_slice().chunks_exact(w.cols().max(1))) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl Network {
    pub fn n_inputs(&self) -> usize {
        self.layout.n_inputs()
    }

    /// Evaluates on a flattened input vector.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        let n = self.n_inputs();
        if input.len() != n {
            return Err(Error::DimMismatch { what: "input", expected: n, found: input.len() });
        }
        let lay = &self.layout;
        let mut branch_states: [Vec<Vec<f64>>; 4] = Default::default();
        for br in &lay.branches {
            let mut states = vec![input[lay.group_range(br.group)].to_vec()];
            for l in &br.layers {
                let w = &self.weights[l.weight];
                let mut pre = self.weights[l.bias].as_slice().to_vec();
                add_matvec(&mut pre, w, states.last().unwrap());
                states.push(pre.into_iter().map(|v| br.act.apply(v)).collect());
            }
            branch_states[br.group.index()] = states;
        }
        let x0 = &input[lay.group_range(Group::X)];
        let mut x: Vec<f64> = Vec::new();
        for layer in &lay.x_layers {
            let mut pre = self.weights[layer.bias].as_slice().to_vec();
            for term in &layer.terms {
                let src: &[f64] = match term.source {
                    Source::PrevX => &x,
                    Source::X0 => x0,
                    Source::All => input,
                    Source::Branch(g, d) => &branch_states[g.index()][d],
                };
                add_matvec(&mut pre, &self.weights[term.weight], src);
            }
            x = pre.into_iter().map(|v| layer.act.apply(v)).collect();
        }
        Ok(x[0])
    }

    pub fn forward_branches(&self, inp: &BranchInput) -> Result<f64> {
        inp.check(self.layout.dims)?;
        self.forward(&inp.flatten())
    }
}

fn expect_kind(params: &IsnnParams, kind: ArchKind) -> Result<()> {
    if params.kind() != kind {
        return Err(Error::InvalidSpec(format!("expected a {kind:?} network, got {:?}", params.kind())));
    }
    Ok(())
}

pub fn forward_isnn1(params: &IsnnParams, inp: &BranchInput) -> Result<f64> {
    expect_kind(params, ArchKind::Isnn1)?;
    params.effective().forward_branches(inp)
}

pub fn forward_isnn2(params: &IsnnParams, inp: &BranchInput) -> Result<f64> {
    expect_kind(params, ArchKind::Isnn2)?;
    params.effective().forward_branches(inp)
}

pub fn forward_ffnn(params: &IsnnParams, inputs: &[f64]) -> Result<f64> {
    expect_kind(params, ArchKind::Ffnn)?;
    params.effective().forward(inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(spec: &ArchSpec) -> IsnnParams {
        let mut p = new_params(spec, 0, Init::Glorot).unwrap();
        for t in &mut p.raw_params {
            t.values.as_mut_slice().fill(0.0);
        }
        p
    }

    #[test]
    fn softplus_and_sigmoid_reference_values() {
        assert!((activations(&[0.0], ActivationKind::Mc)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(activations(&[0.0], ActivationKind::M)[0], 0.5);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        for y in [1e-8, 0.3, 2.0, 40.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() <= 1e-14 * y.max(1.0));
        }
        let tail = softplus(-50.0);
        assert!(tail > 0.0 && (tail - (-50.0f64).exp()).abs() < 1e-30);
    }

    #[test]
    fn initialization_is_deterministic() {
        let spec = ArchSpec::isnn2_uniform([1, 2, 1, 1], 5, 3);
        let a = new_params(&spec, 7, Init::Glorot).unwrap();
        let b = new_params(&spec, 7, Init::Glorot).unwrap();
        assert_eq!(a, b);
        let c = new_params(&spec, 8, Init::Glorot).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_spec_is_rejected() {
        let spec = ArchSpec::isnn1_uniform([0, 0, 0, 0], 4, 2);
        assert!(matches!(new_params(&spec, 1, Init::Glorot), Err(Error::InvalidSpec(_))));
        let mut spec = ArchSpec::isnn2_uniform([1, 1, 1, 1], 4, 3);
        spec.y_widths.pop();
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        let mut spec = ArchSpec::isnn1_uniform([1, 1, 1, 1], 4, 2);
        spec.x_widths[0] = 0;
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn constraint_tags_follow_the_architecture_rules() {
        let spec = ArchSpec::isnn2_uniform([2, 2, 1, 1], 3, 3);
        let p = new_params(&spec, 1, Init::Glorot).unwrap();
        for t in &p.raw_params {
            let n = t.name.as_str();
            let expect_nonneg = n.starts_with("W_yy")
                || n.starts_with("W_tt")
                || n.starts_with("W_xy")
                || n.starts_with("W_xt")
                || (n.starts_with("W_xx_") && n != "W_xx_0");
            let tag = if expect_nonneg { Constraint::NonNegative } else { Constraint::Free };
            assert_eq!(t.constraint, tag, "{n}");
        }
        let spec = ArchSpec::isnn1_uniform([2, 2, 1, 1], 3, 3);
        let p = new_params(&spec, 1, Init::Glorot).unwrap();
        // cross weights stored once
        assert_eq!(p.raw_params.iter().filter(|t| t.name.starts_with("W_xy")).count(), 1);
    }

    #[test]
    fn effective_weights_map_only_nonnegative_tensors() {
        let spec = ArchSpec::isnn2_uniform([1, 1, 1, 1], 2, 2);
        let mut p = zero_params(&spec);
        for t in &mut p.raw_params {
            let v = if t.constraint == Constraint::NonNegative { -50.0 } else { -3.0 };
            t.values.as_mut_slice().fill(v);
        }
        let eff = effective_weights(&p);
        for (t, e) in p.raw_params.iter().zip(&eff) {
            for &v in e.as_slice() {
                match t.constraint {
                    Constraint::NonNegative => assert!(v > 0.0 && v < 2e-22),
                    Constraint::Free => assert_eq!(v, -3.0),
                }
            }
        }
        let mut p = zero_params(&spec);
        p.raw_params[0].values.as_mut_slice().fill(0.0);
        let eff = effective_weights(&p);
        assert!((eff[0].as_slice()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    /// Builds params whose *effective* values are all zero.
    fn effectively_zero(spec: &ArchSpec) -> IsnnParams {
        let mut p = zero_params(spec);
        for t in &mut p.raw_params {
            if t.constraint == Constraint::NonNegative {
                t.values.as_mut_slice().fill(-800.0);
            }
        }
        p
    }

    #[test]
    fn zero_network_outputs_zero() {
        let inp = BranchInput::new(vec![0.3], vec![1.2, -0.4], vec![0.5], vec![2.0]);
        let s1 = ArchSpec::isnn1_uniform([1, 2, 1, 1], 4, 3);
        assert_eq!(forward_isnn1(&effectively_zero(&s1), &inp).unwrap(), 0.0);
        let s2 = ArchSpec::isnn2_uniform([1, 2, 1, 1], 4, 3);
        assert_eq!(forward_isnn2(&effectively_zero(&s2), &inp).unwrap(), 0.0);
        let sf = ArchSpec::ffnn(3, vec![4, 4]);
        let mut pf = zero_params(&sf);
        let last = pf.raw_params.len() - 1;
        pf.raw_params[last].values.as_mut_slice()[0] = 0.7;
        assert_eq!(forward_ffnn(&pf, &[1.0, 2.0, 3.0]).unwrap(), 0.7);
    }

    #[test]
    fn single_layer_isnn2_is_affine() {
        let spec = ArchSpec::isnn2_uniform([2, 1, 1, 1], 4, 1);
        let p = new_params(&spec, 3, Init::Uniform(1.0)).unwrap();
        let net = p.effective();
        let inp = BranchInput::new(vec![0.5, -1.0], vec![2.0], vec![0.25], vec![-0.75]);
        let by_name = |n: &str| {
            let i = p.raw_params.iter().position(|t| t.name == n).unwrap();
            net.weights[i].as_slice().to_vec()
        };
        let dot = |w: Vec<f64>, v: &[f64]| w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let expected = dot(by_name("W_xx_0"), &inp.x0)
            + dot(by_name("W_xy_0"), &inp.y0)
            + dot(by_name("W_xz_0"), &inp.z0)
            + dot(by_name("W_xt_0"), &inp.t0)
            + by_name("b_x_0")[0];
        let got = forward_isnn2(&p, &inp).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn linear_last_layer() {
        let spec = ArchSpec::ffnn(1, vec![3]);
        let p = new_params(&spec, 4, Init::Uniform(1.0)).unwrap();
        let net = p.effective();
        let x = 0.8;
        let a: Vec<f64> = (0..3)
            .map(|i| sigmoid(net.weights[0].as_slice()[i] * x + net.weights[1].as_slice()[i]))
            .collect();
        let w = net.weights[2].as_slice();
        let expected: f64 = a.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() + net.weights[3].as_slice()[0];
        assert!((forward_ffnn(&p, &[x]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = ArchSpec::isnn1_uniform([1, 1, 1, 1], 3, 2);
        let p = new_params(&spec, 1, Init::Glorot).unwrap();
        let bad = BranchInput::new(vec![1.0, 2.0], vec![1.0], vec![1.0], vec![1.0]);
        assert!(matches!(forward_isnn1(&p, &bad), Err(Error::DimMismatch { .. })));
        assert!(forward_isnn2(&p, &bad).is_err());
    }

    #[test]
    fn paper_scale_parameter_counts() {
        let ffnn = new_params(&ArchSpec::toy(ArchKind::Ffnn), 0, Init::Glorot).unwrap();
        assert_eq!(ffnn.n_params(), 2041);
        let i2 = new_params(&ArchSpec::toy(ArchKind::Isnn2), 0, Init::Glorot).unwrap();
        assert_eq!(i2.n_params(), 1877);
        let i1 = new_params(&ArchSpec::toy(ArchKind::Isnn1), 0, Init::Glorot).unwrap();
        let n = i1.n_params() as f64;
        assert!((n - 1600.0).abs() <= 160.0, "{n}");
    }

    #[test]
    fn json_round_trip_is_bit_exact_and_versioned() {
        let spec = ArchSpec::isnn1_uniform([1, 2, 1, 1], 3, 2);
        let p = new_params(&spec, 9, Init::Uniform(3.0)).unwrap();
        let s = p.to_json().unwrap();
        assert_eq!(IsnnParams::from_json(&s).unwrap(), p);
        let bumped = s.replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(matches!(IsnnParams::from_json(&bumped), Err(Error::FormatVersion { .. })));
    }

    #[test]
    fn free_input_can_be_non_monotone() {
        // P(z) = -2·σ(4z) + 2·σ(4z - 8): dips, then climbs back.
        let spec = ArchSpec {
            kind: ArchKind::Isnn2,
            n_x: 0,
            n_y: 0,
            n_t: 0,
            n_z: 1,
            x_widths: vec![2],
            y_widths: vec![],
            t_widths: vec![],
            z_widths: vec![2],
            output: OutputActivation::Linear,
        };
        let mut p = zero_params(&spec);
        let set = |p: &mut IsnnParams, name: &str, vals: &[f64]| {
            let t = p.raw_params.iter_mut().find(|t| t.name == name).unwrap();
            t.values.as_mut_slice().copy_from_slice(vals);
        };
        set(&mut p, "W_zz_0", &[4.0, 4.0]);
        set(&mut p, "b_z_0", &[0.0, -8.0]);
        set(&mut p, "W_xx_1", &[-800.0, -800.0]);
        set(&mut p, "W_xz_1", &[-2.0, 2.0]);
        let net = p.effective();
        let vals: Vec<f64> = [-2.0, 1.0, 4.0].iter().map(|&z| net.forward(&[z]).unwrap()).collect();
        assert!(vals[1] < vals[0] && vals[1] < vals[2], "{vals:?}");
    }
}
