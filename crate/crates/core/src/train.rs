//! Adam, Latin hypercube sampling, the toy regression datasets and the
//! full-batch training loop.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::batch::{record_network, BatchInputs, Graph, NetNodes};
use crate::error::{Error, Result};
use crate::isnn::IsnnParams;
use crate::tensor::Mat;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments for tensors of the given lengths.
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &IsnnParams, lr: f64) -> Self {
        let sizes: Vec<usize> = params.raw_params.iter().map(|p| p.values.len()).collect();
        AdamState::new(&sizes, lr)
    }

    /// One update of every tensor in `params`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch { expected: (self.m.len(), 1), found: (params.len(), grads.len()) });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::ShapeMismatch { expected: (m.len(), 1), found: (p.len(), g.len()) });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step at learning rate `lr` to the raw parameters.
pub fn adam_step(state: &mut AdamState, params: &mut IsnnParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
    state.lr = lr;
    let mut slices: Vec<&mut [f64]> = params.raw_params.iter_mut().map(|p| p.values.as_mut_slice()).collect();
    state.update(&mut slices, grads)
}

/// Latin hypercube sample: `n × dims`, one point per stratum per dimension.
pub fn lhs_sample(n: usize, dims: usize, lo: &[f64], hi: &[f64], seed: u64) -> Result<Mat> {
    if n == 0 {
        return Err(Error::InvalidBounds("sample count must be positive".into()));
    }
    if lo.len() != dims || hi.len() != dims {
        return Err(Error::InvalidBounds(format!("expected {dims} bounds, got {} and {}", lo.len(), hi.len())));
    }
    if let Some(d) = (0..dims).find(|&d| !(lo[d] < hi[d])) {
        return Err(Error::InvalidBounds(format!("lower bound not below upper bound in dimension {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Mat::zeros(n, dims);
    let mut strata: Vec<usize> = (0..n).collect();
    for d in 0..dims {
        strata.shuffle(&mut rng);
        let width = (hi[d] - lo[d]) / n as f64;
        for (i, &s) in strata.iter().enumerate() {
            let u: f64 = rng.gen();
            out[(i, d)] = lo[d] + (s as f64 + u) * width;
        }
    }
    Ok(out)
}

/// Additively split toy function.
pub fn toy_f(x: f64, y: f64, t: f64, z: f64) -> f64 {
    (-0.5 * x).exp() + (0.4 * y).exp().ln_1p() + t.tanh() + z.sin() - 0.4
}

/// Multiplicatively split toy function.
pub fn toy_g(x: f64, y: f64, t: f64, z: f64) -> f64 {
    (-0.3 * x).exp() * (0.15 * y).powi(2) * (0.3 * t).tanh() * (0.2 * (0.5 * z + 2.0).sin() + 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyFunction {
    ToyF,
    ToyG,
}

impl ToyFunction {
    pub fn eval(self, v: &[f64]) -> f64 {
        match self {
            ToyFunction::ToyF => toy_f(v[0], v[1], v[2], v[3]),
            ToyFunction::ToyG => toy_g(v[0], v[1], v[2], v[3]),
        }
    }
}

/// Inputs `(x, y, t, z)` with scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub inputs: Mat,
    pub targets: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

pub const TOY_HEADER: [&str; 5] = ["x", "y", "t", "z", "target"];

impl ToyDataset {
    /// `n` LHS samples of `func` on `[lo, hi]⁴`.
    pub fn generate(func: ToyFunction, n: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        let inputs = lhs_sample(n, 4, &[lo; 4], &[hi; 4], seed)?;
        let targets = (0..n).map(|i| func.eval(inputs.row(i))).collect();
        Ok(ToyDataset { inputs, targets, lo, hi, seed })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TOY_HEADER)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.targets[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV with header `x,y,t,z,target`. Bounds and seed are not
    /// stored in the CSV; bounds are recovered from the data.
    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != TOY_HEADER {
            return Err(Error::Data(format!("expected header {}, found {}", TOY_HEADER.join(","), header.join(","))));
        }
        let mut data = Vec::new();
        let mut targets = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Data(format!("bad number `{s}`: {e}"))))
                .collect::<Result<_>>()?;
            data.extend_from_slice(&vals[..4]);
            targets.push(vals[4]);
        }
        if targets.is_empty() {
            return Err(Error::Data("dataset has no rows".into()));
        }
        let inputs = Mat::from_vec(targets.len(), 4, data)?;
        let lo = inputs.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = inputs.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(ToyDataset { inputs, targets, lo, hi, seed: 0 })
    }
}

/// Mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Loss history is recorded every `log_every` epochs (and at the last).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_log_every() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20_000, lr: default_lr(), seed: 0, log_every: default_log_every() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn logs_at(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.log_every) || epoch + 1 == self.epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train: f64,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<HistoryRow>,
}

impl LossHistory {
    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let with_test = self.rows.iter().any(|r| r.test.is_some());
        if with_test {
            w.write_record(["epoch", "train_mse", "test_mse"])?;
        } else {
            w.write_record(["epoch", "train_mse"])?;
        }
        for r in &self.rows {
            let mut rec = vec![r.epoch.to_string(), r.train.to_string()];
            if with_test {
                rec.push(r.test.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Predictions of a network on every row of `inputs`.
pub fn predict(params: &IsnnParams, inputs: &Mat) -> Result<Vec<f64>> {
    let net = params.effective();
    (0..inputs.rows()).map(|i| net.forward(inputs.row(i))).collect()
}

/// Full-batch Adam on the mean squared error. `test` is evaluated whenever
/// the history is logged.
pub fn train_regression(
    params: &IsnnParams,
    data: &ToyDataset,
    cfg: &TrainConfig,
    test: Option<&ToyDataset>,
) -> Result<(IsnnParams, LossHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let layout = params.layout();
    if data.inputs.cols() != layout.n_inputs() {
        return Err(Error::DimMismatch { what: "dataset columns", expected: layout.n_inputs(), found: data.inputs.cols() });
    }
    let mut params = params.clone();
    let mut g = Graph::new();
    let nodes = NetNodes::new(&mut g, &params);
    let inputs = BatchInputs::new(&mut g, &layout, &data.inputs);
    let out = record_network(&mut g, &layout, &nodes.eff, &inputs, &[]);
    let target = g.input(Mat::from_vec(1, data.len(), data.targets.clone())?);
    let resid = g.sub(out.value, target);
    let loss = g.mean_sq(resid);

    let mut adam = AdamState::for_params(&params, cfg.lr);
    let mut history = LossHistory::default();
    for epoch in 0..cfg.epochs {
        nodes.load(&mut g, &params);
        g.forward();
        let train = g.scalar(loss);
        if !train.is_finite() {
            return Err(Error::Data(format!("training diverged at epoch {epoch}")));
        }
        if cfg.logs_at(epoch) {
            let test = match test {
                Some(t) => Some(mse(&predict(&params, &t.inputs)?, &t.targets)?),
                None => None,
            };
            history.rows.push(HistoryRow { epoch, train, test });
        }
        g.backward(loss);
        let grads = nodes.grads(&g);
        adam_step(&mut adam, &mut params, &grads, cfg.lr)?;
    }
    Ok((params, history))
}
