//! Binary gate between a polyconvex potential and an unconstrained one,
//! trained with a straight-through derivative so the data decides which
//! branch survives.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::batch::{Graph, NetNodes};
use crate::error::{Error, Result};
use crate::isnn::{sigmoid, ArchSpec};
use crate::mech::{init_potential, record_stress, Feature, Invariant, Kinematics, MaterialDataset, NnPotential, PrunedFrom, StressData};
use crate::tensor::{Mat, Tensor3};
use crate::train::AdamState;

pub const GATED_FORMAT_VERSION: u32 = 1;

/// Raw gate parameter `g` and steepness `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateState {
    pub g: f64,
    pub gamma: f64,
}

impl GateState {
    pub fn new(g: f64, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidConfig("gate steepness must be positive".into()));
        }
        Ok(GateState { g, gamma })
    }

    pub fn sigmoid(&self) -> f64 {
        sigmoid(self.gamma * self.g)
    }

    /// `1` iff `S(g) > 0.5`.
    pub fn gate(&self) -> f64 {
        if self.sigmoid() > 0.5 {
            1.0
        } else {
            0.0
        }
    }
}

/// `(S, G, dG/dg)` with the straight-through slope `γ S (1 − S)`.
pub fn gate_forward(gs: &GateState) -> Result<(f64, f64, f64)> {
    GateState::new(gs.g, gs.gamma)?;
    let s = gs.sigmoid();
    Ok((s, gs.gate(), gs.gamma * s * (1.0 - s)))
}

/// `stress_mse + ε S(g)^{1/p}`.
pub fn penalized_loss(stress_mse: f64, gs: &GateState, eps: f64, p: f64) -> Result<f64> {
    if !(eps >= 0.0) || !(p >= 1.0) {
        return Err(Error::InvalidConfig("penalty needs ε ≥ 0 and p ≥ 1".into()));
    }
    let (s, _, _) = gate_forward(gs)?;
    Ok(stress_mse + eps * s.powf(1.0 / p))
}

/// Polyconvex branch, free branch and the gate that selects between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatedModel {
    pub format_version: u32,
    pub poly: NnPotential,
    pub free: NnPotential,
    pub gate: GateState,
}

impl GatedModel {
    pub fn check(&self) -> Result<()> {
        if self.format_version != GATED_FORMAT_VERSION {
            return Err(Error::FormatVersion { expected: GATED_FORMAT_VERSION, found: self.format_version });
        }
        self.poly.check()?;
        self.free.check()?;
        if self.poly.n_design() != self.free.n_design() || self.poly.direction != self.free.direction {
            return Err(Error::InvalidConfig("gated branches disagree on design parameters or direction".into()));
        }
        GateState::new(self.gate.g, self.gate.gamma)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: GatedModel = serde_json::from_str(s)?;
        m.check()?;
        Ok(m)
    }

    pub fn kinematics(&self, f: &Tensor3) -> Result<Kinematics> {
        self.poly.kinematics(f)
    }

    pub fn energy(&self, kin: &Kinematics, design: &[f64]) -> Result<f64> {
        gated_potential(self, kin, design)
    }

    pub fn stress(&self, kin: &Kinematics, design: &[f64]) -> Result<Tensor3> {
        let g = self.gate.gate();
        let sp = self.poly.stress(kin, design)?;
        let sa = self.free.stress(kin, design)?;
        Ok(sp.scale(1.0 - g) + sa.scale(g))
    }
}

/// `(1 − G) Ψ_poly + G Ψ_free`.
pub fn gated_potential(model: &GatedModel, kin: &Kinematics, design: &[f64]) -> Result<f64> {
    let g = model.gate.gate();
    Ok((1.0 - g) * model.poly.energy(kin, design)? + g * model.free.energy(kin, design)?)
}

/// Keeps only the branch the gate selects.
pub fn prune(model: &GatedModel) -> NnPotential {
    let (s, g) = (model.gate.sigmoid(), model.gate.gate());
    let mut kept = if g == 0.0 { model.poly.clone() } else { model.free.clone() };
    kept.pruned_from_gate = Some(PrunedFrom { gate: g as u8, g: model.gate.g, sigmoid_g: s });
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_gate")]
    pub lr_gate: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    /// fraction of epochs spent training both branches independently
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    /// gate value set when the gated phase starts
    #[serde(default = "default_g_reset")]
    pub g_reset: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_poly_width")]
    pub poly_width: usize,
    #[serde(default = "default_poly_layers")]
    pub poly_layers: usize,
    #[serde(default = "default_free_hidden")]
    pub free_hidden: Vec<usize>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_lr_gate() -> f64 {
    1e-5
}
fn default_gamma() -> f64 {
    1.0
}
fn default_eps() -> f64 {
    1e-4
}
fn default_p() -> f64 {
    4.0
}
fn default_warmup() -> f64 {
    0.01
}
fn default_g_reset() -> f64 {
    -0.1
}
fn default_log_every() -> usize {
    100
}
fn default_poly_width() -> usize {
    8
}
fn default_poly_layers() -> usize {
    3
}
fn default_free_hidden() -> Vec<usize> {
    vec![16, 16]
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            epochs: 20_000,
            lr: default_lr(),
            lr_gate: default_lr_gate(),
            gamma: default_gamma(),
            eps: default_eps(),
            p: default_p(),
            warmup_fraction: default_warmup(),
            g_reset: default_g_reset(),
            seed: 0,
            log_every: default_log_every(),
            poly_width: default_poly_width(),
            poly_layers: default_poly_layers(),
            free_hidden: default_free_hidden(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.epochs == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("epochs and log_every must be at least 1".into()));
        }
        if !positive(self.lr) || !positive(self.lr_gate) || !positive(self.gamma) {
            return Err(Error::InvalidConfig("learning rates and γ must be positive".into()));
        }
        if !(self.eps >= 0.0) || !(self.p >= 1.0) {
            return Err(Error::InvalidConfig("penalty needs ε ≥ 0 and p ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig("warmup fraction must lie in [0, 1)".into()));
        }
        if self.poly_width == 0 || self.poly_layers < 2 || self.free_hidden.contains(&0) {
            return Err(Error::InvalidConfig("branch sizes must be positive with at least two poly layers".into()));
        }
        Ok(())
    }

    /// Number of independent-training epochs (at least one when the
    /// fraction is positive).
    pub fn warmup_epochs(&self) -> usize {
        if self.warmup_fraction == 0.0 {
            0
        } else {
            ((self.warmup_fraction * self.epochs as f64).round() as usize).max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateHistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub sigmoid_g: f64,
    pub gate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateHistory {
    pub rows: Vec<GateHistoryRow>,
}

impl GateHistory {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "sigmoid_g", "gate"])?;
        for r in &self.rows {
            w.write_record([r.epoch.to_string(), r.loss.to_string(), r.sigmoid_g.to_string(), r.gate.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Features of the transversely isotropic gating study: `J` on the convex
/// chain, `(I1, I2, I4, I5)` on the monotone branch.
pub fn ti_features() -> Vec<Feature> {
    [Invariant::J, Invariant::I1, Invariant::I2, Invariant::I4, Invariant::I5].map(Feature::Invariant).to_vec()
}

/// Untrained gated model for `data`: an ISNN-2 polyconvex branch with the
/// reference-stress correction and an FFNN free branch on the same inputs.
pub fn init_gated(data: &MaterialDataset, cfg: &GateConfig) -> Result<GatedModel> {
    cfg.validate()?;
    if data.direction().is_none() {
        return Err(Error::InvalidConfig("gating needs a transversely isotropic dataset".into()));
    }
    if data.n_design() != 0 {
        return Err(Error::InvalidConfig("gating datasets carry no design parameters".into()));
    }
    let feats = ti_features();
    let poly_spec = ArchSpec::isnn2_uniform([1, 4, 0, 0], cfg.poly_width, cfg.poly_layers);
    let free_spec = ArchSpec::ffnn(feats.len(), cfg.free_hidden.clone());
    let poly = init_potential(&poly_spec, feats.clone(), data, cfg.seed, true)?;
    let free = init_potential(&free_spec, feats, data, cfg.seed.wrapping_add(1), false)?;
    Ok(GatedModel { format_version: GATED_FORMAT_VERSION, poly, free, gate: GateState::new(cfg.g_reset, cfg.gamma)? })
}

/// Warm-up with both branches trained independently, then the gated loss
/// with the gate reset to `g_reset`.
pub fn train_gated(data: &MaterialDataset, cfg: &GateConfig) -> Result<(GatedModel, GateHistory)> {
    let mut model = init_gated(data, cfg)?;
    let mut g = Graph::new();
    let poly_nodes = NetNodes::new(&mut g, &model.poly.model);
    let free_nodes = NetNodes::new(&mut g, &model.free.model);
    let sd = StressData::new(&mut g, data)?;
    let sp = record_stress(&mut g, &model.poly, &poly_nodes, &sd)?;
    let sa = record_stress(&mut g, &model.free, &free_nodes, &sd)?;

    // warm-up objective: both fits, no coupling
    let rp = g.sub(sp, sd.target());
    let ra = g.sub(sa, sd.target());
    let lp = g.mean_sq(rp);
    let la = g.mean_sq(ra);
    let warm = g.add(lp, la);

    // gated objective with the sparsity penalty on S(g)
    let g_node = g.param(Mat::filled(1, 1, model.gate.g));
    let gate = g.gate(g_node, cfg.gamma);
    let neg = g.scale(gate, -1.0);
    let keep = g.offset(neg, 1.0);
    let poly_part = g.mul_scalar(sp, keep);
    let free_part = g.mul_scalar(sa, gate);
    let mixed = g.add(poly_part, free_part);
    let resid = g.sub(mixed, sd.target());
    let fit = g.mean_sq(resid);
    let scaled_g = g.scale(g_node, cfg.gamma);
    let s = g.sigmoid(scaled_g);
    let root = g.powf(s, 1.0 / cfg.p);
    let pen = g.scale(root, cfg.eps);
    let gated = g.add(fit, pen);

    let mut adam_poly = AdamState::for_params(&model.poly.model, cfg.lr);
    let mut adam_free = AdamState::for_params(&model.free.model, cfg.lr);
    let mut adam_gate = AdamState::new(&[1], cfg.lr_gate);
    let warmup = cfg.warmup_epochs();
    let mut history = GateHistory::default();
    for epoch in 0..cfg.epochs {
        if epoch == warmup {
            model.gate.g = cfg.g_reset;
        }
        poly_nodes.load(&mut g, &model.poly.model);
        free_nodes.load(&mut g, &model.free.model);
        g.set_value(g_node, &[model.gate.g]);
        g.forward();
        let objective = if epoch < warmup { warm } else { gated };
        let loss = g.scalar(objective);
        if !loss.is_finite() {
            return Err(Error::Data(format!("gated training diverged at epoch {epoch}")));
        }
        if epoch % cfg.log_every == 0 || epoch + 1 == cfg.epochs {
            history.rows.push(GateHistoryRow { epoch, loss, sigmoid_g: model.gate.sigmoid(), gate: model.gate.gate() });
        }
        g.backward(objective);
        crate::train::adam_step(&mut adam_poly, &mut model.poly.model, &poly_nodes.grads(&g), cfg.lr)?;
        crate::train::adam_step(&mut adam_free, &mut model.free.model, &free_nodes.grads(&g), cfg.lr)?;
        if epoch >= warmup {
            let dg = g.grad(g_node).as_slice()[0];
            adam_gate.update(&mut [std::slice::from_mut(&mut model.gate.g)], &[vec![dg]])?;
        }
    }
    Ok((model, history))
}
