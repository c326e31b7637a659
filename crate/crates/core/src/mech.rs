//! Hyperelasticity: invariants of the right Cauchy-Green tensor, analytic
//! potentials for data generation, neural potentials with a stress-free
//! reference state, second Piola-Kirchhoff stress through the invariant
//! chain rule, and deformation sampling.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::batch::{record_network, BatchInputs, Graph, NetNodes, NodeId};
use crate::deriv::{eval, Order};
use crate::error::{Error, Result};
use crate::isnn::{new_params, ArchKind, ArchSpec, Init, IsnnParams, Network};
use crate::tensor::{Mat, Tensor3};
use crate::train::{lhs_sample, AdamState, HistoryRow, LossHistory, TrainConfig};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const POTENTIAL_FORMAT_VERSION: u32 = 1;

/// Tolerance on `‖n‖ − 1` for fiber directions.
const UNIT_TOL: f64 = 1e-8;

/// Rejection floor on `det F` during sampling.
const DET_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoInvariants {
    pub i1: f64,
    pub i2: f64,
    pub j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransIsoInvariants {
    pub iso: IsoInvariants,
    pub i4: f64,
    pub i5: f64,
    pub ibar5: f64,
}

fn check_det(f: &Tensor3) -> Result<f64> {
    let j = f.det();
    if j <= 0.0 {
        return Err(Error::InvertedElement(j));
    }
    Ok(j)
}

fn check_unit(n: &[f64; 3]) -> Result<()> {
    let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitDirection(norm));
    }
    Ok(())
}

pub fn invariants_iso(f: &Tensor3) -> Result<IsoInvariants> {
    let j = check_det(f)?;
    let c = f.right_cauchy_green();
    Ok(IsoInvariants { i1: c.trace(), i2: c.cof().trace(), j })
}

pub fn invariants_transiso(f: &Tensor3, n: &[f64; 3]) -> Result<TransIsoInvariants> {
    check_unit(n)?;
    let iso = invariants_iso(f)?;
    let c = f.right_cauchy_green();
    let nn = Tensor3::outer(n, n);
    Ok(TransIsoInvariants {
        iso,
        i4: (c * nn).trace(),
        i5: (c.cof() * nn).trace(),
        ibar5: (c * c * nn).trace(),
    })
}

/// The invariants a potential may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    I1,
    I2,
    J,
    I4,
    I5,
    Ibar5,
}

impl Invariant {
    pub const ALL: [Invariant; 6] = [Invariant::I1, Invariant::I2, Invariant::J, Invariant::I4, Invariant::I5, Invariant::Ibar5];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Value in the undeformed state.
    pub fn reference(self) -> f64 {
        match self {
            Invariant::I1 | Invariant::I2 => 3.0,
            _ => 1.0,
        }
    }

    pub fn is_anisotropic(self) -> bool {
        matches!(self, Invariant::I4 | Invariant::I5 | Invariant::Ibar5)
    }
}

/// Kinematic state of one material point: `C`, its inverse, the optional
/// fiber direction and all invariants (anisotropic entries are NaN when
/// there is no direction).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub c: Tensor3,
    pub c_inv: Tensor3,
    pub n: Option<[f64; 3]>,
    pub inv: [f64; 6],
}

impl Kinematics {
    pub fn from_f(f: &Tensor3, n: Option<&[f64; 3]>) -> Result<Self> {
        check_det(f)?;
        Self::from_c(&f.right_cauchy_green(), n)
    }

    /// Builds from a symmetric positive definite `C`; `J = √det C`.
    pub fn from_c(c: &Tensor3, n: Option<&[f64; 3]>) -> Result<Self> {
        let det_c = c.det();
        if det_c <= 0.0 {
            return Err(Error::InvertedElement(det_c));
        }
        let c_inv = c.inv()?;
        let mut inv = [f64::NAN; 6];
        inv[0] = c.trace();
        inv[1] = c.cof().trace();
        inv[2] = det_c.sqrt();
        if let Some(n) = n {
            check_unit(n)?;
            let nn = Tensor3::outer(n, n);
            inv[3] = (*c * nn).trace();
            inv[4] = (c.cof() * nn).trace();
            inv[5] = (*c * *c * nn).trace();
        }
        Ok(Kinematics { c: *c, c_inv, n: n.copied(), inv })
    }

    pub fn get(&self, k: Invariant) -> f64 {
        self.inv[k.index()]
    }

    /// `2 ∂I_k/∂C` for every invariant; zero for anisotropic ones without
    /// a direction.
    pub fn generators(&self) -> [Tensor3; 6] {
        let id = Tensor3::identity();
        let (c, ci) = (self.c, self.c_inv);
        let (i1, j) = (self.inv[0], self.inv[2]);
        let mut g = [Tensor3::zeros(); 6];
        g[0] = id.scale(2.0);
        g[1] = (id.scale(i1) - c).scale(2.0);
        g[2] = ci.scale(j);
        if let Some(n) = self.n {
            let nn = Tensor3::outer(&n, &n);
            g[3] = nn.scale(2.0);
            let cin = ci * nn;
            g[4] = (ci.scale(cin.trace()) - cin * ci).scale(2.0 * j * j).symmetrize();
            g[5] = (c * nn + nn * c).scale(2.0);
        }
        g
    }
}

/// Second Piola-Kirchhoff stress `S = 2 ∂Ψ/∂C` from `∂Ψ/∂I_k`.
pub fn second_pk_stress(grad: &[f64; 6], kin: &Kinematics) -> Tensor3 {
    let gens = kin.generators();
    let mut s = Tensor3::zeros();
    for (k, gk) in gens.iter().enumerate() {
        if grad[k] != 0.0 {
            s = s + gk.scale(grad[k]);
        }
    }
    s.symmetrize()
}

pub fn psi_blatzko(inv: &IsoInvariants, mu: f64, beta: f64) -> f64 {
    let IsoInvariants { i1, i2, j } = *inv;
    0.25 * mu * ((i1 - 3.0) + (j.powf(-2.0 * beta) - 1.0) / beta)
        + 0.25 * mu * ((i2 / (j * j) - 3.0) + (j.powf(2.0 * beta) - 1.0) / beta)
}

pub fn psi_neohookean(inv: &IsoInvariants, c1: f64, c2: f64) -> f64 {
    0.5 * c1 * (inv.i1 - 3.0) - c1 * inv.j.ln() + 0.5 * c2 * (inv.j - 1.0).powi(2)
}

pub fn psi_poly_ti(inv: &TransIsoInvariants, c1: f64, c2: f64, c3: f64, c4: f64) -> f64 {
    let (i1, j) = (inv.iso.i1, inv.iso.j);
    c1 * (i1 - 3.0) + (c1 / c2) * (j.powf(-2.0 * c2) - 1.0) + c3 * ((c4 * (inv.i4 - 1.0).powi(4)).exp() - 1.0)
}

pub fn psi_nonpoly_ti(inv: &TransIsoInvariants, c0: f64, c1: f64, c2: f64) -> f64 {
    let (i1, j, a) = (inv.iso.i1, inv.iso.j, inv.i4 - 1.0);
    -0.5 * c1 * (i1 - 3.0) - c1 * j.ln() - 0.5 * c2 * (j - 1.0).powi(2) - a * (c0 + c1 * j.ln() + c2 * a) - 0.5 * c0 * (inv.ibar5 - 1.0)
}

/// Closed-form potentials used to generate data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticPotential {
    BlatzKo { mu: f64, beta: f64 },
    NeoHookean { c1: f64, c2: f64 },
    PolyTi { c1: f64, c2: f64, c3: f64, c4: f64 },
    NonPolyTi { c0: f64, c1: f64, c2: f64 },
}

impl AnalyticPotential {
    /// Constants used for the gating datasets.
    pub const POLY_TI: AnalyticPotential = AnalyticPotential::PolyTi { c1: 1.0, c2: 1.0, c3: 1.0, c4: 1.0 };
    pub const NONPOLY_TI: AnalyticPotential = AnalyticPotential::NonPolyTi { c0: 2.0, c1: 2.0, c2: 2.0 };

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticPotential::BlatzKo { .. } => "blatzko",
            AnalyticPotential::NeoHookean { .. } => "neohookean",
            AnalyticPotential::PolyTi { .. } => "poly-ti",
            AnalyticPotential::NonPolyTi { .. } => "nonpoly-ti",
        }
    }

    pub fn is_anisotropic(&self) -> bool {
        matches!(self, AnalyticPotential::PolyTi { .. } | AnalyticPotential::NonPolyTi { .. })
    }

    fn iso(inv: &[f64; 6]) -> IsoInvariants {
        IsoInvariants { i1: inv[0], i2: inv[1], j: inv[2] }
    }

    fn ti(inv: &[f64; 6]) -> TransIsoInvariants {
        TransIsoInvariants { iso: Self::iso(inv), i4: inv[3], i5: inv[4], ibar5: inv[5] }
    }

    pub fn energy(&self, kin: &Kinematics) -> f64 {
        let inv = &kin.inv;
        match *self {
            AnalyticPotential::BlatzKo { mu, beta } => psi_blatzko(&Self::iso(inv), mu, beta),
            AnalyticPotential::NeoHookean { c1, c2 } => psi_neohookean(&Self::iso(inv), c1, c2),
            AnalyticPotential::PolyTi { c1, c2, c3, c4 } => psi_poly_ti(&Self::ti(inv), c1, c2, c3, c4),
            AnalyticPotential::NonPolyTi { c0, c1, c2 } => psi_nonpoly_ti(&Self::ti(inv), c0, c1, c2),
        }
    }

    /// `∂Ψ/∂I_k` in [`Invariant`] order.
    pub fn gradient(&self, kin: &Kinematics) -> [f64; 6] {
        let [_, i2, j, i4, _, _] = kin.inv;
        let mut g = [0.0; 6];
        match *self {
            AnalyticPotential::BlatzKo { mu, beta } => {
                g[0] = 0.25 * mu;
                g[1] = 0.25 * mu / (j * j);
                g[2] = 0.25
                    * mu
                    * (-2.0 * j.powf(-2.0 * beta - 1.0) - 2.0 * i2 / (j * j * j) + 2.0 * j.powf(2.0 * beta - 1.0));
            }
            AnalyticPotential::NeoHookean { c1, c2 } => {
                g[0] = 0.5 * c1;
                g[2] = -c1 / j + c2 * (j - 1.0);
            }
            AnalyticPotential::PolyTi { c1, c2, c3, c4 } => {
                let a = i4 - 1.0;
                g[0] = c1;
                g[2] = -2.0 * c1 * j.powf(-2.0 * c2 - 1.0);
                g[3] = 4.0 * c3 * c4 * a.powi(3) * (c4 * a.powi(4)).exp();
            }
            AnalyticPotential::NonPolyTi { c0, c1, c2 } => {
                let a = i4 - 1.0;
                g[0] = -0.5 * c1;
                g[2] = -c1 / j - c2 * (j - 1.0) - a * c1 / j;
                g[3] = -(c0 + c1 * j.ln() + c2 * a) - c2 * a;
                g[5] = -0.5 * c0;
            }
        }
        g
    }

    pub fn stress(&self, kin: &Kinematics) -> Tensor3 {
        second_pk_stress(&self.gradient(kin), kin)
    }
}

/// `F_ij ∈ δ_ij + [−Δ, Δ]` by Latin hypercube over the nine entries;
/// samples with `det F ≤ 0.05` are replaced from fresh hypercubes.
pub fn sample_defgrads(n: usize, delta: f64, seed: u64) -> Result<Vec<Tensor3>> {
    if !(0.0..0.5).contains(&delta) {
        return Err(Error::InvalidBounds(format!("delta must lie in [0, 0.5), got {delta}")));
    }
    if n == 0 {
        return Err(Error::InvalidBounds("sample count must be positive".into()));
    }
    if delta == 0.0 {
        return Ok(vec![Tensor3::identity(); n]);
    }
    let id = Tensor3::identity().to_row_major();
    let lo: Vec<f64> = id.iter().map(|v| v - delta).collect();
    let hi: Vec<f64> = id.iter().map(|v| v + delta).collect();
    let mut out = Vec::with_capacity(n);
    for round in 0u64.. {
        let m = lhs_sample(n, 9, &lo, &hi, seed.wrapping_add(round.wrapping_mul(0x9e37_79b9_7f4a_7c15)))?;
        for i in 0..n {
            let row: [f64; 9] = m.row(i).try_into().expect("nine entries");
            let f = Tensor3::from_row_major(&row);
            if f.det() > DET_FLOOR {
                out.push(f);
                if out.len() == n {
                    return Ok(out);
                }
            }
        }
        if round > 1000 {
            break;
        }
    }
    Err(Error::Data("deformation sampling rejected too many samples".into()))
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialRow {
    pub f: Tensor3,
    pub design: Vec<f64>,
    pub stress: [f64; 6],
}

impl MaterialRow {
    pub fn kinematics(&self, n: Option<&[f64; 3]>) -> Result<Kinematics> {
        Kinematics::from_f(&self.f, n)
    }
}

/// Provenance written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub potential: String,
    pub delta: f64,
    pub seed: u64,
    pub design_names: Vec<String>,
    #[serde(default)]
    pub grids: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub direction: Option<[f64; 3]>,
    /// Fixed potential constants (none for design-parametrized data).
    #[serde(default)]
    pub constants: Option<AnalyticPotential>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDataset {
    pub meta: DatasetMeta,
    pub rows: Vec<MaterialRow>,
}

const F_HEADER: [&str; 9] = ["F11", "F12", "F13", "F21", "F22", "F23", "F31", "F32", "F33"];
const S_HEADER: [&str; 6] = ["S11", "S22", "S33", "S12", "S13", "S23"];

impl MaterialDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn direction(&self) -> Option<&[f64; 3]> {
        self.meta.direction.as_ref()
    }

    pub fn n_design(&self) -> usize {
        self.meta.design_names.len()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<&str> =
            F_HEADER.iter().copied().chain(self.meta.design_names.iter().map(String::as_str)).chain(S_HEADER).collect();
        w.write_record(&header)?;
        for r in &self.rows {
            let rec: Vec<String> = r
                .f
                .to_row_major()
                .iter()
                .chain(&r.design)
                .chain(&r.stress)
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read, meta: DatasetMeta) -> Result<Self> {
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::FormatVersion { expected: DATASET_FORMAT_VERSION, found: meta.format_version });
        }
        let mut r = csv::Reader::from_reader(input);
        let nd = meta.design_names.len();
        let expected: Vec<String> = F_HEADER
            .iter()
            .map(|s| s.to_string())
            .chain(meta.design_names.iter().cloned())
            .chain(S_HEADER.iter().map(|s| s.to_string()))
            .collect();
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != expected {
            return Err(Error::Data(format!("unexpected dataset header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Data(format!("bad number `{s}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            let f: [f64; 9] = vals[..9].try_into().expect("header checked");
            let stress: [f64; 6] = vals[9 + nd..].try_into().expect("header checked");
            rows.push(MaterialRow { f: Tensor3::from_row_major(&f), design: vals[9..9 + nd].to_vec(), stress });
        }
        if rows.is_empty() {
            return Err(Error::Data("dataset has no rows".into()));
        }
        Ok(MaterialDataset { meta, rows })
    }

    pub fn meta_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)?)
    }

    /// Rows whose index satisfies `keep`, with the same metadata.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let rows = self.rows.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, r)| r.clone()).collect();
        MaterialDataset { meta: self.meta.clone(), rows }
    }
}

/// Cartesian product of sampled deformations with a `μ × β` grid; stresses
/// from the Blatz-Ko potential. Rows are ordered design-major.
pub fn gen_blatzko_dataset(n_f: usize, mu_grid: &[f64], beta_grid: &[f64], delta: f64, seed: u64) -> Result<MaterialDataset> {
    if mu_grid.is_empty() || beta_grid.is_empty() {
        return Err(Error::InvalidConfig("parameter grids must be nonempty".into()));
    }
    if mu_grid.iter().any(|&m| !(m > 0.0)) || beta_grid.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::InvalidConfig("μ and β must be positive".into()));
    }
    let fs = sample_defgrads(n_f, delta, seed)?;
    let kins = fs.iter().map(|f| Kinematics::from_f(f, None)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(fs.len() * mu_grid.len() * beta_grid.len());
    for &mu in mu_grid {
        for &beta in beta_grid {
            let pot = AnalyticPotential::BlatzKo { mu, beta };
            for (f, kin) in fs.iter().zip(&kins) {
                rows.push(MaterialRow { f: *f, design: vec![mu, beta], stress: pot.stress(kin).to_sym6() });
            }
        }
    }
    let mut grids = BTreeMap::new();
    grids.insert("mu".to_string(), mu_grid.to_vec());
    grids.insert("beta".to_string(), beta_grid.to_vec());
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        potential: "blatzko".into(),
        delta,
        seed,
        design_names: vec!["mu".into(), "beta".into()],
        grids,
        direction: None,
        constants: None,
    };
    Ok(MaterialDataset { meta, rows })
}

/// Dataset from a fixed analytic potential (no design parameters).
pub fn gen_fixed_dataset(pot: AnalyticPotential, n_f: usize, delta: f64, seed: u64, direction: Option<[f64; 3]>) -> Result<MaterialDataset> {
    if pot.is_anisotropic() && direction.is_none() {
        return Err(Error::InvalidConfig(format!("potential {} needs a fiber direction", pot.name())));
    }
    if let Some(n) = &direction {
        check_unit(n)?;
    }
    let fs = sample_defgrads(n_f, delta, seed)?;
    let rows = fs
        .iter()
        .map(|f| {
            let kin = Kinematics::from_f(f, direction.as_ref())?;
            Ok(MaterialRow { f: *f, design: Vec::new(), stress: pot.stress(&kin).to_sym6() })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        potential: pot.name().into(),
        delta,
        seed,
        design_names: Vec::new(),
        grids: BTreeMap::new(),
        direction,
        constants: Some(pot),
    };
    Ok(MaterialDataset { meta, rows })
}

/// One network input: an invariant or a design parameter by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Invariant(Invariant),
    Design(usize),
}

/// Affine input normalization `u = (v − center) / scale` with `scale > 0`,
/// which keeps convexity and monotonicity in every input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputMap {
    /// feature per flattened network input, in `[x, y, t, z]` order
    pub features: Vec<Feature>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputMap {
    /// Centers at the feature means and scales by the standard deviations.
    pub fn fit(features: Vec<Feature>, data: &MaterialDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("cannot fit an input map to an empty dataset".into()));
        }
        let n = data.len() as f64;
        let mut center = vec![0.0; features.len()];
        let mut sq = vec![0.0; features.len()];
        for row in &data.rows {
            let kin = row.kinematics(data.direction())?;
            for (k, f) in features.iter().enumerate() {
                let v = feature_value(*f, &kin, &row.design)?;
                center[k] += v;
                sq[k] += v * v;
            }
        }
        let scale = center
            .iter_mut()
            .zip(&sq)
            .map(|(c, &s)| {
                *c /= n;
                let var = (s / n - *c * *c).max(0.0);
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(InputMap { features, center, scale })
    }

    pub fn identity(features: Vec<Feature>) -> Self {
        let n = features.len();
        InputMap { features, center: vec![0.0; n], scale: vec![1.0; n] }
    }

    fn validate(&self, n_inputs: usize, n_design: usize, has_direction: bool) -> Result<()> {
        let n = self.features.len();
        if n != n_inputs || self.center.len() != n || self.scale.len() != n {
            return Err(Error::DimMismatch { what: "input map", expected: n_inputs, found: n });
        }
        if self.scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("input scales must be positive".into()));
        }
        for f in &self.features {
            match *f {
                Feature::Design(i) if i >= n_design => {
                    return Err(Error::InvalidConfig(format!("design index {i} out of range")));
                }
                Feature::Invariant(k) if k.is_anisotropic() && !has_direction => {
                    return Err(Error::InvalidConfig(format!("invariant {k:?} needs a fiber direction")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn apply(&self, kin_inv: &[f64; 6], design: &[f64]) -> Vec<f64> {
        self.features
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let v = match *f {
                    Feature::Invariant(i) => kin_inv[i.index()],
                    Feature::Design(d) => design[d],
                };
                (v - self.center[k]) / self.scale[k]
            })
            .collect()
    }

    /// `(input position, invariant)` for every invariant feature.
    pub fn invariant_positions(&self) -> Vec<(usize, Invariant)> {
        self.features
            .iter()
            .enumerate()
            .filter_map(|(p, f)| match f {
                Feature::Invariant(k) => Some((p, *k)),
                Feature::Design(_) => None,
            })
            .collect()
    }
}

fn feature_value(f: Feature, kin: &Kinematics, design: &[f64]) -> Result<f64> {
    match f {
        Feature::Invariant(k) => {
            let v = kin.get(k);
            if v.is_nan() {
                return Err(Error::InvalidConfig(format!("invariant {k:?} needs a fiber direction")));
            }
            Ok(v)
        }
        Feature::Design(d) => design
            .get(d)
            .copied()
            .ok_or(Error::DimMismatch { what: "design parameters", expected: d + 1, found: design.len() }),
    }
}

/// Records which gate pruned a potential out of a gated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunedFrom {
    pub gate: u8,
    pub g: f64,
    pub sigmoid_g: f64,
}

/// Neural strain energy
/// `Ψ = E·[ψ(u(I, D)) − ψ(u(I_ref, D))] − 𝔬(D)(J − 1)`, where `u` is the
/// input map and `𝔬` makes the isotropic part of the reference stress vanish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnPotential {
    pub format_version: u32,
    pub model: IsnnParams,
    pub input_map: InputMap,
    /// positive energy scale `E`
    pub energy_scale: f64,
    pub design_names: Vec<String>,
    #[serde(default)]
    pub direction: Option<[f64; 3]>,
    /// apply the `𝔬(J − 1)` reference-stress correction
    pub stress_free: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_from_gate: Option<PrunedFrom>,
}

/// Coefficient of `∂Ψ/∂I_k` in the identity part of the reference stress
/// (divided by the coefficient of `∂Ψ/∂J`).
fn reference_coefficient(k: Invariant) -> f64 {
    match k {
        Invariant::I1 => 2.0,
        Invariant::I2 => 4.0,
        Invariant::J => 1.0,
        Invariant::I5 => 2.0,
        Invariant::I4 | Invariant::Ibar5 => 0.0,
    }
}

impl NnPotential {
    pub fn new(
        model: IsnnParams,
        input_map: InputMap,
        energy_scale: f64,
        design_names: Vec<String>,
        direction: Option<[f64; 3]>,
        stress_free: bool,
    ) -> Result<Self> {
        let p = NnPotential {
            format_version: POTENTIAL_FORMAT_VERSION,
            model,
            input_map,
            energy_scale,
            design_names,
            direction,
            stress_free,
            pruned_from_gate: None,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if self.format_version != POTENTIAL_FORMAT_VERSION {
            return Err(Error::FormatVersion { expected: POTENTIAL_FORMAT_VERSION, found: self.format_version });
        }
        self.model.check()?;
        if !(self.energy_scale > 0.0) || !self.energy_scale.is_finite() {
            return Err(Error::InvalidConfig("energy scale must be positive".into()));
        }
        if let Some(n) = &self.direction {
            check_unit(n)?;
        }
        self.input_map.validate(self.model.arch_spec.n_inputs(), self.design_names.len(), self.direction.is_some())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: NnPotential = serde_json::from_str(s)?;
        p.check()?;
        Ok(p)
    }

    pub fn n_design(&self) -> usize {
        self.design_names.len()
    }

    /// Evaluator with the effective weights computed once.
    pub fn evaluator(&self) -> NnEvaluator<'_> {
        NnEvaluator { pot: self, net: self.model.effective() }
    }

    pub fn kinematics(&self, f: &Tensor3) -> Result<Kinematics> {
        Kinematics::from_f(f, self.direction.as_ref())
    }

    pub fn energy(&self, kin: &Kinematics, design: &[f64]) -> Result<f64> {
        self.evaluator().energy(kin, design)
    }

    pub fn stress(&self, kin: &Kinematics, design: &[f64]) -> Result<Tensor3> {
        self.evaluator().stress(kin, design)
    }

    fn reference_invariants() -> [f64; 6] {
        Invariant::ALL.map(Invariant::reference)
    }
}

pub struct NnEvaluator<'a> {
    pot: &'a NnPotential,
    pub net: Network,
}

impl NnEvaluator<'_> {
    fn check_design(&self, design: &[f64]) -> Result<()> {
        if design.len() != self.pot.n_design() {
            return Err(Error::DimMismatch { what: "design parameters", expected: self.pot.n_design(), found: design.len() });
        }
        Ok(())
    }

    /// Raw network output and `∂Ψ/∂I_k` before the reference correction.
    fn raw(&self, inv: &[f64; 6], design: &[f64]) -> Result<(f64, [f64; 6])> {
        let map = &self.pot.input_map;
        let u = map.apply(inv, design);
        let b = eval(&self.net, &u, Order::First)?;
        let grad = b.grad();
        let e = self.pot.energy_scale;
        let mut g = [0.0; 6];
        for (p, k) in map.invariant_positions() {
            g[k.index()] += e * grad[p] / map.scale[p];
        }
        Ok((e * b.value, g))
    }

    /// Reference-stress correction `𝔬(D)`.
    pub fn correction(&self, design: &[f64]) -> Result<f64> {
        self.check_design(design)?;
        if !self.pot.stress_free {
            return Ok(0.0);
        }
        let (_, g) = self.raw(&NnPotential::reference_invariants(), design)?;
        Ok(Invariant::ALL.iter().map(|&k| reference_coefficient(k) * g[k.index()]).sum())
    }

    pub fn energy(&self, kin: &Kinematics, design: &[f64]) -> Result<f64> {
        self.check_design(design)?;
        let (v, _) = self.raw(&kin.inv, design)?;
        let (v0, _) = self.raw(&NnPotential::reference_invariants(), design)?;
        Ok(v - v0 - self.correction(design)? * (kin.get(Invariant::J) - 1.0))
    }

    /// `∂Ψ/∂I_k` including the correction.
    pub fn gradient(&self, kin: &Kinematics, design: &[f64]) -> Result<[f64; 6]> {
        self.check_design(design)?;
        let (_, mut g) = self.raw(&kin.inv, design)?;
        g[Invariant::J.index()] -= self.correction(design)?;
        Ok(g)
    }

    pub fn stress(&self, kin: &Kinematics, design: &[f64]) -> Result<Tensor3> {
        Ok(second_pk_stress(&self.gradient(kin, design)?, kin))
    }
}

/// Root mean square of all stress components.
pub fn stress_rms(data: &MaterialDataset) -> f64 {
    let n = (data.len() * 6).max(1) as f64;
    (data.rows.iter().flat_map(|r| r.stress).map(|s| s * s).sum::<f64>() / n).sqrt()
}

/// Default features for a dataset: `J`, `I1`, `I2` (plus `I4`, `I5` when
/// the data has a fiber direction), then every design parameter.
pub fn default_features(data: &MaterialDataset) -> Vec<Feature> {
    let mut inv = vec![Invariant::J, Invariant::I1, Invariant::I2];
    if data.direction().is_some() {
        inv.extend([Invariant::I4, Invariant::I5]);
    }
    let mut f: Vec<Feature> = inv.into_iter().map(Feature::Invariant).collect();
    f.extend((0..data.n_design()).map(Feature::Design));
    f
}

/// Architecture over [`default_features`]: `J` on the convex chain, the
/// other invariants on the convex non-decreasing branch, the first design
/// parameter on the monotone branch and the rest on the free branch. The
/// feed-forward baseline gets `layers` hidden layers of `width`.
pub fn potential_spec(kind: ArchKind, data: &MaterialDataset, width: usize, layers: usize) -> ArchSpec {
    let n_inv = if data.direction().is_some() { 4 } else { 2 };
    let nd = data.n_design();
    let dims = [1, n_inv, nd.min(1), nd.saturating_sub(1)];
    match kind {
        ArchKind::Isnn1 => ArchSpec::isnn1_uniform(dims, width, layers),
        ArchKind::Isnn2 => ArchSpec::isnn2_uniform(dims, width, layers),
        ArchKind::Ffnn => ArchSpec::ffnn(1 + n_inv + nd, vec![width; layers]),
    }
}

/// Fresh potential with the input map fitted to `data` and the energy scale
/// set to the RMS target stress.
pub fn init_potential(spec: &ArchSpec, features: Vec<Feature>, data: &MaterialDataset, seed: u64, stress_free: bool) -> Result<NnPotential> {
    let params = new_params(spec, seed, Init::Glorot)?;
    let map = InputMap::fit(features, data)?;
    let scale = stress_rms(data);
    NnPotential::new(
        params,
        map,
        if scale > 0.0 { scale } else { 1.0 },
        data.meta.design_names.clone(),
        data.meta.direction,
        stress_free,
    )
}

/// Relative stress error `‖S − Ŝ‖ / ‖S‖` over all rows and components.
pub fn relative_stress_rmse(pot: &NnPotential, data: &MaterialDataset) -> Result<f64> {
    let ev = pot.evaluator();
    let (mut num, mut den) = (0.0, 0.0);
    for r in &data.rows {
        let kin = pot.kinematics(&r.f)?;
        let s = ev.stress(&kin, &r.design)?.to_sym6();
        for (a, b) in s.iter().zip(&r.stress) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    if den == 0.0 {
        return Err(Error::Data("target stresses are all zero".into()));
    }
    Ok((num / den).sqrt())
}

/// Dataset arrays shared by every network trained on the stress loss.
pub(crate) struct StressData {
    /// per invariant: `2 ∂I_k/∂C` as a `6 × B` node
    generators: [Option<NodeId>; 6],
    target: NodeId,
    /// raw invariants per row
    invariants: Vec<[f64; 6]>,
    designs: Vec<Vec<f64>>,
    /// unique design vectors and the index of each row's design
    unique_designs: Vec<Vec<f64>>,
    design_index: Vec<usize>,
}

impl StressData {
    pub(crate) fn new(g: &mut Graph, data: &MaterialDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let b = data.len();
        let mut gens: Vec<Mat> = (0..6).map(|_| Mat::zeros(6, b)).collect();
        let mut target = Mat::zeros(6, b);
        let mut invariants = Vec::with_capacity(b);
        let mut designs = Vec::with_capacity(b);
        let mut unique_designs: Vec<Vec<f64>> = Vec::new();
        let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut design_index = Vec::with_capacity(b);
        for (col, r) in data.rows.iter().enumerate() {
            if r.design.len() != data.n_design() {
                return Err(Error::DimMismatch { what: "design parameters", expected: data.n_design(), found: r.design.len() });
            }
            let kin = r.kinematics(data.direction())?;
            for (k, gk) in kin.generators().iter().enumerate() {
                for (c, v) in gk.to_sym6().iter().enumerate() {
                    gens[k][(c, col)] = *v;
                }
            }
            for (c, v) in r.stress.iter().enumerate() {
                target[(c, col)] = *v;
            }
            invariants.push(kin.inv);
            designs.push(r.design.clone());
            let key: Vec<u64> = r.design.iter().map(|v| v.to_bits()).collect();
            let idx = *lookup.entry(key).or_insert_with(|| {
                unique_designs.push(r.design.clone());
                unique_designs.len() - 1
            });
            design_index.push(idx);
        }
        let has_dir = data.direction().is_some();
        let mut generators = [None; 6];
        for (k, m) in gens.into_iter().enumerate() {
            if !Invariant::ALL[k].is_anisotropic() || has_dir {
                generators[k] = Some(g.input(m));
            }
        }
        let target = g.input(target);
        Ok(StressData { generators, target, invariants, designs, unique_designs, design_index })
    }

    pub(crate) fn target(&self) -> NodeId {
        self.target
    }
}

/// Records the predicted stress (`6 × B`) of a potential on the graph.
pub(crate) fn record_stress(g: &mut Graph, pot: &NnPotential, nodes: &NetNodes, data: &StressData) -> Result<NodeId> {
    let layout = pot.model.layout();
    let map = &pot.input_map;
    let n = map.features.len();
    let rows = |invs: &mut dyn Iterator<Item = (&[f64; 6], &Vec<f64>)>| -> Result<Mat> {
        let v: Vec<f64> = invs.flat_map(|(i, d)| map.apply(i, d)).collect();
        Mat::from_vec(v.len() / n.max(1), n, v)
    };
    let inputs = rows(&mut data.invariants.iter().zip(&data.designs))?;
    let inputs = BatchInputs::new(g, &layout, &inputs);
    let positions = map.invariant_positions();
    let dirs: Vec<usize> = positions.iter().map(|(p, _)| *p).collect();
    let out = record_network(g, &layout, &nodes.eff, &inputs, &dirs);

    // ∂Ψ/∂I_k per row, scaled back from the normalized inputs
    let e = pot.energy_scale;
    let mut psi: [Option<NodeId>; 6] = [None; 6];
    for ((p, k), slope) in positions.iter().zip(&out.slopes) {
        let Some(slope) = slope else { continue };
        let s = g.scale(*slope, e / map.scale[*p]);
        psi[k.index()] = Some(match psi[k.index()] {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    let mut stress: Option<NodeId> = None;
    for k in Invariant::ALL {
        let (Some(dk), Some(gen)) = (psi[k.index()], data.generators[k.index()]) else { continue };
        let term = g.mul_row(gen, dk);
        stress = Some(match stress {
            Some(s) => g.add(s, term),
            None => term,
        });
    }
    let mut stress = match stress {
        Some(s) => s,
        None => g.scale(data.target, 0.0),
    };

    if pot.stress_free {
        let ref_inv = NnPotential::reference_invariants();
        let refs = rows(&mut data.unique_designs.iter().map(|d| (&ref_inv, d)))?;
        let ref_inputs = BatchInputs::new(g, &layout, &refs);
        let ref_out = record_network(g, &layout, &nodes.eff, &ref_inputs, &dirs);
        let mut corr: Option<NodeId> = None;
        for ((p, k), slope) in positions.iter().zip(&ref_out.slopes) {
            let c = reference_coefficient(*k);
            let Some(slope) = slope else { continue };
            if c == 0.0 {
                continue;
            }
            let s = g.scale(*slope, c * e / map.scale[*p]);
            corr = Some(match corr {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        if let (Some(corr), Some(gen_j)) = (corr, data.generators[Invariant::J.index()]) {
            let per_row = g.gather(corr, data.design_index.clone());
            let term = g.mul_row(gen_j, per_row);
            stress = g.sub(stress, term);
        }
    }
    Ok(stress)
}

/// Full-batch Adam on the mean squared stress error (all six components).
pub fn train_potential(pot: &NnPotential, data: &MaterialDataset, cfg: &TrainConfig) -> Result<(NnPotential, LossHistory)> {
    cfg.validate()?;
    pot.check()?;
    if data.n_design() != pot.n_design() {
        return Err(Error::DimMismatch { what: "design parameters", expected: pot.n_design(), found: data.n_design() });
    }
    let mut pot = pot.clone();
    let mut g = Graph::new();
    let nodes = NetNodes::new(&mut g, &pot.model);
    let sd = StressData::new(&mut g, data)?;
    let pred = record_stress(&mut g, &pot, &nodes, &sd)?;
    let resid = g.sub(pred, sd.target());
    let loss = g.mean_sq(resid);

    let mut adam = AdamState::for_params(&pot.model, cfg.lr);
    let mut history = LossHistory::default();
    for epoch in 0..cfg.epochs {
        nodes.load(&mut g, &pot.model);
        g.forward();
        let train = g.scalar(loss);
        if !train.is_finite() {
            return Err(Error::Data(format!("training diverged at epoch {epoch}")));
        }
        if cfg.logs_at(epoch) {
            history.rows.push(HistoryRow { epoch, train, test: None });
        }
        g.backward(loss);
        let grads = nodes.grads(&g);
        crate::train::adam_step(&mut adam, &mut pot.model, &grads, cfg.lr)?;
    }
    Ok((pot, history))
}
