//! Covariance matrix adaptation evolution strategy with box constraints,
//! and its use for recovering design parameters from target stresses.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mech::{Kinematics, MaterialDataset, NnPotential};
use crate::tensor::{sym_eigen, Mat};

/// Floor applied to covariance eigenvalues to keep the matrix definite.
const EIGEN_FLOOR: f64 = 1e-14;

/// Candidates outside the box are redrawn this many times before clipping.
const RESAMPLE_TRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmaConfig {
    /// population size; `4 + ⌊3 ln n⌋` when absent
    #[serde(default)]
    pub lambda: Option<usize>,
    /// parents; `⌊λ/2⌋` when absent
    #[serde(default)]
    pub mu_sel: Option<usize>,
    pub sigma0: f64,
    pub max_evals: usize,
    #[serde(default)]
    pub seed: u64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// stop once `σ · max √C_ii` falls below this
    #[serde(default = "default_tol_x")]
    pub tol_x: f64,
    /// weight of the squared distance to the box for clipped candidates
    #[serde(default = "default_penalty")]
    pub penalty: f64,
}

fn default_tol_x() -> f64 {
    1e-11
}

fn default_penalty() -> f64 {
    1e2
}

impl CmaConfig {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, sigma0: f64, max_evals: usize, seed: u64) -> Self {
        CmaConfig {
            lambda: None,
            mu_sel: None,
            sigma0,
            max_evals,
            seed,
            lower,
            upper,
            tol_x: default_tol_x(),
            penalty: default_penalty(),
        }
    }

    fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn population(&self) -> usize {
        self.lambda.unwrap_or(4 + (3.0 * (self.dims() as f64).ln()).floor() as usize)
    }

    pub fn parents(&self) -> usize {
        self.mu_sel.unwrap_or(self.population() / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims();
        if n == 0 || self.upper.len() != n {
            return Err(Error::InvalidBounds(format!("need matching nonempty bounds, got {} and {}", n, self.upper.len())));
        }
        if let Some(d) = (0..n).find(|&d| !(self.lower[d] < self.upper[d])) {
            return Err(Error::InvalidBounds(format!("lower bound not below upper bound in dimension {d}")));
        }
        let (lambda, mu) = (self.population(), self.parents());
        if lambda < 4 || mu == 0 || mu > lambda / 2 {
            return Err(Error::InvalidConfig(format!("need λ ≥ 4 and 1 ≤ μ ≤ λ/2, got λ={lambda}, μ={mu}")));
        }
        if !(self.sigma0 > 0.0) || !(self.tol_x >= 0.0) || !(self.penalty >= 0.0) {
            return Err(Error::InvalidConfig("σ₀ must be positive, tolerances non-negative".into()));
        }
        if self.max_evals == 0 {
            return Err(Error::InvalidConfig("evaluation budget must be positive".into()));
        }
        Ok(())
    }
}

/// One generation of the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaRecord {
    pub iteration: usize,
    pub evals: usize,
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaOutcome {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub evals: usize,
    pub history: Vec<CmaRecord>,
}

/// Internal search state.
struct CmaState {
    mean: Vec<f64>,
    cov: Mat,
    sigma: f64,
    p_sigma: Vec<f64>,
    p_c: Vec<f64>,
    generation: usize,
}

fn clip(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter().zip(lo).zip(hi).map(|((&v, &l), &h)| v.clamp(l, h)).collect()
}

fn inside(x: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    x.iter().zip(lo).zip(hi).all(|((&v, &l), &h)| v >= l && v <= h)
}

/// Minimizes `objective` from `x0` inside the configured box. Returns the
/// best point once the step size collapses below `tol_x`, or
/// [`Error::BudgetExhausted`] (carrying the best point) when the budget
/// runs out first.
pub fn cma_minimize(mut objective: impl FnMut(&[f64]) -> f64, x0: &[f64], cfg: &CmaConfig) -> Result<CmaOutcome> {
    cfg.validate()?;
    let n = cfg.dims();
    if x0.len() != n {
        return Err(Error::DimMismatch { what: "start point", expected: n, found: x0.len() });
    }
    if !inside(x0, &cfg.lower, &cfg.upper) {
        return Err(Error::InvalidBounds("start point lies outside the box".into()));
    }
    let (lambda, mu) = (cfg.population(), cfg.parents());
    let nf = n as f64;

    let raw: Vec<f64> = (1..=mu).map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut st = CmaState {
        mean: x0.to_vec(),
        cov: Mat::identity(n),
        sigma: cfg.sigma0,
        p_sigma: vec![0.0; n],
        p_c: vec![0.0; n],
        generation: 0,
    };
    let mut best_x = x0.to_vec();
    let mut best_f = f64::INFINITY;
    let mut evals = 0;
    let mut history = Vec::new();

    loop {
        // C = B diag(d²) Bᵀ, with eigenvalues floored to stay definite
        let (mut eig, b) = sym_eigen(&st.cov);
        if eig[0] < EIGEN_FLOOR {
            eig.iter_mut().for_each(|e| *e = e.max(EIGEN_FLOOR));
            st.cov = rebuild(&b, &eig);
        }
        let d: Vec<f64> = eig.iter().map(|e| e.sqrt()).collect();

        let mut pop: Vec<(f64, Vec<f64>)> = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            if evals >= cfg.max_evals {
                break;
            }
            let mut y = vec![0.0; n];
            let mut x = vec![0.0; n];
            for _try in 0..RESAMPLE_TRIES {
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                for (i, yi) in y.iter_mut().enumerate() {
                    *yi = (0..n).map(|k| b[(i, k)] * d[k] * z[k]).sum();
                }
                for i in 0..n {
                    x[i] = st.mean[i] + st.sigma * y[i];
                }
                if inside(&x, &cfg.lower, &cfg.upper) {
                    break;
                }
            }
            let xc = clip(&x, &cfg.lower, &cfg.upper);
            let dist: f64 = x.iter().zip(&xc).map(|(a, b)| (a - b) * (a - b)).sum();
            let fx = objective(&xc);
            evals += 1;
            if fx < best_f {
                best_f = fx;
                best_x = xc.clone();
            }
            pop.push((fx + cfg.penalty * dist, y));
        }

        if pop.len() == lambda {
            pop.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut y_w = vec![0.0; n];
            for (w, (_, y)) in weights.iter().zip(&pop) {
                for i in 0..n {
                    y_w[i] += w * y[i];
                }
            }
            for i in 0..n {
                st.mean[i] = (st.mean[i] + st.sigma * y_w[i]).clamp(cfg.lower[i], cfg.upper[i]);
            }

            // C^{-1/2} y_w = B diag(1/d) Bᵀ y_w
            let bt_y: Vec<f64> = (0..n).map(|k| (0..n).map(|i| b[(i, k)] * y_w[i]).sum::<f64>() / d[k]).collect();
            let whitened: Vec<f64> = (0..n).map(|i| (0..n).map(|k| b[(i, k)] * bt_y[k]).sum()).collect();
            let cs = (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt();
            for i in 0..n {
                st.p_sigma[i] = (1.0 - c_sigma) * st.p_sigma[i] + cs * whitened[i];
            }
            let ps_norm = st.p_sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
            let gen = (st.generation + 1) as i32;
            let h_sigma =
                if ps_norm / (1.0 - (1.0 - c_sigma).powi(2 * gen)).sqrt() < (1.4 + 2.0 / (nf + 1.0)) * chi_n { 1.0 } else { 0.0 };
            let cc = (c_c * (2.0 - c_c) * mu_eff).sqrt();
            for i in 0..n {
                st.p_c[i] = (1.0 - c_c) * st.p_c[i] + h_sigma * cc * y_w[i];
            }
            let decay = 1.0 - c_1 - c_mu + (1.0 - h_sigma) * c_1 * c_c * (2.0 - c_c);
            let mut cov = Mat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let rank_mu: f64 = weights.iter().zip(&pop).map(|(w, (_, y))| w * y[i] * y[j]).sum();
                    cov[(i, j)] = decay * st.cov[(i, j)] + c_1 * st.p_c[i] * st.p_c[j] + c_mu * rank_mu;
                }
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                    cov[(i, j)] = avg;
                    cov[(j, i)] = avg;
                }
            }
            st.cov = cov;
            st.sigma *= ((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)).exp();
            st.generation += 1;
        }

        let (eig, _) = sym_eigen(&st.cov);
        history.push(CmaRecord {
            iteration: history.len(),
            evals,
            best_x: best_x.clone(),
            best_f,
            mean: st.mean.clone(),
            sigma: st.sigma,
            min_eigenvalue: eig[0],
        });
        let spread = st.sigma * (0..n).map(|i| st.cov[(i, i)]).fold(0.0_f64, f64::max).sqrt();
        let outcome = |history| CmaOutcome { best_x: best_x.clone(), best_f, evals, history };
        if spread < cfg.tol_x {
            return Ok(outcome(history));
        }
        if evals >= cfg.max_evals {
            return Err(Error::BudgetExhausted(Box::new(outcome(history))));
        }
    }
}

fn rebuild(b: &Mat, eig: &[f64]) -> Mat {
    let n = eig.len();
    let mut c = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = (0..n).map(|k| b[(i, k)] * eig[k] * b[(j, k)]).sum();
        }
    }
    c
}

/// Search result in design space.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub design: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    /// per generation: best design so far and its objective
    pub trajectory: Vec<(Vec<f64>, f64)>,
}

impl Inversion {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.design.len();
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=k).map(|i| format!("param_{i}")));
        header.push("objective".into());
        w.write_record(&header)?;
        for (it, (x, f)) in self.trajectory.iter().enumerate() {
            let mut rec = vec![it.to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            rec.push(f.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean squared difference between target stresses and the potential's
/// stresses at the target deformations, as a function of the design.
pub fn stress_objective<'a>(pot: &'a NnPotential, targets: &MaterialDataset) -> Result<impl Fn(&[f64]) -> f64 + 'a> {
    if targets.is_empty() {
        return Err(Error::Data("no target states".into()));
    }
    let kins = targets.rows.iter().map(|r| pot.kinematics(&r.f)).collect::<Result<Vec<Kinematics>>>()?;
    let ev = pot.evaluator();
    let stresses: Vec<[f64; 6]> = targets.rows.iter().map(|r| r.stress).collect();
    Ok(move |design: &[f64]| {
        let mut acc = 0.0;
        for (kin, s) in kins.iter().zip(&stresses) {
            let Ok(pred) = ev.stress(kin, design) else { return f64::INFINITY };
            acc += pred.to_sym6().iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        acc / (6 * kins.len()) as f64
    })
}

/// Recovers design parameters by CMA-ES on the box `[lower, upper]`.
///
/// The search runs in coordinates normalized to the unit box, so `sigma0`
/// is a fraction of each range. The start point is drawn uniformly in the
/// box from `cfg.seed` unless `x0` is given.
pub fn invert_design(pot: &NnPotential, targets: &MaterialDataset, cfg: &CmaConfig, x0: Option<&[f64]>) -> Result<Inversion> {
    cfg.validate()?;
    let n = cfg.lower.len();
    if n != pot.n_design() {
        return Err(Error::DimMismatch { what: "design bounds", expected: pot.n_design(), found: n });
    }
    let (lo, hi) = (cfg.lower.clone(), cfg.upper.clone());
    let to_design = |u: &[f64]| -> Vec<f64> { u.iter().enumerate().map(|(i, v)| lo[i] + (hi[i] - lo[i]) * v).collect() };
    let u0: Vec<f64> = match x0 {
        Some(x) => {
            if x.len() != n || !inside(x, &lo, &hi) {
                return Err(Error::InvalidBounds("start design lies outside the bounds".into()));
            }
            x.iter().enumerate().map(|(i, v)| (v - lo[i]) / (hi[i] - lo[i])).collect()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a2b_3c4d);
            (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect()
        }
    };
    let objective = stress_objective(pot, targets)?;
    let unit = CmaConfig { lower: vec![0.0; n], upper: vec![1.0; n], ..cfg.clone() };
    let (out, converged) = match cma_minimize(|u| objective(&to_design(u)), &u0, &unit) {
        Ok(o) => (o, true),
        Err(Error::BudgetExhausted(o)) => (*o, false),
        Err(e) => return Err(e),
    };
    Ok(Inversion {
        design: to_design(&out.best_x),
        objective: out.best_f,
        converged,
        trajectory: out.history.iter().map(|r| (to_design(&r.best_x), r.best_f)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, lo: f64, hi: f64, evals: usize, seed: u64) -> CmaConfig {
        CmaConfig::new(vec![lo; n], vec![hi; n], 0.5, evals, seed)
    }

    #[test]
    fn sphere_converges() {
        let target = [0.7, -1.3];
        let f = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = cma_minimize(f, &[2.0, 2.0], &cfg(2, -5.0, 5.0, 5000, 1)).unwrap();
        let err: f64 = out.best_x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(err < 1e-6, "{err}");
        assert!(out.evals <= 5000);
    }

    #[test]
    fn rosenbrock_converges() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let c = CmaConfig { sigma0: 0.3, ..cfg(2, -2.0, 2.0, 20_000, 3) };
        let out = cma_minimize(f, &[-1.0, 1.5], &c).unwrap();
        assert!(out.best_f < 1e-6, "{}", out.best_f);
    }

    #[test]
    fn constant_objective_runs_to_budget_inside_box() {
        match cma_minimize(|_| 1.0, &[0.5, 0.5], &cfg(2, 0.0, 1.0, 300, 2)) {
            Err(Error::BudgetExhausted(o)) => {
                assert_eq!(o.evals, 300);
                assert!(o.history.iter().all(|r| inside(&r.mean, &[0.0, 0.0], &[1.0, 1.0])));
                assert!(inside(&o.best_x, &[0.0, 0.0], &[1.0, 1.0]));
            }
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn history_is_monotone_deterministic_and_definite() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + 3.0 * (x[1] + 0.2).powi(4) + (x[0] * x[1]).sin();
        let a = cma_minimize(f, &[1.0, 1.0], &cfg(2, -2.0, 2.0, 2000, 9));
        let b = cma_minimize(f, &[1.0, 1.0], &cfg(2, -2.0, 2.0, 2000, 9));
        let (a, b) = match (a, b) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(Error::BudgetExhausted(a)), Err(Error::BudgetExhausted(b))) => (*a, *b),
            other => panic!("{other:?}"),
        };
        assert_eq!(a, b);
        assert!(a.history.windows(2).all(|w| w[1].best_f <= w[0].best_f));
        assert!(a.history.iter().all(|r| r.min_eigenvalue > 0.0 && r.sigma > 0.0));
    }

    fn nn_targets(design: &[f64]) -> (NnPotential, MaterialDataset) {
        use crate::isnn::{new_params, ArchSpec, Init};
        use crate::mech::{gen_blatzko_dataset, init_potential, Feature, Invariant};
        let mut data = gen_blatzko_dataset(6, &[1.0, 4.0], &[0.5, 1.5], 0.2, 5).unwrap();
        let spec = ArchSpec::isnn2_uniform([1, 2, 1, 1], 4, 2);
        let feats = vec![
            Feature::Invariant(Invariant::J),
            Feature::Invariant(Invariant::I1),
            Feature::Invariant(Invariant::I2),
            Feature::Design(0),
            Feature::Design(1),
        ];
        let mut pot = init_potential(&spec, feats, &data, 4, true).unwrap();
        pot.model = new_params(&spec, 11, Init::Uniform(0.8)).unwrap();
        data.rows.truncate(6);
        for r in &mut data.rows {
            let kin = pot.kinematics(&r.f).unwrap();
            r.design = design.to_vec();
            r.stress = pot.stress(&kin, design).unwrap().to_sym6();
        }
        (pot, data)
    }

    #[test]
    fn inversion_recovers_own_design() {
        let truth = [3.3, 0.9];
        let (pot, targets) = nn_targets(&truth);
        let c = CmaConfig { sigma0: 0.3, ..CmaConfig::new(vec![1.0, 0.125], vec![7.0, 2.0], 0.3, 4000, 7) };
        let inv = invert_design(&pot, &targets, &c, None).unwrap();
        assert!(inv.objective < 1e-12, "{}", inv.objective);
        for (d, t) in inv.design.iter().zip(&truth) {
            assert!((d - t).abs() < 1e-3 * t, "{:?}", inv.design);
        }
        let mut buf = Vec::new();
        inv.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,param_1,param_2,objective\n"));
        assert_eq!(text.lines().count(), inv.trajectory.len() + 1);
    }

    #[test]
    fn config_checks() {
        assert!(cma_minimize(|_| 0.0, &[0.0], &CmaConfig { lambda: Some(3), ..cfg(1, -1.0, 1.0, 10, 0) }).is_err());
        assert!(cma_minimize(|_| 0.0, &[0.0], &CmaConfig { mu_sel: Some(4), ..cfg(1, -1.0, 1.0, 10, 0) }).is_err());
        assert!(cma_minimize(|_| 0.0, &[0.0], &CmaConfig { sigma0: 0.0, ..cfg(1, -1.0, 1.0, 10, 0) }).is_err());
        assert!(cma_minimize(|_| 0.0, &[3.0], &cfg(1, -1.0, 1.0, 10, 0)).is_err());
        assert_eq!(cfg(2, 0.0, 1.0, 10, 0).population(), 6);
    }
}
