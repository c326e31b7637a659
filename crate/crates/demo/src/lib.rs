//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain Rust twin that returns `String`
//! errors, so the logic is testable off the browser.

use isnn::cmaes::{cma_minimize, CmaConfig};
use isnn::isnn::{new_params, ArchKind, ArchSpec, Group, Init};
use isnn::mech::{linspace, AnalyticPotential};
use isnn::tensor::Tensor3;
use wasm_bindgen::prelude::*;

const FIBER: [f64; 3] = [1.0, 0.0, 0.0];

fn group_index(name: &str) -> Result<usize, String> {
    match name {
        "x" => Ok(Group::X.index()),
        "y" => Ok(Group::Y.index()),
        "t" => Ok(Group::T.index()),
        "z" => Ok(Group::Z.index()),
        other => Err(format!("unknown input group `{other}`")),
    }
}

/// Output of a randomly initialized toy-study network as one input sweeps
/// `[-3, 3]` with the other three held at 0.5.
pub fn slice(arch: &str, seed: u32, group: &str, points: usize) -> Result<Vec<f64>, String> {
    let kind: ArchKind = arch.parse().map_err(|e: isnn::Error| e.to_string())?;
    let g = group_index(group)?;
    let params = new_params(&ArchSpec::toy(kind), seed as u64, Init::Uniform(0.5)).map_err(|e| e.to_string())?;
    let net = params.effective();
    linspace(-3.0, 3.0, points.max(2))
        .into_iter()
        .map(|v| {
            let mut input = [0.5; 4];
            input[g] = v;
            net.forward(&input).map_err(|e| e.to_string())
        })
        .collect()
}

/// The two sliders are `(μ, β)` for Blatz-Ko and `(c1, c2)` for Neo-Hookean;
/// the transversely isotropic models use fixed constants.
fn potential(name: &str, mu: f64, beta: f64) -> Result<AnalyticPotential, String> {
    if !(mu > 0.0 && beta > 0.0) {
        return Err("μ and β must be positive".into());
    }
    match name {
        "blatzko" => Ok(AnalyticPotential::BlatzKo { mu, beta }),
        "neohookean" => Ok(AnalyticPotential::NeoHookean { c1: mu, c2: beta }),
        "poly-ti" => Ok(AnalyticPotential::POLY_TI),
        "nonpoly-ti" => Ok(AnalyticPotential::NONPOLY_TI),
        other => Err(format!("unknown potential `{other}`")),
    }
}

/// `S11` under uniaxial stretch `F = diag(λ, 1, 1)` for λ in `[0.7, 1.3]`.
pub fn uniaxial(name: &str, mu: f64, beta: f64, points: usize) -> Result<Vec<f64>, String> {
    let pot = potential(name, mu, beta)?;
    let dir = pot.is_anisotropic().then_some(&FIBER);
    linspace(0.7, 1.3, points.max(2))
        .into_iter()
        .map(|l| {
            let kin = isnn::mech::Kinematics::from_f(&Tensor3::diag(l, 1.0, 1.0), dir).map_err(|e| e.to_string())?;
            Ok(pot.stress(&kin).to_sym6()[0])
        })
        .collect()
}

/// Best Rosenbrock value after each CMA-ES generation from `(-1, 1.5)`.
pub fn rosenbrock(seed: u32, sigma0: f64) -> Result<Vec<f64>, String> {
    let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
    let cfg = CmaConfig::new(vec![-2.0, -2.0], vec![2.0, 2.0], sigma0, 4000, seed as u64);
    let outcome = match cma_minimize(f, &[-1.0, 1.5], &cfg) {
        Ok(o) => o,
        Err(isnn::Error::BudgetExhausted(o)) => *o,
        Err(e) => return Err(e.to_string()),
    };
    Ok(outcome.history.iter().map(|r| r.best_f).collect())
}

#[wasm_bindgen]
pub fn network_slice(arch: &str, seed: u32, group: &str, points: usize) -> Result<Vec<f64>, JsError> {
    slice(arch, seed, group, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn uniaxial_stress(potential: &str, mu: f64, beta: f64, points: usize) -> Result<Vec<f64>, JsError> {
    uniaxial(potential, mu, beta, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cma_rosenbrock(seed: u32, sigma0: f64) -> Result<Vec<f64>, JsError> {
    rosenbrock(seed, sigma0).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_follow_the_group_guarantees() {
        for arch in ["isnn1", "isnn2"] {
            let y = slice(arch, 3, "y", 41).unwrap();
            assert!(y.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            assert!(y.windows(3).all(|w| w[0] + w[2] - 2.0 * w[1] >= -1e-9));
            let t = slice(arch, 3, "t", 41).unwrap();
            assert!(t.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }
        assert!(slice("isnn2", 0, "w", 5).is_err());
        assert!(slice("cnn", 0, "x", 5).is_err());
    }

    #[test]
    fn stress_vanishes_at_unit_stretch_for_isotropic_models() {
        for name in ["blatzko", "neohookean"] {
            let s = uniaxial(name, 2.0, 0.5, 7).unwrap();
            assert!(s[3].abs() < 1e-12, "{name}: {}", s[3]);
            assert!(s[0] < 0.0 && s[6] > 0.0);
        }
        assert!(uniaxial("blatzko", -1.0, 0.5, 3).is_err());
    }

    #[test]
    fn rosenbrock_history_decreases() {
        let h = rosenbrock(1, 0.3).unwrap();
        assert!(h.windows(2).all(|w| w[1] <= w[0]));
        assert!(*h.last().unwrap() < 1e-6);
    }
}
