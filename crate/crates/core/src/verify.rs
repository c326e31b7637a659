//! Randomized property suites: structural guarantees of the constrained
//! networks and agreement of manual, finite-difference and tape derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::bench::tape_derivatives;
use crate::deriv::{eval, fd_grad, fd_hess, Order};
use crate::error::Result;
use crate::isnn::{new_params, ArchKind, ArchSpec, Constraint, Group, Init, IsnnParams, Network, Source};
use crate::tensor::min_eigenvalue;

pub const CONVEXITY_TOL: f64 = 1e-9;
pub const GRADIENT_SIGN_TOL: f64 = 1e-10;
pub const EIGENVALUE_TOL: f64 = 1e-8;
pub const FD_GRAD_STEP: f64 = 1e-5;
pub const FD_HESS_STEP: f64 = 1e-3;
pub const TAPE_GRAD_REL: f64 = 1e-10;
pub const TAPE_HESS_REL: f64 = 1e-8;

/// Outcome of one property over all trials. `worst` is the largest ratio of
/// the observed error to its allowance, so values above 1 are violations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub violations: usize,
    pub worst: f64,
}

impl CheckOutcome {
    fn new(name: &str) -> Self {
        CheckOutcome { name: name.into(), checked: 0, violations: 0, worst: 0.0 }
    }

    /// Records `excess / allowance`; anything above 1 is a violation.
    fn record(&mut self, ratio: f64) {
        self.checked += 1;
        if !(ratio <= 1.0) {
            self.violations += 1;
        }
        if ratio > self.worst || ratio.is_nan() {
            self.worst = ratio;
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub arch: ArchKind,
    pub trials: usize,
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn violations(&self) -> usize {
        self.checks.iter().map(|c| c.violations).sum()
    }
}

/// Architectures exercised per kind: the toy-study network plus a smaller
/// one with two inputs per group, so that Hessian blocks are proper matrices.
pub fn suite_specs(kind: ArchKind) -> Vec<ArchSpec> {
    let small = match kind {
        ArchKind::Isnn1 => ArchSpec::isnn1_uniform([2, 2, 2, 2], 5, 3),
        ArchKind::Isnn2 => ArchSpec::isnn2_uniform([2, 2, 2, 2], 6, 3),
        ArchKind::Ffnn => ArchSpec::ffnn(8, vec![8, 8]),
    };
    vec![ArchSpec::toy(kind), small]
}

/// Random parameters for trial `i`: even trials use the training
/// initialization, odd trials spread every raw entry over `[-0.5, 0.5]`.
fn trial_params(spec: &ArchSpec, seed: u64, i: usize) -> Result<IsnnParams> {
    let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
    let init = if i.is_multiple_of(2) { Init::Glorot } else { Init::Uniform(0.5) };
    new_params(spec, s, init)
}

fn random_input(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

/// Negates the output layer's weights on the previous main-chain layer (or
/// the first non-negative tensor when there is none), breaking convexity.
/// Used to check that the suite detects violations.
pub fn flip_nonnegative_weight(params: &IsnnParams, net: &mut Network) {
    let last = net.layout.x_layers.last().and_then(|l| l.terms.iter().find(|t| t.source == Source::PrevX)).map(|t| t.weight);
    let idx = last.or_else(|| params.raw_params.iter().position(|p| p.constraint == Constraint::NonNegative));
    if let Some(i) = idx {
        net.weights[i] = net.weights[i].map(|w| -w - 1.0);
    }
}

const CONSTRAINT_CHECKS: [&str; 10] = [
    "convex in x",
    "convex in y",
    "convex in (x, y)",
    "monotone in y",
    "monotone in t",
    "grad_y >= 0",
    "grad_t >= 0",
    "hess_xx psd",
    "hess_yy psd",
    "hess_(x,y) psd",
];

/// One round of every constraint check on `net` at random inputs.
fn check_network(net: &Network, rng: &mut impl Rng, checks: &mut [CheckOutcome]) -> Result<()> {
    let dims = net.layout.dims;
    let range = |g: Group| net.layout.group_range(g);
    let (rx, ry, rt) = (range(Group::X), range(Group::Y), range(Group::T));
    let n = net.n_inputs();
    let f = |v: &[f64]| net.forward(v);

    for (c, groups) in [(0, vec![rx.clone()]), (1, vec![ry.clone()]), (2, vec![rx.clone(), ry.clone()])] {
        let a = random_input(rng, n);
        let mut b = a.clone();
        for r in &groups {
            for k in r.clone() {
                b[k] = rng.gen_range(-3.0..3.0);
            }
        }
        let lam: f64 = rng.gen();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(p, q)| lam * p + (1.0 - lam) * q).collect();
        let gap = f(&mix)? - (lam * f(&a)? + (1.0 - lam) * f(&b)?);
        checks[c].record(gap / CONVEXITY_TOL);
    }

    for (c, r) in [(3, ry), (4, rt)] {
        let a = random_input(rng, n);
        let mut b = a.clone();
        for k in r {
            b[k] += rng.gen_range(0.0..2.0);
        }
        checks[c].record((f(&a)? - f(&b)?) / CONVEXITY_TOL);
    }

    let x = random_input(rng, n);
    let md = eval(net, &x, Order::Second)?;
    let neg = |g: &[f64]| g.iter().fold(0.0_f64, |m, &v| m.max(-v));
    checks[5].record(neg(&md.grad_y) / GRADIENT_SIGN_TOL);
    checks[6].record(neg(&md.grad_t) / GRADIENT_SIGN_TOL);
    let joint = md.hess.block(0, 0, dims[0] + dims[1], dims[0] + dims[1]);
    for (c, h) in [(7, md.hess_xx()), (8, md.hess_yy()), (9, joint)] {
        checks[c].record(-min_eigenvalue(&h) / EIGENVALUE_TOL);
    }
    Ok(())
}

fn constraint_outcomes() -> Vec<CheckOutcome> {
    CONSTRAINT_CHECKS.iter().map(|n| CheckOutcome::new(n)).collect()
}

/// Convexity along random chords in `x`, `y` and `(x, y)`, monotonicity
/// and gradient signs in `y` and `t`, and definiteness of the `x`, `y` and
/// joint `(x, y)` Hessian blocks, each over `trials` random initializations
/// of every architecture in [`suite_specs`]. The feed-forward baseline has
/// no guarantees, so its report is empty.
pub fn constraint_suite(kind: ArchKind, trials: usize, seed: u64, sign_flip: bool) -> Result<SuiteReport> {
    let mut checks = constraint_outcomes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if kind != ArchKind::Ffnn {
        for spec in suite_specs(kind) {
            for i in 0..trials {
                let params = trial_params(&spec, seed, i)?;
                let mut net = params.effective();
                if sign_flip {
                    flip_nonnegative_weight(&params, &mut net);
                }
                check_network(&net, &mut rng, &mut checks)?;
            }
        }
    }
    Ok(SuiteReport { arch: kind, trials, checks })
}

/// The constraint checks on one fixed (for example trained) network at
/// `trials` random input sets.
pub fn network_suite(net: &Network, trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut checks = constraint_outcomes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        check_network(net, &mut rng, &mut checks)?;
    }
    Ok(SuiteReport { arch: net.kind, trials, checks })
}

/// Entrywise `|a − b| / max(abs_tol, rel_tol·|b|)`, maximized.
fn worst_ratio(a: &[f64], b: &[f64], abs_tol: f64, rel_tol: f64) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| (p - q).abs() / abs_tol.max(rel_tol * q.abs())).fold(0.0, f64::max)
}

/// Like [`worst_ratio`] with the relative part taken against the largest
/// reference entry. Difference quotients carry rounding error proportional
/// to the function value, not to each entry.
fn worst_ratio_scaled(a: &[f64], b: &[f64], abs_tol: f64, rel_tol: f64) -> f64 {
    let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(&p, &q)| (p - q).abs() / abs_tol.max(rel_tol * scale)).fold(0.0, f64::max)
}

/// Manual gradients and Hessians against central differences and against
/// the tape.
pub fn derivative_suite(kind: ArchKind, trials: usize, seed: u64) -> Result<SuiteReport> {
    let names = ["grad vs fd", "hess vs fd", "grad vs tape", "hess vs tape", "value vs forward"];
    let mut checks: Vec<CheckOutcome> = names.iter().map(|n| CheckOutcome::new(n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd00d);
    for spec in suite_specs(kind) {
        for i in 0..trials {
            let net = trial_params(&spec, seed, i)?.effective();
            let x = random_input(&mut rng, net.n_inputs());
            let f = |v: &[f64]| net.forward(v).expect("input length matches");
            let md = eval(&net, &x, Order::Second)?;
            let grad = md.grad();
            checks[0].record(worst_ratio_scaled(&grad, &fd_grad(f, &x, FD_GRAD_STEP), 1e-6, 1e-4));
            checks[1].record(worst_ratio_scaled(md.hess.as_slice(), fd_hess(f, &x, FD_HESS_STEP).as_slice(), 1e-4, 1e-3));
            let (value, tg, th) = tape_derivatives(&net, &x);
            checks[2].record(worst_ratio(&grad, &tg, TAPE_GRAD_REL, TAPE_GRAD_REL));
            checks[3].record(worst_ratio(md.hess.as_slice(), th.as_slice(), TAPE_HESS_REL, TAPE_HESS_REL));
            checks[4].record(worst_ratio(&[md.value], &[f(&x)], 1e-12, 1e-12).max(worst_ratio(&[value], &[md.value], 1e-12, 1e-12)));
        }
    }
    Ok(SuiteReport { arch: kind, trials, checks })
}

/// Renders reports as an aligned pass/fail table.
pub fn format_reports(reports: &[SuiteReport]) -> String {
    let mut out = format!("{:<6} {:<18} {:>8} {:>10} {:>11}  result\n", "arch", "check", "checked", "violations", "worst");
    for r in reports {
        for c in &r.checks {
            let arch = format!("{:?}", r.arch).to_lowercase();
            let verdict = if c.passed() { "pass" } else { "FAIL" };
            out += &format!("{arch:<6} {:<18} {:>8} {:>10} {:>11.3e}  {verdict}\n", c.name, c.checked, c.violations, c.worst);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constrained_networks_pass_the_suite() {
        for kind in [ArchKind::Isnn1, ArchKind::Isnn2] {
            let r = constraint_suite(kind, 1000, 3, false).unwrap();
            assert!(r.passed(), "{}", format_reports(std::slice::from_ref(&r)));
            assert!(r.checks.iter().all(|c| c.checked == 2000));
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        for kind in [ArchKind::Isnn1, ArchKind::Isnn2] {
            let r = constraint_suite(kind, 40, 3, true).unwrap();
            assert!(!r.passed());
            assert!(r.checks[..3].iter().any(|c| c.violations > 0));
        }
    }

    #[test]
    fn derivatives_agree() {
        for kind in [ArchKind::Isnn1, ArchKind::Isnn2, ArchKind::Ffnn] {
            let r = derivative_suite(kind, 100, 1).unwrap();
            assert!(r.passed(), "{}", format_reports(std::slice::from_ref(&r)));
        }
    }

    #[test]
    fn fixed_network_suite_counts_trials() {
        let net = new_params(&ArchSpec::isnn2_uniform([1, 2, 1, 1], 4, 3), 2, Init::Glorot).unwrap().effective();
        let r = network_suite(&net, 25, 0).unwrap();
        assert!(r.passed());
        assert!(r.checks.iter().all(|c| c.checked == 25));
    }

    #[test]
    fn unconstrained_baseline_has_no_structural_checks() {
        let r = constraint_suite(ArchKind::Ffnn, 10, 0, false).unwrap();
        assert!(r.checks.iter().all(|c| c.checked == 0));
        let table = format_reports(&[r]);
        assert!(table.lines().count() == 11 && table.contains("ffnn"));
    }
}
