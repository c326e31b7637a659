//! Acceptance suite. Runs every criterion in order on one thread, prints one
//! `PASS`/`FAIL` line per criterion and exits nonzero if any failed.
//!
//! `ISNN_FULL_SCALE=1` runs the constraint suite at 10⁵ initializations.
//! `ISNN_CRITERIA=1,4` restricts the run to the listed criteria.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use isnn::autodiff::bench::{bench_derivatives, sweep_specs};
use isnn::cmaes::{invert_design, CmaConfig};
use isnn::gate::{prune, train_gated, GateConfig};
use isnn::isnn::{new_params, ArchKind, ArchSpec, Init};
use isnn::mech::{
    default_features, gen_blatzko_dataset, gen_fixed_dataset, init_potential, linspace, potential_spec, relative_stress_rmse,
    sample_defgrads, train_potential, AnalyticPotential, Kinematics, NnPotential,
};
use isnn::tensor::Tensor3;
use isnn::train::{train_regression, ToyDataset, ToyFunction, TrainConfig};
use isnn::verify::{constraint_suite, derivative_suite, format_reports, network_suite};

const ARCHS: [ArchKind; 3] = [ArchKind::Ffnn, ArchKind::Isnn1, ArchKind::Isnn2];

// criterion 1
const CONSTRAINT_TRIALS: usize = 10_000;
const CONSTRAINT_TRIALS_FULL: usize = 100_000;
const CONSTRAINT_BUDGET_S: f64 = 600.0;
// criterion 2
const DERIVATIVE_TRIALS: usize = 100;
// criterion 3
const TOY_SEEDS: u64 = 10;
const TOY_EPOCHS: usize = 20_000;
// criterion 4
const REFERENCE_STRESS_TOL: f64 = 1e-9;
const CHAIN_RULE_TOL: f64 = 1e-6;
const CHAIN_RULE_STATES: usize = 100;
const C_SPACE_STEP: f64 = 1e-5;
// criterion 5
const POTENTIAL_EPOCHS: usize = 20_000;
const POTENTIAL_WIDTH: usize = 8;
const POTENTIAL_LAYERS: usize = 3;
const HELD_OUT_RMSE_TOL: f64 = 0.05;
const TRAINED_CONSTRAINT_TRIALS: usize = 1_000;
// criterion 6
const INVERSION_SEEDS: u64 = 10;
const INVERSION_REL_TOL: f64 = 0.10;
const INVERSION_MIN_HITS: usize = 8;
// criterion 7
const GATE_SEEDS: u64 = 5;
const GATE_EPOCHS: usize = 20_000;
const GATE_MIN_HITS: usize = 4;
// criterion 8
const BENCH_WIDTHS: [usize; 5] = [2, 4, 8, 16, 32];
const BENCH_SEEDS: usize = 5;
const BENCH_REPEATS: usize = 50;

/// Result of one criterion: whether it passed and a one-line summary.
struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn c1_constraints() -> Verdict {
    let full = std::env::var("ISNN_FULL_SCALE").is_ok_and(|v| v == "1");
    let trials = if full { CONSTRAINT_TRIALS_FULL } else { CONSTRAINT_TRIALS };
    let start = Instant::now();
    let reports: Vec<_> =
        [ArchKind::Isnn1, ArchKind::Isnn2].iter().map(|&k| constraint_suite(k, trials, 2024, false).unwrap()).collect();
    let secs = start.elapsed().as_secs_f64();
    eprint!("{}", format_reports(&reports));
    let violations: usize = reports.iter().map(|r| r.violations()).sum();
    let passed = reports.iter().all(|r| r.passed()) && (full || secs < CONSTRAINT_BUDGET_S);
    verdict(passed, format!("{trials} initializations per spec, {violations} violations, {secs:.0} s (budget {CONSTRAINT_BUDGET_S} s)"))
}

fn c2_derivatives() -> Verdict {
    let reports: Vec<_> = ARCHS.iter().map(|&k| derivative_suite(k, DERIVATIVE_TRIALS, 7).unwrap()).collect();
    eprint!("{}", format_reports(&reports));
    let violations: usize = reports.iter().map(|r| r.violations()).sum();
    let passed = reports.iter().all(|r| r.passed());
    verdict(
        passed,
        format!(
            "{DERIVATIVE_TRIALS} configurations per spec and arch, {violations} disagreements \
             (fd grad max(1e-6, 1e-4 rel), fd hess max(1e-4, 1e-3 rel), tape 1e-10 / 1e-8 rel)"
        ),
    )
}

fn mean_test_mse(kind: ArchKind, train: &ToyDataset, test: &ToyDataset) -> f64 {
    let spec = ArchSpec::toy(kind);
    let total: f64 = (0..TOY_SEEDS)
        .map(|seed| {
            let params = new_params(&spec, seed, Init::Glorot).unwrap();
            let cfg = TrainConfig { epochs: TOY_EPOCHS, lr: 1e-3, seed, log_every: TOY_EPOCHS };
            let (_, hist) = train_regression(&params, train, &cfg, Some(test)).unwrap();
            hist.last().and_then(|r| r.test).unwrap()
        })
        .sum();
    total / TOY_SEEDS as f64
}

fn c3_toy_study() -> Verdict {
    let mut passed = true;
    let mut parts = Vec::new();
    for func in [ToyFunction::ToyF, ToyFunction::ToyG] {
        let train = ToyDataset::generate(func, 500, 0.0, 4.0, 1).unwrap();
        let test = ToyDataset::generate(func, 5000, 0.0, 6.0, 2).unwrap();
        let [ffnn, isnn1, isnn2] = ARCHS.map(|k| mean_test_mse(k, &train, &test));
        passed &= isnn1 <= ffnn && isnn2 <= ffnn;
        parts.push(format!("{func:?}: ffnn {ffnn:.3e} isnn1 {isnn1:.3e} isnn2 {isnn2:.3e}"));
    }
    verdict(passed, format!("mean test MSE over {TOY_SEEDS} seeds at {TOY_EPOCHS} epochs; {}", parts.join("; ")))
}

/// `S` from central differences of `Ψ(C)` under symmetric perturbations of
/// `C`: `S_ij = dΨ/dh` off the diagonal and `S_ii = 2 dΨ/dh` on it.
fn c_space_stress(energy: &dyn Fn(&Tensor3) -> f64, c: &Tensor3) -> Tensor3 {
    let mut s = Tensor3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let shifted = |h: f64| {
                let mut m = *c;
                m.0[i][j] += h;
                if i != j {
                    m.0[j][i] += h;
                }
                energy(&m)
            };
            let d = (shifted(C_SPACE_STEP) - shifted(-C_SPACE_STEP)) / (2.0 * C_SPACE_STEP);
            let v = if i == j { 2.0 * d } else { d };
            s.0[i][j] = v;
            s.0[j][i] = v;
        }
    }
    s
}

/// Largest `|S_fd − S| / max(1, ‖S‖∞)` over sampled states.
fn chain_rule_error(
    energy: &dyn Fn(&Tensor3) -> f64,
    stress: &dyn Fn(&Tensor3) -> Tensor3,
    states: &[Tensor3],
) -> f64 {
    states
        .iter()
        .map(|f| {
            let c = f.right_cauchy_green();
            let s = stress(&c);
            let fd = c_space_stress(energy, &c);
            let diff = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| (fd.0[i][j] - s.0[i][j]).abs());
            diff.fold(0.0, f64::max) / s.max_abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

fn c4_mechanics(nn: &NnPotential) -> Verdict {
    let fiber = [1.0, 1.0, 1.0].map(|v: f64| v / 3f64.sqrt());
    let states = sample_defgrads(CHAIN_RULE_STATES, 0.2, 11).unwrap();
    let analytic = [
        AnalyticPotential::BlatzKo { mu: 4.0, beta: 1.0 },
        AnalyticPotential::NeoHookean { c1: 1.5, c2: 2.0 },
        AnalyticPotential::POLY_TI,
        AnalyticPotential::NONPOLY_TI,
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for pot in analytic {
        let n = pot.is_anisotropic().then_some(&fiber);
        let kin = |c: &Tensor3| Kinematics::from_c(c, n).unwrap();
        let reference = pot.stress(&kin(&Tensor3::identity())).max_abs();
        let chain = chain_rule_error(&|c| pot.energy(&kin(c)), &|c| pot.stress(&kin(c)), &states);
        passed &= reference <= REFERENCE_STRESS_TOL && chain <= CHAIN_RULE_TOL;
        parts.push(format!("{} |S(I)| {reference:.1e} fd {chain:.1e}", pot.name()));
    }

    let ev = nn.evaluator();
    let kin = |c: &Tensor3| Kinematics::from_c(c, nn.direction.as_ref()).unwrap();
    let designs: Vec<[f64; 2]> =
        linspace(1.0, 7.0, 4).into_iter().flat_map(|mu| linspace(0.125, 2.0, 4).into_iter().map(move |b| [mu, b])).collect();
    let reference =
        designs.iter().map(|d| ev.stress(&kin(&Tensor3::identity()), d).unwrap().max_abs()).fold(0.0, f64::max);
    let design = [4.0, 1.0];
    let chain =
        chain_rule_error(&|c| ev.energy(&kin(c), &design).unwrap(), &|c| ev.stress(&kin(c), &design).unwrap(), &states);
    passed &= reference <= REFERENCE_STRESS_TOL && chain <= CHAIN_RULE_TOL;
    parts.push(format!("nn |S(I)| {reference:.1e} fd {chain:.1e}"));
    verdict(
        passed,
        format!("tol |S(I)| {REFERENCE_STRESS_TOL:.0e}, fd {CHAIN_RULE_TOL:.0e} rel to max(1, |S|); {}", parts.join("; ")),
    )
}

/// Blatz-Ko potential trained on the 7×7 design grid.
fn trained_blatzko() -> (NnPotential, f64) {
    let data = gen_blatzko_dataset(200, &linspace(1.0, 7.0, 7), &linspace(0.125, 2.0, 7), 0.2, 1).unwrap();
    let spec = potential_spec(ArchKind::Isnn2, &data, POTENTIAL_WIDTH, POTENTIAL_LAYERS);
    let pot = init_potential(&spec, default_features(&data), &data, 0, true).unwrap();
    let cfg = TrainConfig { epochs: POTENTIAL_EPOCHS, lr: 1e-3, seed: 0, log_every: POTENTIAL_EPOCHS };
    let start = Instant::now();
    let (trained, _) = train_potential(&pot, &data, &cfg).unwrap();
    (trained, start.elapsed().as_secs_f64())
}

fn c5_potential(pot: &NnPotential, train_secs: f64) -> Verdict {
    // Off-grid designs: midpoints between the training grid nodes.
    let held_out = gen_blatzko_dataset(20, &linspace(1.5, 6.5, 6), &linspace(0.28125, 1.84375, 6), 0.2, 99).unwrap();
    let rmse = relative_stress_rmse(pot, &held_out).unwrap();
    let report = network_suite(&pot.model.effective(), TRAINED_CONSTRAINT_TRIALS, 5).unwrap();
    eprint!("{}", format_reports(std::slice::from_ref(&report)));
    let passed = rmse <= HELD_OUT_RMSE_TOL && report.passed();
    verdict(
        passed,
        format!(
            "held-out relative RMSE {:.2}% (tol {:.0}%), {} constraint violations on the trained net, trained in {train_secs:.0} s",
            100.0 * rmse,
            100.0 * HELD_OUT_RMSE_TOL,
            report.violations()
        ),
    )
}

fn invert(pot: &NnPotential, truth: [f64; 2], upper_mu: f64) -> Vec<[f64; 2]> {
    let targets = gen_blatzko_dataset(50, &[truth[0]], &[truth[1]], 0.2, 7).unwrap();
    (0..INVERSION_SEEDS)
        .map(|seed| {
            let cfg = CmaConfig::new(vec![1.0, 0.125], vec![upper_mu, 2.0], 0.3, 3000, seed);
            let inv = invert_design(pot, &targets, &cfg, None).unwrap();
            [inv.design[0], inv.design[1]]
        })
        .collect()
}

fn rel_error(d: &[f64; 2], truth: &[f64; 2]) -> f64 {
    d.iter().zip(truth).map(|(a, b)| (a - b).abs() / b.abs()).fold(0.0, f64::max)
}

fn c6_inversion(pot: &NnPotential) -> Verdict {
    let truth = [4.0, 1.0];
    let found = invert(pot, truth, 7.0);
    let errors: Vec<f64> = found.iter().map(|d| rel_error(d, &truth)).collect();
    let hits = errors.iter().filter(|&&e| e <= INVERSION_REL_TOL).count();

    let far = [8.0, 1.0];
    let extrapolated = invert(pot, far, 10.0);
    for (seed, d) in extrapolated.iter().enumerate() {
        eprintln!("extrapolation mu=8 seed {seed}: design ({:.4}, {:.4}) rel error {:.3}", d[0], d[1], rel_error(d, &far));
    }
    let worst = errors.iter().fold(0.0, |m: f64, &e| m.max(e));
    verdict(
        hits >= INVERSION_MIN_HITS,
        format!(
            "{hits}/{INVERSION_SEEDS} seeds within {:.0}% of (4, 1) (need {INVERSION_MIN_HITS}), worst {:.2}%; mu=8 logged above",
            100.0 * INVERSION_REL_TOL,
            100.0 * worst
        ),
    )
}

fn c7_gating() -> Verdict {
    let mut parts = Vec::new();
    let mut passed = true;
    let mut exact = true;
    for (pot, want) in [(AnalyticPotential::POLY_TI, 0.0), (AnalyticPotential::NONPOLY_TI, 1.0)] {
        let mut hits = 0;
        let mut gates = Vec::new();
        for seed in 0..GATE_SEEDS {
            let data = gen_fixed_dataset(pot, 1000, 0.2, seed, Some([1.0, 0.0, 0.0])).unwrap();
            let cfg = GateConfig { epochs: GATE_EPOCHS, seed, log_every: GATE_EPOCHS, ..GateConfig::default() };
            let (model, _) = train_gated(&data, &cfg).unwrap();
            let gate = model.gate.gate();
            hits += usize::from(gate == want);
            gates.push(gate);
            let pruned = prune(&model);
            for row in &data.rows {
                let kin = model.kinematics(&row.f).unwrap();
                exact &= model.stress(&kin, &row.design).unwrap() == pruned.stress(&kin, &row.design).unwrap();
                exact &= model.energy(&kin, &row.design).unwrap() == pruned.energy(&kin, &row.design).unwrap();
            }
        }
        passed &= hits >= GATE_MIN_HITS;
        parts.push(format!("{} gate {want} in {hits}/{GATE_SEEDS} {gates:?}", pot.name()));
    }
    verdict(
        passed && exact,
        format!("{} (need {GATE_MIN_HITS}); pruned outputs bit-identical: {exact}", parts.join(", ")),
    )
}

fn c8_bench() -> Verdict {
    let rows = bench_derivatives(&sweep_specs(&BENCH_WIDTHS), BENCH_SEEDS, BENCH_REPEATS).unwrap();
    let ratios: Vec<String> = rows.iter().map(|r| format!("{}:{:.1}", r.n_params, r.ratio)).collect();
    verdict(
        rows.iter().all(|r| r.ratio > 1.0),
        format!("tape/manual time ratio by parameter count {} (need > 1 everywhere)", ratios.join(" ")),
    )
}

fn main() {
    // Plain `cargo test` passes harness flags; listing asks for test names.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let selected: Option<Vec<usize>> =
        std::env::var("ISNN_CRITERIA").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));

    let mut trained: Option<(NnPotential, f64)> = None;
    let potential = |trained: &mut Option<(NnPotential, f64)>| trained.get_or_insert_with(trained_blatzko).clone();

    let names = [
        "constraint suite",
        "derivative correctness",
        "toy-function study",
        "mechanics sanity",
        "polyconvex potential with design inputs",
        "in-range inverse design",
        "gating discovery",
        "manual vs tape benchmark",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| match n {
            1 => c1_constraints(),
            2 => c2_derivatives(),
            3 => c3_toy_study(),
            4 => c4_mechanics(&potential(&mut trained).0),
            5 => {
                let (pot, secs) = potential(&mut trained);
                c5_potential(&pot, secs)
            }
            6 => c6_inversion(&potential(&mut trained).0),
            7 => c7_gating(),
            _ => c8_bench(),
        }));
        let v = outcome.unwrap_or_else(|_| verdict(false, "panicked".into()));
        failed += usize::from(!v.passed);
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {n} {name}: {status} [{:.0} s] {}", start.elapsed().as_secs_f64(), v.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
