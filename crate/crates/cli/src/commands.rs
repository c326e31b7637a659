//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use isnn::autodiff::bench::{bench_derivatives, sweep_specs, write_bench_csv};
use isnn::cmaes::{invert_design, CmaConfig};
use isnn::gate::{prune, train_gated};
use isnn::isnn::{new_params, ArchKind, ArchSpec, Init};
use isnn::mech::{
    default_features, gen_blatzko_dataset, gen_fixed_dataset, init_potential, linspace, potential_spec,
    relative_stress_rmse, train_potential, AnalyticPotential, MaterialDataset, NnPotential,
};
use isnn::train::{train_regression, ToyDataset, ToyFunction, TrainConfig};
use isnn::verify::{constraint_suite, derivative_suite, format_reports};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, pick, require};
use crate::data::{self, Dataset, OUTPUT_FORMAT_VERSION};
use crate::{CmdResult, Failure};

/// Range of the shear modulus grid.
pub const MU_RANGE: (f64, f64) = (1.0, 7.0);
/// Range of the compressibility exponent grid.
pub const BETA_RANGE: (f64, f64) = (0.125, 2.0);
/// Fiber direction of the transversely isotropic datasets.
pub const FIBER: [f64; 3] = [1.0, 0.0, 0.0];

fn parse_arch(s: &str) -> Result<ArchKind, String> {
    s.parse().map_err(|e: isnn::Error| e.to_string())
}

fn arch_from(flag: Option<ArchKind>, file: Option<String>) -> Result<Option<ArchKind>, Failure> {
    match (flag, file) {
        (Some(a), _) => Ok(Some(a)),
        (None, Some(s)) => parse_arch(&s).map(Some).map_err(Failure::Config),
        (None, None) => Ok(None),
    }
}

/// Runs `f` for every seed on a pool of `jobs` workers, keeping seed order.
fn fan_out<T: Send>(jobs: usize, seeds: &[u64], f: impl Fn(u64) -> Result<T, Failure> + Sync) -> Result<Vec<T>, Failure> {
    if jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    ToyF,
    ToyG,
    Blatzko,
    PolyTi,
    NonpolyTi,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// which dataset to generate
    #[arg(value_enum)]
    kind: DataKind,
    /// JSON config; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// rows of toy data, or deformation states of a fixed potential
    #[arg(long)]
    n: Option<usize>,
    /// deformation states per design point (Blatz-Ko)
    #[arg(long)]
    nf: Option<usize>,
    /// lower bound of the toy input box
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    /// upper bound of the toy input box
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    /// half-width of the deformation gradient box around the identity
    #[arg(long)]
    delta: Option<f64>,
    /// number of shear modulus grid points
    #[arg(long)]
    mu_grid: Option<usize>,
    /// number of compressibility grid points
    #[arg(long)]
    beta_grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// output CSV; the metadata sidecar goes next to it with a .json extension
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gen(a: GenArgs) -> CmdResult {
    let file: config::GenFile = config::load(a.config.as_deref())?;
    let out = require(pick(a.out, file.out), "out")?;
    if out.extension().is_some_and(|e| e == "json") {
        return Err(Failure::Config("--out must not end in .json; that name is used for the metadata".into()));
    }
    let seed = pick(a.seed, file.seed).unwrap_or(0);
    let delta = pick(a.delta, file.delta).unwrap_or(0.2);
    let rows = match a.kind {
        DataKind::ToyF | DataKind::ToyG => {
            let func = if a.kind == DataKind::ToyF { ToyFunction::ToyF } else { ToyFunction::ToyG };
            let n = pick(a.n, file.n).unwrap_or(500);
            let (lo, hi) = (pick(a.lo, file.lo).unwrap_or(0.0), pick(a.hi, file.hi).unwrap_or(4.0));
            if !(lo < hi) || n == 0 {
                return Err(Failure::Config("need --n ≥ 1 and --lo < --hi".into()));
            }
            let d = ToyDataset::generate(func, n, lo, hi, seed)?;
            data::save_toy(&out, &d, func)?;
            d.len()
        }
        DataKind::Blatzko => {
            let nf = pick(a.nf, file.nf).unwrap_or(500);
            let mu = linspace(MU_RANGE.0, MU_RANGE.1, pick(a.mu_grid, file.mu_grid).unwrap_or(7));
            let beta = linspace(BETA_RANGE.0, BETA_RANGE.1, pick(a.beta_grid, file.beta_grid).unwrap_or(7));
            let d = gen_blatzko_dataset(nf, &mu, &beta, delta, seed)?;
            data::save_material(&out, &d)?;
            d.len()
        }
        DataKind::PolyTi | DataKind::NonpolyTi => {
            let pot = if a.kind == DataKind::PolyTi { AnalyticPotential::POLY_TI } else { AnalyticPotential::NONPOLY_TI };
            let d = gen_fixed_dataset(pot, pick(a.n, file.n).unwrap_or(1000), delta, seed, Some(FIBER))?;
            data::save_material(&out, &d)?;
            d.len()
        }
    };
    println!("wrote {rows} rows to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// isnn1, isnn2 or ffnn
    #[arg(long, value_parser = parse_arch)]
    arch: Option<ArchKind>,
    /// training CSV (toy or material)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// held-out CSV of the same kind
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// number of initializations; seeds 0..N
    #[arg(long)]
    seeds: Option<usize>,
    /// layer width of material networks
    #[arg(long)]
    width: Option<usize>,
    /// main-chain layers of material networks
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// parallel training jobs
    #[arg(long, env = "ISNN_JOBS")]
    jobs: Option<usize>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SeedResult {
    seed: u64,
    final_train: f64,
    final_test: Option<f64>,
    /// relative stress RMSE (material data only)
    train_rel_rmse: Option<f64>,
    test_rel_rmse: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    format_version: u32,
    arch: ArchKind,
    n_params: usize,
    epochs: usize,
    lr: f64,
    runs: Vec<SeedResult>,
    train_mean: f64,
    train_std: f64,
    test_mean: Option<f64>,
    test_std: Option<f64>,
}

pub fn train(a: TrainArgs) -> CmdResult {
    let file: config::TrainFile = config::load(a.config.as_deref())?;
    let arch = require(arch_from(a.arch, file.arch)?, "arch")?;
    let dataset = require(pick(a.dataset, file.dataset), "dataset")?;
    let out = require(pick(a.out, file.out), "out")?;
    let cfg = TrainConfig {
        epochs: require(pick(a.epochs, file.epochs), "epochs")?,
        lr: pick(a.lr, file.lr).unwrap_or(1e-3),
        seed: 0,
        log_every: pick(a.log_every, file.log_every).unwrap_or(100),
    };
    cfg.validate()?;
    let n_seeds = pick(a.seeds, file.seeds).unwrap_or(1);
    if n_seeds == 0 {
        return Err(Failure::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();
    let jobs = pick(a.jobs, file.jobs).unwrap_or(1);
    let width = pick(a.width, file.width).unwrap_or(8);
    let layers = pick(a.layers, file.layers).unwrap_or(3);

    let train_set = data::load_dataset(&dataset)?;
    let test_path = pick(a.test, file.test);
    let test_set = test_path.as_deref().map(data::load_dataset).transpose()?;
    let model_path = |s: u64| out.join(format!("model_seed{s}.json"));
    let history_path = |s: u64| out.join(format!("history_seed{s}.csv"));

    let (n_params, runs) = match (&train_set, &test_set) {
        (Dataset::Toy(d), test) => {
            let test = match test {
                Some(Dataset::Toy(t)) => Some(t),
                Some(Dataset::Material(_)) => return Err(Failure::Config("test set kind differs from the training set".into())),
                None => None,
            };
            let spec = ArchSpec::toy(arch);
            let runs = fan_out(jobs, &seeds, |s| {
                let params = new_params(&spec, s, Init::Glorot)?;
                let (trained, hist) = train_regression(&params, d, &TrainConfig { seed: s, ..cfg.clone() }, test)?;
                data::write_text(&model_path(s), &trained.to_json()?)?;
                data::write_with(&history_path(s), |b| hist.write_csv(b))?;
                let last = hist.last().expect("at least one epoch");
                Ok((trained.n_params(), SeedResult {
                    seed: s,
                    final_train: last.train,
                    final_test: last.test,
                    train_rel_rmse: None,
                    test_rel_rmse: None,
                }))
            })?;
            (runs[0].0, runs.into_iter().map(|r| r.1).collect::<Vec<_>>())
        }
        (Dataset::Material(d), test) => {
            let test = match test {
                Some(Dataset::Material(t)) => Some(t),
                Some(Dataset::Toy(_)) => return Err(Failure::Config("test set kind differs from the training set".into())),
                None => None,
            };
            let spec = potential_spec(arch, d, width, layers);
            let runs = fan_out(jobs, &seeds, |s| {
                let pot = init_potential(&spec, default_features(d), d, s, true)?;
                let (trained, hist) = train_potential(&pot, d, &TrainConfig { seed: s, ..cfg.clone() })?;
                data::write_text(&model_path(s), &trained.to_json()?)?;
                data::write_with(&history_path(s), |b| hist.write_csv(b))?;
                let test_rel = test.map(|t| relative_stress_rmse(&trained, t)).transpose()?;
                Ok((trained.model.n_params(), SeedResult {
                    seed: s,
                    final_train: hist.last().expect("at least one epoch").train,
                    final_test: None,
                    train_rel_rmse: Some(relative_stress_rmse(&trained, d)?),
                    test_rel_rmse: test_rel,
                }))
            })?;
            (runs[0].0, runs.into_iter().map(|r| r.1).collect::<Vec<_>>())
        }
    };

    let train_losses: Vec<f64> = runs.iter().map(|r| r.final_train).collect();
    let test_losses: Vec<f64> = runs.iter().filter_map(|r| r.final_test.or(r.test_rel_rmse)).collect();
    let (train_mean, train_std) = mean_std(&train_losses);
    let test_stats = (!test_losses.is_empty()).then(|| mean_std(&test_losses));
    let summary = TrainSummary {
        format_version: OUTPUT_FORMAT_VERSION,
        arch,
        n_params,
        epochs: cfg.epochs,
        lr: cfg.lr,
        runs,
        train_mean,
        train_std,
        test_mean: test_stats.map(|s| s.0),
        test_std: test_stats.map(|s| s.1),
    };
    data::write_json(&out.join("summary.json"), &summary)?;
    print!("{:?}: {} seeds, final train loss {train_mean:.4e} ± {train_std:.2e}", arch, seeds.len());
    if let Some((m, s)) = test_stats {
        print!(", test {m:.4e} ± {s:.2e}");
    }
    println!();
    Ok(())
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// isnn1, isnn2 or ffnn; all three when omitted
    #[arg(long, value_parser = parse_arch)]
    arch: Option<ArchKind>,
    /// random initializations for the constraint checks
    #[arg(long)]
    trials: Option<usize>,
    /// random configurations for the derivative checks
    #[arg(long)]
    deriv_trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// negate a non-negative weight tensor before checking
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

pub fn verify(a: VerifyArgs) -> CmdResult {
    let file: config::VerifyFile = config::load(a.config.as_deref())?;
    let archs = match arch_from(a.arch, file.arch)? {
        Some(k) => vec![k],
        None => vec![ArchKind::Isnn1, ArchKind::Isnn2, ArchKind::Ffnn],
    };
    let trials = pick(a.trials, file.trials).unwrap_or(10_000);
    let deriv_trials = pick(a.deriv_trials, file.deriv_trials).unwrap_or(100);
    let seed = pick(a.seed, file.seed).unwrap_or(0);
    let mut reports = Vec::new();
    for &k in &archs {
        reports.push(constraint_suite(k, trials, seed, a.inject_sign_flip)?);
        reports.push(derivative_suite(k, deriv_trials, seed)?);
    }
    print!("{}", format_reports(&reports));
    let bad: usize = reports.iter().map(|r| r.violations()).sum();
    if bad > 0 {
        return Err(Failure::Check(format!("{bad} property violations")));
    }
    println!("all properties hold");
    Ok(())
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// comma-separated layer widths to sweep
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// timed evaluations per initialization
    #[arg(long)]
    repeats: Option<usize>,
    /// initializations per size
    #[arg(long)]
    seeds: Option<usize>,
    /// output CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let file: config::BenchFile = config::load(a.config.as_deref())?;
    let sizes = pick(a.sizes, file.sizes).unwrap_or_else(|| vec![2, 4, 8, 16, 32]);
    let repeats = pick(a.repeats, file.repeats).unwrap_or(50);
    let seeds = pick(a.seeds, file.seeds).unwrap_or(5);
    let out = require(pick(a.out, file.out), "out")?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Failure::Config("--sizes needs positive widths".into()));
    }
    let rows = bench_derivatives(&sweep_specs(&sizes), seeds, repeats)?;
    data::write_with(&out, |b| write_bench_csv(&rows, b))?;
    println!("{:>8} {:>12} {:>12} {:>7}", "params", "manual ns", "tape ns", "ratio");
    for r in &rows {
        println!("{:>8} {:>12.0} {:>12.0} {:>7.2}", r.n_params, r.md_ns, r.ad_ns, r.ratio);
    }
    Ok(())
}

// ---------------------------------------------------------------- gate

#[derive(Debug, Args)]
pub struct GateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// material dataset CSV
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct GateSummary {
    format_version: u32,
    epochs: usize,
    seed: u64,
    final_gate: f64,
    g: f64,
    sigmoid_g: f64,
    final_loss: f64,
    kept_branch: &'static str,
}

pub fn gate(a: GateArgs) -> CmdResult {
    let file: config::GateFile = config::load(a.config.as_deref())?;
    let dataset = require(pick(a.dataset, file.dataset), "dataset")?;
    let out = require(pick(a.out, file.out), "out")?;
    let mut cfg = file.training.unwrap_or_default();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = data::load_material(&dataset)?;
    let (model, hist) = train_gated(&data, &cfg)?;
    data::write_with(&out.join("gate_history.csv"), |b| hist.write_csv(b))?;
    data::write_text(&out.join("gated_model.json"), &model.to_json()?)?;
    let pruned = prune(&model);
    data::write_text(&out.join("pruned_model.json"), &pruned.to_json()?)?;
    let gate = model.gate.gate();
    let summary = GateSummary {
        format_version: OUTPUT_FORMAT_VERSION,
        epochs: cfg.epochs,
        seed: cfg.seed,
        final_gate: gate,
        g: model.gate.g,
        sigmoid_g: model.gate.sigmoid(),
        final_loss: hist.rows.last().map_or(f64::NAN, |r| r.loss),
        kept_branch: if gate == 0.0 { "polyconvex" } else { "free" },
    };
    data::write_json(&out.join("summary.json"), &summary)?;
    println!("final gate {gate} (sigmoid(g) = {:.4}), kept the {} branch", summary.sigmoid_g, summary.kept_branch);
    Ok(())
}

// ---------------------------------------------------------------- invert

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// trained potential JSON
    #[arg(long)]
    model: Option<PathBuf>,
    /// material dataset whose stresses are the targets
    #[arg(long)]
    targets: Option<PathBuf>,
    /// per-parameter bounds as `lo,hi;lo,hi`
    #[arg(long, allow_hyphen_values = true)]
    bounds: Option<String>,
    /// number of searches; seeds 0..N
    #[arg(long)]
    seeds: Option<usize>,
    /// initial step as a fraction of each bound range
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long, env = "ISNN_JOBS")]
    jobs: Option<usize>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_bounds(s: &str) -> Result<Vec<[f64; 2]>, Failure> {
    s.split(';')
        .map(|pair| {
            let v: Vec<f64> = pair
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Failure::Config(format!("bad bound `{pair}`: {e}")))?;
            match v[..] {
                [lo, hi] => Ok([lo, hi]),
                _ => Err(Failure::Config(format!("bound `{pair}` needs exactly two numbers"))),
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct InversionResult {
    seed: u64,
    design: Vec<f64>,
    objective: f64,
    converged: bool,
    /// relative error per parameter when all targets share one design
    relative_error: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct InvertSummary {
    format_version: u32,
    design_names: Vec<String>,
    truth: Option<Vec<f64>>,
    runs: Vec<InversionResult>,
}

/// The design shared by every target row, if there is one.
fn common_design(t: &MaterialDataset) -> Option<Vec<f64>> {
    let first = &t.rows.first()?.design;
    t.rows.iter().all(|r| &r.design == first).then(|| first.clone())
}

pub fn invert(a: InvertArgs) -> CmdResult {
    let file: config::InvertFile = config::load(a.config.as_deref())?;
    let model_path = require(pick(a.model, file.model), "model")?;
    let targets_path = require(pick(a.targets, file.targets), "targets")?;
    let out = require(pick(a.out, file.out), "out")?;
    let bounds = match a.bounds {
        Some(s) => parse_bounds(&s)?,
        None => require(file.bounds, "bounds")?,
    };
    let n_seeds = pick(a.seeds, file.seeds).unwrap_or(10);
    let jobs = pick(a.jobs, file.jobs).unwrap_or(1);
    let sigma0 = pick(a.sigma0, file.sigma0).unwrap_or(0.3);
    let max_evals = pick(a.max_evals, file.max_evals).unwrap_or(3000);
    if n_seeds == 0 {
        return Err(Failure::Config("--seeds must be at least 1".into()));
    }

    let pot = NnPotential::from_json(&data::read_text(&model_path)?).map_err(|e| io_at(&model_path, e))?;
    let targets = data::load_material(&targets_path)?;
    let truth = common_design(&targets);
    let lower: Vec<f64> = bounds.iter().map(|b| b[0]).collect();
    let upper: Vec<f64> = bounds.iter().map(|b| b[1]).collect();
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();
    let runs = fan_out(jobs, &seeds, |s| {
        let cfg = CmaConfig::new(lower.clone(), upper.clone(), sigma0, max_evals, s);
        let inv = invert_design(&pot, &targets, &cfg, None)?;
        data::write_with(&out.join(format!("trajectory_seed{s}.csv")), |b| inv.write_csv(b))?;
        let relative_error =
            truth.as_ref().map(|t| inv.design.iter().zip(t).map(|(d, t)| ((d - t) / t).abs()).collect::<Vec<_>>());
        Ok(InversionResult { seed: s, design: inv.design, objective: inv.objective, converged: inv.converged, relative_error })
    })?;
    for r in &runs {
        let d: Vec<String> = r.design.iter().map(|v| format!("{v:.4}")).collect();
        println!("seed {}: design ({}) objective {:.3e}", r.seed, d.join(", "), r.objective);
    }
    let summary =
        InvertSummary { format_version: OUTPUT_FORMAT_VERSION, design_names: pot.design_names.clone(), truth, runs };
    data::write_json(&out.join("summary.json"), &summary)
}

fn io_at(path: &Path, e: isnn::Error) -> Failure {
    match e {
        isnn::Error::InvalidSpec(_) | isnn::Error::InvalidConfig(_) => Failure::Config(format!("{}: {e}", path.display())),
        _ => Failure::Io(format!("{}: {e}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_parse() {
        assert_eq!(parse_bounds("1,7;0.125,2").unwrap(), vec![[1.0, 7.0], [0.125, 2.0]]);
        assert!(parse_bounds("1,7;2").is_err());
        assert!(parse_bounds("a,b").is_err());
    }

    #[test]
    fn gate_defaults_validate() {
        isnn::gate::GateConfig::default().validate().unwrap();
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
