//! Timing of manual derivatives against tape derivatives.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{constant_weights, record_forward, Tape};
use crate::deriv::{eval, Order};
use crate::error::{Error, Result};
use crate::isnn::{new_params, ArchSpec, Init};
use crate::tensor::Mat;

/// One row of the timing table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_params: usize,
    pub md_ns: f64,
    pub ad_ns: f64,
    pub ratio: f64,
}

/// ISNN-2 specs on the isotropic invariant layout (`x = J`, `y = (I1, I2)`,
/// one monotone and one free design input) with three main-chain layers.
pub fn sweep_specs(widths: &[usize]) -> Vec<ArchSpec> {
    widths.iter().map(|&w| ArchSpec::isnn2_uniform([1, 2, 1, 1], w, 3)).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Value, gradient and Hessian through the tape.
pub fn tape_derivatives(net: &crate::isnn::Network, x: &[f64]) -> (f64, Vec<f64>, Mat) {
    let mut tape = Tape::new();
    let w = constant_weights(&mut tape, net);
    let inp = tape.leaves(x);
    let out = record_forward(&mut tape, &net.layout, &w, &inp);
    let grad = tape.backward(out).wrt_all(&inp);
    let grads = tape.grad_recorded(out, &inp);
    let n = x.len();
    let mut h = Mat::zeros(n, n);
    for (i, &g) in grads.iter().enumerate() {
        let second = tape.backward(g);
        for (j, &l) in inp.iter().enumerate() {
            h[(i, j)] = second.wrt(l);
        }
    }
    (out.value, grad, h)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Median (over `seeds` initializations) of the mean time per derivative
/// evaluation, `repeats` evaluations per seed. Both sides are checked to
/// agree before they are timed.
pub fn bench_derivatives(specs: &[ArchSpec], seeds: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if seeds == 0 || repeats == 0 {
        return Err(Error::InvalidConfig("seeds and repeats must be positive".into()));
    }
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut md_times = Vec::with_capacity(seeds);
        let mut ad_times = Vec::with_capacity(seeds);
        let mut n_params = 0;
        for seed in 0..seeds as u64 {
            let params = new_params(spec, seed, Init::Glorot)?;
            n_params = params.n_params();
            let net = params.effective();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let x: Vec<f64> = (0..net.n_inputs()).map(|_| rng.gen_range(0.5..2.0)).collect();

            let md = eval(&net, &x, Order::Second)?;
            let (value, grad, hess) = tape_derivatives(&net, &x);
            let agree = rel_close(md.value, value, 1e-12)
                && md.grad().iter().zip(&grad).all(|(&a, &b)| rel_close(a, b, 1e-10))
                && md.hess.as_slice().iter().zip(hess.as_slice()).all(|(&a, &b)| rel_close(a, b, 1e-8));
            if !agree {
                return Err(Error::Data(format!("manual and tape derivatives disagree (seed {seed})")));
            }

            let start = Instant::now();
            for _ in 0..repeats {
                std::hint::black_box(eval(&net, std::hint::black_box(&x), Order::Second)?);
            }
            md_times.push(start.elapsed().as_nanos() as f64 / repeats as f64);

            let start = Instant::now();
            for _ in 0..repeats {
                std::hint::black_box(tape_derivatives(&net, std::hint::black_box(&x)));
            }
            ad_times.push(start.elapsed().as_nanos() as f64 / repeats as f64);
        }
        let md_ns = median(md_times);
        let ad_ns = median(ad_times);
        rows.push(BenchRow { n_params, md_ns, ad_ns, ratio: ad_ns / md_ns });
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_params", "md_ns", "ad_ns", "ratio"])?;
    for r in rows {
        w.write_record([r.n_params.to_string(), r.md_ns.to_string(), r.ad_ns.to_string(), r.ratio.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
