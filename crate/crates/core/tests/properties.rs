//! Property tests for invariants that hold for any input.

use isnn::cmaes::{cma_minimize, CmaConfig};
use isnn::gate::GateState;
use isnn::isnn::{new_params, ArchKind, ArchSpec, Init, IsnnParams};
use isnn::mech::{invariants_iso, invariants_transiso, AnalyticPotential, Kinematics};
use isnn::tensor::Tensor3;
use isnn::train::lhs_sample;
use isnn::Error;
use proptest::prelude::*;

/// Rotation about `axis` (need not be unit) by `angle`, by Rodrigues' formula.
fn rotation(axis: [f64; 3], angle: f64) -> Tensor3 {
    let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    let k = axis.map(|v| v / norm);
    let kx = Tensor3([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]]);
    let kk = Tensor3::outer(&k, &k);
    let (s, c) = angle.sin_cos();
    let mut r = Tensor3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            r.0[i][j] = c * id + s * kx.0[i][j] + (1.0 - c) * kk.0[i][j];
        }
    }
    r
}

fn matmul(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    let mut m = Tensor3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m.0[i][j] = (0..3).map(|k| a.0[i][k] * b.0[k][j]).sum();
        }
    }
    m
}

fn defgrad() -> impl Strategy<Value = Tensor3> {
    prop::array::uniform9(-0.25..0.25f64).prop_map(|d| {
        let mut f = Tensor3::from_row_major(&d);
        for i in 0..3 {
            f.0[i][i] += 1.0;
        }
        f
    })
}

fn axis() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.0..1.0f64).prop_filter("nonzero axis", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-2)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn isnn2_toy(seed: u64) -> IsnnParams {
    new_params(&ArchSpec::toy(ArchKind::Isnn2), seed, Init::Glorot).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn isotropic_invariants_are_frame_indifferent(f in defgrad(), ax in axis(), angle in -3.0..3.0f64) {
        let q = rotation(ax, angle);
        let a = invariants_iso(&f).unwrap();
        let b = invariants_iso(&matmul(&q, &f)).unwrap();
        prop_assert!(close(a.i1, b.i1, 1e-12) && close(a.i2, b.i2, 1e-12) && close(a.j, b.j, 1e-12));
    }

    #[test]
    fn fiber_invariants_follow_a_rotated_material(f in defgrad(), ax in axis(), angle in -3.0..3.0f64) {
        // Rotating the reference body and its fiber together changes nothing.
        let q = rotation(ax, angle);
        let n = [0.6, 0.0, 0.8];
        let qn = q.matvec(&n);
        let a = invariants_transiso(&f, &n).unwrap();
        let b = invariants_transiso(&matmul(&f, &q.transpose()), &qn).unwrap();
        prop_assert!(close(a.i4, b.i4, 1e-12) && close(a.i5, b.i5, 1e-12) && close(a.ibar5, b.ibar5, 1e-12));
        let c = f.right_cauchy_green();
        let c2n = matmul(&matmul(&c, &c), &Tensor3::outer(&n, &n));
        prop_assert!(close(a.ibar5, c2n.trace(), 1e-12));
    }

    #[test]
    fn analytic_stresses_are_symmetric(f in defgrad()) {
        let n = [0.0, 0.6, 0.8];
        for pot in [
            AnalyticPotential::BlatzKo { mu: 3.0, beta: 0.5 },
            AnalyticPotential::NeoHookean { c1: 1.0, c2: 2.0 },
            AnalyticPotential::POLY_TI,
            AnalyticPotential::NONPOLY_TI,
        ] {
            let kin = Kinematics::from_f(&f, pot.is_anisotropic().then_some(&n)).unwrap();
            let s = pot.stress(&kin);
            prop_assert!((0..3).all(|i| (0..3).all(|j| s.0[i][j] == s.0[j][i])));
        }
    }

    #[test]
    fn lhs_fills_each_stratum_once(n in 1usize..40, dims in 1usize..5, seed in any::<u64>()) {
        let lo = vec![-1.0; dims];
        let hi = vec![3.0; dims];
        let m = lhs_sample(n, dims, &lo, &hi, seed).unwrap();
        for d in 0..dims {
            let mut strata: Vec<usize> = (0..n).map(|i| ((m[(i, d)] + 1.0) / 4.0 * n as f64).floor() as usize).collect();
            strata.sort_unstable();
            prop_assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn gate_is_binary_and_follows_the_sign_of_g(g in -5.0..5.0f64, gamma in 0.1..10.0f64) {
        let gs = GateState::new(g, gamma).unwrap();
        let gate = gs.gate();
        prop_assert!(gate == 0.0 || gate == 1.0);
        prop_assert_eq!(gate == 1.0, g > 0.0);
    }

    #[test]
    fn isnn2_is_convex_in_x_and_monotone_in_t(
        seed in 0u64..1000,
        base in prop::array::uniform4(-3.0..3.0f64),
        dx in -2.0..2.0f64,
        dt in 0.0..2.0f64,
    ) {
        let net = isnn2_toy(seed).effective();
        let at = |x: f64, t: f64| net.forward(&[x, base[1], t, base[3]]).unwrap();
        let (x, t) = (base[0], base[2]);
        let mid = at(x, t);
        let avg = 0.5 * (at(x - dx, t) + at(x + dx, t));
        prop_assert!(mid <= avg + 1e-9 * avg.abs().max(1.0));
        prop_assert!(at(x, t + dt) >= mid - 1e-10 * mid.abs().max(1.0));
    }

    #[test]
    fn model_json_round_trip_is_exact(seed in 0u64..1000, input in prop::array::uniform4(-3.0..3.0f64)) {
        let params = isnn2_toy(seed);
        let back = IsnnParams::from_json(&params.to_json().unwrap()).unwrap();
        let a = params.effective().forward(&input).unwrap();
        let b = back.effective().forward(&input).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn cma_is_deterministic_and_stays_in_the_box(seed in any::<u64>(), shift in prop::array::uniform2(-0.8..0.8f64)) {
        let cfg = CmaConfig::new(vec![-1.0, -1.0], vec![1.0, 1.0], 0.3, 300, seed);
        let f = |x: &[f64]| (x[0] - shift[0]).powi(2) + (x[1] - shift[1]).powi(2);
        let a = cma_minimize(f, &[0.0, 0.0], &cfg);
        let b = cma_minimize(f, &[0.0, 0.0], &cfg);
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let out = match a {
            Ok(out) => out,
            Err(Error::BudgetExhausted(out)) => *out,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(out.best_x.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(out.history.iter().all(|r| r.best_x.iter().all(|v| (-1.0..=1.0).contains(v))));
    }
}
