//! Property tests and high-precision oracles for the numerical kernels.

mod common;

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use naclab::actor::{multiplicative_update, natural_update, normalization_error};
use naclab::critic::{f_factor, td_step, StepSchedule};
use naclab::mdp::{max_ratio, softmax_eval, FeatureMap, MismatchQuery};
use naclab::sampler::{generate, PairSlice, Trajectory};

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

fn to_f64(x: &BigFloat, cc: &mut Consts) -> f64 {
    x.format(Radix::Dec, RM, cc).unwrap().parse().unwrap()
}

/// Row-wise softmax in 256-bit arithmetic, with no max subtraction.
fn softmax_oracle(logits: &[f64], na: usize, cc: &mut Consts) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(na) {
        let exps: Vec<BigFloat> = row.iter().map(|&l| BigFloat::from_f64(l, PREC).exp(PREC, RM, cc)).collect();
        let mut z = BigFloat::from_f64(0.0, PREC);
        for e in &exps {
            z = z.add(e, PREC, RM);
        }
        for e in &exps {
            out.push(to_f64(&e.div(&z, PREC, RM), cc));
        }
    }
    out
}

/// `Σ_{i=0}^{n} x^i` in 256-bit arithmetic.
fn geometric_oracle(x: f64, n: usize) -> f64 {
    let mut cc = Consts::new().unwrap();
    let bx = BigFloat::from_f64(x, PREC);
    let mut term = BigFloat::from_f64(1.0, PREC);
    let mut acc = BigFloat::from_f64(0.0, PREC);
    for _ in 0..=n {
        acc = acc.add(&term, PREC, RM);
        term = term.mul(&bx, PREC, RM);
    }
    to_f64(&acc, &mut cc)
}

fn features_strategy() -> impl Strategy<Value = (usize, usize, FeatureMap)> {
    (1usize..5, 2usize..4, 1usize..4).prop_flat_map(|(ns, na, d)| {
        let d = d.min(ns * na);
        prop::collection::vec(-1.0f64..1.0, ns * na * d).prop_filter_map("rank deficient", move |v| {
            let m = DMatrix::from_row_slice(ns * na, d, &v) / d as f64;
            FeatureMap::new(m).ok().map(|f| (ns, na, f))
        })
    })
}

#[test]
fn softmax_matches_high_precision() {
    let mut cc = Consts::new().unwrap();
    let mut r = common::rng(11);
    let mut worst: f64 = 0.0;
    for scale in [1.0, 30.0, 300.0] {
        for _ in 0..100 {
            let na = 3;
            let ns = 2;
            let features = FeatureMap::tabular(ns, na);
            let theta = DVector::from_fn(ns * na, |_, _| scale * (2.0 * rand::Rng::random::<f64>(&mut r) - 1.0));
            let pi = softmax_eval(&features, &theta, na).unwrap();
            let oracle = softmax_oracle(theta.as_slice(), na, &mut cc);
            for s in 0..ns {
                for a in 0..na {
                    let want = oracle[s * na + a];
                    let got = pi.prob(s, a);
                    let err = if want > 1e-300 { (got - want).abs() / want } else { (got - want).abs() };
                    worst = worst.max(err);
                }
            }
        }
    }
    // relative error a few ulps even for tiny probabilities
    assert!(worst < 1e-13, "worst relative error {worst:e}");
}

#[test]
fn geometric_factor_matches_high_precision() {
    for &x in &[0.0, 0.3, 0.9, 0.999, 0.9999999, 1.0, 1.0000001, 1.001, 1.5, 2.7] {
        for &n in &[0usize, 1, 4, 17, 60] {
            let want = geometric_oracle(x, n);
            let got = f_factor(x, n);
            assert!((got - want).abs() <= 1e-12 * want, "x={x} n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn importance_ratios_match_exact_division() {
    let mut cc = Consts::new().unwrap();
    let mut r = common::rng(12);
    for _ in 0..50 {
        let b = naclab::mdp::BehaviorPolicy::new(common::stochastic(&mut r, 3, 2, 0.05)).unwrap();
        let t = naclab::mdp::PolicyTable::new(common::stochastic(&mut r, 3, 2, 0.0)).unwrap();
        let mut want: f64 = 0.0;
        for s in 0..3 {
            for a in 0..2 {
                let q = BigFloat::from_f64(t.prob(s, a), PREC).div(&BigFloat::from_f64(b.prob(s, a), PREC), PREC, RM);
                want = want.max(to_f64(&q, &mut cc));
            }
        }
        assert_eq!(max_ratio(MismatchQuery::Target(&t), &b), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_are_distributions((ns, na, f) in features_strategy(), scale in 0.0f64..500.0, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let theta = DVector::from_fn(f.dim(), |_, _| scale * (2.0 * rand::Rng::random::<f64>(&mut r) - 1.0));
        let pi = softmax_eval(&f, &theta, na).unwrap();
        prop_assert!(normalization_error(&pi) < 1e-14);
        prop_assert!(pi.table().iter().all(|p| *p >= 0.0 && p.is_finite()));
        prop_assert_eq!(pi.num_states(), ns);
    }

    #[test]
    fn multiplicative_form_equals_parameter_path(
        (_ns, na, f) in features_strategy(),
        seed in any::<u64>(),
        beta in 0.0f64..4.0,
    ) {
        let mut r = common::rng(seed);
        let mut draw = |d: usize| DVector::from_fn(d, |_, _| 6.0 * rand::Rng::random::<f64>(&mut r) - 3.0);
        let theta = draw(f.dim());
        let w = draw(f.dim());
        let next = natural_update(&theta, &w, beta).unwrap();
        let direct = softmax_eval(&f, &next, na).unwrap();
        let via = multiplicative_update(&softmax_eval(&f, &theta, na).unwrap(), &f, &w, beta).unwrap();
        prop_assert!(direct.max_abs_diff(&via) < 1e-12);
    }

    /// `|Δ(w₁) − Δ(w₂)| ≤ (1+γζ) Σ_{i<n} (γζ)^i ‖w₁−w₂‖₂` for unit-L1 features.
    #[test]
    fn td_direction_is_lipschitz(seed in any::<u64>(), n in 1usize..6) {
        let inst = common::random_instance(seed, 4, 3, 3, 0.9);
        let traj = generate(&inst.mdp, &inst.behavior, 0, n + 1, seed).unwrap();
        let mut r = common::rng(seed ^ 1);
        let mut draw = |d: usize| DVector::from_fn(d, |_, _| 10.0 * rand::Rng::random::<f64>(&mut r) - 5.0);
        let d = inst.features.dim();
        let (w1, w2) = (draw(d), draw(d));
        let f1 = td_step(&w1, traj.pairs(), &inst.mdp, &inst.features, &inst.target, &inst.behavior, n).unwrap();
        let f2 = td_step(&w2, traj.pairs(), &inst.mdp, &inst.features, &inst.target, &inst.behavior, n).unwrap();
        let gz = 0.9 * max_ratio(MismatchQuery::Target(&inst.target), &inst.behavior);
        let lip = (1.0 + gz) * f_factor(gz, n - 1);
        prop_assert!((f1 - f2).norm() <= lip * (w1 - w2).norm() * (1.0 + 1e-12));
    }

    #[test]
    fn trajectory_text_roundtrip(seed in any::<u64>(), len in 1usize..200) {
        let inst = common::random_instance(seed, 5, 3, 2, 0.8);
        let traj = generate(&inst.mdp, &inst.behavior, 0, len, seed).unwrap();
        let mut buf = Vec::new();
        traj.write_text(&mut buf).unwrap();
        let back = Trajectory::read_text(buf.as_slice()).unwrap();
        prop_assert_eq!(&back.states, &traj.states);
        prop_assert_eq!(&back.actions, &traj.actions);
        back.validate(&inst.mdp, &inst.behavior).unwrap();
    }

    #[test]
    fn same_seed_same_trajectory(seed in any::<u64>()) {
        let inst = common::random_instance(7, 5, 3, 2, 0.8);
        let a = generate(&inst.mdp, &inst.behavior, 1, 300, seed).unwrap();
        let b = generate(&inst.mdp, &inst.behavior, 1, 300, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn diminishing_schedule_is_nonincreasing(alpha in 1e-3f64..10.0, eta in 0.01f64..1.0, h in 0.1f64..100.0, k in 0usize..100_000) {
        let s = StepSchedule::Diminishing { alpha, eta, h };
        prop_assert!(s.alpha_at(k + 1) <= s.alpha_at(k));
        prop_assert!(s.alpha_at(k) > 0.0);
    }

    /// The TD direction vanishes on average exactly at the projected fixed
    /// point: the expected update there is zero.
    #[test]
    fn fixed_point_zeroes_expected_update(seed in 0u64..10_000) {
        let inst = common::random_instance(seed, 6, 3, 4, 0.9);
        let kappa_min = common::kappa_by_power_iteration(&inst.mdp, &inst.behavior).min();
        let n = naclab::critic::min_horizon(0.9, 0.9, kappa_min).unwrap();
        let fp = naclab::critic::solve_projected_bellman(&inst.mdp, &inst.features, &inst.target, &inst.behavior, n, 0.9).unwrap();
        let g = naclab::critic::expected_update(&fp.w(), &inst.mdp, &inst.features, &inst.target, &inst.behavior, n).unwrap();
        prop_assert!(g.amax() < 1e-11);
    }
}

#[test]
fn short_window_is_rejected() {
    let inst = common::random_instance(3, 3, 2, 2, 0.9);
    let traj = generate(&inst.mdp, &inst.behavior, 0, 3, 1).unwrap();
    let w = DVector::zeros(inst.features.dim());
    let window = PairSlice {
        states: &traj.states[..2],
        actions: &traj.actions[..2],
    };
    assert!(td_step(&w, window, &inst.mdp, &inst.features, &inst.target, &inst.behavior, 2).is_err());
}
