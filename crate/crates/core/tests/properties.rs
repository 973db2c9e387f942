//! Property tests over the numeric core, models, thresholds and defenses.

use std::f64::consts::E;

use proptest::prelude::*;

use poisonlab::attack::{gradient_canceling, AttackOptions, Schedule};
use poisonlab::data::{gen_gauss_classification, gen_gauss_regression, gen_or, split, toy_three_point, Dataset, Labels, Target, Task};
use poisonlab::defense::{partition_of, sever_filter};
use poisonlab::harness::{train, TrainOptions};
use poisonlab::mathcore::{lambert_w0, top_singular_vector, Matrix, SeededRng};
use poisonlab::models::{mixed_vjp, param_grad, predict, ModelSpec};
use poisonlab::reachability::{alignment, lambda_threshold, lambda_to_tau, margin_bounds, tau_threshold, tau_to_lambda, LossKind};
use poisonlab::targetgen::{grad_ascent_corrupt, random_corrupt, scale_params};

fn specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::least_squares(3),
        ModelSpec::logistic(3),
        ModelSpec::softmax(3, 4).unwrap(),
        ModelSpec::mlp1(3, 5, 3).unwrap(),
    ]
}

fn target_for<'a>(spec: &ModelSpec, rng: &mut SeededRng, soft: &'a mut Vec<f64>) -> Target<'a> {
    match spec.classes() {
        None => Target::Value(rng.normal()),
        Some(c) => {
            soft.clear();
            soft.extend((0..c).map(|_| rng.uniform() + 0.05));
            let s: f64 = soft.iter().sum();
            soft.iter_mut().for_each(|v| *v /= s);
            Target::Soft(soft)
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn lambert_round_trip(x in -1.0 / E..1e3) {
        let w = lambert_w0(x).unwrap();
        prop_assert!((w * w.exp() - x).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn tau_lambda_compose(l in 0.0..0.999_999f64) {
        prop_assert!((tau_to_lambda(lambda_to_tau(l)) - l).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn top_singular_value_matches_closed_form(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64, d in -5.0..5.0f64) {
        let m = Matrix::from_rows(&[vec![a, b], vec![c, d]]).unwrap();
        let (v, s) = top_singular_vector(&m);
        // eigenvalues of MᵀM
        let (p, q, r) = (a * a + c * c, a * b + c * d, b * b + d * d);
        let top = 0.5 * (p + r) + (0.25 * (p - r).powi(2) + q * q).sqrt();
        prop_assert!((s - top.sqrt()).abs() <= 1e-6 * top.sqrt().max(1.0));
        let mv = m.matvec(&v);
        prop_assert!((mv.iter().map(|x| x * x).sum::<f64>().sqrt() - s).abs() <= 1e-6 * s.max(1.0));
    }

    #[test]
    fn rng_streams_replay(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = SeededRng::new(seed, stream);
        let mut b = SeededRng::new(seed, stream);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn generators_are_pure_and_boxed(seed in 0u64..1000) {
        let sets = [
            gen_or(seed, 3, 0.2).unwrap(),
            gen_gauss_classification(seed, 20, 3, 1.5).unwrap(),
            gen_gauss_regression(seed, 20, &[0.5, -1.0], 0.1).unwrap(),
        ];
        let again = [
            gen_or(seed, 3, 0.2).unwrap(),
            gen_gauss_classification(seed, 20, 3, 1.5).unwrap(),
            gen_gauss_regression(seed, 20, &[0.5, -1.0], 0.1).unwrap(),
        ];
        for (ds, re) in sets.iter().zip(&again) {
            prop_assert_eq!(ds, re);
            for row in ds.x.iter_rows() {
                for (v, (lo, hi)) in row.iter().zip(&ds.domain_box) {
                    prop_assert!(lo <= v && v <= hi);
                }
            }
        }
    }

    #[test]
    fn split_partitions_the_samples(seed in 0u64..1000, frac in 0.1..0.9f64) {
        let ds = gen_gauss_regression(3, 30, &[1.0], 0.1).unwrap();
        let (a, b) = split(&ds, frac, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), ds.len());
        let key = |d: &Dataset| -> Vec<u64> { d.x.as_slice().iter().map(|v| v.to_bits()).collect() };
        let mut joined = key(&a);
        joined.extend(key(&b));
        joined.sort_unstable();
        let mut orig = key(&ds);
        orig.sort_unstable();
        prop_assert_eq!(joined, orig);
    }

    #[test]
    fn param_grad_matches_central_differences(seed in any::<u64>(), which in 0usize..4) {
        let spec = specs()[which];
        let mut rng = SeededRng::new(seed, 1);
        let w: Vec<f64> = (0..spec.num_params()).map(|_| 0.7 * rng.normal()).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let mut soft = Vec::new();
        let t = target_for(&spec, &mut rng, &mut soft);
        let g = param_grad(&spec, &w, &x, t).unwrap();
        let h = 1e-6;
        for k in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[k] += h;
            wm[k] -= h;
            let fd = (poisonlab::models::loss(&spec, &wp, &x, t).unwrap() - poisonlab::models::loss(&spec, &wm, &x, t).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "k={} fd={} g={}", k, fd, g[k]);
        }
    }

    #[test]
    fn mixed_product_matches_bilinear_differences(seed in any::<u64>(), which in 0usize..4) {
        let spec = specs()[which];
        let mut rng = SeededRng::new(seed, 2);
        let w: Vec<f64> = (0..spec.num_params()).map(|_| 0.7 * rng.normal()).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..w.len()).map(|_| rng.normal()).collect();
        let u: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let mut soft = Vec::new();
        let t = target_for(&spec, &mut rng, &mut soft);
        let mv = mixed_vjp(&spec, &w, &x, t, &v).unwrap();
        let analytic: f64 = mv.iter().zip(&u).map(|(a, b)| a * b).sum();
        let h = 1e-5;
        let dir = |s: f64| -> f64 {
            let xs: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + s * b).collect();
            param_grad(&spec, &w, &xs, t).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum()
        };
        let fd = (dir(h) - dir(-h)) / (2.0 * h);
        prop_assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "fd={} analytic={}", fd, analytic);
    }

    #[test]
    fn positive_scaling_keeps_argmax(seed in any::<u64>(), s in 0.01..100.0f64, which in 1usize..3) {
        let spec = specs()[which];
        let mut rng = SeededRng::new(seed, 3);
        let p = spec.params((0..spec.num_params()).map(|_| rng.normal()).collect()).unwrap();
        let ps = scale_params(&spec, &p, s).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            prop_assert_eq!(predict(&spec, &p.values, &x).unwrap(), predict(&spec, &ps.values, &x).unwrap());
        }
    }

    #[test]
    fn mlp_scaling_keeps_argmax(seed in any::<u64>(), s in 0.01..100.0f64) {
        let spec = specs()[3];
        let p = spec.init_params(seed);
        let ps = scale_params(&spec, &p, s).unwrap();
        let mut rng = SeededRng::new(seed, 4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            prop_assert_eq!(predict(&spec, &p.values, &x).unwrap(), predict(&spec, &ps.values, &x).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn alignment_lies_in_margin_range(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed, 5);
        let n = 3 + rng.below(20);
        let x: Vec<f64> = (0..n * 2).map(|_| 3.0 * rng.normal()).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        let ds = Dataset::new(Matrix::new(n, 2, x).unwrap(), Labels::Class(y), Task::Classification { classes: 2 }, vec![(f64::NEG_INFINITY, f64::INFINITY); 2]).unwrap();
        let spec = ModelSpec::logistic(2);
        let p = spec.params(vec![3.0 * rng.normal(), 3.0 * rng.normal()]).unwrap();
        let (a, b) = margin_bounds(LossKind::Logistic, (f64::NEG_INFINITY, f64::INFINITY)).unwrap();
        let al = alignment(&spec, &p, &ds).unwrap();
        prop_assert!(a - 1e-12 <= al && al <= b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn binary_convention_matches_scalar_threshold(seed in any::<u64>()) {
        let ds = gen_gauss_classification(seed % 50, 30, 2, 1.0).unwrap();
        let mut rng = SeededRng::new(seed, 6);
        let spec = ModelSpec::logistic(3);
        let p = spec.params((0..3).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let rep = tau_threshold(&spec, &p, &ds, Some(2)).unwrap();
        let (a, b) = margin_bounds(LossKind::Logistic, (f64::NEG_INFINITY, f64::INFINITY)).unwrap();
        let scalar = lambda_to_tau(lambda_threshold(rep.alignment, a, b).unwrap());
        prop_assert!((rep.tau - scalar).abs() <= 1e-12 * scalar.max(1.0), "{} vs {}", rep.tau, scalar);
    }

    #[test]
    fn corruption_respects_the_ball(seed in any::<u64>(), eps in 0.0..2.0f64) {
        let ds = gen_or(seed % 7, 5, 0.1).unwrap();
        let spec = ModelSpec::logistic(3);
        let mut rng = SeededRng::new(seed, 7);
        let w0 = spec.params((0..3).map(|_| 1.0 + rng.normal()).collect()).unwrap();
        let n0 = w0.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = grad_ascent_corrupt(&ds, &spec, &w0, eps, 5, seed).unwrap();
        let r = random_corrupt(&w0, eps, seed).unwrap();
        for c in [g, r] {
            let d: f64 = c.params.values.iter().zip(&w0.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d <= eps * n0 + 1e-9);
            prop_assert!(c.eps_w >= 0.0);
        }
    }

    #[test]
    fn partition_is_a_pure_function(idx in 0usize..100_000, seed in any::<u64>(), k in 1usize..64) {
        let p = partition_of(idx, seed, k);
        prop_assert!(p < k);
        prop_assert_eq!(p, partition_of(idx, seed, k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sever_keeps_a_sub_multiset(seed in 0u64..100, frac in 0.05..0.6f64, rounds in 1usize..4) {
        let ds = gen_or(seed, 6, 0.2).unwrap();
        let spec = ModelSpec::logistic(3);
        let opts = TrainOptions { epochs: 100, ..TrainOptions::default() };
        let w = train(&spec, &ds, &opts, seed).unwrap();
        let r = sever_filter(&ds, &spec, &w, frac, rounds, &opts, seed).unwrap();
        let n = ds.len();
        prop_assert_eq!(r.filtered.len(), ((1.0 - frac) * n as f64).ceil() as usize);
        let mut kept: Vec<usize> = (0..n).filter(|i| !r.removed.contains(i)).collect();
        kept.sort_unstable();
        prop_assert_eq!(&r.filtered, &ds.subset(&kept));
    }

    #[test]
    fn incremental_merit_matches_recomputation(seed in 0u64..1000) {
        let ds = gen_or(seed, 5, 0.1).unwrap();
        let spec = ModelSpec::logistic(3);
        let target = spec.params(vec![-2.0, -2.0, 1.0]).unwrap();
        let opts = AttackOptions { epochs: 50, audit: true, seed, ..AttackOptions::default() };
        let r = gradient_canceling(&ds, &spec, &target, 0.5, &opts).unwrap();
        prop_assert!(r.audit_drift.unwrap() <= 1e-10, "{:?}", r.audit_drift);
    }

    #[test]
    fn small_step_descent_is_monotone(seed in 0u64..1000) {
        let ds = gen_gauss_regression(seed, 40, &[1.0, -1.0], 0.1).unwrap();
        let spec = ModelSpec::least_squares(2);
        let target = spec.params(vec![2.0, 0.5]).unwrap();
        let opts = AttackOptions { epochs: 200, lr: 1e-3, momentum: 0.0, schedule: Schedule::Constant, seed, ..AttackOptions::default() };
        let r = gradient_canceling(&ds, &spec, &target, 0.3, &opts).unwrap();
        let mut prev = r.initial_merit;
        for &m in &r.merit_trace {
            prop_assert!(m <= prev * (1.0 + 1e-12));
            prev = m;
        }
    }
}

#[test]
fn toy_phase_ordering() {
    let ds = toy_three_point();
    let spec = ModelSpec::logistic(2);
    let ws = spec.params(vec![0.0, 2f64.ln()]).unwrap();
    let tau = |s: f64| tau_threshold(&spec, &scale_params(&spec, &ws, s).unwrap(), &ds, None).unwrap().tau;
    for s in [0.1, 0.25, 0.5, 0.75, 0.9, 1.0] {
        assert_eq!(tau(s), 0.0, "s = {s}");
    }
    let taus: Vec<f64> = (11..=30).map(|k| tau(k as f64 / 10.0)).collect();
    assert!(taus[0] > 0.0);
    assert!(taus.windows(2).all(|p| p[1] > p[0]), "{taus:?}");
}
