//! End-to-end invariants of the attack, retrain and defense pipelines.

use std::path::{Path, PathBuf};

use poisonlab::attack::{frank_wolfe_attack, gradient_canceling, grid_points, AttackOptions, ClipMode, FwDomain, FwStep, PoisonLabel, Schedule};
use poisonlab::cli::{sweep_table, Context, ExperimentConfig, Loaded};
use poisonlab::data::{gen_gauss_classification, gen_gauss_regression, gen_or, Dataset, Labels, Task};
use poisonlab::defense::{dpa_evaluate, dpa_train, partition_of};
use poisonlab::harness::{learning_curves, retrain_and_eval, train, Evaluator, TrainOptions};
use poisonlab::mathcore::Matrix;
use poisonlab::models::ModelSpec;
use poisonlab::targetgen::{select_target, TargetCandidate};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn or_split(seed: u64) -> (Dataset, Dataset) {
    (gen_or(seed, 20, 0.1).unwrap(), gen_or(seed + 1000, 20, 0.1).unwrap())
}

#[test]
fn shipped_configs_round_trip_and_load() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let Ok(cfg) = ExperimentConfig::from_json(&text) else {
            // parameter files live next to the experiment configs
            assert!(text.contains("\"blocks\""), "{} is neither a config nor a parameter file", path.display());
            continue;
        };
        let again = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
        Context::new(Loaded::from_file(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 6);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let err = ExperimentConfig::from_json(r#"{"data":{"source":{"kind":"toy"}},"epz":1}"#).unwrap_err();
    assert!(err.to_string().contains("epz"), "{err}");
}

#[test]
fn pipeline_is_bit_reproducible() {
    let (clean, test) = or_split(3);
    let spec = ModelSpec::logistic(3);
    let target = spec.params(vec![-3.0, -3.0, 1.0]).unwrap();
    let opts = AttackOptions { epochs: 200, lr: 5.0, momentum: 0.0, schedule: Schedule::Constant, seed: 9, ..AttackOptions::default() };
    let run = || {
        let r = gradient_canceling(&clean, &spec, &target, 0.4, &opts).unwrap();
        let rep = retrain_and_eval(&clean, &r.poison, &test, &spec, &target, &TrainOptions::default(), 9).unwrap();
        (serde_json::to_string(&r).unwrap(), serde_json::to_string(&rep).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn sweep_csv_is_reproducible_from_config() {
    let text = r#"{
        "data": { "source": { "kind": "or", "reps": 5 } },
        "target": { "kind": "grid", "w1": [-3, -2], "w2": [-3, -2], "steps": 2, "fixed": [1] },
        "attack": { "options": { "epochs": 50, "lr": 5, "momentum": 0, "schedule": "constant" } },
        "eps_d": [0.5, 1.0],
        "eps_mode": "relative_to_tau"
    }"#;
    let run = || {
        let loaded = Loaded { cfg: ExperimentConfig::from_json(text).unwrap(), base: PathBuf::new() };
        sweep_table(&mut Context::new(loaded).unwrap()).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.starts_with("target_id,w1,w2,tau,eps_d,acc_drop,grad_norm,final_merit,error\n"));
    assert_eq!(a.lines().count(), 1 + 4 * 2);
}

#[test]
fn near_identity_poisoning_barely_moves_accuracy() {
    let (clean, test) = or_split(0);
    let spec = ModelSpec::logistic(3);
    let opts = TrainOptions::default();
    let w = train(&spec, &clean, &opts, 0).unwrap();
    let r = gradient_canceling(&clean, &spec, &w, 0.01, &AttackOptions { epochs: 100, ..AttackOptions::default() }).unwrap();
    let rep = retrain_and_eval(&clean, &r.poison, &test, &spec, &w, &opts, 0).unwrap();
    assert!(rep.acc_drop.unwrap().abs() < 0.5, "{rep:?}");
}

#[test]
fn curves_have_one_row_per_epoch() {
    let (clean, _) = or_split(1);
    let spec = ModelSpec::logistic(3);
    let t = spec.params(vec![-2.0, -2.0, 1.0]).unwrap();
    let opts = AttackOptions { epochs: 37, ..AttackOptions::default() };
    let rows = learning_curves(&clean, &spec, &[("a".into(), t.clone(), 0.2), ("b".into(), t, 0.5)], &opts).unwrap();
    assert_eq!(rows.len(), 74);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.epoch, i % 37 + 1);
        assert_eq!(r.setting, if i < 37 { "a" } else { "b" });
    }
}

#[test]
fn unclipped_merit_is_no_worse_than_clean_range() {
    let (clean, _) = or_split(2);
    let spec = ModelSpec::logistic(3);
    let t = spec.params(vec![-4.0, -4.0, 1.5]).unwrap();
    let base = AttackOptions { epochs: 300, lr: 5.0, momentum: 0.0, schedule: Schedule::Constant, ..AttackOptions::default() };
    let free = gradient_canceling(&clean, &spec, &t, 0.3, &AttackOptions { clip_mode: ClipMode::None, ..base.clone() }).unwrap();
    let boxed = gradient_canceling(&clean, &spec, &t, 0.3, &AttackOptions { clip_mode: ClipMode::CleanRange, ..base }).unwrap();
    assert!(free.final_merit <= boxed.final_merit * (1.0 + 1e-9), "{} > {}", free.final_merit, boxed.final_merit);
}

#[test]
fn replacing_hurts_at_least_as_much_as_adding() {
    let spec = ModelSpec::logistic(3);
    let t = spec.params(vec![-4.0, -4.0, 1.5]).unwrap();
    let opts = TrainOptions::default();
    for seed in 0..5 {
        let (clean, test) = or_split(seed);
        let ev = Evaluator::new(&spec, &clean, &test, opts.clone(), seed).unwrap();
        let base = AttackOptions { epochs: 300, lr: 5.0, momentum: 0.0, schedule: Schedule::Constant, seed, ..AttackOptions::default() };
        let add = gradient_canceling(&clean, &spec, &t, 0.5, &base).unwrap();
        let rep = gradient_canceling(&clean, &spec, &t, 0.5, &AttackOptions { replace_mode: true, ..base }).unwrap();
        let kept = clean.subset(rep.retained.as_ref().unwrap());
        let d_add = ev.evaluate(None, &add.poison, &t, None).unwrap().acc_drop.unwrap();
        let d_rep = ev.evaluate(Some(&kept), &rep.poison, &t, None).unwrap().acc_drop.unwrap();
        assert!(d_rep >= d_add - 1.0, "seed {seed}: replace {d_rep} add {d_add}");
    }
}

#[test]
fn line_search_frank_wolfe_is_monotone() {
    let clean = gen_gauss_regression(0, 60, &[1.0, -0.5], 0.1).unwrap();
    let spec = ModelSpec::least_squares(2);
    let t = spec.params(vec![1.5, 0.0]).unwrap();
    let points = grid_points(&[(-2.0, 2.0), (-2.0, 2.0)], 9).unwrap();
    let labels = (0..9).map(|i| PoisonLabel::Value(-4.0 + i as f64)).collect();
    let res = frank_wolfe_attack(&clean, &spec, &t, 0.5, &FwDomain::Grid { points, labels }, 200, FwStep::LineSearch).unwrap();
    for w in res.objective_trace.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{w:?}");
    }
}

#[test]
fn target_selection_is_deterministic() {
    let clean = gen_gauss_classification(0, 80, 2, 2.0).unwrap();
    let val = gen_gauss_classification(5, 40, 2, 2.0).unwrap();
    let spec = ModelSpec::logistic(3);
    let w = train(&spec, &clean, &TrainOptions::default(), 0).unwrap();
    let cands: Vec<TargetCandidate> = [0.5, 1.0, 2.0]
        .iter()
        .map(|s| {
            let p = spec.params(w.values.iter().map(|v| v * s).collect()).unwrap();
            TargetCandidate::external(p).with_tau(&spec, &clean).unwrap()
        })
        .collect();
    let gc = AttackOptions { epochs: 100, ..AttackOptions::default() };
    let a = select_target(&cands, 1.0, &clean, &val, &spec, &gc);
    let b = select_target(&cands, 1.0, &clean, &val, &spec, &gc);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn one_poison_point_touches_one_partition() {
    let clean = gen_or(4, 20, 0.1).unwrap();
    let spec = ModelSpec::logistic(3);
    let opts = TrainOptions::default();
    let (k, seed) = (5, 11);
    let bad = Dataset::new(
        Matrix::from_rows(&[vec![0.9, 0.9, 1.0]]).unwrap(),
        Labels::Class(vec![0]),
        Task::Classification { classes: 2 },
        clean.domain_box.clone(),
    )
    .unwrap();
    let mixed = clean.concat(&bad).unwrap();
    let before = dpa_train(&clean, &spec, k, seed, &opts).unwrap();
    let after = dpa_train(&mixed, &spec, k, seed, &opts).unwrap();
    let hit = partition_of(clean.len(), seed, k);
    for p in 0..k {
        assert_eq!(before.models[p] == after.models[p], p != hit, "partition {p}");
    }
}

#[test]
fn certified_accuracy_is_bounded_by_accuracy() {
    let (clean, test) = or_split(5);
    let spec = ModelSpec::logistic(3);
    let ens = dpa_train(&clean, &spec, 10, 0, &TrainOptions::default()).unwrap();
    for budget in [0, 1, 2, 5] {
        let r = dpa_evaluate(&ens, &test, budget).unwrap();
        assert!(r.certified_accuracy <= r.accuracy);
    }
}
