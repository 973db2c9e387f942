//! Target parameters for model-targeted poisoning: gradient-ascent and random
//! corruption of a clean model, rescaling, and a three-stage selection
//! procedure (budget filter, attack convergence test, validation damage).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{gradient_canceling, AttackOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::{train, TrainOptions};
use crate::mathcore::{axpy, dist, mix_seed, norm, scale, SeededRng};
use crate::models::{accuracy, mean_loss, mean_param_grad, Family, ModelSpec, Params};
use crate::reachability::tau_threshold;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GradAscent,
    Random,
    Scaled,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetCandidate {
    pub params: Params,
    /// `‖w − w₀‖ / ‖w₀‖`.
    pub eps_w: f64,
    pub provenance: Provenance,
    /// Budget threshold, once computed.
    pub tau: Option<f64>,
}

impl TargetCandidate {
    pub fn external(params: Params) -> Self {
        Self {
            params,
            eps_w: 0.0,
            provenance: Provenance::External,
            tau: None,
        }
    }

    /// Fills `tau` with the binary-convention threshold on `clean`.
    pub fn with_tau(mut self, spec: &ModelSpec, clean: &Dataset) -> Result<Self> {
        self.tau = Some(if spec.is_classifier() {
            tau_threshold(spec, &self.params, clean, Some(2))?.tau
        } else {
            0.0
        });
        Ok(self)
    }
}

fn check_eps_w(eps_w: f64) -> Result<()> {
    if !(eps_w >= 0.0 && eps_w.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps_w must be ≥ 0, got {eps_w}")));
    }
    Ok(())
}

/// Random restarts of [`grad_ascent_corrupt`] besides the pure gradient path.
pub const ASCENT_RESTARTS: usize = 8;

/// Projected gradient ascent on the clean training loss inside the ball
/// `‖w − w₀‖ ≤ eps_w‖w₀‖`.
///
/// Each of the `steps` moves has length `eps_w‖w₀‖/steps` along the
/// normalized gradient. At a trained model the starting gradient carries
/// little signal, so besides the plain path, [`ASCENT_RESTARTS`] paths open
/// with a seeded random first move; the path ending at the highest loss wins.
pub fn grad_ascent_corrupt(
    clean: &Dataset,
    spec: &ModelSpec,
    params0: &Params,
    eps_w: f64,
    steps: usize,
    seed: u64,
) -> Result<TargetCandidate> {
    check_eps_w(eps_w)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be ≥ 1".into()));
    }
    let w0 = &params0.values;
    let n0 = norm(w0);
    if eps_w > 0.0 && n0 == 0.0 {
        return Err(Error::Domain("relative corruption of zero parameters is undefined".into()));
    }
    let radius = eps_w * n0;
    let mut best = params0.clone();
    if radius > 0.0 {
        let mut best_loss = f64::NEG_INFINITY;
        for r in 0..=ASCENT_RESTARTS {
            let mut rng = SeededRng::new(mix_seed(&[seed, r as u64]), 0x9a);
            let w = ascent_path(clean, spec, params0, radius, steps, r > 0, &mut rng)?;
            let l = mean_loss(spec, &w, clean)?;
            if l > best_loss {
                best_loss = l;
                best = w;
            }
        }
    }
    let eps = if n0 > 0.0 { dist(&best.values, w0) / n0 } else { 0.0 };
    Ok(TargetCandidate {
        params: best,
        eps_w: eps,
        provenance: Provenance::GradAscent,
        tau: None,
    })
}

fn ascent_path(
    clean: &Dataset,
    spec: &ModelSpec,
    params0: &Params,
    radius: f64,
    steps: usize,
    random_start: bool,
    rng: &mut SeededRng,
) -> Result<Params> {
    let w0 = &params0.values;
    let step = radius / steps as f64;
    let mut w = params0.clone();
    for k in 0..steps {
        let mut g = mean_param_grad(spec, &w, clean)?;
        let gn = norm(&g);
        if (k == 0 && random_start) || gn <= 1e-300 {
            g = rng.unit_vector(g.len());
        } else {
            scale(1.0 / gn, &mut g);
        }
        axpy(step, &g, &mut w.values);
        let r = dist(&w.values, w0);
        if r > radius {
            for (wi, &oi) in w.values.iter_mut().zip(w0) {
                *wi = oi + (*wi - oi) * radius / r;
            }
        }
    }
    Ok(w)
}

/// `w₀ + eps_w‖w₀‖·u` with `u` uniform on the unit sphere.
pub fn random_corrupt(params0: &Params, eps_w: f64, seed: u64) -> Result<TargetCandidate> {
    check_eps_w(eps_w)?;
    let mut rng = SeededRng::new(seed, 0x9b);
    let u = rng.unit_vector(params0.len());
    let mut values = params0.values.clone();
    axpy(eps_w * norm(&values), &u, &mut values);
    Ok(TargetCandidate {
        params: params0.with_values(values)?,
        eps_w,
        provenance: Provenance::Random,
        tau: None,
    })
}

/// `s·w`; only the output layer for `Mlp1`, so the argmax is unchanged.
pub fn scale_params(spec: &ModelSpec, params: &Params, s: f64) -> Result<Params> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {s}")));
    }
    let mut values = params.values.clone();
    let range = match spec.family {
        Family::Mlp1 { .. } => spec.output_block(),
        _ => 0..values.len(),
    };
    scale(s, &mut values[range]);
    params.with_values(values)
}

/// Per-candidate outcome of [`select_target`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub index: usize,
    pub tau: f64,
    /// Last stage passed (0 = rejected by the budget filter).
    pub passed: u8,
    pub initial_merit: Option<f64>,
    pub final_merit: Option<f64>,
    /// Validation accuracy drop in percentage points against the clean model.
    pub val_drop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub chosen: TargetCandidate,
    pub index: usize,
    pub reports: Vec<CandidateReport>,
}

/// Merit reduction a candidate must show in stage 2.
pub const CONVERGENCE_FACTOR: f64 = 10.0;
/// Merits at or below this count as converged regardless of the start.
pub const MERIT_FLOOR: f64 = 1e-10;

/// Chooses a target in three stages:
///
/// 1. drop candidates with `τ(2) > eps_d`;
/// 2. run GC on the rest, keeping those whose final merit falls below a
///    tenth of the initial one;
/// 3. return the survivor with the largest validation accuracy drop
///    (lowest index on ties).
///
/// The reference accuracy comes from a model trained on `clean` with default
/// options and `gc_opts.seed`.
pub fn select_target(
    candidates: &[TargetCandidate],
    eps_d: f64,
    clean: &Dataset,
    val: &Dataset,
    spec: &ModelSpec,
    gc_opts: &AttackOptions,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no target candidates".into()));
    }
    let mut reports = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let tau = match c.tau {
            Some(t) => t,
            None => c.clone().with_tau(spec, clean)?.tau.expect("filled"),
        };
        reports.push(CandidateReport {
            index: i,
            tau,
            passed: u8::from(tau <= eps_d),
            initial_merit: None,
            final_merit: None,
            val_drop: None,
        });
    }
    if reports.iter().all(|r| r.passed == 0) {
        return Err(Error::EmptyPool {
            stage: 1,
            reason: "every threshold exceeds the budget",
        });
    }

    let runs: Vec<(usize, Result<(f64, f64)>)> = reports
        .par_iter()
        .filter(|r| r.passed == 1)
        .map(|r| {
            let opts = AttackOptions {
                seed: mix_seed(&[gc_opts.seed, r.index as u64]),
                ..gc_opts.clone()
            };
            let out = gradient_canceling(clean, spec, &candidates[r.index].params, eps_d, &opts)
                .map(|res| (res.initial_merit, res.final_merit));
            (r.index, out)
        })
        .collect();
    for (i, out) in runs {
        let (init, fin) = out?;
        let rep = &mut reports[i];
        rep.initial_merit = Some(init);
        rep.final_merit = Some(fin);
        if fin < init / CONVERGENCE_FACTOR || fin <= MERIT_FLOOR {
            rep.passed = 2;
        }
    }
    if reports.iter().all(|r| r.passed < 2) {
        return Err(Error::EmptyPool {
            stage: 2,
            reason: "no candidate's attack converged",
        });
    }

    let reference = train(spec, clean, &TrainOptions::default(), gc_opts.seed)?;
    let ref_acc = accuracy(spec, &reference, val)?;
    let mut best: Option<(usize, f64)> = None;
    for rep in reports.iter_mut().filter(|r| r.passed == 2) {
        let drop = 100.0 * (ref_acc - accuracy(spec, &candidates[rep.index].params, val)?);
        rep.val_drop = Some(drop);
        rep.passed = 3;
        if best.is_none_or(|(_, d)| drop > d) {
            best = Some((rep.index, drop));
        }
    }
    let (index, _) = best.ok_or(Error::EmptyPool {
        stage: 3,
        reason: "no survivors to rank",
    })?;
    let mut chosen = candidates[index].clone();
    chosen.tau = Some(reports[index].tau);
    Ok(Selection { chosen, index, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_or, toy_three_point};
    use crate::models::predict;

    fn or_setup(seed: u64) -> (Dataset, Dataset, ModelSpec, Params) {
        let clean = gen_or(seed, 20, 0.1).unwrap();
        let val = gen_or(seed + 100, 20, 0.1).unwrap();
        let spec = ModelSpec::logistic(3);
        let w0 = train(&spec, &clean, &TrainOptions::default(), seed).unwrap();
        (clean, val, spec, w0)
    }

    #[test]
    fn zero_budget_is_identity() {
        let (clean, _, spec, w0) = or_setup(0);
        assert_eq!(grad_ascent_corrupt(&clean, &spec, &w0, 0.0, 5, 0).unwrap().params, w0);
        assert_eq!(random_corrupt(&w0, 0.0, 0).unwrap().params, w0);
        assert_eq!(scale_params(&spec, &w0, 1.0).unwrap(), w0);
    }

    #[test]
    fn corruption_stays_in_ball() {
        let (clean, _, spec, w0) = or_setup(1);
        let n0 = norm(&w0.values);
        for eps in [0.1, 0.5, 1.0] {
            let c = grad_ascent_corrupt(&clean, &spec, &w0, eps, 20, 3).unwrap();
            assert!(dist(&c.params.values, &w0.values) <= eps * n0 + 1e-9);
            let r = random_corrupt(&w0, eps, 3).unwrap();
            assert!((dist(&r.params.values, &w0.values) / n0 - eps).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_rejected() {
        let (clean, _, spec, _) = or_setup(0);
        assert!(matches!(
            grad_ascent_corrupt(&clean, &spec, &spec.zeros(), 0.5, 5, 0),
            Err(Error::Domain(_))
        ));
        assert!(grad_ascent_corrupt(&clean, &spec, &spec.zeros(), 0.0, 5, 0).is_ok());
    }

    #[test]
    fn ascent_damage_grows_with_budget() {
        for seed in 0..5 {
            let (clean, val, spec, w0) = or_setup(seed);
            let base = accuracy(&spec, &w0, &val).unwrap();
            let drops: Vec<f64> = [0.1, 0.5, 1.0]
                .iter()
                .map(|&e| {
                    let c = grad_ascent_corrupt(&clean, &spec, &w0, e, 50, seed).unwrap();
                    base - accuracy(&spec, &c.params, &val).unwrap()
                })
                .collect();
            assert!(drops.windows(2).all(|p| p[1] >= p[0]), "seed {seed}: {drops:?}");
        }
    }

    #[test]
    fn ascent_beats_random_on_average() {
        let (clean, val, spec, w0) = or_setup(0);
        let base = accuracy(&spec, &w0, &val).unwrap();
        let ga = base - accuracy(&spec, &grad_ascent_corrupt(&clean, &spec, &w0, 1.0, 50, 0).unwrap().params, &val).unwrap();
        let rnd: f64 = (0..20)
            .map(|s| base - accuracy(&spec, &random_corrupt(&w0, 1.0, s).unwrap().params, &val).unwrap())
            .sum::<f64>()
            / 20.0;
        assert!(rnd <= ga, "random {rnd} vs ascent {ga}");
    }

    #[test]
    fn scaling_keeps_predictions() {
        let (_, val, spec, w0) = or_setup(2);
        for s in [0.5, 2.0] {
            let ws = scale_params(&spec, &w0, s).unwrap();
            assert_eq!(accuracy(&spec, &ws, &val).unwrap(), accuracy(&spec, &w0, &val).unwrap());
            for i in 0..val.len() {
                let x = val.x.row(i);
                assert_eq!(predict(&spec, &ws.values, x).unwrap(), predict(&spec, &w0.values, x).unwrap());
            }
        }
        let mlp = ModelSpec::mlp1(3, 4, 2).unwrap();
        let p = mlp.init_params(1);
        let ps = scale_params(&mlp, &p, 3.0).unwrap();
        let out = mlp.output_block();
        assert_eq!(ps.values[..out.start], p.values[..out.start]);
        assert!((ps.values[out.start] - 3.0 * p.values[out.start]).abs() < 1e-15);
    }

    #[test]
    fn toy_scaled_thresholds() {
        let ds = toy_three_point();
        let spec = ModelSpec::logistic(2);
        let ws = spec.params(vec![0.0, 2f64.ln()]).unwrap();
        let tau = |s: f64| {
            TargetCandidate::external(scale_params(&spec, &ws, s).unwrap())
                .with_tau(&spec, &ds)
                .unwrap()
                .tau
                .unwrap()
        };
        assert!((tau(2.0) - 0.66).abs() < 0.01);
        assert_eq!(tau(1.0), 0.0);
        assert_eq!(tau(0.5), 0.0);
    }

    #[test]
    fn toy_selection_filters_by_budget() {
        let ds = toy_three_point();
        let spec = ModelSpec::logistic(2);
        let ws = spec.params(vec![0.0, 2f64.ln()]).unwrap();
        let cands = vec![
            TargetCandidate::external(scale_params(&spec, &ws, 2.0).unwrap()),
            TargetCandidate::external(ws.clone()),
        ];
        let sel = select_target(&cands, 0.5, &ds, &ds, &spec, &AttackOptions::default()).unwrap();
        assert_eq!(sel.index, 1);
        assert_eq!(sel.reports[0].passed, 0);
        assert_eq!(sel.chosen.params, ws);

        let only_far = &cands[..1];
        assert!(matches!(
            select_target(only_far, 0.5, &ds, &ds, &spec, &AttackOptions::default()),
            Err(Error::EmptyPool { stage: 1, .. })
        ));
    }

    #[test]
    fn clean_params_pass_with_zero_drop() {
        let ds = toy_three_point();
        let spec = ModelSpec::logistic(2);
        let opts = AttackOptions::default();
        let w = train(&spec, &ds, &TrainOptions::default(), opts.seed).unwrap();
        let sel = select_target(&[TargetCandidate::external(w)], 0.5, &ds, &ds, &spec, &opts).unwrap();
        assert_eq!(sel.reports[0].val_drop, Some(0.0));
        assert_eq!(sel.reports[0].passed, 3);
    }
}
