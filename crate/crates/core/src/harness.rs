//! Training, retraining on clean plus poison, evaluation, and the sweep
//! engines that produce heatmap and learning-curve tables.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{gradient_canceling, AttackOptions, AttackResult, Schedule};
use crate::data::{Dataset, Labels, Task};
use crate::error::{Error, Result};
use crate::mathcore::{dist, dot, mix_seed, norm, solve_spd, top_singular_vector, Matrix, SeededRng};
use crate::models::{accuracy, mean_param_grad_with, Family, ModelSpec, Params};
use crate::reachability::tau_threshold;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Use `lr` as the step.
    Fixed,
    /// Divide `lr` by a smoothness bound of the loss: the largest eigenvalue
    /// of `XᵀX/n` times the curvature of the link (¼ logistic, ½ softmax).
    /// `Mlp1` falls back to `Fixed`.
    #[default]
    SmoothnessScaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    /// `None` picks full batch up to 10⁴ samples and batches of 1000 beyond.
    pub batch_size: Option<usize>,
    pub grad_tol: f64,
    pub step_rule: StepRule,
    /// Sequential reductions only, so results do not depend on thread count.
    pub bit_reproducible: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1.0,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            batch_size: None,
            grad_tol: 1e-8,
            step_rule: StepRule::SmoothnessScaled,
            bit_reproducible: true,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == Some(0) {
            return Err(Error::InvalidArgument(
                "training needs epochs ≥ 1, lr > 0, momentum in [0, 1), batch ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

fn smoothness(spec: &ModelSpec, x: &Matrix) -> Option<f64> {
    let curvature = match spec.family {
        Family::LeastSquares => 1.0,
        Family::LogisticBinary => 0.25,
        Family::SoftmaxLinear { .. } => 0.5,
        Family::Mlp1 { .. } => return None,
    };
    let (_, s) = top_singular_vector(x);
    let l = curvature * s * s / x.rows() as f64;
    (l > 0.0).then_some(l)
}

/// Exact least-squares fit through the normal equations.
fn solve_least_squares(ds: &Dataset) -> Result<Vec<f64>> {
    let Labels::Real(y) = &ds.labels else {
        return Err(Error::InvalidArgument("least squares needs real targets".into()));
    };
    let d = ds.dim();
    let mut gram = Matrix::zeros(d, d);
    let mut rhs = vec![0.0; d];
    for (i, row) in ds.x.iter_rows().enumerate() {
        for a in 0..d {
            rhs[a] += row[a] * y[i];
            for b in 0..=a {
                let v = gram.get(a, b) + row[a] * row[b];
                gram.set(a, b, v);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram.set(b, a, gram.get(a, b));
        }
    }
    solve_spd(&gram, &rhs)
}

/// Fits `spec` on `ds` from the seeded initialization.
///
/// Least squares is solved exactly. Other families run heavy-ball gradient
/// descent (full batch up to 10⁴ samples, otherwise shuffled batches of
/// 1000) until the epoch budget or until `‖g‖ < grad_tol`.
pub fn train(spec: &ModelSpec, ds: &Dataset, opts: &TrainOptions, seed: u64) -> Result<Params> {
    opts.validate()?;
    spec.check_dataset(ds)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if spec.family == Family::LeastSquares {
        return match solve_least_squares(ds) {
            Ok(w) => spec.params(w),
            Err(Error::Domain(_)) => Err(Error::Domain("least-squares design is rank deficient".into())),
            Err(e) => Err(e),
        };
    }
    let mut params = spec.init_params(seed);
    let step = match (opts.step_rule, smoothness(spec, &ds.x)) {
        (StepRule::SmoothnessScaled, Some(l)) => opts.lr / l,
        _ => opts.lr,
    };
    let n = ds.len();
    let batch = opts.batch_size.or(AttackOptions::auto_batch(n)).filter(|&b| b < n);
    let parallel = !opts.bit_reproducible;
    let mut rng = SeededRng::new(seed, 0x7a);
    let mut buf = vec![0.0; params.len()];
    for epoch in 0..opts.epochs {
        let lr = opts.schedule.lr_at(step, epoch, opts.epochs);
        match batch {
            None => {
                let g = mean_param_grad_with(spec, &params, ds, parallel)?;
                if norm(&g) < opts.grad_tol {
                    break;
                }
                heavy_ball(&mut params.values, &mut buf, &g, lr, opts.momentum);
            }
            Some(b) => {
                for chunk in rng.permutation(n).chunks(b) {
                    let sub = ds.subset(chunk);
                    let g = mean_param_grad_with(spec, &params, &sub, parallel)?;
                    heavy_ball(&mut params.values, &mut buf, &g, lr, opts.momentum);
                }
                if norm(&mean_param_grad_with(spec, &params, ds, parallel)?) < opts.grad_tol {
                    break;
                }
            }
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("parameters became non-finite at epoch {epoch}")));
        }
    }
    Ok(params)
}

fn heavy_ball(w: &mut [f64], buf: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((wi, bi), gi) in w.iter_mut().zip(buf.iter_mut()).zip(g) {
        *bi = momentum * *bi + gi;
        *wi -= lr * *bi;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Test accuracy of the clean model (classification only).
    pub clean_acc: Option<f64>,
    pub poisoned_acc: Option<f64>,
    /// `clean_acc − poisoned_acc` in percentage points.
    pub acc_drop: Option<f64>,
    /// `‖g(χ)‖` at the target over clean plus poison.
    pub grad_norm_at_target: f64,
    /// `‖w_retrained − w_target‖`.
    pub param_distance: f64,
    pub eps_d: f64,
    pub tau: Option<f64>,
    pub seed: u64,
}

/// Clean model and its test accuracy, reused across many poisoned retrains.
pub struct Evaluator<'a> {
    pub spec: &'a ModelSpec,
    pub clean: &'a Dataset,
    pub test: &'a Dataset,
    pub opts: TrainOptions,
    pub seed: u64,
    pub clean_params: Params,
    pub clean_acc: Option<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(spec: &'a ModelSpec, clean: &'a Dataset, test: &'a Dataset, opts: TrainOptions, seed: u64) -> Result<Self> {
        let clean_params = train(spec, clean, &opts, seed)?;
        let clean_acc = match clean.task {
            Task::Classification { .. } => Some(accuracy(spec, &clean_params, test)?),
            Task::Regression => None,
        };
        Ok(Self {
            spec,
            clean,
            test,
            opts,
            seed,
            clean_params,
            clean_acc,
        })
    }

    /// Retrains on `base ∪ poison` (with `base` defaulting to the clean set)
    /// and compares against the clean model.
    pub fn evaluate(&self, base: Option<&Dataset>, poison: &Dataset, target: &Params, tau: Option<f64>) -> Result<EvalReport> {
        let base = base.unwrap_or(self.clean);
        let mixed = if poison.is_empty() { base.clone() } else { base.concat(poison)? };
        let retrained = if poison.is_empty() && base == self.clean {
            self.clean_params.clone()
        } else {
            train(self.spec, &mixed, &self.opts, self.seed)?
        };
        let poisoned_acc = match self.clean_acc {
            Some(_) => Some(accuracy(self.spec, &retrained, self.test)?),
            None => None,
        };
        let g = mean_param_grad_with(self.spec, target, &mixed, !self.opts.bit_reproducible)?;
        Ok(EvalReport {
            clean_acc: self.clean_acc,
            poisoned_acc,
            acc_drop: self.clean_acc.zip(poisoned_acc).map(|(c, p)| 100.0 * (c - p)),
            grad_norm_at_target: norm(&g),
            param_distance: dist(retrained.as_slice(), target.as_slice()),
            eps_d: poison.len() as f64 / self.clean.len() as f64,
            tau,
            seed: self.seed,
        })
    }
}

/// Trains clean and poisoned models from the same seed and reports the
/// damage.
pub fn retrain_and_eval(
    clean: &Dataset,
    poison: &Dataset,
    test: &Dataset,
    spec: &ModelSpec,
    target: &Params,
    opts: &TrainOptions,
    seed: u64,
) -> Result<EvalReport> {
    let tau = if spec.is_classifier() {
        Some(tau_threshold(spec, target, clean, None)?.tau)
    } else {
        None
    };
    Evaluator::new(spec, clean, test, opts.clone(), seed)?.evaluate(None, poison, target, tau)
}

/// How a sweep's budget list is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsMode {
    #[default]
    Absolute,
    /// Each entry multiplies the target's own τ.
    RelativeToTau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target_id: usize,
    pub w1: f64,
    pub w2: f64,
    pub tau: f64,
    pub eps_d: f64,
    pub acc_drop: f64,
    pub grad_norm: f64,
    pub final_merit: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub eps_list: Vec<f64>,
    pub eps_mode: EpsMode,
    pub attack: AttackOptions,
    pub train: TrainOptions,
    pub seed: u64,
    /// Class-count convention for τ (`None`: the model's own).
    pub c_convention: Option<usize>,
}

/// Runs GC and a retrain for every `(target, ε)` cell.
///
/// Rows come out target-major, ε-minor regardless of scheduling. Cell
/// `(i, j)` attacks with seed `mix_seed(seed, i, j)`; all retrains share the
/// sweep seed. Per-cell failures land in the `error` column.
pub fn sweep_heatmap(clean: &Dataset, test: &Dataset, spec: &ModelSpec, targets: &[Params], settings: &SweepSettings) -> Result<Vec<SweepRow>> {
    if targets.is_empty() || settings.eps_list.is_empty() {
        return Err(Error::InvalidArgument("sweep needs targets and budgets".into()));
    }
    let eval = Evaluator::new(spec, clean, test, settings.train.clone(), settings.seed)?;
    let taus: Vec<Result<f64>> = targets
        .iter()
        .map(|t| {
            if spec.is_classifier() {
                tau_threshold(spec, t, clean, settings.c_convention).map(|r| r.tau)
            } else {
                Ok(0.0)
            }
        })
        .collect();
    let cells: Vec<(usize, usize)> = (0..targets.len())
        .flat_map(|i| (0..settings.eps_list.len()).map(move |j| (i, j)))
        .collect();
    let run = |&(i, j): &(usize, usize)| -> SweepRow {
        let target = &targets[i];
        let out = &target.values[spec.output_block()];
        let mut row = SweepRow {
            target_id: i,
            w1: out.first().copied().unwrap_or(f64::NAN),
            w2: out.get(1).copied().unwrap_or(f64::NAN),
            tau: f64::NAN,
            eps_d: f64::NAN,
            acc_drop: f64::NAN,
            grad_norm: f64::NAN,
            final_merit: f64::NAN,
            error: None,
        };
        let result = (|| -> Result<()> {
            let tau = match &taus[i] {
                Ok(t) => *t,
                Err(e) => return Err(Error::InvalidArgument(e.to_string())),
            };
            row.tau = tau;
            let eps = match settings.eps_mode {
                EpsMode::Absolute => settings.eps_list[j],
                EpsMode::RelativeToTau => settings.eps_list[j] * tau,
            };
            row.eps_d = eps;
            let opts = AttackOptions {
                seed: mix_seed(&[settings.seed, i as u64, j as u64]),
                ..settings.attack.clone()
            };
            let res = gradient_canceling(clean, spec, target, eps, &opts)?;
            row.final_merit = res.final_merit;
            let base = res.retained.as_ref().map(|idx| clean.subset(idx));
            let rep = eval.evaluate(base.as_ref(), &res.poison, target, Some(tau))?;
            row.grad_norm = rep.grad_norm_at_target;
            row.acc_drop = rep.acc_drop.unwrap_or(f64::NAN);
            Ok(())
        })();
        if let Err(e) = result {
            row.error = Some(e.to_string());
        }
        row
    };
    Ok(cells.par_iter().map(run).collect())
}

/// One labelled GC run's per-epoch trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub setting: String,
    pub epoch: usize,
    pub merit: f64,
    pub grad_norm: f64,
}

/// Learning curves: GC merit per epoch for each `(label, target, ε)` setting.
pub fn learning_curves(clean: &Dataset, spec: &ModelSpec, settings: &[(String, Params, f64)], opts: &AttackOptions) -> Result<Vec<CurveRow>> {
    let runs: Vec<Result<(String, AttackResult)>> = settings
        .par_iter()
        .map(|(label, target, eps)| Ok((label.clone(), gradient_canceling(clean, spec, target, *eps, opts)?)))
        .collect();
    let mut rows = Vec::new();
    for run in runs {
        let (label, res) = run?;
        for (e, (m, g)) in res.merit_trace.iter().zip(&res.grad_norm_trace).enumerate() {
            rows.push(CurveRow {
                setting: label.clone(),
                epoch: e + 1,
                merit: *m,
                grad_norm: *g,
            });
        }
    }
    Ok(rows)
}

/// Shortest text that keeps 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const SWEEP_HEADER: &str = "target_id,w1,w2,tau,eps_d,acc_drop,grad_norm,final_merit,error";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.target_id,
            fmt_f64(r.w1),
            fmt_f64(r.w2),
            fmt_f64(r.tau),
            fmt_f64(r.eps_d),
            fmt_f64(r.acc_drop),
            fmt_f64(r.grad_norm),
            fmt_f64(r.final_merit),
            csv_field(r.error.as_deref().unwrap_or(""))
        );
    }
    out
}

pub fn trace_csv(res: &AttackResult) -> String {
    let mut out = String::from("epoch,merit,grad_norm\n");
    for (e, (m, g)) in res.merit_trace.iter().zip(&res.grad_norm_trace).enumerate() {
        let _ = writeln!(out, "{},{},{}", e + 1, fmt_f64(*m), fmt_f64(*g));
    }
    out
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("setting,epoch,merit,grad_norm\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", csv_field(&r.setting), r.epoch, fmt_f64(r.merit), fmt_f64(r.grad_norm));
    }
    out
}

/// Median of the finite entries; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// `(1 − λ)·a + λ·b` with `λ = m/(n + m)`: the mean gradient of a
/// concatenation expressed through its parts.
pub fn mixture_grad(g_clean: &[f64], n: usize, g_poison: &[f64], m: usize) -> Vec<f64> {
    let lambda = m as f64 / (n + m) as f64;
    g_clean
        .iter()
        .zip(g_poison)
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect()
}

/// `⟨w, g⟩ / (‖w‖‖g‖)`, handy for diagnostics.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gauss_regression, gen_or, split};
    use crate::models::mean_param_grad;

    #[test]
    fn or_is_fit_perfectly() {
        let ds = gen_or(0, 50, 0.1).unwrap();
        let spec = ModelSpec::logistic(3);
        let p = train(&spec, &ds, &TrainOptions::default(), 1).unwrap();
        assert_eq!(accuracy(&spec, &p, &ds).unwrap(), 1.0);
    }

    #[test]
    fn noiseless_least_squares_recovers_weights() {
        let ds = gen_gauss_regression(3, 40, &[0.5, -1.5, 2.0], 0.0).unwrap();
        let spec = ModelSpec::least_squares(3);
        let p = train(&spec, &ds, &TrainOptions::default(), 0).unwrap();
        assert!(dist(p.as_slice(), &[0.5, -1.5, 2.0]) < 1e-6);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = gen_or(5, 20, 0.2).unwrap();
        let spec = ModelSpec::softmax(3, 2).unwrap();
        let a = train(&spec, &ds, &TrainOptions::default(), 9).unwrap();
        let b = train(&spec, &ds, &TrainOptions::default(), 9).unwrap();
        assert_eq!(a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_poison_changes_nothing() {
        let ds = gen_or(1, 20, 0.1).unwrap();
        let (tr, te) = split(&ds, 0.7, 0).unwrap();
        let spec = ModelSpec::logistic(3);
        let empty = tr.subset(&[]);
        let target = spec.params(vec![-3.0, -3.0, 1.5]).unwrap();
        let r = retrain_and_eval(&tr, &empty, &te, &spec, &target, &TrainOptions::default(), 0).unwrap();
        assert_eq!(r.clean_acc, r.poisoned_acc);
        assert_eq!(r.acc_drop, Some(0.0));
    }

    #[test]
    fn concatenated_gradient_is_the_mixture() {
        let ds = gen_or(2, 10, 0.3).unwrap();
        let spec = ModelSpec::logistic(3);
        let w = spec.params(vec![0.4, -0.7, 0.2]).unwrap();
        let clean = ds.subset(&(0..30).collect::<Vec<_>>());
        let poison = ds.subset(&(30..40).collect::<Vec<_>>());
        let whole = mean_param_grad(&spec, &w, &clean.concat(&poison).unwrap()).unwrap();
        let mix = mixture_grad(
            &mean_param_grad(&spec, &w, &clean).unwrap(),
            30,
            &mean_param_grad(&spec, &w, &poison).unwrap(),
            10,
        );
        assert!(dist(&whole, &mix) < 1e-12);
    }

    #[test]
    fn sweep_rows_are_target_major() {
        let ds = gen_or(3, 10, 0.1).unwrap();
        let spec = ModelSpec::logistic(3);
        let targets = vec![spec.params(vec![-3.0, -3.0, 1.5]).unwrap(), spec.params(vec![-4.0, -3.5, 1.5]).unwrap()];
        let settings = SweepSettings {
            eps_list: vec![0.5, 1.0],
            eps_mode: EpsMode::Absolute,
            attack: AttackOptions {
                epochs: 5,
                ..AttackOptions::default()
            },
            train: TrainOptions {
                epochs: 20,
                ..TrainOptions::default()
            },
            seed: 4,
            c_convention: None,
        };
        let rows = sweep_heatmap(&ds, &ds, &spec, &targets, &settings).unwrap();
        let order: Vec<(usize, f64)> = rows.iter().map(|r| (r.target_id, r.eps_d)).collect();
        assert_eq!(order, vec![(0, 0.5), (0, 1.0), (1, 0.5), (1, 1.0)]);
        assert!(rows.iter().all(|r| r.error.is_none()));
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with(SWEEP_HEADER));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn sweep_reports_cell_errors() {
        let ds = gen_or(3, 2, 0.1).unwrap();
        let spec = ModelSpec::logistic(3);
        let targets = vec![spec.params(vec![-3.0, -3.0, 1.5]).unwrap()];
        let settings = SweepSettings {
            eps_list: vec![0.01],
            eps_mode: EpsMode::Absolute,
            attack: AttackOptions::default(),
            train: TrainOptions::default(),
            seed: 0,
            c_convention: None,
        };
        let rows = sweep_heatmap(&ds, &ds, &spec, &targets, &settings).unwrap();
        assert!(rows[0].error.as_deref().unwrap().contains("no poison points"));
        assert!(sweep_csv(&rows).lines().nth(1).unwrap().ends_with("n = 8"));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, f64::NAN, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
