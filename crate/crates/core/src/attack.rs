//! Poison construction for a fixed target parameter.
//!
//! * [`gradient_canceling`] moves poison features so that the weighted poison
//!   gradient cancels the clean gradient at the target, minimizing
//!   `½‖g(μ) + ε·g(ν̂)‖²`.
//! * [`gradient_matching`] instead aligns the poison gradient with a
//!   reversed-loss gradient by cosine dissimilarity.
//! * [`frank_wolfe_attack`] optimizes over weighted atoms of a discretized or
//!   line-restricted domain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels, Target, Task};
use crate::error::{Error, Result};
use crate::mathcore::{axpy, dot, golden_section_min, norm, Matrix, SeededRng};
use crate::models::{self, mean_param_grad, param_grad, reversed_grad, Family, ModelSpec, Params};

/// Below this many points per batch the per-point work stays on one thread.
const PAR_MIN: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    /// Step size at `epoch` (0-based) out of `epochs`.
    pub fn lr_at(self, lr: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => lr,
            Schedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clamp to the dataset's admissible box.
    #[default]
    Box,
    /// Clamp to the per-feature range observed in the clean data.
    CleanRange,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    /// `None` is full batch.
    pub batch_size: Option<usize>,
    pub clip_mode: ClipMode,
    /// Also optimize soft labels of classification poison. Regression
    /// targets are always optimized.
    pub optimize_labels: bool,
    pub replace_mode: bool,
    pub seed: u64,
    /// Recompute the poison gradient from scratch every epoch and record the
    /// largest merit discrepancy against the running sum.
    pub audit: bool,
}

impl Default for AttackOptions {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 0.5,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            batch_size: None,
            clip_mode: ClipMode::Box,
            optimize_labels: false,
            replace_mode: false,
            seed: 0,
            audit: false,
        }
    }
}

impl AttackOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Full batch up to ten thousand points, batches of 1000 beyond.
    pub fn auto_batch(n: usize) -> Option<usize> {
        (n > 10_000).then_some(1000)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub poison: Dataset,
    pub initial_merit: f64,
    /// Objective after each epoch.
    pub merit_trace: Vec<f64>,
    /// `‖g(χ)‖` after each epoch.
    pub grad_norm_trace: Vec<f64>,
    pub final_merit: f64,
    /// `‖g(μ) + ε·g(ν̂)‖ / (1 + ε)`.
    pub final_grad_norm: f64,
    /// Indices of the clean samples kept in replace mode.
    pub retained: Option<Vec<usize>>,
    /// Largest `|incremental − recomputed|` merit seen when auditing.
    pub audit_drift: Option<f64>,
}

/// `round(n·ε)` with halves rounded up.
pub fn poison_count(n: usize, eps_d: f64) -> usize {
    (n as f64 * eps_d + 0.5).floor() as usize
}

/// Coordinate-wise clamp to `bounds`.
pub fn clamp_row(row: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in row.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

/// Projection of every row onto the admissible set for `mode`.
pub fn project_admissible(points: &Matrix, domain_box: &[(f64, f64)], mode: ClipMode, clean_range: &[(f64, f64)]) -> Matrix {
    let mut out = points.clone();
    if let Some(b) = bounds_for(mode, domain_box, clean_range) {
        for i in 0..out.rows() {
            clamp_row(out.row_mut(i), b);
        }
    }
    out
}

fn bounds_for<'a>(mode: ClipMode, domain_box: &'a [(f64, f64)], clean_range: &'a [(f64, f64)]) -> Option<&'a [(f64, f64)]> {
    match mode {
        ClipMode::Box => Some(domain_box),
        ClipMode::CleanRange => Some(clean_range),
        ClipMode::None => None,
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &mut [f64]) {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

/// Seeded draw of `m` indices from `0..n`; without replacement while `m ≤ n`,
/// cycling through fresh permutations otherwise.
fn subsample(n: usize, m: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let perm = rng.permutation(n);
        out.extend(perm.into_iter().take(m - out.len()));
    }
    out
}

/// Clean data the attack works against, plus the retained indices in
/// replace mode.
fn attack_base(clean: &Dataset, eps_d: f64, opts: &AttackOptions) -> (Dataset, Option<Vec<usize>>) {
    if !opts.replace_mode {
        return (clean.clone(), None);
    }
    let n = clean.len();
    let keep = ((n as f64 / (1.0 + eps_d)) + 1e-9).floor() as usize;
    let mut idx = SeededRng::new(opts.seed, 0x7e).permutation(n);
    idx.truncate(keep.max(1));
    idx.sort_unstable();
    (clean.subset(&idx), Some(idx))
}

/// Mutable poison set with a running gradient sum.
struct PoisonState<'a> {
    spec: &'a ModelSpec,
    w: &'a [f64],
    x: Matrix,
    labels: Labels,
    /// Σⱼ g(zⱼ) under `grad_fn`.
    sum: Vec<f64>,
    grad_fn: GradFn,
    vel_x: Matrix,
    vel_y: Option<Matrix>,
    bounds: Option<Vec<(f64, f64)>>,
}

/// Per-sample parameter gradient.
type GradFn = fn(&ModelSpec, &[f64], &[f64], Target<'_>) -> Result<Vec<f64>>;

impl<'a> PoisonState<'a> {
    fn new(
        spec: &'a ModelSpec,
        target: &'a Params,
        init: Dataset,
        opts: &AttackOptions,
        clean_range: &[(f64, f64)],
        grad_fn: GradFn,
    ) -> Result<Self> {
        let w = target.as_slice();
        let bounds = bounds_for(opts.clip_mode, &init.domain_box, clean_range).map(<[_]>::to_vec);
        let mut x = init.x;
        if let Some(b) = &bounds {
            for i in 0..x.rows() {
                clamp_row(x.row_mut(i), b);
            }
        }
        let mut labels = init.labels;
        let mut vel_y = None;
        // a regression poison point is the pair (x, y); its label always moves
        if opts.optimize_labels || !spec.is_classifier() {
            match (&labels, spec.classes()) {
                (Labels::Real(v), None) => vel_y = Some(Matrix::zeros(v.len(), 1)),
                (l, Some(c)) => {
                    let soft = l.to_soft(c)?;
                    vel_y = Some(Matrix::zeros(soft.rows(), c));
                    labels = Labels::Soft(soft);
                }
                _ => return Err(Error::InvalidArgument("labels do not match model".into())),
            }
        }
        let m = x.rows();
        let mut sum = vec![0.0; w.len()];
        for j in 0..m {
            axpy(1.0, &grad_fn(spec, w, x.row(j), labels.get(j))?, &mut sum);
        }
        Ok(Self {
            spec,
            w,
            vel_x: Matrix::zeros(m, x.cols()),
            x,
            labels,
            sum,
            grad_fn,
            vel_y,
            bounds,
        })
    }

    fn len(&self) -> usize {
        self.x.rows()
    }

    fn recomputed_sum(&self) -> Result<Vec<f64>> {
        let mut s = vec![0.0; self.w.len()];
        for j in 0..self.len() {
            axpy(1.0, &(self.grad_fn)(self.spec, self.w, self.x.row(j), self.labels.get(j))?, &mut s);
        }
        Ok(s)
    }

    /// One momentum step on the points of `batch` along
    /// `coef·∇_z ⟨g(z), dir⟩`, keeping the running sum in sync.
    fn step(&mut self, batch: &[usize], dir: &[f64], coef: f64, lr: f64, momentum: f64) -> Result<()> {
        let spec = self.spec;
        let w = self.w;
        let grad_fn = self.grad_fn;
        let with_labels = self.vel_y.is_some();
        let work = |j: usize, x: &Matrix, labels: &Labels| -> Result<(Vec<f64>, Option<Vec<f64>>, Vec<f64>)> {
            let t = labels.get(j);
            let gx = models::mixed_vjp(spec, w, x.row(j), t, dir)?;
            let gy = if with_labels {
                Some(models::label_vjp(spec, w, x.row(j), t, dir)?)
            } else {
                None
            };
            Ok((gx, gy, grad_fn(spec, w, x.row(j), t)?))
        };
        let parts: Vec<_> = if batch.len() >= PAR_MIN {
            batch.par_iter().map(|&j| work(j, &self.x, &self.labels)).collect::<Result<_>>()?
        } else {
            batch.iter().map(|&j| work(j, &self.x, &self.labels)).collect::<Result<_>>()?
        };

        let mut olds = Vec::with_capacity(batch.len());
        for (&j, (gx, gy, old)) in batch.iter().zip(parts) {
            let vel = self.vel_x.row_mut(j);
            for (v, g) in vel.iter_mut().zip(&gx) {
                *v = momentum * *v + coef * g;
            }
            let row = self.x.row_mut(j);
            axpy(-lr, self.vel_x.row(j), row);
            if let Some(b) = &self.bounds {
                clamp_row(row, b);
            }
            if let (Some(gy), Some(vy)) = (gy, self.vel_y.as_mut()) {
                let vrow = vy.row_mut(j);
                for (v, g) in vrow.iter_mut().zip(&gy) {
                    *v = momentum * *v + coef * g;
                }
                match &mut self.labels {
                    Labels::Real(ys) => ys[j] -= lr * vrow[0],
                    Labels::Soft(s) => {
                        let srow = s.row_mut(j);
                        axpy(-lr, vrow, srow);
                        project_simplex(srow);
                    }
                    Labels::Class(_) => unreachable!("labels were made soft"),
                }
            }
            olds.push(old);
        }

        let fresh = |j: usize| grad_fn(spec, w, self.x.row(j), self.labels.get(j));
        let news: Vec<Vec<f64>> = if batch.len() >= PAR_MIN {
            batch.par_iter().map(|&j| fresh(j)).collect::<Result<_>>()?
        } else {
            batch.iter().map(|&j| fresh(j)).collect::<Result<_>>()?
        };
        for (old, new) in olds.iter().zip(&news) {
            for ((s, o), n) in self.sum.iter_mut().zip(old).zip(new) {
                *s += n - o;
            }
        }
        if self.x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("poison features became non-finite".into()));
        }
        Ok(())
    }

    fn into_dataset(self, task: Task, domain_box: Vec<(f64, f64)>) -> Result<Dataset> {
        Dataset::new(self.x, self.labels, task, domain_box)
    }
}

fn batches(m: usize, batch: Option<usize>, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    match batch {
        Some(b) if b < m => rng.permutation(m).chunks(b).map(<[usize]>::to_vec).collect(),
        _ => vec![(0..m).collect()],
    }
}

struct Setup {
    base: Dataset,
    retained: Option<Vec<usize>>,
    init: Dataset,
    clean_range: Vec<(f64, f64)>,
    m: usize,
}

fn setup(clean: &Dataset, spec: &ModelSpec, target: &Params, eps_d: f64, opts: &AttackOptions) -> Result<Setup> {
    opts.validate()?;
    spec.check_dataset(clean)?;
    if target.len() != spec.num_params() {
        return Err(Error::Shape("target does not match the model".into()));
    }
    if !(eps_d > 0.0 && eps_d.is_finite()) {
        return Err(Error::InvalidArgument(format!("ε_d = {eps_d} must be positive")));
    }
    let m = poison_count(clean.len(), eps_d);
    if m == 0 {
        return Err(Error::InvalidArgument(format!(
            "ε_d = {eps_d} gives no poison points for n = {}",
            clean.len()
        )));
    }
    let (base, retained) = attack_base(clean, eps_d, opts);
    let mut rng = SeededRng::new(opts.seed, 0x6c);
    let init = base.subset(&subsample(base.len(), m, &mut rng));
    Ok(Setup {
        clean_range: clean.feature_range(),
        base,
        retained,
        init,
        m,
    })
}

fn half_sq(v: &[f64]) -> f64 {
    0.5 * dot(v, v)
}

/// `g(μ) + (ε/m)·sum`.
fn residual(g_mu: &[f64], sum: &[f64], eps_over_m: f64) -> Vec<f64> {
    let mut r = g_mu.to_vec();
    axpy(eps_over_m, sum, &mut r);
    r
}

/// Gradient canceling: minimize `½‖g(μ) + ε·g(ν̂)‖²` over the features
/// (and optionally labels) of `round(n·ε)` poison points initialized from a
/// seeded subsample of the clean data.
pub fn gradient_canceling(clean: &Dataset, spec: &ModelSpec, target: &Params, eps_d: f64, opts: &AttackOptions) -> Result<AttackResult> {
    let s = setup(clean, spec, target, eps_d, opts)?;
    let g_mu = mean_param_grad(spec, target, &s.base)?;
    let m = s.m;
    let coef = eps_d / m as f64;
    let mut state = PoisonState::new(spec, target, s.init, opts, &s.clean_range, param_grad)?;
    let mut rng = SeededRng::new(opts.seed, 0x6d);
    let norm_scale = 1.0 / (1.0 + eps_d);

    let initial_merit = half_sq(&residual(&g_mu, &state.sum, coef));
    if !initial_merit.is_finite() {
        return Err(Error::Divergence("initial merit is not finite".into()));
    }
    let mut merit_trace = Vec::with_capacity(opts.epochs);
    let mut grad_norm_trace = Vec::with_capacity(opts.epochs);
    let mut drift: Option<f64> = opts.audit.then_some(0.0);

    for epoch in 0..opts.epochs {
        let lr = opts.schedule.lr_at(opts.lr, epoch, opts.epochs);
        for batch in batches(m, opts.batch_size, &mut rng) {
            let r = residual(&g_mu, &state.sum, coef);
            state.step(&batch, &r, coef, lr, opts.momentum)?;
        }
        let r = residual(&g_mu, &state.sum, coef);
        let merit = half_sq(&r);
        if !merit.is_finite() {
            return Err(Error::Divergence(format!("merit became non-finite at epoch {epoch}")));
        }
        if let Some(d) = drift.as_mut() {
            let exact = half_sq(&residual(&g_mu, &state.recomputed_sum()?, coef));
            *d = d.max((exact - merit).abs());
        }
        merit_trace.push(merit);
        grad_norm_trace.push(norm(&r) * norm_scale);
    }

    let final_merit = *merit_trace.last().expect("epochs ≥ 1");
    let final_grad_norm = *grad_norm_trace.last().expect("epochs ≥ 1");
    Ok(AttackResult {
        poison: state.into_dataset(clean.task, clean.domain_box.clone())?,
        initial_merit,
        merit_trace,
        grad_norm_trace,
        final_merit,
        final_grad_norm,
        retained: s.retained,
        audit_drift: drift,
    })
}

/// `1 − cos(a, s)`.
pub fn cosine_dissimilarity(a: &[f64], s: &[f64]) -> f64 {
    let den = norm(a) * norm(s);
    if den == 0.0 {
        1.0
    } else {
        1.0 - dot(a, s) / den
    }
}

/// Gradient of `1 − cos(a, s)` with respect to `s`.
fn dissimilarity_grad(a: &[f64], s: &[f64]) -> Vec<f64> {
    let na = norm(a).max(1e-300);
    let ns = norm(s).max(1e-300);
    let c = dot(a, s) / (na * ns * ns * ns);
    a.iter().zip(s).map(|(ai, si)| -(ai / (na * ns) - c * si)).collect()
}

/// Gradient matching: minimize the cosine dissimilarity between the clean
/// reversed-loss gradient and the mean poison gradient. Shares the optimizer
/// and projection stack with [`gradient_canceling`]; `merit_trace` holds the
/// dissimilarity.
pub fn gradient_matching(clean: &Dataset, spec: &ModelSpec, target: &Params, eps_d: f64, opts: &AttackOptions) -> Result<AttackResult> {
    if matches!(spec.family, Family::Mlp1 { .. }) {
        return Err(Error::InvalidArgument("gradient matching supports linear families".into()));
    }
    let s = setup(clean, spec, target, eps_d, opts)?;
    let w = target.as_slice();
    let m = s.m;
    let inv_m = 1.0 / m as f64;
    let mut a = vec![0.0; w.len()];
    for i in 0..s.base.len() {
        axpy(1.0 / s.base.len() as f64, &reversed_grad(spec, w, s.base.x.row(i), s.base.target(i))?, &mut a);
    }
    let g_mu = mean_param_grad(spec, target, &s.base)?;
    let mut state = PoisonState::new(spec, target, s.init, opts, &s.clean_range, param_grad)?;
    let mut rng = SeededRng::new(opts.seed, 0x6d);
    let mean = |sum: &[f64]| sum.iter().map(|v| v * inv_m).collect::<Vec<_>>();

    let initial_merit = cosine_dissimilarity(&a, &mean(&state.sum));
    let mut merit_trace = Vec::with_capacity(opts.epochs);
    let mut grad_norm_trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let lr = opts.schedule.lr_at(opts.lr, epoch, opts.epochs);
        for batch in batches(m, opts.batch_size, &mut rng) {
            let q = dissimilarity_grad(&a, &mean(&state.sum));
            state.step(&batch, &q, inv_m, lr, opts.momentum)?;
        }
        let dis = cosine_dissimilarity(&a, &mean(&state.sum));
        if !dis.is_finite() {
            return Err(Error::Divergence(format!("dissimilarity became non-finite at epoch {epoch}")));
        }
        merit_trace.push(dis);
        grad_norm_trace.push(norm(&residual(&g_mu, &state.sum, eps_d * inv_m)) / (1.0 + eps_d));
    }
    Ok(AttackResult {
        poison: state.into_dataset(clean.task, clean.domain_box.clone())?,
        initial_merit,
        final_merit: *merit_trace.last().expect("epochs ≥ 1"),
        final_grad_norm: *grad_norm_trace.last().expect("epochs ≥ 1"),
        merit_trace,
        grad_norm_trace,
        retained: s.retained,
        audit_drift: None,
    })
}

// ---------------------------------------------------------------------------
// Frank-Wolfe over measures
// ---------------------------------------------------------------------------

/// Owned label of a candidate poison point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonLabel {
    Class(usize),
    Value(f64),
}

impl PoisonLabel {
    pub fn as_target(&self) -> Target<'static> {
        match *self {
            PoisonLabel::Class(k) => Target::Class(k),
            PoisonLabel::Value(v) => Target::Value(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FwDomain {
    /// Every row of `points` paired with every label.
    Grid { points: Matrix, labels: Vec<PoisonLabel> },
    /// Points `α·u` for `|α| ≤ alpha_max`, `u = g(μ)/‖g(μ)‖` unless given,
    /// paired with every label. Scalar-output linear families only.
    Line {
        direction: Option<Vec<f64>>,
        alpha_max: f64,
        labels: Vec<PoisonLabel>,
    },
}

/// Cartesian grid with `per_dim` evenly spaced values in each `[lo, hi]`.
pub fn grid_points(bounds: &[(f64, f64)], per_dim: usize) -> Result<Matrix> {
    if per_dim < 2 || bounds.is_empty() || bounds.iter().any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h)) {
        return Err(Error::InvalidArgument("grid needs finite bounds and ≥ 2 points per axis".into()));
    }
    let d = bounds.len();
    let total = per_dim
        .checked_pow(d as u32)
        .filter(|&t| t <= 10_000_000)
        .ok_or_else(|| Error::InvalidArgument("grid too large".into()))?;
    let mut data = Vec::with_capacity(total * d);
    for flat in 0..total {
        let mut rem = flat;
        let mut row = vec![0.0; d];
        for k in (0..d).rev() {
            let i = rem % per_dim;
            rem /= per_dim;
            let (lo, hi) = bounds[k];
            row[k] = lo + (hi - lo) * i as f64 / (per_dim - 1) as f64;
        }
        data.extend(row);
    }
    Matrix::new(total, d, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FwStep {
    /// `η_t = 2/(t + 2)`.
    OpenLoop,
    /// Exact minimization along the segment (the objective is quadratic).
    #[default]
    LineSearch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FwResult {
    pub x: Matrix,
    pub labels: Vec<PoisonLabel>,
    pub weights: Vec<f64>,
    /// `½‖g(μ) + ε·g(ν_t)‖²` after each iteration.
    pub objective_trace: Vec<f64>,
    /// Number of atoms after each iteration.
    pub support_trace: Vec<usize>,
}

impl FwResult {
    /// Uniform poison set of `count` points, replicating atoms in proportion
    /// to their weights (largest remainder, ties to earlier atoms).
    pub fn to_dataset(&self, count: usize, task: Task, domain_box: Vec<(f64, f64)>) -> Result<Dataset> {
        let raw: Vec<f64> = self.weights.iter().map(|w| w * count as f64).collect();
        let mut reps: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut left = count.saturating_sub(reps.iter().sum());
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(order.len().max(1) * 2) {
            if left == 0 {
                break;
            }
            reps[i] += 1;
            left -= 1;
        }
        let mut idx = Vec::with_capacity(count);
        for (i, &r) in reps.iter().enumerate() {
            idx.extend(std::iter::repeat_n(i, r));
        }
        let x = self.x.select_rows(&idx);
        let labels = match task {
            Task::Regression => Labels::Real(
                idx.iter()
                    .map(|&i| match self.labels[i] {
                        PoisonLabel::Value(v) => Ok(v),
                        PoisonLabel::Class(_) => Err(Error::InvalidArgument("class label in regression".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
            Task::Classification { .. } => Labels::Class(
                idx.iter()
                    .map(|&i| match self.labels[i] {
                        PoisonLabel::Class(k) => Ok(k),
                        PoisonLabel::Value(_) => Err(Error::InvalidArgument("real label in classification".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Dataset::new(x, labels, task, domain_box)
    }
}

/// Linear minimization oracle: candidate minimizing `⟨r, ∇_w ℓ(z; w)⟩`.
struct Oracle<'a> {
    spec: &'a ModelSpec,
    w: &'a [f64],
    domain: &'a FwDomain,
    /// Precomputed gradients of every grid candidate (point-major, label-minor).
    grid_grads: Vec<Vec<f64>>,
    direction: Vec<f64>,
}

impl<'a> Oracle<'a> {
    fn new(spec: &'a ModelSpec, w: &'a [f64], domain: &'a FwDomain, g_mu: &[f64]) -> Result<Self> {
        let mut grid_grads = Vec::new();
        let mut direction = Vec::new();
        match domain {
            FwDomain::Grid { points, labels } => {
                if points.rows() == 0 || labels.is_empty() {
                    return Err(Error::InvalidArgument("empty Frank-Wolfe domain".into()));
                }
                for i in 0..points.rows() {
                    for l in labels {
                        grid_grads.push(param_grad(spec, w, points.row(i), l.as_target())?);
                    }
                }
            }
            FwDomain::Line {
                direction: dir,
                alpha_max,
                labels,
            } => {
                if labels.is_empty() || !(*alpha_max > 0.0) {
                    return Err(Error::InvalidArgument("empty Frank-Wolfe domain".into()));
                }
                if !matches!(spec.family, Family::LeastSquares | Family::LogisticBinary) {
                    return Err(Error::InvalidArgument("line domain needs a scalar-output linear model".into()));
                }
                let u = dir.clone().unwrap_or_else(|| g_mu.to_vec());
                let n = norm(&u);
                if n == 0.0 || u.len() != spec.input_dim {
                    return Err(Error::InvalidArgument("line direction must be a nonzero feature vector".into()));
                }
                direction = u.iter().map(|v| v / n).collect();
            }
        }
        Ok(Self {
            spec,
            w,
            domain,
            grid_grads,
            direction,
        })
    }

    /// Returns `(x, label, gradient)` of the minimizer.
    fn solve(&self, r: &[f64]) -> Result<(Vec<f64>, PoisonLabel, Vec<f64>)> {
        match self.domain {
            FwDomain::Grid { points, labels } => {
                let mut best = 0;
                let mut best_v = f64::INFINITY;
                for (k, g) in self.grid_grads.iter().enumerate() {
                    let v = dot(r, g);
                    if v < best_v {
                        best_v = v;
                        best = k;
                    }
                }
                let (i, l) = (best / labels.len(), best % labels.len());
                Ok((points.row(i).to_vec(), labels[l], self.grid_grads[best].clone()))
            }
            FwDomain::Line { alpha_max, labels, .. } => {
                const STEPS: usize = 2000;
                let u = &self.direction;
                let point = |alpha: f64| u.iter().map(|v| alpha * v).collect::<Vec<_>>();
                let value = |alpha: f64, l: &PoisonLabel| -> f64 {
                    param_grad(self.spec, self.w, &point(alpha), l.as_target()).map_or(f64::INFINITY, |g| dot(r, &g))
                };
                let mut best = (f64::INFINITY, 0.0, labels[0]);
                for l in labels {
                    let h = 2.0 * alpha_max / STEPS as f64;
                    let mut arg = 0;
                    let mut val = f64::INFINITY;
                    for k in 0..=STEPS {
                        let v = value(-alpha_max + h * k as f64, l);
                        if v < val {
                            val = v;
                            arg = k;
                        }
                    }
                    let lo = -alpha_max + h * arg.saturating_sub(1) as f64;
                    let hi = (-alpha_max + h * (arg + 1) as f64).min(*alpha_max);
                    let (a, v) = golden_section_min(|a| value(a, l), lo, hi, 1e-12);
                    let (a, v) = if v < val { (a, v) } else { (-alpha_max + h * arg as f64, val) };
                    if v < best.0 {
                        best = (v, a, *l);
                    }
                }
                let x = point(best.1);
                let g = param_grad(self.spec, self.w, &x, best.2.as_target())?;
                Ok((x, best.2, g))
            }
        }
    }
}

/// Frank-Wolfe on the measure `ν`: each iteration adds the oracle's atom with
/// weight `η_t` and shrinks the others by `1 − η_t`. The first step always
/// uses `η₀ = 1`, so the initial measure is irrelevant.
pub fn frank_wolfe_attack(
    clean: &Dataset,
    spec: &ModelSpec,
    target: &Params,
    eps_d: f64,
    domain: &FwDomain,
    iters: usize,
    step: FwStep,
) -> Result<FwResult> {
    if iters == 0 {
        return Err(Error::InvalidArgument("Frank-Wolfe needs ≥ 1 iteration".into()));
    }
    if !(eps_d > 0.0) {
        return Err(Error::InvalidArgument("ε_d must be positive".into()));
    }
    let w = target.as_slice();
    let g_mu = mean_param_grad(spec, target, clean)?;
    let oracle = Oracle::new(spec, w, domain, &g_mu)?;
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<PoisonLabel> = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut g_nu = vec![0.0; w.len()];
    let mut objective_trace = Vec::with_capacity(iters);
    let mut support_trace = Vec::with_capacity(iters);

    for t in 0..iters {
        let r = residual(&g_mu, &g_nu, eps_d);
        let (x, l, g) = oracle.solve(&r)?;
        let eta = if t == 0 {
            1.0
        } else {
            match step {
                FwStep::OpenLoop => 2.0 / (t as f64 + 2.0),
                FwStep::LineSearch => {
                    let d: Vec<f64> = g.iter().zip(&g_nu).map(|(a, b)| a - b).collect();
                    let dd = dot(&d, &d);
                    if dd == 0.0 {
                        0.0
                    } else {
                        (-dot(&r, &d) / (eps_d * dd)).clamp(0.0, 1.0)
                    }
                }
            }
        };
        if eta > 0.0 {
            weights.iter_mut().for_each(|v| *v *= 1.0 - eta);
            g_nu.iter_mut().zip(&g).for_each(|(a, b)| *a = (1.0 - eta) * *a + eta * b);
            match xs.iter().zip(&labels).position(|(px, pl)| *px == x && *pl == l) {
                Some(k) => weights[k] += eta,
                None => {
                    xs.push(x);
                    labels.push(l);
                    grads.push(g);
                    weights.push(eta);
                }
            }
            // drop atoms whose weight vanished
            let mut k = 0;
            while k < weights.len() {
                if weights[k] == 0.0 {
                    weights.remove(k);
                    xs.remove(k);
                    labels.remove(k);
                    grads.remove(k);
                } else {
                    k += 1;
                }
            }
        }
        objective_trace.push(half_sq(&residual(&g_mu, &g_nu, eps_d)));
        support_trace.push(weights.len());
    }
    let x = Matrix::from_rows(&xs)?;
    Ok(FwResult {
        x,
        labels,
        weights,
        objective_trace,
        support_trace,
    })
}
