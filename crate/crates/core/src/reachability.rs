//! Reachability thresholds: when can poisoning at budget `ε_d` make a target
//! parameter stationary on the mixed distribution?
//!
//! With `λ = ε_d / (1 + ε_d)`, the target is reachable iff
//! `0 ∈ (1 − λ)·g(μ) + λ·conv{∇_w ℓ(z; w) : z admissible}`. For scalar-output
//! models this reduces to comparing the alignment `⟨w, g(μ)⟩` with the range
//! `[a, b]` of `t·l′(t)`; for cross-entropy `a = −W((c−1)/e)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mathcore::{dot, golden_section_min, lambert_w0, norm};
use crate::models::{mean_param_grad, Family, ModelSpec, Params};

const E: f64 = std::f64::consts::E;

/// Loss profiles `l(t)` of the margin `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Square,
    Hinge,
    Exponential,
    /// `−(4t+1)e⁻²` for `t ≤ −½`, `exp(1/t)` on `(−½, 0)`, `0` for `t ≥ 0`.
    Dichotomy,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Logistic,
        LossKind::Square,
        LossKind::Hinge,
        LossKind::Exponential,
        LossKind::Dichotomy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Logistic => "logistic",
            LossKind::Square => "square",
            LossKind::Hinge => "hinge",
            LossKind::Exponential => "exponential",
            LossKind::Dichotomy => "dichotomy",
        }
    }

    /// `l(t)`. Square loss is taken against label 0, i.e. `t²/2`.
    pub fn value(self, t: f64) -> f64 {
        match self {
            LossKind::Logistic => (-t.abs()).exp().ln_1p() + (-t).max(0.0),
            LossKind::Square => 0.5 * t * t,
            LossKind::Hinge => (1.0 - t).max(0.0),
            LossKind::Exponential => (-t).exp(),
            LossKind::Dichotomy => {
                if t <= -0.5 {
                    -(4.0 * t + 1.0) * (-2.0f64).exp()
                } else if t < 0.0 {
                    (1.0 / t).exp()
                } else {
                    0.0
                }
            }
        }
    }

    /// `t·l′(t)`.
    pub fn t_dl(self, t: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                // l′(t) = −σ(−t)
                let s = if t >= 0.0 {
                    let e = (-t).exp();
                    e / (1.0 + e)
                } else {
                    1.0 / (1.0 + t.exp())
                };
                -t * s
            }
            LossKind::Square => t * t,
            LossKind::Hinge => {
                if t < 1.0 {
                    -t
                } else {
                    0.0
                }
            }
            LossKind::Exponential => -t * (-t).exp(),
            LossKind::Dichotomy => {
                if t <= -0.5 {
                    -4.0 * t * (-2.0f64).exp()
                } else if t < 0.0 {
                    -(1.0 / t).exp() / t
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss kind {s:?}")))
    }
}

/// Range `(a, b)` of `t·l′(t)` over margins `t ∈ [lo, hi]`.
///
/// Over the whole real line the known closed forms are returned. Otherwise
/// the range is found on a dense grid and refined by golden-section search;
/// an infinite end contributes its limiting value.
///
/// Square loss is special: with a free real label, `h·(h − y)` is unbounded
/// as soon as the output `h` can be nonzero.
pub fn margin_bounds(kind: LossKind, t_range: (f64, f64)) -> Result<(f64, f64)> {
    let (lo, hi) = t_range;
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::InvalidArgument(format!("empty margin range [{lo}, {hi}]")));
    }
    if kind == LossKind::Square {
        return Ok(if lo == 0.0 && hi == 0.0 {
            (0.0, 0.0)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        });
    }
    if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
        let a = match kind {
            LossKind::Logistic => -lambert_w0(1.0 / E)?,
            LossKind::Hinge => -1.0,
            LossKind::Exponential => -1.0 / E,
            LossKind::Dichotomy => 0.0,
            LossKind::Square => unreachable!(),
        };
        return Ok((a, f64::INFINITY));
    }

    // every profile here tends to +∞ as t → −∞ and to 0 as t → +∞
    const SPAN: f64 = 60.0;
    let glo = lo.max(-SPAN).min(hi.min(SPAN));
    let ghi = hi.min(SPAN).max(glo);
    let f = |t: f64| kind.t_dl(t);
    let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
    if hi == f64::INFINITY {
        a = 0.0;
        b = 0.0;
    }
    if lo == f64::NEG_INFINITY {
        b = f64::INFINITY;
    }

    const N: usize = 4096;
    let step = (ghi - glo) / N as f64;
    let mut grid = Vec::with_capacity(N + 1);
    for i in 0..=N {
        let t = if i == N { ghi } else { glo + step * i as f64 };
        grid.push((t, f(t)));
    }
    let (imin, &(_, vmin)) = grid
        .iter()
        .enumerate()
        .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1))
        .expect("grid is nonempty");
    let (imax, &(_, vmax)) = grid
        .iter()
        .enumerate()
        .max_by(|x, y| x.1 .1.total_cmp(&y.1 .1))
        .expect("grid is nonempty");
    a = a.min(vmin);
    b = b.max(vmax);
    if step > 0.0 {
        let bracket = |i: usize| (grid[i.saturating_sub(1)].0, grid[(i + 1).min(N)].0);
        let (l, r) = bracket(imin);
        a = a.min(golden_section_min(f, l, r, 1e-14).1);
        let (l, r) = bracket(imax);
        b = b.max(-golden_section_min(|t| -f(t), l, r, 1e-14).1);
    }
    Ok((a, b))
}

/// Tolerance used when checking `a ≤ alignment ≤ b`.
const RANGE_SLACK: f64 = 1e-12;

fn ratio_term(num: f64, den: f64) -> f64 {
    if den.is_infinite() || num == 0.0 {
        0.0
    } else if den == 0.0 {
        num.signum() * f64::INFINITY
    } else {
        num / den
    }
}

/// Smallest poison fraction `λ*` for which the alignment can be cancelled:
/// `max{A/(A − a), −A/(b − A)}` clipped to `[0, 1]`.
pub fn lambda_threshold(alignment: f64, a: f64, b: f64) -> Result<f64> {
    if !alignment.is_finite() {
        return Err(Error::NonFinite("alignment"));
    }
    let slack = RANGE_SLACK * (1.0 + alignment.abs());
    if alignment < a - slack || alignment > b + slack {
        return Err(Error::InvalidArgument(format!(
            "alignment {alignment} outside the margin range [{a}, {b}]"
        )));
    }
    let l = ratio_term(alignment, alignment - a).max(ratio_term(-alignment, b - alignment));
    Ok(l.clamp(0.0, 1.0))
}

pub fn lambda_to_tau(lambda: f64) -> f64 {
    if lambda >= 1.0 {
        f64::INFINITY
    } else {
        lambda / (1.0 - lambda)
    }
}

pub fn tau_to_lambda(tau: f64) -> f64 {
    if tau == f64::INFINITY {
        1.0
    } else {
        tau / (1.0 + tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    None,
    /// `g(μ) = 0`: the target is already stationary on clean data.
    ZeroGrad,
    /// `⟨w, g(μ)⟩ = 0` with `g(μ) ≠ 0`; the scalar test is inconclusive and
    /// [`membership_check`] should be consulted.
    ZeroAlignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub alignment: f64,
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub a: f64,
    #[serde(with = "crate::serde_ext::ext_f64")]
    pub b: f64,
    pub lambda_star: Option<f64>,
    /// Budget threshold under the requested class-count convention.
    pub tau: f64,
    /// Same threshold with `c = 2`.
    pub tau2: f64,
    /// Class count used for `tau`, `None` for regression.
    pub classes: Option<usize>,
    pub grad_norm: f64,
    pub degenerate: Degeneracy,
}

/// Mean clean gradient restricted to the output block.
fn output_grad(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<Vec<f64>> {
    let g = mean_param_grad(spec, params, ds)?;
    Ok(g[spec.output_block()].to_vec())
}

/// `⟨w, g(μ)⟩`; `tr(WᵀG(μ))` for matrix outputs, restricted to the output
/// layer for `Mlp1`.
pub fn alignment(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<f64> {
    let g = output_grad(spec, params, ds)?;
    Ok(dot(&params.values[spec.output_block()], &g))
}

/// `W((c − 1)/e)`, the magnitude of the cross-entropy margin bound.
pub fn ce_bound(c: usize) -> Result<f64> {
    if c < 2 {
        return Err(Error::InvalidArgument("class count must be ≥ 2".into()));
    }
    lambert_w0((c - 1) as f64 / E)
}

/// Budget threshold report.
///
/// `c_convention` replaces the model's class count in `W((c−1)/e)`; `None`
/// uses the true count. Regression families always get `τ = 0`.
pub fn tau_threshold(spec: &ModelSpec, params: &Params, ds: &Dataset, c_convention: Option<usize>) -> Result<ThresholdReport> {
    let g = output_grad(spec, params, ds)?;
    let w = &params.values[spec.output_block()];
    let align = dot(w, &g);
    let gn = norm(&g);
    let Some(classes) = spec.classes() else {
        return Ok(ThresholdReport {
            alignment: align,
            a: f64::NEG_INFINITY,
            b: f64::INFINITY,
            lambda_star: Some(0.0),
            tau: 0.0,
            tau2: 0.0,
            classes: None,
            grad_norm: gn,
            degenerate: if gn <= 1e-12 { Degeneracy::ZeroGrad } else { Degeneracy::None },
        });
    };
    let c = c_convention.unwrap_or(classes);
    let wc = ce_bound(c)?;
    let w2 = ce_bound(2)?;
    let degenerate = if gn <= 1e-12 {
        Degeneracy::ZeroGrad
    } else if align.abs() <= 1e-12 * norm(w) * gn {
        Degeneracy::ZeroAlignment
    } else {
        Degeneracy::None
    };
    let (tau, tau2) = if degenerate == Degeneracy::ZeroGrad {
        (0.0, 0.0)
    } else {
        ((align / wc).max(0.0), (align / w2).max(0.0))
    };
    Ok(ThresholdReport {
        alignment: align,
        a: -wc,
        b: f64::INFINITY,
        lambda_star: Some(tau_to_lambda(tau)),
        tau,
        tau2,
        classes: Some(c),
        grad_norm: gn,
        degenerate,
    })
}

/// Necessary lower bound on `ε_d` for `Mlp1`, from the output layer acting on
/// the hidden features.
pub fn nn_necessary_tau(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<f64> {
    if !matches!(spec.family, Family::Mlp1 { .. }) {
        return Err(Error::InvalidArgument("nn_necessary_tau needs an mlp1 model".into()));
    }
    Ok(tau_threshold(spec, params, ds, None)?.tau)
}

/// `⟨h, p − y⟩` for logits `h` and a hard label.
pub fn ce_margin(h: &[f64], label: usize) -> f64 {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = h.iter().map(|v| (v - m).exp()).sum();
    h.iter()
        .enumerate()
        .map(|(k, &hk)| hk * ((hk - m).exp() / z - f64::from(u8::from(k == label))))
        .sum()
}

/// Logits approaching the infimum of [`ce_margin`] for label 0: the true
/// logit is `s`, the rest `0`, with `s` chosen by golden-section search.
pub fn ce_margin_minimizer(c: usize) -> Result<(Vec<f64>, f64)> {
    if c < 2 {
        return Err(Error::InvalidArgument("class count must be ≥ 2".into()));
    }
    let value = |s: f64| {
        let mut h = vec![0.0; c];
        h[0] = s;
        ce_margin(&h, 0)
    };
    let (s, v) = golden_section_min(value, -50.0, 50.0, 1e-14);
    let mut h = vec![0.0; c];
    h[0] = s;
    Ok((h, v))
}

/// Whether `0 ∈ (1 − λ)·g_mu + λ·conv(grads)`.
///
/// Exact in one and two dimensions (interval test, angular-gap test). In
/// higher dimensions Frank-Wolfe with exact line search minimizes the norm
/// over the hull until either a separating direction certifies `false` or the
/// duality gap drops below `1e-9` (relative to the squared scale).
///
/// A zero `g_mu` is always reachable: take the poison equal to the clean data.
pub fn membership_check(g_mu: &[f64], grads: &[Vec<f64>], lambda: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("λ = {lambda} outside [0, 1]")));
    }
    if grads.is_empty() {
        return Err(Error::InvalidArgument("empty gradient set".into()));
    }
    let d = g_mu.len();
    if grads.iter().any(|g| g.len() != d) {
        return Err(Error::Shape("gradient dimensions differ".into()));
    }
    let scale = grads.iter().map(|g| norm(g)).fold(norm(g_mu), f64::max).max(1e-300);
    if norm(g_mu) <= 1e-12 * scale {
        return Ok(true);
    }
    let pts: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| g.iter().zip(g_mu).map(|(gi, mi)| ((1.0 - lambda) * mi + lambda * gi) / scale).collect())
        .collect();
    let tol = 1e-12;
    match d {
        0 => Ok(true),
        1 => {
            let lo = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            Ok(lo <= tol && hi >= -tol)
        }
        2 => Ok(origin_in_hull_2d(&pts, tol)),
        _ => Ok(origin_in_hull_fw(&pts)),
    }
}

/// Origin lies in the hull iff no angular gap between the points exceeds π.
fn origin_in_hull_2d(pts: &[Vec<f64>], tol: f64) -> bool {
    let mut angles = Vec::with_capacity(pts.len());
    for p in pts {
        if p[0].hypot(p[1]) <= tol {
            return true;
        }
        angles.push(p[1].atan2(p[0]));
    }
    angles.sort_by(f64::total_cmp);
    let mut gap = angles[0] + 2.0 * std::f64::consts::PI - angles[angles.len() - 1];
    for w in angles.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    gap <= std::f64::consts::PI + 1e-12
}

fn origin_in_hull_fw(pts: &[Vec<f64>]) -> bool {
    let mut x = pts
        .iter()
        .min_by(|a, b| norm(a).total_cmp(&norm(b)))
        .expect("nonempty")
        .clone();
    for _ in 0..1_000_000 {
        let (s, smin) = pts
            .iter()
            .map(|p| (p, dot(p, &x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        if smin > 0.0 {
            return false;
        }
        let xx = dot(&x, &x);
        let gap = xx - smin;
        if gap <= 1e-9 {
            return true;
        }
        // exact line search on ½‖x + γ(s − x)‖²
        let dir: Vec<f64> = s.iter().zip(&x).map(|(si, xi)| si - xi).collect();
        let dd = dot(&dir, &dir);
        if dd == 0.0 {
            return xx <= 1e-18;
        }
        let gamma = (-dot(&x, &dir) / dd).clamp(0.0, 1.0);
        x.iter_mut().zip(&dir).for_each(|(xi, di)| *xi += gamma * di);
    }
    dot(&x, &x) <= 1e-12
}
