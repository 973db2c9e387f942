//! Model families with analytic per-sample parameter gradients and the mixed
//! second-order product `∇ₓ⟨∇_w ℓ(x, y; w), v⟩` that gradient canceling needs.
//!
//! Parameter layouts (all row-major, concatenated into one flat vector):
//!
//! | family            | blocks                               |
//! |-------------------|--------------------------------------|
//! | `LeastSquares`    | `w: d×1`                             |
//! | `LogisticBinary`  | `w: d×1`                             |
//! | `SoftmaxLinear`   | `W: d×c`                             |
//! | `Mlp1`            | `U: hidden×d`, then `W: hidden×c`    |
//!
//! For `Mlp1` the logits are `h = Wᵀ leaky(U x)`. Binary labels `{0, 1}` are
//! handled through the equivalent soft pair `(q₀, q₁)`, which gives the
//! margin form `log(1 + exp(-ỹ wᵀx))` for hard labels.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels, Target, Task};
use crate::error::{Error, Result};
use crate::mathcore::{axpy, dot, Matrix, SeededRng};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    LeastSquares,
    LogisticBinary,
    SoftmaxLinear { classes: usize },
    Mlp1 { hidden: usize, leaky_slope: f64, classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub input_dim: usize,
}

/// Named row-major block inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Flat parameter vector with its block layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub blocks: Vec<Block>,
    pub values: Vec<f64>,
}

impl Params {
    pub fn new(blocks: Vec<Block>, values: Vec<f64>) -> Result<Self> {
        let need: usize = blocks.iter().map(|b| b.rows * b.cols).sum();
        if need != values.len() {
            return Err(Error::Shape(format!(
                "blocks describe {need} parameters, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Self { blocks, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Params::new(self.blocks.clone(), values)
    }
}

impl ModelSpec {
    pub fn new(family: Family, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be ≥ 1".into()));
        }
        match family {
            Family::SoftmaxLinear { classes } if classes < 2 => {
                return Err(Error::InvalidArgument("softmax needs ≥ 2 classes".into()))
            }
            Family::Mlp1 {
                hidden,
                leaky_slope,
                classes,
            }
                if (hidden == 0 || classes < 2 || !(leaky_slope > 0.0 && leaky_slope < 1.0)) => {
                    return Err(Error::InvalidArgument(
                        "mlp1 needs hidden ≥ 1, classes ≥ 2, 0 < slope < 1".into(),
                    ));
                }
            _ => {}
        }
        Ok(Self { family, input_dim })
    }

    pub fn least_squares(d: usize) -> Self {
        Self::new(Family::LeastSquares, d).expect("d ≥ 1")
    }

    pub fn logistic(d: usize) -> Self {
        Self::new(Family::LogisticBinary, d).expect("d ≥ 1")
    }

    pub fn softmax(d: usize, classes: usize) -> Result<Self> {
        Self::new(Family::SoftmaxLinear { classes }, d)
    }

    pub fn mlp1(d: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::new(
            Family::Mlp1 {
                hidden,
                leaky_slope: DEFAULT_LEAKY_SLOPE,
                classes,
            },
            d,
        )
    }

    /// Number of classes, `None` for regression.
    pub fn classes(&self) -> Option<usize> {
        match self.family {
            Family::LeastSquares => None,
            Family::LogisticBinary => Some(2),
            Family::SoftmaxLinear { classes } | Family::Mlp1 { classes, .. } => Some(classes),
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.classes().is_some()
    }

    pub fn blocks(&self) -> Vec<Block> {
        let d = self.input_dim;
        let b = |name: &str, rows, cols| Block {
            name: name.into(),
            rows,
            cols,
        };
        match self.family {
            Family::LeastSquares | Family::LogisticBinary => vec![b("w", d, 1)],
            Family::SoftmaxLinear { classes } => vec![b("W", d, classes)],
            Family::Mlp1 { hidden, classes, .. } => vec![b("U", hidden, d), b("W", hidden, classes)],
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.rows * b.cols).sum()
    }

    /// Index range of the output layer (`w` or `W`) in the flat vector.
    pub fn output_block(&self) -> Range<usize> {
        match self.family {
            Family::Mlp1 { hidden, classes, .. } => {
                let u = hidden * self.input_dim;
                u..u + hidden * classes
            }
            _ => 0..self.num_params(),
        }
    }

    pub fn params(&self, values: Vec<f64>) -> Result<Params> {
        Params::new(self.blocks(), values)
    }

    pub fn zeros(&self) -> Params {
        Params {
            blocks: self.blocks(),
            values: vec![0.0; self.num_params()],
        }
    }

    /// Seeded initialization: small Gaussian for linear families, He-scaled
    /// hidden layer for `Mlp1`.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = SeededRng::new(seed, 0x1417);
        let values = match self.family {
            Family::Mlp1 { hidden, classes, .. } => {
                let su = (2.0 / self.input_dim as f64).sqrt();
                let sw = (1.0 / hidden as f64).sqrt();
                let mut v: Vec<f64> = (0..hidden * self.input_dim).map(|_| su * rng.normal()).collect();
                v.extend((0..hidden * classes).map(|_| sw * rng.normal()));
                v
            }
            _ => (0..self.num_params()).map(|_| 0.01 * rng.normal()).collect(),
        };
        Params {
            blocks: self.blocks(),
            values,
        }
    }

    /// Checks that `ds` is compatible with this model.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.dim() != self.input_dim {
            return Err(Error::Shape(format!(
                "dataset has {} features, model expects {}",
                ds.dim(),
                self.input_dim
            )));
        }
        match (self.classes(), ds.task) {
            (None, Task::Regression) => Ok(()),
            (Some(c), Task::Classification { classes }) if c == classes => Ok(()),
            _ => Err(Error::InvalidArgument("dataset task does not match model family".into())),
        }
    }

    fn check(&self, w: &[f64], x: &[f64]) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters, model expects {}",
                w.len(),
                self.num_params()
            )));
        }
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "{} features, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// scalar helpers
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn log_sum_exp(h: &[f64]) -> f64 {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(h: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(h);
    h.iter().map(|v| (v - lse).exp()).collect()
}

/// `J_p u = p ⊙ u − p (pᵀu)`, the softmax Jacobian applied to `u`.
fn softmax_jvp(p: &[f64], u: &[f64]) -> Vec<f64> {
    let pu = dot(p, u);
    p.iter().zip(u).map(|(pi, ui)| pi * (ui - pu)).collect()
}

/// Label as a probability vector over `c` classes.
fn soft_label(t: Target<'_>, c: usize) -> Result<Vec<f64>> {
    match t {
        Target::Class(k) if k < c => {
            let mut y = vec![0.0; c];
            y[k] = 1.0;
            Ok(y)
        }
        Target::Class(k) => Err(Error::InvalidArgument(format!("class {k} ≥ {c}"))),
        Target::Soft(s) if s.len() == c => Ok(s.to_vec()),
        Target::Soft(s) => Err(Error::Shape(format!("soft label of width {} for {c} classes", s.len()))),
        Target::Value(_) => Err(Error::InvalidArgument("real target for a classifier".into())),
    }
}

fn real_label(t: Target<'_>) -> Result<f64> {
    match t {
        Target::Value(y) => Ok(y),
        _ => Err(Error::InvalidArgument("least squares needs a real target".into())),
    }
}

/// Forward pass of `Mlp1`: pre-activations, features and the slope mask.
struct MlpForward {
    phi: Vec<f64>,
    mask: Vec<f64>,
    logits: Vec<f64>,
}

fn mlp_forward(w: &[f64], x: &[f64], d: usize, hidden: usize, slope: f64, classes: usize) -> MlpForward {
    let (u, wo) = w.split_at(hidden * d);
    let mut phi = Vec::with_capacity(hidden);
    let mut mask = Vec::with_capacity(hidden);
    for i in 0..hidden {
        let a = dot(&u[i * d..(i + 1) * d], x);
        let m = if a > 0.0 { 1.0 } else { slope };
        mask.push(m);
        phi.push(m * a);
    }
    let mut logits = vec![0.0; classes];
    for i in 0..hidden {
        axpy(phi[i], &wo[i * classes..(i + 1) * classes], &mut logits);
    }
    MlpForward { phi, mask, logits }
}

/// Logits `h = Wᵀx` of the softmax model.
fn linear_logits(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; classes];
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, &w[i * classes..(i + 1) * classes], &mut h);
    }
    h
}

/// Binary soft pair `(q₀, q₁)`.
fn binary_pair(t: Target<'_>) -> Result<(f64, f64)> {
    let y = soft_label(t, 2)?;
    Ok((y[0], y[1]))
}

// ---------------------------------------------------------------------------
// public per-sample API
// ---------------------------------------------------------------------------

/// Per-sample loss `ℓ(x, y; w)`.
pub fn loss(spec: &ModelSpec, w: &[f64], x: &[f64], t: Target<'_>) -> Result<f64> {
    spec.check(w, x)?;
    Ok(match spec.family {
        Family::LeastSquares => {
            let r = dot(w, x) - real_label(t)?;
            0.5 * r * r
        }
        Family::LogisticBinary => {
            let (q0, q1) = binary_pair(t)?;
            let u = dot(w, x);
            (q0 + q1) * softplus(u) - q1 * u
        }
        Family::SoftmaxLinear { classes } => {
            let y = soft_label(t, classes)?;
            let h = linear_logits(w, x, classes);
            y.iter().sum::<f64>() * log_sum_exp(&h) - dot(&h, &y)
        }
        Family::Mlp1 {
            hidden,
            leaky_slope,
            classes,
        } => {
            let y = soft_label(t, classes)?;
            let f = mlp_forward(w, x, spec.input_dim, hidden, leaky_slope, classes);
            y.iter().sum::<f64>() * log_sum_exp(&f.logits) - dot(&f.logits, &y)
        }
    })
}

/// `out ← out + alpha·∇_w ℓ(x, y; w)` without shape checks.
fn accumulate_grad(spec: &ModelSpec, w: &[f64], x: &[f64], t: Target<'_>, alpha: f64, out: &mut [f64]) -> Result<()> {
    match spec.family {
        Family::LeastSquares => {
            let r = dot(w, x) - real_label(t)?;
            axpy(alpha * r, x, out);
        }
        Family::LogisticBinary => {
            let (q0, q1) = binary_pair(t)?;
            let coef = (q0 + q1) * sigmoid(dot(w, x)) - q1;
            axpy(alpha * coef, x, out);
        }
        Family::SoftmaxLinear { classes } => {
            let y = soft_label(t, classes)?;
            let s: f64 = y.iter().sum();
            let p = softmax(&linear_logits(w, x, classes));
            let e: Vec<f64> = p.iter().zip(&y).map(|(pk, yk)| s * pk - yk).collect();
            for (i, &xi) in x.iter().enumerate() {
                axpy(alpha * xi, &e, &mut out[i * classes..(i + 1) * classes]);
            }
        }
        Family::Mlp1 {
            hidden,
            leaky_slope,
            classes,
        } => {
            let d = spec.input_dim;
            let y = soft_label(t, classes)?;
            let s: f64 = y.iter().sum();
            let f = mlp_forward(w, x, d, hidden, leaky_slope, classes);
            let p = softmax(&f.logits);
            let e: Vec<f64> = p.iter().zip(&y).map(|(pk, yk)| s * pk - yk).collect();
            let wo = &w[hidden * d..];
            let (gu, gw) = out.split_at_mut(hidden * d);
            for i in 0..hidden {
                let wi = &wo[i * classes..(i + 1) * classes];
                let delta = f.mask[i] * dot(wi, &e);
                axpy(alpha * delta, x, &mut gu[i * d..(i + 1) * d]);
                axpy(alpha * f.phi[i], &e, &mut gw[i * classes..(i + 1) * classes]);
            }
        }
    }
    Ok(())
}

/// Analytic `∇_w ℓ(x, y; w)`.
pub fn param_grad(spec: &ModelSpec, w: &[f64], x: &[f64], t: Target<'_>) -> Result<Vec<f64>> {
    spec.check(w, x)?;
    let mut g = vec![0.0; w.len()];
    accumulate_grad(spec, w, x, t, 1.0, &mut g)?;
    Ok(g)
}

/// `∇ₓ ⟨∇_w ℓ(x, y; w), v⟩`, exact. Labels are held fixed.
pub fn mixed_vjp(spec: &ModelSpec, w: &[f64], x: &[f64], t: Target<'_>, v: &[f64]) -> Result<Vec<f64>> {
    spec.check(w, x)?;
    if v.len() != w.len() {
        return Err(Error::Shape("direction must live in parameter space".into()));
    }
    let d = spec.input_dim;
    Ok(match spec.family {
        Family::LeastSquares => {
            // ⟨g, v⟩ = (wᵀx − y)(xᵀv)
            let r = dot(w, x) - real_label(t)?;
            let xv = dot(x, v);
            w.iter().zip(v).map(|(wi, vi)| xv * wi + r * vi).collect()
        }
        Family::LogisticBinary => {
            // ⟨g, v⟩ = (s·σ(u) − q₁)(xᵀv),  u = wᵀx
            let (q0, q1) = binary_pair(t)?;
            let u = dot(w, x);
            let sig = sigmoid(u);
            let s = q0 + q1;
            let a = s * sig - q1;
            let b = s * sig * (1.0 - sig) * dot(x, v);
            w.iter().zip(v).map(|(wi, vi)| a * vi + b * wi).collect()
        }
        Family::SoftmaxLinear { classes } => {
            // ⟨G, V⟩ = xᵀV e,  e = s·p − y
            let y = soft_label(t, classes)?;
            let s: f64 = y.iter().sum();
            let p = softmax(&linear_logits(w, x, classes));
            let e: Vec<f64> = p.iter().zip(&y).map(|(pk, yk)| s * pk - yk).collect();
            let vtx = linear_logits(v, x, classes);
            let q: Vec<f64> = softmax_jvp(&p, &vtx).into_iter().map(|z| s * z).collect();
            (0..d)
                .map(|i| {
                    let rows = i * classes..(i + 1) * classes;
                    dot(&v[rows.clone()], &e) + dot(&w[rows], &q)
                })
                .collect()
        }
        Family::Mlp1 {
            hidden,
            leaky_slope,
            classes,
        } => {
            let y = soft_label(t, classes)?;
            let s: f64 = y.iter().sum();
            let f = mlp_forward(w, x, d, hidden, leaky_slope, classes);
            let p = softmax(&f.logits);
            let e: Vec<f64> = p.iter().zip(&y).map(|(pk, yk)| s * pk - yk).collect();
            let (u, wo) = w.split_at(hidden * d);
            let (vu, vw) = v.split_at(hidden * d);
            // r1 = V_Wᵀφ + Wᵀ(D ⊙ V_U x)
            let mut r1 = vec![0.0; classes];
            for i in 0..hidden {
                let vux = f.mask[i] * dot(&vu[i * d..(i + 1) * d], x);
                axpy(f.phi[i], &vw[i * classes..(i + 1) * classes], &mut r1);
                axpy(vux, &wo[i * classes..(i + 1) * classes], &mut r1);
            }
            let q: Vec<f64> = softmax_jvp(&p, &r1).into_iter().map(|z| s * z).collect();
            // ∇ₓ = Uᵀ[D ⊙ (V_W e + W q)] + V_Uᵀ[D ⊙ W e]
            let mut out = vec![0.0; d];
            for i in 0..hidden {
                let wi = &wo[i * classes..(i + 1) * classes];
                let t_i = f.mask[i] * (dot(&vw[i * classes..(i + 1) * classes], &e) + dot(wi, &q));
                let c_i = f.mask[i] * dot(wi, &e);
                axpy(t_i, &u[i * d..(i + 1) * d], &mut out);
                axpy(c_i, &vu[i * d..(i + 1) * d], &mut out);
            }
            out
        }
    })
}

/// `∇_y ⟨∇_w ℓ(x, y; w), v⟩` with respect to the label: the soft-label vector
/// for classifiers, the scalar target for least squares. The product is
/// linear in the label, so the result does not depend on `_t`.
pub fn label_vjp(spec: &ModelSpec, w: &[f64], x: &[f64], _t: Target<'_>, v: &[f64]) -> Result<Vec<f64>> {
    spec.check(w, x)?;
    let d = spec.input_dim;
    Ok(match spec.family {
        Family::LeastSquares => vec![-dot(x, v)],
        Family::LogisticBinary => {
            let sig = sigmoid(dot(w, x));
            let xv = dot(x, v);
            vec![sig * xv, (sig - 1.0) * xv]
        }
        Family::SoftmaxLinear { classes } => {
            let p = softmax(&linear_logits(w, x, classes));
            let r1 = linear_logits(v, x, classes);
            let pr = dot(&p, &r1);
            r1.iter().map(|r| pr - r).collect()
        }
        Family::Mlp1 {
            hidden,
            leaky_slope,
            classes,
        } => {
            let f = mlp_forward(w, x, d, hidden, leaky_slope, classes);
            let p = softmax(&f.logits);
            let (vu, vw) = v.split_at(hidden * d);
            let wo = &w[hidden * d..];
            let mut r1 = vec![0.0; classes];
            for i in 0..hidden {
                let vux = f.mask[i] * dot(&vu[i * d..(i + 1) * d], x);
                axpy(f.phi[i], &vw[i * classes..(i + 1) * classes], &mut r1);
                axpy(vux, &wo[i * classes..(i + 1) * classes], &mut r1);
            }
            let pr = dot(&p, &r1);
            r1.iter().map(|r| pr - r).collect()
        }
    })
}

/// Gradient of the reversed loss used by gradient matching.
///
/// Cross-entropy families use `ℓ̄ = −log(1 − exp(−ℓ))`, whose gradient is
/// `−∇ℓ / (exp(ℓ) − 1)`; `ℓ` is clamped below at `1e-12`. Least squares uses
/// the sign-flipped residual, i.e. `−∇ℓ`.
pub fn reversed_grad(spec: &ModelSpec, w: &[f64], x: &[f64], t: Target<'_>) -> Result<Vec<f64>> {
    let mut g = param_grad(spec, w, x, t)?;
    let factor = match spec.family {
        Family::LeastSquares => -1.0,
        _ => {
            let l = loss(spec, w, x, t)?.max(1e-12);
            -1.0 / l.exp_m1()
        }
    };
    g.iter_mut().for_each(|v| *v *= factor);
    Ok(g)
}

/// Output-layer logits (or the scalar score `wᵀx` as a 1-vector).
pub fn logits(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.check(w, x)?;
    Ok(match spec.family {
        Family::LeastSquares | Family::LogisticBinary => vec![dot(w, x)],
        Family::SoftmaxLinear { classes } => linear_logits(w, x, classes),
        Family::Mlp1 {
            hidden,
            leaky_slope,
            classes,
        } => mlp_forward(w, x, spec.input_dim, hidden, leaky_slope, classes).logits,
    })
}

/// Hidden features `φ(x; u)` of `Mlp1`; the input itself for linear families.
pub fn features(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.check(w, x)?;
    Ok(match spec.family {
        Family::Mlp1 {
            hidden,
            leaky_slope,
            classes,
        } => mlp_forward(w, x, spec.input_dim, hidden, leaky_slope, classes).phi,
        _ => x.to_vec(),
    })
}

/// Predicted class: sign rule for the binary model (ties go to class 0),
/// argmax with ties to the smaller index otherwise.
pub fn predict(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Result<usize> {
    let h = logits(spec, w, x)?;
    match spec.family {
        Family::LeastSquares => Err(Error::InvalidArgument("prediction needs a classifier".into())),
        Family::LogisticBinary => Ok(usize::from(h[0] > 0.0)),
        _ => Ok(argmax(&h)),
    }
}

fn argmax(h: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in h.iter().enumerate() {
        if v > h[best] {
            best = k;
        }
    }
    best
}

fn true_class(t: Target<'_>) -> Result<usize> {
    match t {
        Target::Class(k) => Ok(k),
        Target::Soft(s) => Ok(argmax(s)),
        Target::Value(_) => Err(Error::InvalidArgument("accuracy needs class labels".into())),
    }
}

/// Fraction of `ds` classified correctly.
pub fn accuracy(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<f64> {
    if !spec.is_classifier() || ds.task == Task::Regression {
        return Err(Error::InvalidArgument("accuracy is defined for classification only".into()));
    }
    spec.check_dataset(ds)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for i in 0..ds.len() {
        if predict(spec, &params.values, ds.x.row(i))? == true_class(ds.target(i))? {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean of the per-sample losses.
pub fn mean_loss(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<f64> {
    spec.check_dataset(ds)?;
    let mut s = 0.0;
    for i in 0..ds.len() {
        s += loss(spec, &params.values, ds.x.row(i), ds.target(i))?;
    }
    Ok(s / ds.len() as f64)
}

/// `g(μ)`: average parameter gradient over `ds`, summed in index order.
pub fn mean_param_grad(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<Vec<f64>> {
    mean_param_grad_with(spec, params, ds, false)
}

/// Like [`mean_param_grad`]. With `parallel` the sum is split over rayon
/// workers, which is faster but not bit-reproducible across thread counts.
pub fn mean_param_grad_with(spec: &ModelSpec, params: &Params, ds: &Dataset, parallel: bool) -> Result<Vec<f64>> {
    spec.check_dataset(ds)?;
    let w = &params.values;
    if w.len() != spec.num_params() {
        return Err(Error::Shape("parameter count does not match model".into()));
    }
    let n = ds.len();
    if n == 0 {
        return Err(Error::InvalidArgument("mean gradient of an empty dataset".into()));
    }
    let p = w.len();
    let sum = if parallel && n >= 2048 {
        (0..n)
            .into_par_iter()
            .try_fold(
                || vec![0.0; p],
                |mut acc, i| {
                    accumulate_grad(spec, w, ds.x.row(i), ds.target(i), 1.0, &mut acc)?;
                    Ok::<_, Error>(acc)
                },
            )
            .try_reduce(
                || vec![0.0; p],
                |mut a, b| {
                    axpy(1.0, &b, &mut a);
                    Ok(a)
                },
            )?
    } else {
        let mut acc = vec![0.0; p];
        for i in 0..n {
            accumulate_grad(spec, w, ds.x.row(i), ds.target(i), 1.0, &mut acc)?;
        }
        acc
    };
    Ok(sum.into_iter().map(|v| v / n as f64).collect())
}

/// One row per sample: the stacked per-sample parameter gradients.
pub fn grad_matrix(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<Matrix> {
    spec.check_dataset(ds)?;
    let p = params.values.len();
    let mut m = Matrix::zeros(ds.len(), p);
    for i in 0..ds.len() {
        accumulate_grad(spec, &params.values, ds.x.row(i), ds.target(i), 1.0, m.row_mut(i))?;
    }
    Ok(m)
}

/// Whether the dataset carries hard class labels.
pub fn has_class_labels(ds: &Dataset) -> bool {
    matches!(ds.labels, Labels::Class(_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_three_point;

    #[test]
    fn least_squares_examples() {
        let spec = ModelSpec::least_squares(2);
        let w = [1.0, 0.0];
        let x = [2.0, 1.0];
        let t = Target::Value(0.0);
        assert_eq!(loss(&spec, &w, &x, t).unwrap(), 2.0);
        assert_eq!(param_grad(&spec, &w, &x, t).unwrap(), vec![4.0, 2.0]);
        assert_eq!(mixed_vjp(&spec, &w, &x, t, &[0.0, 1.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mixed_vjp(&spec, &w, &x, t, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn logistic_at_zero_margin() {
        let spec = ModelSpec::logistic(2);
        let w = [0.0, 0.0];
        let x = [0.3, -1.2];
        let l = loss(&spec, &w, &x, Target::Class(1)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        // ỹ = +1, x̃ = x: gradient −x̃/2
        let g = param_grad(&spec, &w, &x, Target::Class(1)).unwrap();
        assert!((g[0] + 0.15).abs() < 1e-15 && (g[1] - 0.6).abs() < 1e-15);
        // ỹ = −1, x̃ = −x: gradient −x̃/2 = x/2
        let g = param_grad(&spec, &w, &x, Target::Class(0)).unwrap();
        assert!((g[0] - 0.15).abs() < 1e-15 && (g[1] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn softmax_two_classes_is_logistic_on_logit_difference() {
        let sm = ModelSpec::softmax(3, 2).unwrap();
        let lr = ModelSpec::logistic(3);
        let big_w = [0.3, -0.2, 1.1, 0.4, -0.5, 0.7];
        let diff: Vec<f64> = (0..3).map(|i| big_w[2 * i + 1] - big_w[2 * i]).collect();
        let x = [0.5, -1.5, 2.0];
        for k in 0..2 {
            let a = loss(&sm, &big_w, &x, Target::Class(k)).unwrap();
            let b = loss(&lr, &diff, &x, Target::Class(k)).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn toy_mean_gradients() {
        let ds = toy_three_point();
        let spec = ModelSpec::logistic(2);
        let ln2 = 2f64.ln();
        let g = mean_param_grad(&spec, &spec.params(vec![0.0, ln2]).unwrap(), &ds).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let g = mean_param_grad(&spec, &spec.params(vec![0.0, 2.0 * ln2]).unwrap(), &ds).unwrap();
        assert!(g[0].abs() < 1e-15);
        assert!((g[1] - 2.0 / 15.0).abs() < 1e-15);
        let single = ds.subset(&[1]);
        let p = spec.params(vec![0.4, -0.3]).unwrap();
        assert_eq!(
            mean_param_grad(&spec, &p, &single).unwrap(),
            param_grad(&spec, &p.values, single.x.row(0), single.target(0)).unwrap()
        );
    }

    #[test]
    fn prediction_rules() {
        let spec = ModelSpec::logistic(3);
        assert_eq!(predict(&spec, &[0.0; 3], &[1.0, 1.0, 1.0]).unwrap(), 0);
        let sm = ModelSpec::softmax(1, 3).unwrap();
        assert_eq!(predict(&sm, &[1.0, 1.0, 0.0], &[2.0]).unwrap(), 0);
        assert!(predict(&ModelSpec::least_squares(1), &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn shape_errors() {
        let spec = ModelSpec::logistic(3);
        assert!(matches!(loss(&spec, &[0.0; 2], &[0.0; 3], Target::Class(0)), Err(Error::Shape(_))));
        assert!(matches!(param_grad(&spec, &[0.0; 3], &[0.0; 2], Target::Class(0)), Err(Error::Shape(_))));
        assert!(mixed_vjp(&spec, &[0.0; 3], &[0.0; 3], Target::Class(0), &[0.0; 2]).is_err());
        assert!(ModelSpec::mlp1(3, 0, 2).is_err());
    }

    fn specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::least_squares(3),
            ModelSpec::logistic(3),
            ModelSpec::softmax(3, 4).unwrap(),
            ModelSpec::mlp1(3, 5, 3).unwrap(),
        ]
    }

    fn label_for(spec: &ModelSpec) -> (Option<usize>, f64) {
        match spec.classes() {
            None => (None, 0.7),
            Some(c) => (Some(c - 1), 0.0),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(3, 0);
        for spec in specs() {
            let w: Vec<f64> = (0..spec.num_params()).map(|_| 0.7 * rng.normal()).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..spec.num_params()).map(|_| rng.normal()).collect();
            let (cls, y) = label_for(&spec);
            let t = cls.map(Target::Class).unwrap_or(Target::Value(y));
            let h = 1e-6;
            let g = param_grad(&spec, &w, &x, t).unwrap();
            for j in 0..w.len() {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[j] += h;
                wm[j] -= h;
                let fd = (loss(&spec, &wp, &x, t).unwrap() - loss(&spec, &wm, &x, t).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-6 * (1.0 + g[j].abs()), "{spec:?} param {j}");
            }
            let m = mixed_vjp(&spec, &w, &x, t, &v).unwrap();
            for j in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[j] += h;
                xm[j] -= h;
                let fp = dot(&param_grad(&spec, &w, &xp, t).unwrap(), &v);
                let fm = dot(&param_grad(&spec, &w, &xm, t).unwrap(), &v);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - m[j]).abs() < 1e-5 * (1.0 + m[j].abs()), "{spec:?} feature {j}");
            }
        }
    }

    #[test]
    fn label_vjp_matches_finite_differences() {
        let mut rng = SeededRng::new(5, 0);
        for spec in specs() {
            let w: Vec<f64> = (0..spec.num_params()).map(|_| 0.7 * rng.normal()).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..spec.num_params()).map(|_| rng.normal()).collect();
            let h = 1e-6;
            match spec.classes() {
                None => {
                    let lv = label_vjp(&spec, &w, &x, Target::Value(0.3), &v).unwrap();
                    let f = |y: f64| dot(&param_grad(&spec, &w, &x, Target::Value(y)).unwrap(), &v);
                    assert!(((f(0.3 + h) - f(0.3 - h)) / (2.0 * h) - lv[0]).abs() < 1e-6);
                }
                Some(c) => {
                    let q: Vec<f64> = (0..c).map(|k| (k + 1) as f64).collect();
                    let s: f64 = q.iter().sum();
                    let q: Vec<f64> = q.iter().map(|v| v / s).collect();
                    let lv = label_vjp(&spec, &w, &x, Target::Soft(&q), &v).unwrap();
                    for k in 0..c {
                        let (mut qp, mut qm) = (q.clone(), q.clone());
                        qp[k] += h;
                        qm[k] -= h;
                        let fp = dot(&param_grad(&spec, &w, &x, Target::Soft(&qp)).unwrap(), &v);
                        let fm = dot(&param_grad(&spec, &w, &x, Target::Soft(&qm)).unwrap(), &v);
                        assert!(((fp - fm) / (2.0 * h) - lv[k]).abs() < 1e-6, "{spec:?} class {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn reversed_gradient_direction() {
        let spec = ModelSpec::logistic(2);
        let w = [0.5, -0.5];
        let x = [1.0, 2.0];
        let g = param_grad(&spec, &w, &x, Target::Class(1)).unwrap();
        let r = reversed_grad(&spec, &w, &x, Target::Class(1)).unwrap();
        let l = loss(&spec, &w, &x, Target::Class(1)).unwrap();
        for (a, b) in g.iter().zip(&r) {
            assert!((b + a / l.exp_m1()).abs() < 1e-14);
        }
    }

    #[test]
    fn parallel_mean_gradient_agrees() {
        let ds = crate::data::gen_gauss_classification(1, 5000, 4, 2.0).unwrap();
        let spec = ModelSpec::logistic(5);
        let p = spec.init_params(2);
        let a = mean_param_grad_with(&spec, &p, &ds, false).unwrap();
        let b = mean_param_grad_with(&spec, &p, &ds, true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(a, mean_param_grad(&spec, &p, &ds).unwrap());
    }
}
