//! Datasets: synthetic generators, the IDX reader used for MNIST, and
//! split/concat utilities.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{dot, Matrix, SeededRng};

/// What the labels of a dataset mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

/// Per-sample supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    /// Class index in `0..c`.
    Class(Vec<usize>),
    /// Real-valued regression target.
    Real(Vec<f64>),
    /// Probability vectors over the classes (one row per sample).
    Soft(Matrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
            Labels::Soft(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Target<'_> {
        match self {
            Labels::Class(v) => Target::Class(v[i]),
            Labels::Real(v) => Target::Value(v[i]),
            Labels::Soft(m) => Target::Soft(m.row(i)),
        }
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
            Labels::Soft(m) => Labels::Soft(m.select_rows(idx)),
        }
    }

    /// Soft version of the labels (one-hot for class labels).
    pub fn to_soft(&self, classes: usize) -> Result<Matrix> {
        match self {
            Labels::Class(v) => {
                let mut m = Matrix::zeros(v.len(), classes);
                for (i, &c) in v.iter().enumerate() {
                    m.set(i, c, 1.0);
                }
                Ok(m)
            }
            Labels::Soft(m) => Ok(m.clone()),
            Labels::Real(_) => Err(Error::InvalidArgument(
                "regression labels have no soft form".into(),
            )),
        }
    }
}

/// Borrowed label of a single sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target<'a> {
    Class(usize),
    Value(f64),
    Soft(&'a [f64]),
}

/// A weighted-uniform empirical distribution over `(x, y)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Labels,
    pub task: Task,
    /// Admissible `[lo, hi]` per feature. Infinite bounds mean unconstrained.
    #[serde(with = "crate::serde_ext::ext_bounds")]
    pub domain_box: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Labels, task: Task, domain_box: Vec<(f64, f64)>) -> Result<Self> {
        if labels.len() != x.rows() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if domain_box.len() != x.cols() {
            return Err(Error::Shape("domain box length differs from feature count".into()));
        }
        if domain_box.iter().any(|(lo, hi)| lo.is_nan() || hi.is_nan() || lo > hi) {
            return Err(Error::InvalidArgument("domain box needs lo ≤ hi".into()));
        }
        match (&labels, task) {
            (Labels::Class(v), Task::Classification { classes }) => {
                if let Some(&bad) = v.iter().find(|&&c| c >= classes) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
            }
            (Labels::Soft(m), Task::Classification { classes }) => {
                if m.cols() != classes {
                    return Err(Error::Shape("soft labels width differs from class count".into()));
                }
            }
            (Labels::Real(v), Task::Regression) => {
                if v.iter().any(|y| !y.is_finite()) {
                    return Err(Error::NonFinite("regression targets"));
                }
            }
            _ => return Err(Error::InvalidArgument("labels do not match task".into())),
        }
        Ok(Self {
            x,
            labels,
            task,
            domain_box,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> Option<usize> {
        match self.task {
            Task::Classification { classes } => Some(classes),
            Task::Regression => None,
        }
    }

    #[inline]
    pub fn target(&self, i: usize) -> Target<'_> {
        self.labels.get(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            labels: self.labels.select(idx),
            task: self.task,
            domain_box: self.domain_box.clone(),
        }
    }

    /// Concatenation of `self` followed by `other`. Class labels are promoted
    /// to soft labels when either side carries soft labels.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.task != other.task {
            return Err(Error::InvalidArgument("cannot concatenate different tasks".into()));
        }
        if !other.is_empty() && !self.is_empty() && self.dim() != other.dim() {
            return Err(Error::Shape("feature dimensions differ".into()));
        }
        let x = self.x.vstack(&other.x)?;
        let labels = match (&self.labels, &other.labels) {
            (Labels::Class(a), Labels::Class(b)) => Labels::Class([a.as_slice(), b].concat()),
            (Labels::Real(a), Labels::Real(b)) => Labels::Real([a.as_slice(), b].concat()),
            (a, b) => {
                let c = self
                    .classes()
                    .ok_or_else(|| Error::InvalidArgument("mixed label kinds".into()))?;
                Labels::Soft(a.to_soft(c)?.vstack(&b.to_soft(c)?)?)
            }
        };
        let domain_box = if self.is_empty() {
            other.domain_box.clone()
        } else {
            self.domain_box.clone()
        };
        Dataset::new(x, labels, self.task, domain_box)
    }

    /// Per-feature `[min, max]` of the samples.
    pub fn feature_range(&self) -> Vec<(f64, f64)> {
        self.x.col_ranges()
    }
}

fn unbounded(d: usize) -> Vec<(f64, f64)> {
    vec![(f64::NEG_INFINITY, f64::INFINITY); d]
}

/// The 2-D OR truth table, each point repeated `reps` times with isotropic
/// Gaussian jitter, plus a constant bias feature. Labels: `(0,0)` is class 0,
/// the other three corners class 1.
pub fn gen_or(seed: u64, reps: usize, noise_sigma: f64) -> Result<Dataset> {
    if reps == 0 || !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("gen_or needs reps ≥ 1 and σ ≥ 0".into()));
    }
    const BASE: [([f64; 2], usize); 4] = [([0.0, 0.0], 0), ([0.0, 1.0], 1), ([1.0, 0.0], 1), ([1.0, 1.0], 1)];
    let mut rng = SeededRng::new(seed, 0x0a);
    let mut data = Vec::with_capacity(4 * reps * 3);
    let mut labels = Vec::with_capacity(4 * reps);
    for _ in 0..reps {
        for (p, y) in BASE {
            data.push(p[0] + noise_sigma * rng.normal());
            data.push(p[1] + noise_sigma * rng.normal());
            data.push(1.0);
            labels.push(y);
        }
    }
    Dataset::new(
        Matrix::new(4 * reps, 3, data)?,
        Labels::Class(labels),
        Task::Classification { classes: 2 },
        unbounded(3),
    )
}

/// The three-point logistic example on the padded real line:
/// `x = (1,1)+, (-1,1)+, (0,1)-`. Its logistic-regression optimum is
/// `(0, ln 2)`.
pub fn toy_three_point() -> Dataset {
    Dataset::new(
        Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, 1.0], vec![0.0, 1.0]]).expect("static"),
        Labels::Class(vec![1, 1, 0]),
        Task::Classification { classes: 2 },
        unbounded(2),
    )
    .expect("static")
}

/// Two balanced Gaussian classes with identity covariance and means
/// `±(sep/2)·u`; bias feature appended. Sample `i` has label `i mod 2`.
///
/// `u` is a fixed random unit vector per dimension, so different seeds draw
/// from the same distribution.
pub fn gen_gauss_classification(seed: u64, n: usize, d: usize, sep: f64) -> Result<Dataset> {
    if n < 2 || d == 0 || !(sep >= 0.0) {
        return Err(Error::InvalidArgument("need n ≥ 2, d ≥ 1, sep ≥ 0".into()));
    }
    let u = SeededRng::new(d as u64, 0x0a).unit_vector(d);
    let mut rng = SeededRng::new(seed, 0x0b);
    let mut data = Vec::with_capacity(n * (d + 1));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let s = if y == 1 { 0.5 * sep } else { -0.5 * sep };
        for &uj in &u {
            data.push(s * uj + rng.normal());
        }
        data.push(1.0);
        labels.push(y);
    }
    Dataset::new(
        Matrix::new(n, d + 1, data)?,
        Labels::Class(labels),
        Task::Classification { classes: 2 },
        unbounded(d + 1),
    )
}

/// `x ~ N(0, I_d)`, `y = w_trueᵀx + noise·ξ`. No bias feature.
pub fn gen_gauss_regression(seed: u64, n: usize, w_true: &[f64], noise: f64) -> Result<Dataset> {
    let d = w_true.len();
    if d == 0 || n < d || !(noise >= 0.0) {
        return Err(Error::InvalidArgument("need n ≥ d ≥ 1 and noise ≥ 0".into()));
    }
    let mut rng = SeededRng::new(seed, 0x0c);
    let mut data = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        ys.push(dot(&row, w_true) + noise * rng.normal());
        data.extend(row);
    }
    Dataset::new(Matrix::new(n, d, data)?, Labels::Real(ys), Task::Regression, unbounded(d))
}

/// Random partition into sizes `⌈n·train_frac⌉` and the remainder.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument("train_frac must lie in (0, 1)".into()));
    }
    let n = ds.len();
    let n_train = ((n as f64 * train_frac) - 1e-9).ceil().max(0.0) as usize;
    let perm = SeededRng::new(seed, 0x5b).permutation(n);
    let (a, b) = perm.split_at(n_train.min(n));
    Ok((ds.subset(a), ds.subset(b)))
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;

/// Reads an unsigned-byte IDX file: labels (`0x00000801`) become an `n×1`
/// matrix, images (`0x00000803`) an `n×(rows·cols)` matrix. Values are the
/// raw byte values.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_idx(&bytes, path)
}

pub(crate) fn parse_idx(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let truncated = |expected: u64| Error::IdxTruncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndim = match magic {
        IDX_LABELS => 1,
        IDX_IMAGES => 3,
        found => {
            return Err(Error::IdxMagic {
                path: path.to_path_buf(),
                found,
            })
        }
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header as u64));
    }
    let dims: Vec<u64> = (0..ndim)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as u64
        })
        .collect();
    let overflow = || Error::IdxOverflow {
        path: path.to_path_buf(),
    };
    let total = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(overflow)?;
    let total_usize = usize::try_from(total).map_err(|_| overflow())?;
    let expected = (header as u64).checked_add(total).ok_or_else(overflow)?;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    let n = dims[0] as usize;
    let width = if ndim == 1 { 1 } else { (dims[1] * dims[2]) as usize };
    let data: Vec<f64> = bytes[header..header + total_usize].iter().map(|&b| b as f64).collect();
    Matrix::new(n, width, data)
}

/// Loads the four standard MNIST IDX files from `dir`. Pixels are scaled to
/// `[0, 1]`; no bias feature is added. With `keep_classes` only those digits
/// are kept and relabelled `0..c` in increasing digit order.
pub fn load_mnist(dir: impl AsRef<Path>, keep_classes: Option<&BTreeSet<usize>>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = mnist_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        keep_classes,
    )?;
    let test = mnist_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        keep_classes,
    )?;
    Ok((train, test))
}

fn mnist_pair(images: &Path, labels: &Path, keep: Option<&BTreeSet<usize>>) -> Result<Dataset> {
    let x = load_idx(images)?;
    let y = load_idx(labels)?;
    mnist_from_matrices(x, y, keep)
}

pub(crate) fn mnist_from_matrices(mut x: Matrix, y: Matrix, keep: Option<&BTreeSet<usize>>) -> Result<Dataset> {
    if y.cols() != 1 || x.rows() != y.rows() {
        return Err(Error::Shape("image and label counts differ".into()));
    }
    x.as_mut_slice().iter_mut().for_each(|v| *v /= 255.0);
    let raw: Vec<usize> = y.as_slice().iter().map(|&v| v as usize).collect();
    let (idx, labels, classes): (Vec<usize>, Vec<usize>, usize) = match keep {
        Some(set) => {
            let order: Vec<usize> = set.iter().copied().collect();
            let mut idx = Vec::new();
            let mut lab = Vec::new();
            for (i, &c) in raw.iter().enumerate() {
                if let Some(pos) = order.iter().position(|&k| k == c) {
                    idx.push(i);
                    lab.push(pos);
                }
            }
            (idx, lab, order.len())
        }
        None => {
            let classes = raw.iter().copied().max().map_or(0, |m| m + 1).max(10);
            ((0..raw.len()).collect(), raw, classes)
        }
    };
    let x = if idx.len() == x.rows() { x } else { x.select_rows(&idx) };
    let d = x.cols();
    Dataset::new(
        x,
        Labels::Class(labels),
        Task::Classification { classes },
        vec![(0.0, 1.0); d],
    )
}
