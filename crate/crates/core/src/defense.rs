//! Defenses used to stress the attacks: Sever (iterative removal of samples
//! whose centered gradients project strongly onto the top singular
//! direction) and Deep Partition Aggregation (hash-partitioned ensemble with
//! a vote-gap certificate).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::{train, TrainOptions};
use crate::mathcore::{dot, mix_seed, top_singular_vector, Matrix};
use crate::models::{grad_matrix, predict, ModelSpec, Params};

pub const DEFAULT_SEVER_ROUNDS: usize = 2;

/// Squared projections of the column-centered rows onto the top right
/// singular vector.
pub fn outlier_scores(grads: &Matrix) -> Vec<f64> {
    let mean = grads.col_means();
    let mut centered = grads.clone();
    for i in 0..centered.rows() {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let (v, _) = top_singular_vector(&centered);
    centered.iter_rows().map(|r| dot(r, &v).powi(2)).collect()
}

/// Sever scores of every sample of `ds` at `params`.
pub fn sever_scores(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(outlier_scores(&grad_matrix(spec, params, ds)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverResult {
    pub filtered: Dataset,
    /// Indices into the input, in removal order.
    pub removed: Vec<usize>,
    /// Model trained on the final filtered set.
    pub params: Params,
}

/// Removes a `fraction` of `mixed` over `rounds` rounds, retraining between
/// rounds; the output keeps `⌈(1 − fraction)·n⌉` samples.
pub fn sever_filter(
    mixed: &Dataset,
    spec: &ModelSpec,
    trained: &Params,
    fraction: f64,
    rounds: usize,
    train_opts: &TrainOptions,
    seed: u64,
) -> Result<SeverResult> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} must lie in (0, 1)")));
    }
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be ≥ 1".into()));
    }
    let n = mixed.len();
    let keep = ((1.0 - fraction) * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if keep == 0 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} removes all {n} samples"
        )));
    }
    let total = n - keep;
    let mut alive: Vec<usize> = (0..n).collect();
    let mut removed = Vec::with_capacity(total);
    let mut params = trained.clone();
    for r in 1..=rounds {
        let target = (total * r).div_ceil(rounds);
        let k = target - removed.len();
        if k > 0 {
            let current = mixed.subset(&alive);
            let scores = sever_scores(spec, &params, &current)?;
            let mut order: Vec<usize> = (0..alive.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut drop: Vec<usize> = order[..k].to_vec();
            removed.extend(drop.iter().map(|&j| alive[j]));
            drop.sort_unstable();
            for &j in drop.iter().rev() {
                alive.remove(j);
            }
        }
        if r < rounds || k > 0 {
            params = train(spec, &mixed.subset(&alive), train_opts, seed)?;
        }
    }
    Ok(SeverResult {
        filtered: mixed.subset(&alive),
        removed,
        params,
    })
}

/// Partition of sample `idx`: a pure function of `(idx, seed, k)`.
pub fn partition_of(idx: usize, seed: u64, k: usize) -> usize {
    (mix_seed(&[seed, idx as u64]) % k as u64) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub spec: ModelSpec,
    pub k: usize,
    pub seed: u64,
    pub models: Vec<Params>,
}

/// Splits `mixed` into `k` hash partitions and trains one model per part.
pub fn dpa_train(mixed: &Dataset, spec: &ModelSpec, k: usize, seed: u64, train_opts: &TrainOptions) -> Result<Ensemble> {
    if k == 0 || k > mixed.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            mixed.len()
        )));
    }
    let mut parts = vec![Vec::new(); k];
    for i in 0..mixed.len() {
        parts[partition_of(i, seed, k)].push(i);
    }
    if let Some(p) = parts.iter().position(Vec::is_empty) {
        return Err(Error::EmptyPartition { partition: p, k });
    }
    let models = parts
        .par_iter()
        .map(|idx| train(spec, &mixed.subset(idx), train_opts, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        spec: *spec,
        k,
        seed,
        models,
    })
}

/// Plurality label (ties to the smaller class) and the number of base
/// models an adversary may corrupt without changing it.
pub fn vote_certificate(counts: &[usize]) -> (usize, usize) {
    let mut top = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[top] {
            top = c;
        }
    }
    let second = (0..counts.len())
        .filter(|&c| c != top)
        .fold(None, |best: Option<usize>, c| match best {
            Some(b) if counts[b] >= counts[c] => Some(b),
            _ => Some(c),
        });
    let budget = match second {
        Some(s) => {
            let gap = counts[top] - counts[s] - usize::from(s < top);
            gap / 2
        }
        None => counts[top],
    };
    (top, budget)
}

/// Vote counts of the ensemble at `x`.
pub fn dpa_votes(ens: &Ensemble, x: &[f64]) -> Result<Vec<usize>> {
    let classes = ens
        .spec
        .classes()
        .ok_or_else(|| Error::InvalidArgument("partition aggregation needs a classifier".into()))?;
    let mut counts = vec![0; classes];
    for m in &ens.models {
        counts[predict(&ens.spec, &m.values, x)?] += 1;
    }
    Ok(counts)
}

/// `(label, certified budget)` at `x`.
pub fn dpa_predict(ens: &Ensemble, x: &[f64]) -> Result<(usize, usize)> {
    Ok(vote_certificate(&dpa_votes(ens, x)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpaReport {
    pub accuracy: f64,
    /// Share of test points predicted correctly with budget ≥ `poison_count`.
    pub certified_accuracy: f64,
    pub poison_count: usize,
}

pub fn dpa_evaluate(ens: &Ensemble, test: &Dataset, poison_count: usize) -> Result<DpaReport> {
    let labels = match &test.labels {
        crate::data::Labels::Class(l) => l,
        _ => return Err(Error::InvalidArgument("test set needs class labels".into())),
    };
    let (mut hit, mut cert) = (0usize, 0usize);
    for (i, &y) in labels.iter().enumerate() {
        let (label, budget) = dpa_predict(ens, test.x.row(i))?;
        if label == y {
            hit += 1;
            if budget >= poison_count {
                cert += 1;
            }
        }
    }
    let n = test.len().max(1) as f64;
    Ok(DpaReport {
        accuracy: hit as f64 / n,
        certified_accuracy: cert as f64 / n,
        poison_count,
    })
}
