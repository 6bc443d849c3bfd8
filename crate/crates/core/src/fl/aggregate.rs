use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from, tag};

/// One client's submitted model update `ω_i − ω_prev`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub client_id: usize,
    pub delta: Vec<f64>,
    pub weight: f64,
}

/// `n_select` distinct ids out of `0..n_total`, uniform without replacement
/// and fixed by `(seed, round)`. Returned in ascending order.
pub fn sample_clients(n_total: usize, n_select: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if n_select > n_total {
        return Err(Error::invalid(format!("cannot select {n_select} of {n_total} clients")));
    }
    let mut rng = rng_from(seed, &[tag::SAMPLE, round as u64]);
    let mut ids = index::sample(&mut rng, n_total, n_select).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

pub(crate) fn check_lengths(vectors: &[&[f64]]) -> Result<usize> {
    let Some(first) = vectors.first() else {
        return Err(Error::invalid("no updates to aggregate"));
    };
    let d = first.len();
    if let Some(bad) = vectors.iter().position(|v| v.len() != d) {
        return Err(Error::dim(format!("update {bad} has length {} instead of {d}", vectors[bad].len())));
    }
    Ok(d)
}

/// Running mean in input order. Identical inputs give back that input
/// exactly.
pub fn mean_of(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let d = check_lengths(vectors)?;
    let mut m = vec![0.0; d];
    for (k, v) in vectors.iter().enumerate() {
        let k1 = (k + 1) as f64;
        for (mi, &vi) in m.iter_mut().zip(v.iter()) {
            *mi += (vi - *mi) / k1;
        }
    }
    Ok(m)
}

/// Weighted mean of the update vectors with weights normalized to sum to 1.
pub fn fedavg_aggregate(updates: &[UpdateRecord]) -> Result<Vec<f64>> {
    let vectors: Vec<&[f64]> = updates.iter().map(|u| u.delta.as_slice()).collect();
    let d = check_lengths(&vectors)?;
    if updates.iter().any(|u| !(u.weight >= 0.0) || !u.weight.is_finite()) {
        return Err(Error::invalid("aggregation weights must be finite and non-negative"));
    }
    let total: f64 = updates.iter().map(|u| u.weight).sum();
    if total <= 0.0 {
        return Err(Error::invalid("aggregation weights sum to zero"));
    }
    let mut out = vec![0.0; d];
    for u in updates {
        let p = u.weight / total;
        for (o, &v) in out.iter_mut().zip(&u.delta) {
            *o += p * v;
        }
    }
    Ok(out)
}
