use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fl::{check_lengths, mean_of};
use crate::model::l2_norm;
use crate::seed::rng_from;

/// Median of a non-empty slice; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 − cos(a, b)`; a zero vector has cosine 0 with everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

/// Per coordinate, drops the `beta` smallest and `beta` largest values (a
/// stable sort decides among equal values) and averages the rest in input
/// order.
pub fn trimmed_mean(updates: &[&[f64]], beta: usize) -> Result<Vec<f64>> {
    let d = check_lengths(updates)?;
    let n = updates.len();
    if n <= 2 * beta {
        return Err(Error::Defense(format!("trimmed mean with beta {beta} needs more than {} updates, got {n}", 2 * beta)));
    }
    if beta == 0 {
        return mean_of(updates);
    }
    let mut out = vec![0.0; d];
    let mut order: Vec<usize> = (0..n).collect();
    let mut keep = vec![false; n];
    for (j, o) in out.iter_mut().enumerate() {
        order.sort_by(|&a, &b| updates[a][j].total_cmp(&updates[b][j]).then(a.cmp(&b)));
        keep.iter_mut().for_each(|k| *k = false);
        for &i in &order[beta..n - beta] {
            keep[i] = true;
        }
        let mut m = 0.0;
        let mut count = 0.0;
        for (i, u) in updates.iter().enumerate() {
            if keep[i] {
                count += 1.0;
                m += (u[j] - m) / count;
            }
        }
        *o = m;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrumOutcome {
    /// Input positions of the selected updates, ascending.
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    pub aggregate: Vec<f64>,
}

/// Mean of the listed vectors, summed in an order fixed by their contents so
/// the result does not depend on input order.
fn canonical_mean(updates: &[&[f64]], ids: &[usize]) -> Result<Vec<f64>> {
    let mut picked: Vec<&[f64]> = ids.iter().map(|&i| updates[i]).collect();
    picked.sort_by(|a, b| {
        a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    mean_of(&picked)
}

/// Scores each update by the summed squared distance to its `n − m − 2`
/// nearest neighbours and averages the `k` best (ties toward lower
/// position).
pub fn multi_krum(updates: &[&[f64]], m_assumed: usize, k_select: usize) -> Result<KrumOutcome> {
    check_lengths(updates)?;
    let n = updates.len();
    if n < m_assumed + 3 {
        return Err(Error::Defense(format!("multi-krum with m = {m_assumed} needs at least {} updates, got {n}", m_assumed + 3)));
    }
    if k_select == 0 || k_select > n {
        return Err(Error::Defense(format!("multi-krum cannot select {k_select} of {n} updates")));
    }
    let neighbours = n - m_assumed - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(updates[i], updates[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others[..neighbours].iter().sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut selected = order[..k_select].to_vec();
    selected.sort_unstable();
    let aggregate = canonical_mean(updates, &selected)?;
    Ok(KrumOutcome { selected, scores, aggregate })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DncOutcome {
    /// Input positions kept by every iteration, ascending.
    pub kept: Vec<usize>,
    pub aggregate: Vec<f64>,
}

/// Top eigenvector of `XᵀX` for the rows of `x` by power iteration.
fn principal_direction(rows: &[Vec<f64>], seed: u64) -> Vec<f64> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut rng = rng_from(seed, &[1]);
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = l2_norm(&v);
    if n0 > 0.0 {
        v.iter_mut().for_each(|x| *x /= n0);
    }
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for r in rows {
            let p = dot(r, &v);
            for (nj, &rj) in next.iter_mut().zip(r) {
                *nj += p * rj;
            }
        }
        let norm = l2_norm(&next);
        if norm == 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let change = l2_norm(&next.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        v = next;
        if change < 1e-9 {
            break;
        }
    }
    v
}

/// Spectral outlier filter: per iteration, project onto a random coordinate
/// subset, centre, and remove the `ceil(filter_frac·n)` updates with the
/// largest squared projection on the top principal direction (ties remove
/// the higher position). Updates kept by every iteration are averaged.
pub fn dnc(updates: &[&[f64]], filter_frac: f64, subsample_dim: usize, n_iters: usize, seed: u64) -> Result<DncOutcome> {
    let d = check_lengths(updates)?;
    let n = updates.len();
    if subsample_dim == 0 || subsample_dim > d {
        return Err(Error::Defense(format!("dnc subsample_dim {subsample_dim} must be in 1..={d}")));
    }
    if !(filter_frac > 0.0 && filter_frac < 1.0) {
        return Err(Error::Defense(format!("dnc filter_frac must be in (0,1), got {filter_frac}")));
    }
    let remove = ((filter_frac * n as f64) - 1e-9).ceil() as usize;
    let mut kept = vec![true; n];
    for it in 0..n_iters {
        let mut coords = if subsample_dim == d {
            (0..d).collect::<Vec<_>>()
        } else {
            index::sample(&mut rng_from(seed, &[0, it as u64]), d, subsample_dim).into_vec()
        };
        coords.sort_unstable();
        let projected: Vec<Vec<f64>> = updates.iter().map(|u| coords.iter().map(|&c| u[c]).collect()).collect();
        let refs: Vec<&[f64]> = projected.iter().map(|v| v.as_slice()).collect();
        let mu = mean_of(&refs)?;
        let centered: Vec<Vec<f64>> = projected.iter().map(|v| v.iter().zip(&mu).map(|(a, b)| a - b).collect()).collect();
        let dir = principal_direction(&centered, crate::seed::derive_seed(seed, &[it as u64]));
        let scores: Vec<f64> = centered.iter().map(|c| dot(c, &dir).powi(2)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
        for &i in &order[..remove.min(n)] {
            kept[i] = false;
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| kept[i]).collect();
    if kept.is_empty() {
        return Err(Error::Defense("dnc removed every update".into()));
    }
    let sel: Vec<&[f64]> = kept.iter().map(|&i| updates[i]).collect();
    Ok(DncOutcome { aggregate: mean_of(&sel)?, kept })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlameOutcome {
    pub kept: Vec<usize>,
    pub aggregate: Vec<f64>,
    pub sigma: f64,
    pub fallback: bool,
}

/// Largest set of positions whose pairwise entries in `close` are all true;
/// among equal sizes the lexicographically smallest. Exhaustive up to 16
/// updates, greedy beyond.
fn largest_group(close: &[Vec<bool>]) -> Vec<usize> {
    let n = close.len();
    if n <= 16 {
        let mut best: Vec<usize> = Vec::new();
        // Masks visited so that, within a size, lexicographically smaller id
        // lists come first: compare on collection.
        for mask in 1u32..(1u32 << n) {
            let ids: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
            if ids.len() < best.len() {
                continue;
            }
            let ok = ids.iter().enumerate().all(|(a, &i)| ids[a + 1..].iter().all(|&j| close[i][j]));
            if ok && (ids.len() > best.len() || ids < best) {
                best = ids;
            }
        }
        best
    } else {
        let mut best: Vec<usize> = Vec::new();
        for start in 0..n {
            let mut group = vec![start];
            for j in 0..n {
                if j != start && group.iter().all(|&g| close[g][j]) {
                    group.push(j);
                }
            }
            group.sort_unstable();
            if group.len() > best.len() || (group.len() == best.len() && group < best) {
                best = group;
            }
        }
        best
    }
}

/// Cosine grouping, clipping to the median norm, averaging and Gaussian
/// noise with `σ = noise · median norm`.
pub fn flame_lite(updates: &[&[f64]], noise: f64, seed: u64) -> Result<FlameOutcome> {
    let d = check_lengths(updates)?;
    let n = updates.len();
    if n < 2 {
        return Err(Error::Defense(format!("flame needs at least 2 updates, got {n}")));
    }
    let mut dist = vec![vec![0.0; n]; n];
    let mut all = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine_distance(updates[i], updates[j]);
            dist[i][j] = c;
            dist[j][i] = c;
            all.push(c);
        }
    }
    let threshold = median(&all);
    let close: Vec<Vec<bool>> = dist.iter().map(|row| row.iter().map(|&c| c <= threshold).collect()).collect();
    let mut kept = largest_group(&close);
    let fallback = kept.len() < 2;
    if fallback {
        kept = (0..n).collect();
    }
    let norms: Vec<f64> = kept.iter().map(|&i| l2_norm(updates[i])).collect();
    let med = median(&norms);
    let clipped: Vec<Vec<f64>> = kept
        .iter()
        .zip(&norms)
        .map(|(&i, &nrm)| {
            if nrm > med && nrm > 0.0 {
                let s = med / nrm;
                updates[i].iter().map(|v| v * s).collect()
            } else {
                updates[i].to_vec()
            }
        })
        .collect();
    let refs: Vec<&[f64]> = clipped.iter().map(|v| v.as_slice()).collect();
    let mut aggregate = mean_of(&refs)?;
    let sigma = noise * med;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Defense(e.to_string()))?;
        let mut rng = rng_from(seed, &[2]);
        for a in aggregate.iter_mut().take(d) {
            *a += normal.sample(&mut rng);
        }
    }
    Ok(FlameOutcome { kept, aggregate, sigma, fallback })
}
