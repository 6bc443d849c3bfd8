use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{rng_from, tag, SimRng};

const MAX_ATTEMPTS: u64 = 100;

fn sample_dirichlet(rng: &mut SimRng, alpha: f64, n: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma({alpha}): {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|g| g / total).collect())
    } else {
        // Every draw underflowed: the limit of Dir(α→0) is a point mass.
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        Ok(p)
    }
}

/// Integer quotas summing to `total`, proportional to `props`, by the
/// largest-remainder rule. Ties on the remainder go to the lower index.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed split of `data` across `n_clients`: for every class the
/// client shares are drawn from `Dir(alpha·1)` and rounded by largest
/// remainder. Within-class order is shuffled once by `seed`; proportions are
/// redrawn (up to 100 times) until every client holds at least one example.
pub fn dirichlet_partition(data: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<Vec<Dataset>> {
    if n_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    if n_clients == 1 {
        return Ok(vec![data.clone()]);
    }
    if data.len() < n_clients {
        return Err(Error::Partition(format!(
            "{} examples cannot cover {n_clients} clients",
            data.len()
        )));
    }

    let mut shuffle_rng = rng_from(seed, &[tag::PARTITION, u64::MAX]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, e) in data.examples().iter().enumerate() {
        by_class[e.label].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(&mut shuffle_rng);
    }

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_from(seed, &[tag::PARTITION, attempt]);
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for idx in &by_class {
            if idx.is_empty() {
                continue;
            }
            let props = sample_dirichlet(&mut rng, alpha, n_clients)?;
            let quotas = largest_remainder(&props, idx.len());
            let mut start = 0;
            for (part, q) in parts.iter_mut().zip(quotas) {
                part.extend_from_slice(&idx[start..start + q]);
                start += q;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            return Ok(parts.iter().map(|p| data.subset(p)).collect());
        }
    }
    Err(Error::Partition(format!(
        "no partition with every client non-empty after {MAX_ATTEMPTS} draws (alpha={alpha}, n_clients={n_clients})"
    )))
}

/// Per-class holdout: `round(frac·n_c)` examples of every class go to the
/// second (test) part. Both parts keep the original relative order.
pub fn stratified_split(data: &Dataset, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::invalid(format!("holdout fraction must lie in [0,1), got {frac}")));
    }
    let mut rng = rng_from(seed, &[tag::SPLIT]);
    let mut held = vec![false; data.len()];
    for class in 0..data.num_classes() {
        let mut idx: Vec<usize> =
            data.examples().iter().enumerate().filter(|(_, e)| e.label == class).map(|(i, _)| i).collect();
        idx.shuffle(&mut rng);
        let k = (frac * idx.len() as f64).round() as usize;
        for &i in &idx[..k] {
            held[i] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| held[i]);
    Ok((data.subset(&train), data.subset(&test)))
}
