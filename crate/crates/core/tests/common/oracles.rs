//! Slow reference implementations used as test oracles.

use pflsim::data::Dataset;
use pflsim::model::{batch_loss_and_grad, init_model, mean_loss, FlatParams, MlpConfig};
use rand::Rng;

use super::{random_dataset, rng};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn plain_mean(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

pub fn trimmed_mean(updates: &[Vec<f64>], beta: usize) -> Vec<f64> {
    let d = updates[0].len();
    (0..d)
        .map(|j| {
            let mut col: Vec<f64> = updates.iter().map(|u| u[j]).collect();
            col.sort_by(f64::total_cmp);
            let kept = &col[beta..col.len() - beta];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

/// Krum scores by enumerating every neighbour subset of size `n − m − 2`.
pub fn krum_scores(updates: &[Vec<f64>], m: usize) -> Vec<f64> {
    let n = updates.len();
    let size = n - m - 2;
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << others.len()) {
                if mask.count_ones() as usize != size {
                    continue;
                }
                let s: f64 = others
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask & (1 << b) != 0)
                    .map(|(_, &j)| sq_dist(&updates[i], &updates[j]))
                    .sum();
                best = best.min(s);
            }
            best
        })
        .collect()
}

pub fn multi_krum(updates: &[Vec<f64>], m: usize, k: usize) -> (Vec<usize>, Vec<f64>) {
    let scores = krum_scores(updates, m);
    let mut ids: Vec<usize> = (0..updates.len()).collect();
    ids.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut sel = ids[..k].to_vec();
    sel.sort_unstable();
    let rows: Vec<&[f64]> = sel.iter().map(|&i| updates[i].as_slice()).collect();
    (sel, plain_mean(&rows))
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations, sorted by
/// descending eigenvalue.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|i| (a[i][i], v.iter().map(|row| row[i]).collect())).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    pairs
}

/// Single-pass spectral filter on all coordinates. Returns the kept ids,
/// the mean of the kept updates and the gap between the top two
/// eigenvalues relative to the first.
pub fn dnc(updates: &[Vec<f64>], frac: f64) -> (Vec<usize>, Vec<f64>, f64) {
    let n = updates.len();
    let d = updates[0].len();
    let rows: Vec<&[f64]> = updates.iter().map(|u| u.as_slice()).collect();
    let mu = plain_mean(&rows);
    let centered: Vec<Vec<f64>> = updates.iter().map(|u| u.iter().zip(&mu).map(|(a, b)| a - b).collect()).collect();
    let cov: Vec<Vec<f64>> =
        (0..d).map(|i| (0..d).map(|j| centered.iter().map(|r| r[i] * r[j]).sum()).collect()).collect();
    let eig = symmetric_eigen(&cov);
    let gap = if d > 1 { (eig[0].0 - eig[1].0) / eig[0].0.abs().max(1e-300) } else { 1.0 };
    let dir = &eig[0].1;
    let scores: Vec<f64> = centered.iter().map(|c| c.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>().powi(2)).collect();
    let remove = ((frac * n as f64) - 1e-9).ceil() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(b.cmp(&a)));
    let mut kept: Vec<usize> = ids[remove..].to_vec();
    kept.sort_unstable();
    let rows: Vec<&[f64]> = kept.iter().map(|&i| updates[i].as_slice()).collect();
    (kept, plain_mean(&rows), gap)
}

pub fn random_updates(r: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

/// Central differences of the mean batch loss, written out independently of
/// the library's gradient checker.
pub fn numeric_grad(params: &FlatParams, model: &MlpConfig, data: &Dataset, eps: f64) -> Vec<f64> {
    let mut probe = params.values().to_vec();
    (0..probe.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = mean_loss(&FlatParams::new(probe.clone()), model, data).unwrap();
            probe[i] = orig - eps;
            let down = mean_loss(&FlatParams::new(probe.clone()), model, data).unwrap();
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// Gradient check of one random MLP; returns the worst relative error.
pub fn gradcheck_random_mlp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dim = r.random_range(1..6);
    let hidden: Vec<usize> = (0..r.random_range(0..3)).map(|_| r.random_range(1..6)).collect();
    let classes = r.random_range(2..5);
    let n = r.random_range(1..7);
    let model = MlpConfig::new(dim, hidden, classes).unwrap();
    // Jitter every parameter so no pre-activation sits on a ReLU kink.
    let base = init_model(&model, seed).unwrap();
    let params = FlatParams::new(base.values().iter().map(|v| v + r.random_range(-0.5..0.5)).collect());
    let data = random_dataset(&mut r, n, dim, classes);
    let idx: Vec<usize> = (0..n).collect();
    let (_, analytic) = batch_loss_and_grad(&params, &model, &data, &idx).unwrap();
    let numeric = numeric_grad(&params, &model, &data, 1e-5);
    max_relative_error(&analytic, &numeric, 1e-3)
}
