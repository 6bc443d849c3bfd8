//! Server-side robust aggregation and the client-side Neural-Cleanse-style
//! trigger reversal.

mod nc;
mod robust;

use serde::{Deserialize, Serialize};

pub use nc::{nc_lite, NcConfig, NcOutcome, ReversedTrigger};
pub use robust::{cosine_distance, dnc, flame_lite, median, multi_krum, trimmed_mean, DncOutcome, FlameOutcome, KrumOutcome};

use crate::error::Result;
use crate::fl::{fedavg_aggregate, UpdateRecord};
use crate::seed::derive_seed;

fn default_n_iters() -> usize {
    1
}

fn default_noise() -> f64 {
    0.001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseKind {
    None,
    MultiKrum {
        m_assumed: usize,
        /// Defaults to `n − m_assumed`.
        #[serde(default)]
        k_select: Option<usize>,
    },
    TrimmedMean {
        beta: usize,
    },
    Dnc {
        filter_frac: f64,
        /// Defaults to `min(2000, d)`.
        #[serde(default)]
        subsample_dim: Option<usize>,
        #[serde(default = "default_n_iters")]
        n_iters: usize,
    },
    FlameLite {
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Client-side: aggregation is plain FedAvg, every benign client patches
    /// its personal model before evaluation.
    NcLite(NcConfig),
}

impl DefenseKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::MultiKrum { .. } => "multi_krum",
            DefenseKind::TrimmedMean { .. } => "trimmed_mean",
            DefenseKind::Dnc { .. } => "dnc",
            DefenseKind::FlameLite { .. } => "flame_lite",
            DefenseKind::NcLite(_) => "nc_lite",
        }
    }

    pub fn validate(&self, n_per_round: usize) -> Result<()> {
        use crate::error::Error;
        let bad = |m: String| Err(Error::Config(m));
        match self {
            DefenseKind::MultiKrum { m_assumed, k_select } => {
                if n_per_round < m_assumed + 3 {
                    return bad(format!("multi_krum needs at least m_assumed + 3 = {} clients per round", m_assumed + 3));
                }
                if let Some(k) = k_select {
                    if *k < 1 || *k > n_per_round {
                        return bad(format!("multi_krum k_select must be in 1..={n_per_round}"));
                    }
                }
                Ok(())
            }
            DefenseKind::TrimmedMean { beta } if 2 * beta >= n_per_round => {
                bad(format!("trimmed_mean beta {beta} too large for {n_per_round} clients per round"))
            }
            DefenseKind::Dnc { filter_frac, n_iters, subsample_dim } => {
                if !(*filter_frac > 0.0 && *filter_frac < 1.0) {
                    return bad("dnc filter_frac must be in (0,1)".into());
                }
                if *n_iters == 0 || *subsample_dim == Some(0) {
                    return bad("dnc n_iters and subsample_dim must be positive".into());
                }
                Ok(())
            }
            DefenseKind::FlameLite { noise } if !(*noise >= 0.0) => bad("flame_lite noise must be non-negative".into()),
            DefenseKind::NcLite(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }
}

/// What a defense did with one round's updates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseDecision {
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
    /// Values dropped from each end per coordinate (trimmed mean).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trimmed_per_side: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    /// Grouping degenerated and every update was kept.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

fn split_ids(updates: &[UpdateRecord], kept: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (i, u) in updates.iter().enumerate() {
        if kept.contains(&i) {
            accepted.push(u.client_id);
        } else {
            rejected.push(u.client_id);
        }
    }
    (accepted, rejected)
}

/// Aggregates one round's updates under `kind`. `seed` drives the randomized
/// defenses (DnC coordinate sampling, FLAME noise).
pub fn aggregate(kind: &DefenseKind, updates: &[UpdateRecord], round: usize, seed: u64) -> Result<(Vec<f64>, DefenseDecision)> {
    let vectors: Vec<&[f64]> = updates.iter().map(|u| u.delta.as_slice()).collect();
    let seed = derive_seed(seed, &[crate::seed::tag::DEFENSE, round as u64]);
    let all: Vec<usize> = (0..updates.len()).collect();
    match kind {
        DefenseKind::None | DefenseKind::NcLite(_) => {
            let agg = fedavg_aggregate(updates)?;
            let (accepted, rejected) = split_ids(updates, &all);
            Ok((agg, DefenseDecision { accepted, rejected, ..Default::default() }))
        }
        DefenseKind::MultiKrum { m_assumed, k_select } => {
            let k = k_select.unwrap_or(updates.len().saturating_sub(*m_assumed));
            let out = multi_krum(&vectors, *m_assumed, k)?;
            let (accepted, rejected) = split_ids(updates, &out.selected);
            Ok((out.aggregate, DefenseDecision { accepted, rejected, ..Default::default() }))
        }
        DefenseKind::TrimmedMean { beta } => {
            let agg = trimmed_mean(&vectors, *beta)?;
            let (accepted, rejected) = split_ids(updates, &all);
            Ok((agg, DefenseDecision { accepted, rejected, trimmed_per_side: Some(*beta), ..Default::default() }))
        }
        DefenseKind::Dnc { filter_frac, subsample_dim, n_iters } => {
            let d = vectors.first().map(|v| v.len()).unwrap_or(0);
            let sub = subsample_dim.unwrap_or(d.min(2000)).min(d);
            let out = dnc(&vectors, *filter_frac, sub, *n_iters, seed)?;
            let (accepted, rejected) = split_ids(updates, &out.kept);
            Ok((out.aggregate, DefenseDecision { accepted, rejected, ..Default::default() }))
        }
        DefenseKind::FlameLite { noise } => {
            let out = flame_lite(&vectors, *noise, seed)?;
            let (accepted, rejected) = split_ids(updates, &out.kept);
            Ok((
                out.aggregate,
                DefenseDecision { accepted, rejected, noise_sigma: Some(out.sigma), fallback: out.fallback, ..Default::default() },
            ))
        }
    }
}
