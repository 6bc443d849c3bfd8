//! Neural-Cleanse-style trigger reverse engineering with MAD outlier
//! detection and unlearning-based patching.

use serde::{Deserialize, Serialize};

use super::robust::median;
use crate::autodiff::Tape;
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{train_local, FlatParams, MlpConfig, TapeParams};
use crate::tensor::Tensor;

fn default_opt_steps() -> usize {
    100
}
fn default_opt_lr() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.01
}
fn default_mask_init() -> f64 {
    0.5
}
fn default_threshold() -> f64 {
    2.0
}
fn default_unlearn_epochs() -> usize {
    1
}
fn default_unlearn_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcConfig {
    #[serde(default = "default_opt_steps")]
    pub opt_steps: usize,
    #[serde(default = "default_opt_lr")]
    pub opt_lr: f64,
    /// Weight of the mask L1 penalty.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_mask_init")]
    pub mask_init: f64,
    /// Anomaly index above which a class is flagged.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_unlearn_epochs")]
    pub unlearn_epochs: usize,
    #[serde(default = "default_unlearn_lr")]
    pub unlearn_lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for NcConfig {
    fn default() -> Self {
        NcConfig {
            opt_steps: default_opt_steps(),
            opt_lr: default_opt_lr(),
            gamma: default_gamma(),
            mask_init: default_mask_init(),
            threshold: default_threshold(),
            unlearn_epochs: default_unlearn_epochs(),
            unlearn_lr: default_unlearn_lr(),
            batch_size: default_batch(),
        }
    }
}

impl NcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.opt_lr >= 0.0) || !(self.gamma >= 0.0) || !(self.unlearn_lr >= 0.0) {
            return Err(Error::Config("nc_lite rates and gamma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_init) {
            return Err(Error::Config("nc_lite mask_init must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversedTrigger {
    pub class: usize,
    pub pattern: Vec<f64>,
    pub mask: Vec<f64>,
    pub mask_l1: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcOutcome {
    pub triggers: Vec<ReversedTrigger>,
    pub anomaly_index: Vec<f64>,
    pub flagged: Vec<usize>,
    pub patched: FlatParams,
}

fn soft_embed(x: &[f64], pattern: &[f64], mask: &[f64]) -> Vec<f64> {
    x.iter().zip(pattern).zip(mask).map(|((&xi, &p), &m)| xi * (1.0 - m) + p * m).collect()
}

/// Objective `L(E(x,p,m), c) + γ‖m‖₁` with its gradients in `p` and `m`.
fn reversal_objective(
    params: &FlatParams,
    model: &MlpConfig,
    clean: &Dataset,
    class: usize,
    pattern: &[f64],
    mask: &[f64],
    gamma: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (n, d) = (clean.len(), clean.dim());
    let rows: Vec<f64> = clean.examples().iter().flat_map(|e| soft_embed(&e.features, pattern, mask)).collect();
    let mut tape = Tape::new();
    let p = TapeParams::constants(&mut tape, params, model)?;
    let x = tape.leaf(Tensor::matrix(n, d, rows)?);
    let z = p.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(z, &vec![class; n])?;
    let gx = tape.backward(loss)?.wrt(x)?;
    let mut gp = vec![0.0; d];
    let mut gm = vec![gamma; d];
    for (row, e) in gx.data().chunks(d).zip(clean.examples()) {
        for j in 0..d {
            gp[j] += row[j] * mask[j];
            gm[j] += row[j] * (pattern[j] - e.features[j]);
        }
    }
    let l1: f64 = mask.iter().sum();
    Ok((tape.value(loss)?.item()? + gamma * l1, gp, gm))
}

fn reverse_class(params: &FlatParams, model: &MlpConfig, clean: &Dataset, class: usize, cfg: &NcConfig) -> Result<ReversedTrigger> {
    let d = clean.dim();
    let mut pattern = vec![0.5; d];
    let mut mask = vec![cfg.mask_init; d];
    let mut value = reversal_objective(params, model, clean, class, &pattern, &mask, cfg.gamma)?.0;
    for _ in 0..cfg.opt_steps {
        let (v, gp, gm) = reversal_objective(params, model, clean, class, &pattern, &mask, cfg.gamma)?;
        value = v;
        for j in 0..d {
            pattern[j] = (pattern[j] - cfg.opt_lr * gp[j]).clamp(0.0, 1.0);
            mask[j] = (mask[j] - cfg.opt_lr * gm[j]).clamp(0.0, 1.0);
        }
    }
    if cfg.opt_steps > 0 {
        value = reversal_objective(params, model, clean, class, &pattern, &mask, cfg.gamma)?.0;
    }
    let mask_l1 = mask.iter().sum();
    Ok(ReversedTrigger { class, pattern, mask, mask_l1, loss: value })
}

/// `|x − median| / (1.4826·MAD)` per entry; all zero when the MAD is zero.
pub fn anomaly_indices(values: &[f64]) -> Vec<f64> {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&dev);
    if !(mad > 0.0) {
        return vec![0.0; values.len()];
    }
    dev.iter().map(|d| d / (1.4826 * mad)).collect()
}

/// Reverses a trigger for every class on `clean`, flags classes whose mask
/// norm is an outlier, and unlearns the flagged triggers by fine-tuning on
/// `clean` plus the triggered copies under their true labels.
pub fn nc_lite(params: &FlatParams, model: &MlpConfig, clean: &Dataset, cfg: &NcConfig, seed: u64) -> Result<NcOutcome> {
    if clean.is_empty() {
        return Err(Error::invalid("trigger reversal needs clean data"));
    }
    let triggers = (0..model.num_classes)
        .map(|c| reverse_class(params, model, clean, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    let l1: Vec<f64> = triggers.iter().map(|t| t.mask_l1).collect();
    let anomaly_index = anomaly_indices(&l1);
    let flagged: Vec<usize> = (0..triggers.len()).filter(|&c| anomaly_index[c] > cfg.threshold).collect();
    let mut examples = clean.examples().to_vec();
    for &c in &flagged {
        let t = &triggers[c];
        examples.extend(
            clean.examples().iter().map(|e| Example { features: soft_embed(&e.features, &t.pattern, &t.mask), label: e.label }),
        );
    }
    let augmented = Dataset::new(examples, clean.num_classes(), clean.dim())?;
    let patched = train_local(params, model, &augmented, cfg.unlearn_epochs, cfg.unlearn_lr, cfg.batch_size, seed, None)?;
    Ok(NcOutcome { triggers, anomaly_index, flagged, patched })
}
