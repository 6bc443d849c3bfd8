use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::seed::{rng_from, tag};

/// A backdoor trigger: pattern `delta` written through a binary `mask`, with
/// the class the attacker wants triggered inputs to land in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    delta: Vec<f64>,
    mask: Vec<bool>,
    target: usize,
}

impl TriggerSpec {
    /// Pattern values are clamped to `[0,1]`.
    pub fn new(delta: Vec<f64>, mask: Vec<bool>, target: usize) -> Result<Self> {
        if delta.len() != mask.len() {
            return Err(Error::dim(format!(
                "trigger pattern has {} values, mask {}",
                delta.len(),
                mask.len()
            )));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite trigger value".into()));
        }
        let delta = delta.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(TriggerSpec { delta, mask, target })
    }

    /// Constant `value` on every masked coordinate of a `dim`-wide input.
    pub fn uniform(dim: usize, mask_coords: &[usize], value: f64, target: usize) -> Result<Self> {
        let mut mask = vec![false; dim];
        for &c in mask_coords {
            if c >= dim {
                return Err(Error::Index(format!("mask coordinate {c} of {dim}")));
            }
            mask[c] = true;
        }
        let delta = mask.iter().map(|&m| if m { value } else { 0.0 }).collect();
        TriggerSpec::new(delta, mask, target)
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn masked_coords(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Same mask and target, new pattern (clamped).
    pub fn with_delta(&self, delta: Vec<f64>) -> Result<Self> {
        TriggerSpec::new(delta, self.mask.clone(), self.target)
    }

    /// `(coordinate, value)` for every masked coordinate.
    pub fn masked_values(&self) -> Vec<(usize, f64)> {
        self.masked_coords().into_iter().map(|i| (i, self.delta[i])).collect()
    }
}

/// `x ⊙ (1 − m) + Δ ⊙ m`.
pub fn embed_trigger(x: &[f64], t: &TriggerSpec) -> Result<Vec<f64>> {
    if x.len() != t.dim() {
        return Err(Error::dim(format!("input has {} features, trigger {}", x.len(), t.dim())));
    }
    Ok(x.iter()
        .zip(&t.delta)
        .zip(&t.mask)
        .map(|((&xi, &di), &mi)| if mi { di } else { xi })
        .collect())
}

fn poison_count(n: usize, rate: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("poison rate must lie in [0,1], got {rate}")));
    }
    Ok(((rate * n as f64).round() as usize).min(n))
}

/// Splits `data` into the clean examples chosen for poisoning and the rest.
/// Selection is uniform over examples, `round(rate·|data|)` of them, and both
/// parts keep the original relative order.
pub fn select_poison(data: &Dataset, rate: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let k = poison_count(data.len(), rate)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from(seed, &[tag::POISON]));
    let mut chosen = vec![false; data.len()];
    for &i in &order[..k] {
        chosen[i] = true;
    }
    let (mal, nor): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| chosen[i]);
    Ok((data.subset(&mal), data.subset(&nor)))
}

/// Trigger-embeds every example and relabels it to the trigger target.
pub fn poison_all(clean: &Dataset, trigger: &TriggerSpec) -> Result<Dataset> {
    if trigger.target() >= clean.num_classes() {
        return Err(Error::Index(format!("target class {} ≥ {}", trigger.target(), clean.num_classes())));
    }
    let examples = clean
        .examples()
        .iter()
        .map(|e| Ok(Example { features: embed_trigger(&e.features, trigger)?, label: trigger.target() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_parts_unchecked(examples, clean.num_classes(), clean.dim()))
}

/// Dirty-label poisoning: returns `(D_mal, D_nor)` where `D_mal` holds the
/// selected examples trigger-embedded and relabeled to the target class.
pub fn split_poison(data: &Dataset, rate: f64, trigger: &TriggerSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let (clean_mal, nor) = select_poison(data, rate, seed)?;
    Ok((poison_all(&clean_mal, trigger)?, nor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    fn trig(delta: Vec<f64>, mask: Vec<bool>) -> TriggerSpec {
        TriggerSpec::new(delta, mask, 0).unwrap()
    }

    #[test]
    fn zero_mask_is_identity() {
        let x = vec![0.1, 0.7, 0.3];
        let t = trig(vec![0.9; 3], vec![false; 3]);
        assert_eq!(embed_trigger(&x, &t).unwrap(), x);
    }

    #[test]
    fn full_mask_overwrites() {
        let t = trig(vec![0.5; 3], vec![true; 3]);
        assert_eq!(embed_trigger(&[0.1, 0.7, 0.3], &t).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn partial_mask_by_hand() {
        let t = trig(vec![0.9, 0.9], vec![false, true]);
        assert_eq!(embed_trigger(&[0.1, 0.2], &t).unwrap(), vec![0.1, 0.9]);
    }

    #[test]
    fn length_mismatch() {
        let t = trig(vec![0.9, 0.9], vec![false, true]);
        assert!(embed_trigger(&[0.1], &t).is_err());
        assert!(TriggerSpec::new(vec![0.1], vec![true, false], 0).is_err());
    }

    #[test]
    fn pattern_is_clamped() {
        let t = trig(vec![-1.0, 2.0], vec![true, true]);
        assert_eq!(t.delta(), &[0.0, 1.0]);
    }

    #[test]
    fn poison_rates() {
        let d = gen_synthetic(2, 3, 4, 0.1, 1).unwrap();
        let t = TriggerSpec::uniform(3, &[0], 0.5, 1).unwrap();

        let (mal, nor) = split_poison(&d, 0.0, &t, 3).unwrap();
        assert!(mal.is_empty());
        assert_eq!(nor, d);

        let (mal, nor) = split_poison(&d, 1.0, &t, 3).unwrap();
        assert_eq!(mal.len(), 8);
        assert!(nor.is_empty());
        assert!(mal.examples().iter().all(|e| e.label == 1 && e.features[0] == 0.5));

        let (mal, nor) = split_poison(&d, 0.25, &t, 3).unwrap();
        assert_eq!((mal.len(), nor.len()), (2, 6));

        assert!(split_poison(&d, 1.5, &t, 3).is_err());
    }
}
