use serde::{Deserialize, Serialize};

use crate::data::{embed_trigger, Dataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::fl::RoundRecord;
use crate::model::{accuracy, predict_batch, FlatParams, MlpConfig};
use crate::tensor::Tensor;

/// Clean accuracy of each model on its paired test set.
pub fn eval_acc(models: &[FlatParams], model: &MlpConfig, test_sets: &[Dataset]) -> Result<Vec<f64>> {
    if models.len() != test_sets.len() {
        return Err(Error::invalid(format!("{} models for {} test sets", models.len(), test_sets.len())));
    }
    models.iter().zip(test_sets).map(|(p, t)| accuracy(p, model, t)).collect()
}

/// Attack success rate of one model: the fraction of test examples whose
/// true label is not the target that are classified as the target once the
/// trigger is embedded.
pub fn client_asr(params: &FlatParams, model: &MlpConfig, trigger: &TriggerSpec, test: &Dataset) -> Result<f64> {
    let rows: Vec<Vec<f64>> = test
        .examples()
        .iter()
        .filter(|e| e.label != trigger.target())
        .map(|e| embed_trigger(&e.features, trigger))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Evaluation("no test example outside the target class".into()));
    }
    let preds = predict_batch(params, model, &Tensor::from_rows(&rows)?)?;
    Ok(preds.iter().filter(|&&p| p == trigger.target()).count() as f64 / rows.len() as f64)
}

pub fn eval_asr(models: &[FlatParams], model: &MlpConfig, trigger: &TriggerSpec, test_sets: &[Dataset]) -> Result<Vec<f64>> {
    if models.len() != test_sets.len() {
        return Err(Error::invalid(format!("{} models for {} test sets", models.len(), test_sets.len())));
    }
    models.iter().zip(test_sets).map(|(p, t)| client_asr(p, model, trigger, t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub round: usize,
    pub attackers: usize,
    /// Mean `‖Δω_mal‖` of the submitted malicious updates.
    pub mean_update_norm: f64,
    /// Mean `‖ω_mal − ω_prev‖` of the locally trained malicious models.
    pub mean_trained_distance: f64,
}

/// One row per round with at least one attacking update.
pub fn distance_table(history: &[RoundRecord]) -> Vec<DistanceRow> {
    history
        .iter()
        .filter_map(|r| {
            let att: Vec<_> = r.updates.iter().filter(|u| u.attacking).collect();
            if att.is_empty() {
                return None;
            }
            let k = att.len() as f64;
            Some(DistanceRow {
                round: r.round,
                attackers: att.len(),
                mean_update_norm: att.iter().map(|u| u.update_norm).sum::<f64>() / k,
                mean_trained_distance: att.iter().map(|u| u.trained_distance).sum::<f64>() / k,
            })
        })
        .collect()
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::defense::DefenseDecision;
    use crate::fl::ClientRoundStat;

    fn const_model(class: usize) -> (MlpConfig, FlatParams) {
        // Linear 2→3 model whose bias alone decides the prediction.
        let m = MlpConfig::new(2, vec![], 3).unwrap();
        let mut v = vec![0.0; m.param_count()];
        v[6 + class] = 1.0;
        (m, FlatParams::new(v))
    }

    fn set(labels: &[usize]) -> Dataset {
        Dataset::new(labels.iter().map(|&l| Example { features: vec![0.2, 0.4], label: l }).collect(), 3, 2).unwrap()
    }

    #[test]
    fn acc_examples() {
        let (m, p) = const_model(1);
        assert_eq!(eval_acc(std::slice::from_ref(&p), &m, &[set(&[1, 1, 1, 1])]).unwrap(), vec![1.0]);
        assert_eq!(eval_acc(std::slice::from_ref(&p), &m, &[set(&[0, 1, 0, 1])]).unwrap(), vec![0.5]);
        assert!(eval_acc(&[p], &m, &[Dataset::empty(3, 2)]).is_err());
    }

    #[test]
    fn asr_examples() {
        let (m, p) = const_model(2);
        let t = TriggerSpec::uniform(2, &[0], 0.9, 2).unwrap();
        assert_eq!(eval_asr(std::slice::from_ref(&p), &m, &t, &[set(&[0, 1, 2])]).unwrap(), vec![1.0]);
        assert!(eval_asr(&[p], &m, &t, &[set(&[2, 2])]).is_err());
    }

    #[test]
    fn distances_from_records() {
        let stat = |n: f64, attacking| ClientRoundStat {
            client_id: 0,
            malicious: attacking,
            attacking,
            update_norm: n,
            trained_distance: n,
        };
        let rec = |round, updates| RoundRecord {
            round,
            selected: vec![],
            updates,
            defense: DefenseDecision::default(),
            aggregate_norm: 0.0,
            global_checksum: String::new(),
        };
        let h = vec![rec(1, vec![stat(3.0, false)]), rec(2, vec![stat(2.0, true), stat(4.0, true), stat(9.0, false)])];
        let t = distance_table(&h);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].mean_update_norm, 3.0);
        assert_eq!(distance_table(&[rec(1, vec![stat(0.0, true)])])[0].mean_update_norm, 0.0);
    }
}
