use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::sample_clients;
use super::client::{ClientState, StrategyState};
use crate::attack::Adversary;
use crate::defense::{aggregate, DefenseDecision, DefenseKind};
use crate::error::{Error, Result};
use crate::model::{l2_norm, FlatParams, MlpConfig};
use crate::strategy::{LocalResult, LocalTrainConfig, RoundContext, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStat {
    pub client_id: usize,
    pub malicious: bool,
    /// The update came from an active attack.
    pub attacking: bool,
    /// `‖Δω_i‖` of the submitted update.
    pub update_norm: f64,
    /// `‖ω_i − ω_prev‖` of the locally trained model.
    pub trained_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub updates: Vec<ClientRoundStat>,
    pub defense: DefenseDecision,
    pub aggregate_norm: f64,
    pub global_checksum: String,
}

/// Complete federated state: global model, every client, the adversary and
/// the round history.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub model: MlpConfig,
    pub strategy: StrategyKind,
    pub defense: DefenseKind,
    pub local: LocalTrainConfig,
    pub clients_per_round: usize,
    pub seed: u64,
    pub clients: Vec<ClientState>,
    pub global: FlatParams,
    /// SCAFFOLD server control variate.
    pub server_control: Option<Vec<f64>>,
    pub adversary: Option<Adversary>,
    pub pgd_radius: Option<f64>,
    pub history: Vec<RoundRecord>,
}

impl Simulation {
    /// Initializes every client's strategy state from `global`. Client ids
    /// must equal their positions.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: MlpConfig,
        strategy: StrategyKind,
        defense: DefenseKind,
        local: LocalTrainConfig,
        clients_per_round: usize,
        seed: u64,
        mut clients: Vec<ClientState>,
        global: FlatParams,
        adversary: Option<Adversary>,
    ) -> Result<Self> {
        if global.len() != model.param_count() {
            return Err(Error::dim(format!("global model has {} parameters, config needs {}", global.len(), model.param_count())));
        }
        if let Some(bad) = clients.iter().enumerate().position(|(i, c)| c.id != i) {
            return Err(Error::invalid(format!("client at position {bad} has id {}", clients[bad].id)));
        }
        if clients_per_round == 0 || clients_per_round > clients.len() {
            return Err(Error::invalid(format!("cannot select {clients_per_round} of {} clients per round", clients.len())));
        }
        strategy.validate(&model)?;
        defense.validate(clients_per_round)?;
        for c in &mut clients {
            c.state = strategy.init_state(&global, &model);
        }
        let server_control = matches!(strategy, StrategyKind::Scaffold).then(|| vec![0.0; global.len()]);
        Ok(Simulation {
            model,
            strategy,
            defense,
            local,
            clients_per_round,
            seed,
            clients,
            global,
            server_control,
            adversary,
            pgd_radius: None,
            history: Vec::new(),
        })
    }

    /// Runs rounds `1..=rounds` after any already recorded.
    pub fn run(&mut self, rounds: usize) -> Result<()> {
        let start = self.history.len() + 1;
        for t in start..start + rounds {
            self.run_round(t)?;
        }
        Ok(())
    }

    pub fn run_round(&mut self, round: usize) -> Result<&RoundRecord> {
        if round == 0 {
            return Err(Error::invalid("rounds are numbered from 1"));
        }
        let selected = sample_clients(self.clients.len(), self.clients_per_round, round, self.seed)?;
        let any_malicious = selected.iter().any(|&i| self.clients[i].is_malicious());
        if let Some(adv) = &mut self.adversary {
            adv.prepare_round(round, &self.global, &self.model, any_malicious)?;
        }

        let ctx = RoundContext {
            round,
            model: &self.model,
            local: self.local,
            server_control: self.server_control.as_deref(),
        };
        let global = &self.global;
        let strategy = &self.strategy;
        let adversary = self.adversary.as_ref();
        let pgd_radius = self.pgd_radius;
        let results: Vec<(bool, LocalResult)> = self
            .clients
            .par_iter_mut()
            .filter(|c| selected.binary_search(&c.id).is_ok())
            .map(|client| -> Result<(bool, LocalResult)> {
                match adversary.filter(|_| client.is_malicious()) {
                    Some(adv) => {
                        let attacking = adv.active(round);
                        Ok((attacking, adv.client_update(global, client, strategy, &ctx, pgd_radius)?))
                    }
                    None if client.is_malicious() => {
                        let data = client.all_clean();
                        Ok((false, strategy.local_step_on(global, client, &ctx, &data, &Default::default())?))
                    }
                    None => {
                        let data = client.train.clone();
                        Ok((false, strategy.local_step_on(global, client, &ctx, &data, &Default::default())?))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let stats: Vec<ClientRoundStat> = results
            .iter()
            .map(|(attacking, r)| ClientRoundStat {
                client_id: r.update.client_id,
                malicious: self.clients[r.update.client_id].is_malicious(),
                attacking: *attacking,
                update_norm: l2_norm(&r.update.delta),
                trained_distance: r.trained.distance(&self.global),
            })
            .collect();
        let updates: Vec<_> = results.into_iter().map(|(_, r)| r.update).collect();
        let (agg, decision) = aggregate(&self.defense, &updates, round, self.seed)?;
        self.global = self.global.apply_delta(&agg)?;

        if let Some(c) = &mut self.server_control {
            let n = self.clients.len() as f64;
            for &i in &selected {
                if let StrategyState::Scaffold { pending_delta: Some(d), .. } = &mut self.clients[i].state {
                    for (cj, dj) in c.iter_mut().zip(d.iter()) {
                        *cj += dj / n;
                    }
                }
            }
        }

        self.history.push(RoundRecord {
            round,
            selected,
            updates: stats,
            defense: decision,
            aggregate_norm: l2_norm(&agg),
            global_checksum: self.global.checksum(),
        });
        Ok(self.history.last().expect("record just pushed"))
    }
}
