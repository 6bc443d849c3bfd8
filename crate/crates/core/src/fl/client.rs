use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::FlatParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Benign,
    Malicious,
}

/// Strategy-private state, owned by one client and never shared.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyState {
    /// FedAvg-FT, FedProx-FT and Per-FedAvg(FO) keep nothing between rounds.
    Stateless,
    Scaffold {
        control: Vec<f64>,
        /// Change of `control` in the latest local step, collected by the
        /// server at the aggregation barrier.
        pending_delta: Option<Vec<f64>>,
    },
    Ditto {
        personal: FlatParams,
    },
    FedRep {
        /// Private head coordinates (the last layer(s) of the model).
        head: Vec<f64>,
    },
    FedAla {
        local: FlatParams,
        /// Blend weight per final-layer coordinate, each in `[0,1]`.
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    /// Clean local training data (`D_nor` for a malicious client).
    pub train: Dataset,
    /// Clean examples a malicious client turns into `D_mal`; empty for
    /// benign clients.
    pub poison_source: Dataset,
    /// Held-out clean split used for ACC/ASR.
    pub test: Dataset,
    /// Aggregation weight `p_i`, proportional to the training set size.
    pub weight: f64,
    pub seed: u64,
    pub state: StrategyState,
}

impl ClientState {
    pub fn is_malicious(&self) -> bool {
        self.role == Role::Malicious
    }

    /// Every clean training example the client owns.
    pub fn all_clean(&self) -> Dataset {
        self.train.concat(&self.poison_source).unwrap_or_else(|_| self.train.clone())
    }
}
