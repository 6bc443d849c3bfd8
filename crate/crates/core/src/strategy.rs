//! Personalization strategies. Each strategy defines how a client computes
//! its round update and how it derives the personal model it is evaluated
//! with.

use std::ops::Range;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::{ClientState, StrategyState, UpdateRecord};
use crate::model::{
    batch_loss_and_grad, loss_and_grad, train_hooked, train_with, BatchGradient, FlatParams, LocalHooks,
    MlpConfig, Projection, Prox, SgdConfig,
};
use crate::seed::{derive_seed, rng_from, tag};

fn default_head_layers() -> usize {
    1
}

fn default_head_epochs() -> usize {
    1
}

fn default_ala_steps() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyKind {
    FedAvgFt,
    FedProxFt {
        mu: f64,
    },
    Scaffold,
    PerFedAvgFo {
        /// Inner (adaptation) step size.
        inner_lr: f64,
        /// Outer (meta) step size.
        outer_lr: f64,
    },
    Ditto {
        lambda: f64,
    },
    FedRep {
        #[serde(default = "default_head_layers")]
        head_layers: usize,
        #[serde(default = "default_head_epochs")]
        head_epochs: usize,
    },
    FedAla {
        ala_lr: f64,
        #[serde(default = "default_ala_steps")]
        ala_steps: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Per-round information a client receives from the server.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round: usize,
    pub model: &'a MlpConfig,
    pub local: LocalTrainConfig,
    /// SCAFFOLD server control variate.
    pub server_control: Option<&'a [f64]>,
}

/// Manipulations an attack layers on top of a strategy's local training.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttackHooks<'a> {
    pub frozen: Option<&'a [bool]>,
    /// Radius of the L2 ball around the round's starting model.
    pub projection_radius: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub update: UpdateRecord,
    /// Locally trained model before any masking of the submitted update.
    pub trained: FlatParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalModel {
    pub params: FlatParams,
    pub strategy: String,
    pub adaptation_epochs: usize,
}

fn or_masks(a: Option<&[bool]>, b: &[bool]) -> Vec<bool> {
    match a {
        Some(a) => a.iter().zip(b).map(|(x, y)| *x || *y).collect(),
        None => b.to_vec(),
    }
}

fn range_mask(n: usize, r: &Range<usize>, inside: bool) -> Vec<bool> {
    (0..n).map(|i| r.contains(&i) == inside).collect()
}

/// First-order MAML gradient: the batch gradient evaluated after one inner
/// step of size `inner_lr` on an independently sampled batch.
struct FirstOrderMetaGrad<'a> {
    config: &'a MlpConfig,
    data: &'a Dataset,
    inner_lr: f64,
    batch_size: usize,
    seed: u64,
}

impl BatchGradient for FirstOrderMetaGrad<'_> {
    fn gradient(&mut self, params: &FlatParams, batch: &[usize], step: usize) -> Result<Vec<f64>> {
        if self.inner_lr == 0.0 {
            return Ok(batch_loss_and_grad(params, self.config, self.data, batch)?.1);
        }
        let n = self.data.len();
        let mut rng = rng_from(self.seed, &[tag::META, step as u64]);
        let inner_batch = index::sample(&mut rng, n, self.batch_size.min(n)).into_vec();
        let (_, g_inner) = batch_loss_and_grad(params, self.config, self.data, &inner_batch)?;
        let adapted =
            FlatParams::new(params.values().iter().zip(&g_inner).map(|(w, g)| w - self.inner_lr * g).collect());
        Ok(batch_loss_and_grad(&adapted, self.config, self.data, batch)?.1)
    }
}

/// `w⊙global + (1−w)⊙local` on `range`, `global` elsewhere.
pub fn ala_blend(global: &FlatParams, local: &FlatParams, weights: &[f64], range: &Range<usize>) -> FlatParams {
    let mut out = global.clone();
    for (k, i) in range.clone().enumerate() {
        let w = weights[k];
        out.values_mut()[i] = w * global.values()[i] + (1.0 - w) * local.values()[i];
    }
    out
}

/// Adapts the blend weights by projected gradient steps on the local loss and
/// returns the blended starting point.
pub fn ala_adapt(
    global: &FlatParams,
    local: &FlatParams,
    weights: &mut [f64],
    range: &Range<usize>,
    data: &Dataset,
    model: &MlpConfig,
    lr: f64,
    steps: usize,
) -> Result<FlatParams> {
    let mut blended = ala_blend(global, local, weights, range);
    if data.is_empty() {
        return Ok(blended);
    }
    for _ in 0..steps {
        let (_, g) = loss_and_grad(&blended, model, data)?;
        for (k, i) in range.clone().enumerate() {
            let dw = g[i] * (global.values()[i] - local.values()[i]);
            weights[k] = (weights[k] - lr * dw).clamp(0.0, 1.0);
        }
        blended = ala_blend(global, local, weights, range);
    }
    Ok(blended)
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::FedAvgFt => "fedavg_ft",
            StrategyKind::FedProxFt { .. } => "fedprox_ft",
            StrategyKind::Scaffold => "scaffold",
            StrategyKind::PerFedAvgFo { .. } => "perfedavg_fo",
            StrategyKind::Ditto { .. } => "ditto",
            StrategyKind::FedRep { .. } => "fedrep",
            StrategyKind::FedAla { .. } => "fedala",
        }
    }

    pub fn validate(&self, model: &MlpConfig) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("strategy {name} must be a non-negative number, got {v}")))
            }
        };
        match *self {
            StrategyKind::FedAvgFt | StrategyKind::Scaffold => Ok(()),
            StrategyKind::FedProxFt { mu } => nonneg("mu", mu),
            StrategyKind::PerFedAvgFo { inner_lr, outer_lr } => {
                nonneg("inner_lr", inner_lr)?;
                if outer_lr > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config("strategy outer_lr must be positive".into()))
                }
            }
            StrategyKind::Ditto { lambda } => nonneg("lambda", lambda),
            StrategyKind::FedRep { head_layers, .. } => {
                if head_layers >= 1 && head_layers < model.num_layers() {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "fedrep head_layers must be in 1..{}, got {head_layers}",
                        model.num_layers()
                    )))
                }
            }
            StrategyKind::FedAla { ala_lr, .. } => {
                if ala_lr > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config("fedala ala_lr must be positive".into()))
                }
            }
        }
    }

    /// Fresh per-client state derived from the initial global model.
    pub fn init_state(&self, global: &FlatParams, model: &MlpConfig) -> StrategyState {
        match self {
            StrategyKind::Scaffold => StrategyState::Scaffold { control: vec![0.0; global.len()], pending_delta: None },
            StrategyKind::Ditto { .. } => StrategyState::Ditto { personal: global.clone() },
            StrategyKind::FedRep { head_layers, .. } => {
                StrategyState::FedRep { head: global.values()[model.head_range(*head_layers)].to_vec() }
            }
            StrategyKind::FedAla { .. } => {
                StrategyState::FedAla { local: global.clone(), weights: vec![1.0; model.head_range(1).len()] }
            }
            _ => StrategyState::Stateless,
        }
    }

    fn state_error(&self) -> Error {
        Error::StrategyState(format!("client state is not initialized for {}", self.name()))
    }

    /// Round update on the client's own clean training data.
    pub fn local_step(&self, global: &FlatParams, client: &mut ClientState, ctx: &RoundContext<'_>) -> Result<UpdateRecord> {
        let data = client.train.clone();
        Ok(self.local_step_on(global, client, ctx, &data, &AttackHooks::default())?.update)
    }

    /// Round update on `data`, with optional attack manipulations.
    pub fn local_step_on(
        &self,
        global: &FlatParams,
        client: &mut ClientState,
        ctx: &RoundContext<'_>,
        data: &Dataset,
        attack: &AttackHooks<'_>,
    ) -> Result<LocalResult> {
        let mut state = std::mem::replace(&mut client.state, StrategyState::Stateless);
        let out = self.step(global, client, &mut state, ctx, data, attack);
        client.state = state;
        out
    }

    fn step(
        &self,
        global: &FlatParams,
        client: &ClientState,
        state: &mut StrategyState,
        ctx: &RoundContext<'_>,
        data: &Dataset,
        attack: &AttackHooks<'_>,
    ) -> Result<LocalResult> {
        let model = ctx.model;
        let seed = derive_seed(client.seed, &[tag::LOCAL, ctx.round as u64]);
        let sgd = SgdConfig { epochs: ctx.local.epochs, lr: ctx.local.lr, batch_size: ctx.local.batch_size, seed };
        let projection = |center| attack.projection_radius.map(|radius| Projection { center, radius });
        let base_hooks = |center| LocalHooks { frozen: attack.frozen, projection: projection(center), ..Default::default() };

        let trained = match (self, &mut *state) {
            (StrategyKind::FedAvgFt, _) => train_hooked(global, model, data, &sgd, &base_hooks(global))?.params,
            (StrategyKind::FedProxFt { mu }, _) => {
                let hooks = LocalHooks { prox: Some(Prox { center: global, mu: *mu }), ..base_hooks(global) };
                train_hooked(global, model, data, &sgd, &hooks)?.params
            }
            (StrategyKind::Scaffold, StrategyState::Scaffold { control, pending_delta }) => {
                let server = ctx.server_control.ok_or_else(|| {
                    Error::StrategyState("SCAFFOLD round without a server control variate".into())
                })?;
                let correction: Vec<f64> = server.iter().zip(control.iter()).map(|(c, ci)| c - ci).collect();
                let hooks = LocalHooks { correction: Some(&correction), ..base_hooks(global) };
                let out = train_hooked(global, model, data, &sgd, &hooks)?;
                if out.steps > 0 {
                    let k_lr = out.steps as f64 * sgd.lr;
                    let new_control: Vec<f64> = control
                        .iter()
                        .zip(server)
                        .zip(global.values().iter().zip(out.params.values()))
                        .map(|((ci, c), (g, l))| ci - c + (g - l) / k_lr)
                        .collect();
                    *pending_delta = Some(new_control.iter().zip(control.iter()).map(|(n, o)| n - o).collect());
                    *control = new_control;
                } else {
                    *pending_delta = None;
                }
                out.params
            }
            (StrategyKind::PerFedAvgFo { inner_lr, outer_lr }, _) => {
                let sgd = SgdConfig { lr: *outer_lr, ..sgd };
                let mut grad = FirstOrderMetaGrad {
                    config: model,
                    data,
                    inner_lr: *inner_lr,
                    batch_size: sgd.batch_size,
                    seed,
                };
                train_with(global, data.len(), &sgd, &base_hooks(global), &mut grad)?.params
            }
            (StrategyKind::Ditto { lambda }, StrategyState::Ditto { personal }) => {
                let shared = train_hooked(global, model, data, &sgd, &base_hooks(global))?.params;
                let psgd = SgdConfig { seed: derive_seed(seed, &[1]), ..sgd };
                let hooks = LocalHooks { prox: Some(Prox { center: global, mu: *lambda }), ..Default::default() };
                *personal = train_hooked(personal, model, data, &psgd, &hooks)?.params;
                shared
            }
            (StrategyKind::FedRep { head_layers, head_epochs }, StrategyState::FedRep { head }) => {
                let head_range = model.head_range(*head_layers);
                let mut start = global.clone();
                start.values_mut()[head_range.clone()].copy_from_slice(head);
                let n = global.len();
                let encoder_frozen = range_mask(n, &head_range, false);
                let head_sgd = SgdConfig { epochs: *head_epochs, seed: derive_seed(seed, &[1]), ..sgd };
                let hooks = LocalHooks { frozen: Some(&encoder_frozen), ..Default::default() };
                let after_head = train_hooked(&start, model, data, &head_sgd, &hooks)?.params;
                let head_frozen = or_masks(attack.frozen, &range_mask(n, &head_range, true));
                let body_sgd = SgdConfig { seed: derive_seed(seed, &[2]), ..sgd };
                let hooks = LocalHooks { frozen: Some(&head_frozen), projection: projection(&after_head), ..Default::default() };
                let trained = train_hooked(&after_head, model, data, &body_sgd, &hooks)?.params;
                head.copy_from_slice(&trained.values()[head_range.clone()]);
                let mut delta = trained.delta_from(global)?;
                for d in &mut delta[head_range] {
                    *d = 0.0;
                }
                return Ok(LocalResult {
                    update: UpdateRecord { client_id: client.id, delta, weight: client.weight },
                    trained,
                });
            }
            (StrategyKind::FedAla { ala_lr, ala_steps }, StrategyState::FedAla { local, weights }) => {
                let range = model.head_range(1);
                let start = ala_adapt(global, local, weights, &range, data, model, *ala_lr, *ala_steps)?;
                let trained = train_hooked(&start, model, data, &sgd, &base_hooks(global))?.params;
                *local = trained.clone();
                trained
            }
            _ => return Err(self.state_error()),
        };
        let delta = trained.delta_from(global)?;
        Ok(LocalResult { update: UpdateRecord { client_id: client.id, delta, weight: client.weight }, trained })
    }

    /// The model a client is evaluated with, derived from the final global
    /// model. Does not modify the client.
    pub fn personalize(
        &self,
        global: &FlatParams,
        client: &ClientState,
        model: &MlpConfig,
        cfg: &LocalTrainConfig,
    ) -> Result<PersonalModel> {
        let data = &client.train;
        if data.is_empty() {
            return Err(Error::invalid(format!("client {} has no training data to personalize on", client.id)));
        }
        let seed = derive_seed(client.seed, &[tag::PERSONALIZE]);
        let sgd = SgdConfig { epochs: cfg.epochs, lr: cfg.lr, batch_size: cfg.batch_size, seed };
        let params = match (self, &client.state) {
            (StrategyKind::FedAvgFt | StrategyKind::Scaffold | StrategyKind::PerFedAvgFo { .. }, _) => {
                train_hooked(global, model, data, &sgd, &LocalHooks::default())?.params
            }
            (StrategyKind::FedProxFt { mu }, _) => {
                let hooks = LocalHooks { prox: Some(Prox { center: global, mu: *mu }), ..Default::default() };
                train_hooked(global, model, data, &sgd, &hooks)?.params
            }
            (StrategyKind::Ditto { .. }, StrategyState::Ditto { personal }) => personal.clone(),
            (StrategyKind::FedRep { head_layers, .. }, StrategyState::FedRep { head }) => {
                let head_range = model.head_range(*head_layers);
                let mut start = global.clone();
                start.values_mut()[head_range.clone()].copy_from_slice(head);
                let encoder_frozen = range_mask(global.len(), &head_range, false);
                let hooks = LocalHooks { frozen: Some(&encoder_frozen), ..Default::default() };
                train_hooked(&start, model, data, &sgd, &hooks)?.params
            }
            (StrategyKind::FedAla { ala_lr, ala_steps }, StrategyState::FedAla { local, weights }) => {
                let range = model.head_range(1);
                let mut w = weights.clone();
                let start = ala_adapt(global, local, &mut w, &range, data, model, *ala_lr, *ala_steps)?;
                train_hooked(&start, model, data, &sgd, &LocalHooks::default())?.params
            }
            _ => return Err(self.state_error()),
        };
        let adaptation_epochs = if matches!(self, StrategyKind::Ditto { .. }) { 0 } else { cfg.epochs };
        Ok(PersonalModel { params, strategy: self.name().to_string(), adaptation_epochs })
    }
}
