//! Backdoor attacks run by the malicious clients: PFedBA and the Sybil,
//! ModelRe, PGD and Neurotoxin baselines.
//!
//! The [`Adversary`] only ever sees the global model it is sent, the
//! aggregated global movement it can infer from consecutive global models,
//! and the data of the clients it controls.

mod trigger;

use serde::{Deserialize, Serialize};

pub use trigger::{
    backdoor_loss_and_grad, clean_gradients, grad_alignment, optimize_trigger_grad_align, optimize_trigger_loss_align,
    TriggerOutcome, MAX_HALVINGS,
};

use crate::data::{poison_all, Dataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::fl::ClientState;
use crate::model::{l2_norm, FlatParams, MlpConfig};
use crate::strategy::{AttackHooks, LocalResult, RoundContext, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Sybil,
    ModelRe,
    Pgd,
    Neurotoxin,
    Pfedba,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Sybil => "sybil",
            AttackKind::ModelRe => "model_re",
            AttackKind::Pgd => "pgd",
            AttackKind::Neurotoxin => "neurotoxin",
            AttackKind::Pfedba => "pfedba",
        }
    }
}

fn default_start_round() -> usize {
    1
}
fn default_mask() -> Vec<usize> {
    vec![0, 1, 2, 3]
}
fn default_trigger_init() -> f64 {
    0.5
}
fn default_poison_rate() -> f64 {
    0.25
}
fn default_scale() -> f64 {
    20.0
}
fn default_ratio() -> f64 {
    0.01
}
fn default_loss_steps() -> usize {
    50
}
fn default_grad_steps() -> usize {
    20
}
fn default_trigger_lr() -> f64 {
    0.1
}
fn default_fd_eps() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// First round in which selected malicious clients attack.
    #[serde(default = "default_start_round")]
    pub start_round: usize,
    #[serde(default)]
    pub target: usize,
    /// Input coordinates the trigger overwrites.
    #[serde(default = "default_mask")]
    pub mask: Vec<usize>,
    /// Initial pattern value on every masked coordinate.
    #[serde(default = "default_trigger_init")]
    pub trigger_init: f64,
    #[serde(default = "default_poison_rate")]
    pub poison_rate: f64,
    /// ModelRe update multiplier.
    #[serde(default = "default_scale")]
    pub scale_factor: f64,
    /// PGD ball radius. Unset means calibrate from a benign run.
    #[serde(default)]
    pub pgd_radius: Option<f64>,
    /// Fraction of coordinates Neurotoxin keeps frozen.
    #[serde(default = "default_ratio")]
    pub neurotoxin_ratio: f64,
    #[serde(default = "default_loss_steps")]
    pub loss_align_steps: usize,
    #[serde(default = "default_grad_steps")]
    pub grad_align_steps: usize,
    #[serde(default = "default_trigger_lr")]
    pub trigger_lr: f64,
    #[serde(default = "default_fd_eps")]
    pub fd_eps: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            start_round: default_start_round(),
            target: 0,
            mask: default_mask(),
            trigger_init: default_trigger_init(),
            poison_rate: default_poison_rate(),
            scale_factor: default_scale(),
            pgd_radius: None,
            neurotoxin_ratio: default_ratio(),
            loss_align_steps: default_loss_steps(),
            grad_align_steps: default_grad_steps(),
            trigger_lr: default_trigger_lr(),
            fd_eps: default_fd_eps(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.start_round < 1 {
            return bad("attack start_round must be at least 1".into());
        }
        if self.target >= num_classes {
            return bad(format!("attack target {} out of range for {num_classes} classes", self.target));
        }
        if self.mask.iter().any(|&c| c >= dim) {
            return bad(format!("attack mask coordinate out of range for {dim} features"));
        }
        if !(0.0..=1.0).contains(&self.poison_rate) {
            return bad(format!("poison_rate must be in [0,1], got {}", self.poison_rate));
        }
        if !(0.0..=1.0).contains(&self.trigger_init) {
            return bad(format!("trigger_init must be in [0,1], got {}", self.trigger_init));
        }
        if !(self.scale_factor > 0.0) {
            return bad("scale_factor must be positive".into());
        }
        if !(self.neurotoxin_ratio >= 0.0 && self.neurotoxin_ratio < 1.0) {
            return bad("neurotoxin_ratio must be in [0,1)".into());
        }
        if let Some(r) = self.pgd_radius {
            if !(r >= 0.0) {
                return bad("pgd_radius must be non-negative".into());
            }
        }
        if !(self.trigger_lr >= 0.0) || !(self.fd_eps > 0.0) {
            return bad("trigger_lr must be non-negative and fd_eps positive".into());
        }
        Ok(())
    }

    /// `Δ^0`: the configured constant on masked coordinates.
    pub fn initial_trigger(&self, dim: usize) -> Result<TriggerSpec> {
        TriggerSpec::uniform(dim, &self.mask, self.trigger_init, self.target)
    }
}

/// Trigger-optimization record for one attack round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerDiagnostics {
    pub round: usize,
    pub loss_align: Option<(f64, f64)>,
    pub grad_align: Option<(f64, f64)>,
    /// L2 change of the pattern over the round.
    pub delta_change: f64,
    pub masked_values: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct AttackState {
    pub trigger: TriggerSpec,
    /// Whether the initial loss-alignment pass has run.
    pub initialized: bool,
    /// Neurotoxin: coordinates frozen in the current round.
    pub frozen: Option<Vec<bool>>,
    pub diagnostics: Vec<TriggerDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct Adversary {
    config: AttackConfig,
    state: AttackState,
    /// Union of the malicious clients' clean poison sources (`D^mal` before
    /// embedding).
    poison_union: Dataset,
    previous_global: Option<FlatParams>,
    last_global_update: Option<Vec<f64>>,
}

impl Adversary {
    /// Collects the poison sources of the malicious clients only.
    pub fn new(config: AttackConfig, clients: &[ClientState], dim: usize, num_classes: usize) -> Result<Self> {
        config.validate(dim, num_classes)?;
        let mut poison_union = Dataset::empty(num_classes, dim);
        for c in clients.iter().filter(|c| c.is_malicious()) {
            poison_union = poison_union.concat(&c.poison_source)?;
        }
        let trigger = config.initial_trigger(dim)?;
        Ok(Adversary {
            config,
            state: AttackState { trigger, initialized: false, frozen: None, diagnostics: Vec::new() },
            poison_union,
            previous_global: None,
            last_global_update: None,
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.config
    }

    pub fn state(&self) -> &AttackState {
        &self.state
    }

    pub fn trigger(&self) -> &TriggerSpec {
        &self.state.trigger
    }

    pub fn active(&self, round: usize) -> bool {
        self.config.kind != AttackKind::None && round >= self.config.start_round
    }

    /// Sequential per-round preparation, run before any client trains. Only
    /// acts when a malicious client is selected in an attack round.
    pub fn prepare_round(&mut self, round: usize, global: &FlatParams, model: &MlpConfig, any_selected: bool) -> Result<()> {
        if let Some(prev) = &self.previous_global {
            self.last_global_update = Some(global.delta_from(prev)?);
        }
        self.previous_global = Some(global.clone());
        if !any_selected || !self.active(round) {
            return Ok(());
        }
        match self.config.kind {
            AttackKind::Pfedba => self.optimize_trigger(round, global, model),
            AttackKind::Neurotoxin => {
                self.state.frozen = self.last_global_update.as_ref().map(|u| top_fraction_mask(u, self.config.neurotoxin_ratio));
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn optimize_trigger(&mut self, round: usize, global: &FlatParams, model: &MlpConfig) -> Result<()> {
        if self.poison_union.is_empty() {
            return Ok(());
        }
        let cfg = &self.config;
        let start = self.state.trigger.clone();
        let mut current = start.clone();
        let mut loss_align = None;
        if !self.state.initialized {
            let out =
                optimize_trigger_loss_align(&current, global, model, &self.poison_union, cfg.loss_align_steps, cfg.trigger_lr)?;
            loss_align = Some((out.objective_before, out.objective_after));
            current = out.trigger;
            self.state.initialized = true;
        }
        let mut grad_align = None;
        if cfg.grad_align_steps > 0 {
            let out = optimize_trigger_grad_align(
                &current,
                global,
                model,
                &self.poison_union,
                cfg.grad_align_steps,
                cfg.trigger_lr,
                cfg.fd_eps,
            )?;
            grad_align = Some((out.objective_before, out.objective_after));
            current = out.trigger;
        }
        let change: Vec<f64> = current.delta().iter().zip(start.delta()).map(|(a, b)| a - b).collect();
        self.state.diagnostics.push(TriggerDiagnostics {
            round,
            loss_align,
            grad_align,
            delta_change: l2_norm(&change),
            masked_values: current.masked_values(),
        });
        self.state.trigger = current;
        Ok(())
    }

    /// One malicious client's round update. Before the attack starts (or
    /// with no attack configured) the client trains honestly on all of its
    /// clean data.
    pub fn client_update(
        &self,
        global: &FlatParams,
        client: &mut ClientState,
        strategy: &StrategyKind,
        ctx: &RoundContext<'_>,
        pgd_radius: Option<f64>,
    ) -> Result<LocalResult> {
        if !self.active(ctx.round) {
            let data = client.all_clean();
            return strategy.local_step_on(global, client, ctx, &data, &AttackHooks::default());
        }
        let poisoned = poison_all(&client.poison_source, &self.state.trigger)?;
        let data = poisoned.concat(&client.train)?;
        let mut hooks = AttackHooks::default();
        match self.config.kind {
            AttackKind::Pgd => {
                let r = self.config.pgd_radius.or(pgd_radius).ok_or_else(|| {
                    Error::invalid("PGD attack needs a radius (configure one or calibrate it)")
                })?;
                hooks.projection_radius = Some(r);
            }
            AttackKind::Neurotoxin => hooks.frozen = self.state.frozen.as_deref(),
            _ => {}
        }
        let mut out = strategy.local_step_on(global, client, ctx, &data, &hooks)?;
        if self.config.kind == AttackKind::ModelRe {
            for v in &mut out.update.delta {
                *v *= self.config.scale_factor;
            }
        }
        Ok(out)
    }
}

/// Marks the `floor(ratio·len)` coordinates of largest magnitude, ties
/// broken toward lower indices.
pub fn top_fraction_mask(values: &[f64], ratio: f64) -> Vec<bool> {
    let k = (ratio * values.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; values.len()];
    for &i in &order[..k.min(values.len())] {
        mask[i] = true;
    }
    mask
}
