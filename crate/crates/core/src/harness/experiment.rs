use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use super::eval::{client_asr, distance_table, mean, DistanceRow};
use crate::attack::{Adversary, AttackKind, TriggerDiagnostics};
use crate::data::{
    dirichlet_partition, gen_synthetic, load_table, select_poison, stratified_split, ColumnScale, Dataset, TableSchema,
    TriggerSpec,
};
use crate::defense::{nc_lite, DefenseKind};
use crate::error::{Error, Result};
use crate::fl::{ClientState, Role, RoundRecord, Simulation, StrategyState};
use crate::model::{accuracy, init_model, FlatParams, MlpConfig};
use crate::seed::{derive_seed, rng_from, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub acc: f64,
    /// `None` when the client has no test example outside the target class.
    pub asr: Option<f64>,
    /// Metrics of the final global model, before personalization.
    pub global_acc: f64,
    pub global_asr: Option<f64>,
    /// Personal-model ASR before client-side patching.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unpatched_asr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flagged_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub num_examples: usize,
    pub dim: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scaling: Vec<ColumnScale>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub strategy: String,
    pub attack: String,
    pub defense: String,
    pub data: DataSummary,
    pub malicious_clients: Vec<usize>,
    /// Benign clients without a usable test split, left out of the means.
    pub skipped_clients: Vec<usize>,
    pub clients: Vec<ClientMetrics>,
    pub mean_acc: f64,
    pub mean_asr: Option<f64>,
    pub mean_global_acc: f64,
    pub mean_global_asr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_unpatched_asr: Option<f64>,
    /// Trigger used for ASR evaluation.
    pub trigger: TriggerSpec,
    pub trigger_history: Vec<TriggerDiagnostics>,
    pub distance_table: Vec<DistanceRow>,
    pub mean_malicious_update_norm: Option<f64>,
    pub mean_malicious_trained_distance: Option<f64>,
    pub mean_benign_update_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pgd_radius: Option<f64>,
    pub rounds: Vec<RoundRecord>,
    pub final_global_checksum: String,
    pub wall_time_secs: f64,
}

/// Everything built from the config before training starts.
pub struct Federation {
    pub model: MlpConfig,
    pub clients: Vec<ClientState>,
    pub data: DataSummary,
}

fn load_data(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> Result<(Dataset, DataSummary)> {
    match &cfg.data.source {
        DataSource::Synthetic { num_classes, dim, n_per_class, spread } => {
            let d = gen_synthetic(*num_classes, *dim, *n_per_class, *spread, derive_seed(cfg.federation.seed, &[tag::DATA]))?;
            let summary = DataSummary {
                num_examples: d.len(),
                dim: *dim,
                num_classes: *num_classes,
                feature_columns: vec![],
                scaling: vec![],
            };
            Ok((d, summary))
        }
        DataSource::Table { path, label_column, feature_columns } => {
            let mut p = PathBuf::from(path);
            if p.is_relative() {
                if let Some(b) = base_dir {
                    p = b.join(p);
                }
            }
            let schema = TableSchema { label_column: label_column.clone(), feature_columns: feature_columns.clone() };
            let t = load_table(&p, &schema)?;
            let summary = DataSummary {
                num_examples: t.dataset.len(),
                dim: t.dataset.dim(),
                num_classes: t.dataset.num_classes(),
                feature_columns: t.scaling.iter().map(|s| s.name.clone()).collect(),
                scaling: t.scaling,
            };
            Ok((t.dataset, summary))
        }
    }
}

/// Loads data, partitions it across clients, holds out test splits and
/// assigns malicious roles and poison sources.
pub fn build_federation(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> Result<Federation> {
    cfg.validate()?;
    let (data, summary) = load_data(cfg, base_dir)?;
    let model = cfg.mlp(data.dim(), data.num_classes())?;
    cfg.attack.validate(data.dim(), data.num_classes())?;
    let f = &cfg.federation;
    let seed = f.seed;
    let parts = dirichlet_partition(&data, f.num_clients, cfg.data.alpha, derive_seed(seed, &[tag::PARTITION]))?;
    let n_mal = cfg.malicious_count();
    let mut malicious = index::sample(&mut rng_from(seed, &[tag::ROLES]), f.num_clients, n_mal).into_vec();
    malicious.sort_unstable();
    let mut clients = Vec::with_capacity(f.num_clients);
    for (id, part) in parts.into_iter().enumerate() {
        let client_seed = derive_seed(seed, &[tag::CLIENT, id as u64]);
        let (train, test) = stratified_split(&part, cfg.eval.test_fraction, client_seed)?;
        let role = if malicious.binary_search(&id).is_ok() { Role::Malicious } else { Role::Benign };
        let (poison_source, train) = if role == Role::Malicious {
            select_poison(&train, cfg.attack.poison_rate, client_seed)?
        } else {
            (Dataset::empty(data.num_classes(), data.dim()), train)
        };
        let weight = (train.len() + poison_source.len()) as f64;
        clients.push(ClientState {
            id,
            role,
            train,
            poison_source,
            test,
            weight,
            seed: client_seed,
            state: StrategyState::Stateless,
        });
    }
    Ok(Federation { model, clients, data: summary })
}

fn simulation(cfg: &ExperimentConfig, fed: Federation, with_attack: bool) -> Result<Simulation> {
    let global = init_model(&fed.model, derive_seed(cfg.federation.seed, &[tag::INIT]))?;
    let adversary = if with_attack && cfg.attack.kind != AttackKind::None {
        Some(Adversary::new(cfg.attack.clone(), &fed.clients, fed.model.input_dim, fed.model.num_classes)?)
    } else {
        None
    };
    Simulation::new(
        fed.model,
        cfg.strategy.clone(),
        cfg.defense.clone(),
        cfg.local_train(),
        cfg.federation.clients_per_round,
        cfg.federation.seed,
        fed.clients,
        global,
        adversary,
    )
}

/// Median benign update norm over an attack-free run of the same config.
pub fn calibrate_pgd_radius(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> Result<f64> {
    let fed = build_federation(cfg, base_dir)?;
    let mut sim = simulation(cfg, fed, false)?;
    sim.run(cfg.federation.rounds)?;
    let norms: Vec<f64> =
        sim.history.iter().flat_map(|r| r.updates.iter().filter(|u| !u.malicious).map(|u| u.update_norm)).collect();
    if norms.is_empty() {
        return Err(Error::Evaluation("calibration run produced no benign updates".into()));
    }
    Ok(crate::defense::median(&norms))
}

/// Runs training, personalizes every benign client and evaluates it.
/// Relative data paths resolve against `base_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> Result<ExperimentReport> {
    let started = Instant::now();
    let fed = build_federation(cfg, base_dir)?;
    let summary = fed.data.clone();
    let pgd_radius = match (cfg.attack.kind, cfg.attack.pgd_radius) {
        (AttackKind::Pgd, None) => Some(calibrate_pgd_radius(cfg, base_dir)?),
        (AttackKind::Pgd, r) => r,
        _ => None,
    };
    let mut sim = simulation(cfg, fed, true)?;
    sim.pgd_radius = pgd_radius;
    sim.run(cfg.federation.rounds)?;

    let trigger = match &sim.adversary {
        Some(a) => a.trigger().clone(),
        None => cfg.attack.initial_trigger(sim.model.input_dim)?,
    };
    let personalize = cfg.personalize_train();
    let (benign, skipped): (Vec<&ClientState>, Vec<&ClientState>) =
        sim.clients.iter().filter(|c| !c.is_malicious()).partition(|c| !c.test.is_empty() && !c.train.is_empty());

    let clients = benign
        .par_iter()
        .map(|c| -> Result<ClientMetrics> {
            let personal = sim.strategy.personalize(&sim.global, c, &sim.model, &personalize)?;
            let mut params = personal.params;
            let mut unpatched_asr = None;
            let mut flagged_classes = None;
            if let DefenseKind::NcLite(nc) = &sim.defense {
                unpatched_asr = Some(asr_or_none(&params, &sim.model, &trigger, &c.test)?);
                let out = nc_lite(&params, &sim.model, &c.train, nc, derive_seed(c.seed, &[tag::NC]))?;
                flagged_classes = Some(out.flagged);
                params = out.patched;
            }
            Ok(ClientMetrics {
                client_id: c.id,
                acc: accuracy(&params, &sim.model, &c.test)?,
                asr: asr_or_none(&params, &sim.model, &trigger, &c.test)?,
                global_acc: accuracy(&sim.global, &sim.model, &c.test)?,
                global_asr: asr_or_none(&sim.global, &sim.model, &trigger, &c.test)?,
                unpatched_asr: unpatched_asr.flatten(),
                flagged_classes,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let collect = |f: &dyn Fn(&ClientMetrics) -> Option<f64>| -> Vec<f64> { clients.iter().filter_map(f).collect() };
    let mean_acc = mean(&collect(&|c| Some(c.acc))).ok_or_else(|| Error::Evaluation("no benign client to evaluate".into()))?;
    let mean_global_acc = mean(&collect(&|c| Some(c.global_acc))).unwrap_or(f64::NAN);
    let table = distance_table(&sim.history);
    let attacking: Vec<_> = sim.history.iter().flat_map(|r| r.updates.iter().filter(|u| u.attacking)).collect();
    let benign_norms: Vec<f64> =
        sim.history.iter().flat_map(|r| r.updates.iter().filter(|u| !u.malicious).map(|u| u.update_norm)).collect();

    Ok(ExperimentReport {
        config: cfg.clone(),
        config_hash: cfg.hash()?,
        strategy: cfg.strategy.name().to_string(),
        attack: cfg.attack.kind.name().to_string(),
        defense: cfg.defense.name().to_string(),
        data: summary,
        malicious_clients: sim.clients.iter().filter(|c| c.is_malicious()).map(|c| c.id).collect(),
        skipped_clients: skipped.iter().map(|c| c.id).collect(),
        mean_acc,
        mean_asr: mean(&collect(&|c| c.asr)),
        mean_global_acc,
        mean_global_asr: mean(&collect(&|c| c.global_asr)),
        mean_unpatched_asr: mean(&collect(&|c| c.unpatched_asr)),
        clients,
        trigger,
        trigger_history: sim.adversary.as_ref().map(|a| a.state().diagnostics.clone()).unwrap_or_default(),
        mean_malicious_update_norm: mean(&attacking.iter().map(|u| u.update_norm).collect::<Vec<_>>()),
        mean_malicious_trained_distance: mean(&attacking.iter().map(|u| u.trained_distance).collect::<Vec<_>>()),
        mean_benign_update_norm: mean(&benign_norms),
        distance_table: table,
        pgd_radius,
        final_global_checksum: sim.global.checksum(),
        rounds: sim.history,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

fn asr_or_none(params: &FlatParams, model: &MlpConfig, trigger: &TriggerSpec, test: &Dataset) -> Result<Option<f64>> {
    match client_asr(params, model, trigger, test) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Evaluation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}
