//! Property bodies shared by the invariant suite and the acceptance run.

use pflsim::data::{dirichlet_partition, embed_trigger, stratified_split, Dataset, TriggerSpec};
use pflsim::fl::{ClientState, Role};
use pflsim::model::{init_model, MlpConfig};
use pflsim::strategy::{LocalTrainConfig, RoundContext, StrategyKind};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::Rng;

use super::{client, random_dataset, rng};

#[derive(Debug, Clone)]
pub struct TriggerCase {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub other: Vec<f64>,
    pub mask: Vec<bool>,
}

pub fn trigger_case() -> impl Strategy<Value = TriggerCase> {
    (1usize..12).prop_flat_map(|d| {
        (
            prop::collection::vec(0.0f64..=1.0, d),
            prop::collection::vec(0.0f64..=1.0, d),
            prop::collection::vec(0.0f64..=1.0, d),
            prop::collection::vec(any::<bool>(), d),
        )
            .prop_map(|(x, delta, other, mask)| TriggerCase { x, delta, other, mask })
    })
}

/// Unmasked coordinates pass through untouched and pattern values off the
/// mask never reach the output.
pub fn mask_non_interference(c: &TriggerCase) -> Result<(), TestCaseError> {
    let t = TriggerSpec::new(c.delta.clone(), c.mask.clone(), 0).unwrap();
    let e = embed_trigger(&c.x, &t).unwrap();
    for j in 0..c.x.len() {
        let want = if c.mask[j] { c.delta[j] } else { c.x[j] };
        prop_assert_eq!(e[j].to_bits(), want.to_bits());
    }
    let mixed: Vec<f64> = (0..c.x.len()).map(|j| if c.mask[j] { c.delta[j] } else { c.other[j] }).collect();
    let t2 = TriggerSpec::new(mixed, c.mask.clone(), 0).unwrap();
    prop_assert_eq!(embed_trigger(&c.x, &t2).unwrap(), e);
    Ok(())
}

pub fn embed_idempotent(c: &TriggerCase) -> Result<(), TestCaseError> {
    let t = TriggerSpec::new(c.delta.clone(), c.mask.clone(), 0).unwrap();
    let once = embed_trigger(&c.x, &t).unwrap();
    let twice = embed_trigger(&once, &t).unwrap();
    prop_assert_eq!(once, twice);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PartitionCase {
    pub seed: u64,
    pub n: usize,
    pub classes: usize,
    pub clients: usize,
    pub alpha: f64,
    pub frac: f64,
}

pub fn partition_case() -> impl Strategy<Value = PartitionCase> {
    (any::<u64>(), 2usize..5, 1usize..7, 0.05f64..5.0, 0.0f64..0.6).prop_flat_map(|(seed, classes, clients, alpha, frac)| {
        (clients.max(classes)..60).prop_map(move |n| PartitionCase { seed, n, classes, clients, alpha, frac })
    })
}

fn multiset(parts: &[&Dataset]) -> Vec<(usize, Vec<u64>)> {
    let mut v: Vec<_> = parts
        .iter()
        .flat_map(|p| p.examples().iter())
        .map(|e| (e.label, e.features.iter().map(|f| f.to_bits()).collect()))
        .collect();
    v.sort();
    v
}

/// Every example lands in exactly one client, and the holdout split of each
/// client loses nothing.
pub fn partition_exact(c: &PartitionCase) -> Result<(), TestCaseError> {
    let data = random_dataset(&mut rng(c.seed), c.n, 3, c.classes);
    let parts = match dirichlet_partition(&data, c.clients, c.alpha, c.seed) {
        Ok(p) => p,
        // Rejection after the retry budget is a documented outcome.
        Err(pflsim::Error::Partition(_)) => return Ok(()),
        Err(e) => return Err(TestCaseError::fail(e.to_string())),
    };
    prop_assert_eq!(parts.len(), c.clients);
    prop_assert!(parts.iter().all(|p| !p.is_empty()));
    let all: Vec<&Dataset> = parts.iter().collect();
    prop_assert_eq!(multiset(&all), multiset(&[&data]));
    for p in &parts {
        let (train, test) = stratified_split(p, c.frac, c.seed ^ 7).unwrap();
        prop_assert_eq!(multiset(&[&train, &test]), multiset(&[p]));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LocalCase {
    pub seed: u64,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

pub fn local_case() -> impl Strategy<Value = LocalCase> {
    (
        any::<u64>(),
        1usize..5,
        prop::collection::vec(1usize..5, 0..3),
        2usize..4,
        1usize..12,
        0usize..3,
        0.0f64..0.5,
        1usize..6,
    )
        .prop_map(|(seed, dim, hidden, classes, n, epochs, lr, batch)| LocalCase {
            seed,
            dim,
            hidden,
            classes,
            n,
            epochs,
            lr,
            batch,
        })
}

fn local_setup(c: &LocalCase, strategy: &StrategyKind) -> (MlpConfig, pflsim::model::FlatParams, ClientState) {
    let model = MlpConfig::new(c.dim, c.hidden.clone(), c.classes).unwrap();
    let global = init_model(&model, c.seed).unwrap();
    let mut r = rng(c.seed);
    let data = random_dataset(&mut r, c.n, c.dim, c.classes);
    let mut cl = client(0, Role::Benign, data, Dataset::empty(c.classes, c.dim), r.random());
    cl.state = strategy.init_state(&global, &model);
    (model, global, cl)
}

fn ctx<'a>(c: &LocalCase, model: &'a MlpConfig) -> RoundContext<'a> {
    RoundContext {
        round: 1,
        model,
        local: LocalTrainConfig { epochs: c.epochs, lr: c.lr, batch_size: c.batch },
        server_control: None,
    }
}

/// FedRep never shares its head.
pub fn fedrep_zero_head(c: &LocalCase) -> Result<(), TestCaseError> {
    let s = StrategyKind::FedRep { head_layers: 1, head_epochs: 1 };
    let (model, global, mut cl) = local_setup(c, &s);
    let u = s.local_step(&global, &mut cl, &ctx(c, &model)).unwrap();
    for i in model.head_range(1) {
        prop_assert_eq!(u.delta[i], 0.0);
    }
    Ok(())
}

/// FedProx with `μ = 0` is FedAvg, bit for bit.
pub fn prox_degenerate(c: &LocalCase) -> Result<(), TestCaseError> {
    let prox = StrategyKind::FedProxFt { mu: 0.0 };
    let (model, global, mut a) = local_setup(c, &prox);
    let mut b = a.clone();
    let ua = prox.local_step(&global, &mut a, &ctx(c, &model)).unwrap();
    let ub = StrategyKind::FedAvgFt.local_step(&global, &mut b, &ctx(c, &model)).unwrap();
    prop_assert_eq!(ua, ub);
    Ok(())
}
