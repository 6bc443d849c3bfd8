#![allow(dead_code)]

pub mod oracles;
pub mod props;

use std::path::PathBuf;

use pflsim::data::{Dataset, Example};
use pflsim::fl::{ClientState, Role, StrategyState};
use pflsim::harness::{run_experiment, ExperimentConfig, ExperimentReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn toy_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

pub fn toy_text() -> String {
    std::fs::read_to_string(toy_path()).expect("toy config")
}

pub fn toy_config(overrides: &[&str]) -> ExperimentConfig {
    let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_with_overrides(&toy_text(), &ov).expect("toy overrides")
}

pub fn toy_run(overrides: &[&str], seed: u64) -> ExperimentReport {
    let seed_ov = format!("federation.seed={seed}");
    let mut all: Vec<&str> = overrides.to_vec();
    all.push(&seed_ov);
    run_experiment(&toy_config(&all), None).expect("toy run")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random examples with features in `[0,1)` and labels cycling through the
/// classes, so every class is present when `n ≥ classes`.
pub fn random_dataset(r: &mut impl Rng, n: usize, dim: usize, classes: usize) -> Dataset {
    let examples = (0..n)
        .map(|i| Example { features: (0..dim).map(|_| r.random::<f64>()).collect(), label: i % classes })
        .collect();
    Dataset::new(examples, classes, dim).unwrap()
}

pub fn client(id: usize, role: Role, train: Dataset, poison_source: Dataset, seed: u64) -> ClientState {
    let weight = (train.len() + poison_source.len()) as f64;
    ClientState {
        id,
        role,
        test: Dataset::empty(train.num_classes(), train.dim()),
        train,
        poison_source,
        weight,
        seed,
        state: StrategyState::Stateless,
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| x.as_slice()).collect()
}
