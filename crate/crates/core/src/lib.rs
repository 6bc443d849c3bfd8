//! Deterministic desk-scale simulator of backdoor attacks against
//! personalized federated learning.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod defense;
pub mod error;
pub mod fl;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod seed;
pub mod strategy;
pub mod tensor;

pub use error::{Error, Result};
