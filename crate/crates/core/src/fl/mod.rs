//! Round engine: client sampling, local updates, defended aggregation and
//! round records.

mod aggregate;
mod client;
mod engine;

pub use aggregate::{fedavg_aggregate, mean_of, sample_clients, UpdateRecord};
pub(crate) use aggregate::check_lengths;
pub use client::{ClientState, Role, StrategyState};
pub use engine::{ClientRoundStat, RoundRecord, Simulation};
