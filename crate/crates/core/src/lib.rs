pub mod adversary;
pub mod client;
pub mod codec;
pub mod contract;
pub mod error;
pub mod experiments;
pub mod ledger;
pub mod membership;
pub mod metrics;
pub mod node;
pub mod scenario;
pub mod sim;
pub mod world;

pub use error::{Error, Result};
pub use scenario::ScenarioConfig;
pub use world::run_scenario;
