//! Per-run measurements and their CSV form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::ClientMode;
use crate::error::{Error, Result};
use crate::membership::NodeId;

/// One completed join, split into its four phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinRecord {
    /// Size of the configuration the node joined into.
    pub size: usize,
    /// Policy threshold in force for that configuration.
    pub t: usize,
    pub tx_latency_s: f64,
    pub confirm_latency_s: f64,
    pub ordering_latency_s: f64,
    pub checkpoint_latency_s: f64,
    #[serde(skip)]
    pub node: NodeId,
    #[serde(skip)]
    pub joined_at: f64,
}

impl JoinRecord {
    pub fn total(&self) -> f64 {
        self.tx_latency_s + self.confirm_latency_s + self.ordering_latency_s + self.checkpoint_latency_s
    }
}

/// A vote counted by the contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    /// Size of the configuration voted for.
    pub size: usize,
    pub config_number: u64,
    pub gas_used: u64,
    pub is_first_vote: bool,
    pub is_update_vote: bool,
    #[serde(skip)]
    pub voter: NodeId,
    #[serde(skip)]
    pub height: u64,
}

/// A stored-configuration update and what its votes cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    /// Size of the installed configuration.
    pub size: usize,
    /// Members of the installed configuration absent from the previous one.
    pub joiners: usize,
    /// Gas of every counted vote for the installed configuration.
    pub total_gas: u64,
    /// `total_gas` divided by the number of membership changes covered.
    pub gas_per_join: f64,
    pub usd_per_join: f64,
    #[serde(skip)]
    pub previous_size: usize,
    #[serde(skip)]
    pub changes: usize,
    #[serde(skip)]
    pub config_number: u64,
    #[serde(skip)]
    pub voters: usize,
    #[serde(skip)]
    pub height: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub number: u64,
    pub size: usize,
    pub installed_at_s: f64,
    /// Empty if this configuration was never stored at the membership service.
    pub published_at_s: Option<f64>,
    pub published_height: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub height: u64,
    pub time: f64,
    pub tx_kind: String,
    pub gas_used: u64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub id: NodeId,
    pub mode: ClientMode,
    pub requests: usize,
    pub accepted: usize,
    /// Accepted results no correct replica produced.
    pub forged: usize,
    /// Number of the configuration the last result was counted against.
    pub last_config: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunOutput {
    pub name: String,
    pub seed: u64,
    pub joins: Vec<JoinRecord>,
    pub votes: Vec<VoteRecord>,
    pub updates: Vec<UpdateRecord>,
    pub configs: Vec<ConfigRecord>,
    pub blocks: Vec<BlockRecord>,
    pub clients: Vec<ClientReport>,
    /// All churn and client work finished before the time limit.
    pub completed: bool,
    pub end_time: f64,
    pub final_size: usize,
    pub stored_number: u64,
    pub stored_size: usize,
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| Error::input(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io(&e))?;
    w.write_record(header).map_err(|e| io(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

pub const JOINS_HEADER: [&str; 6] = [
    "size",
    "t",
    "tx_latency_s",
    "confirm_latency_s",
    "ordering_latency_s",
    "checkpoint_latency_s",
];
pub const VOTES_HEADER: [&str; 5] =
    ["size", "config_number", "gas_used", "is_first_vote", "is_update_vote"];
pub const UPDATES_HEADER: [&str; 5] = ["size", "joiners", "total_gas", "gas_per_join", "usd_per_join"];
pub const CONFIGS_HEADER: [&str; 5] = [
    "number",
    "size",
    "installed_at_s",
    "published_at_s",
    "published_height",
];
pub const BLOCKS_HEADER: [&str; 5] = ["height", "time", "tx_kind", "gas_used", "accepted"];

impl RunOutput {
    /// Writes `joins.csv`, `votes.csv`, `updates.csv`, `configs.csv`, and
    /// `blocks.csv` when a block trace was recorded.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::input(format!("{}: {e}", dir.display())))?;
        write_rows(&dir.join("joins.csv"), &JOINS_HEADER, &self.joins)?;
        write_rows(&dir.join("votes.csv"), &VOTES_HEADER, &self.votes)?;
        write_rows(&dir.join("updates.csv"), &UPDATES_HEADER, &self.updates)?;
        write_rows(&dir.join("configs.csv"), &CONFIGS_HEADER, &self.configs)?;
        if !self.blocks.is_empty() {
            write_rows(&dir.join("blocks.csv"), &BLOCKS_HEADER, &self.blocks)?;
        }
        Ok(())
    }

    pub fn forged_total(&self) -> usize {
        self.clients.iter().map(|c| c.forged).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_match_fields() {
        let dir = tempdir();
        let out = RunOutput {
            joins: vec![JoinRecord {
                size: 5,
                t: 1,
                tx_latency_s: 1.5,
                confirm_latency_s: 2.0,
                ordering_latency_s: 0.95,
                checkpoint_latency_s: 3.0,
                node: NodeId(4),
                joined_at: 9.0,
            }],
            configs: vec![ConfigRecord {
                number: 0,
                size: 4,
                installed_at_s: 0.0,
                published_at_s: None,
                published_height: None,
            }],
            ..RunOutput::default()
        };
        out.write_csvs(&dir).unwrap();
        let joins = fs::read_to_string(dir.join("joins.csv")).unwrap();
        assert_eq!(
            joins,
            "size,t,tx_latency_s,confirm_latency_s,ordering_latency_s,checkpoint_latency_s\n5,1,1.5,2.0,0.95,3.0\n"
        );
        let configs = fs::read_to_string(dir.join("configs.csv")).unwrap();
        assert!(configs.ends_with("0,4,0.0,,\n"));
        assert!(!dir.join("blocks.csv").exists());
        fs::remove_dir_all(dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("bms-metrics-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }
}
