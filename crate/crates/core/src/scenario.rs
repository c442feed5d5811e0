//! Scenario files: JSON description of one simulation run.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{CorruptionSchedule, Trigger};
use crate::client::ClientMode;
use crate::contract::VotingMode;
use crate::error::{Error, Result};
use crate::ledger::{LedgerParams, PriceModel};
use crate::membership::{
    max_batch_threshold, max_correct_leavers, overlap_ok, policy_threshold, symmetric_difference,
    Configuration, NodeId, Policy,
};
use crate::node::CheckpointMode;
use crate::sim::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ChurnOp {
    Join { node: NodeId },
    Leave { node: NodeId },
    /// `by`, a correct member, submits a proof of misbehavior against `node`.
    Evict { node: NodeId, by: NodeId },
}

impl ChurnOp {
    pub fn node(&self) -> NodeId {
        match self {
            ChurnOp::Join { node } | ChurnOp::Leave { node } | ChurnOp::Evict { node, .. } => *node,
        }
    }
}

/// A churn operation. Without `at` it starts once the previous sequential
/// operation has completed and the system is idle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<f64>,
    #[serde(flatten)]
    pub op: ChurnOp,
}

impl ChurnEvent {
    pub fn sequential(op: ChurnOp) -> Self {
        ChurnEvent { at: None, op }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTime {
    At(f64),
    /// Seconds after the last scheduled corruption has taken effect.
    AfterCorruption(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub mode: ClientMode,
    /// Staleness bound `P`; defaults to the expected confirmation time plus `delta`.
    #[serde(default)]
    pub p_bound: Option<f64>,
    #[serde(default)]
    pub requests: Vec<RequestTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub initial_size: usize,
    /// After `churn` is exhausted, keep adding nodes until the stored
    /// configuration has at least this many members.
    pub target_size: Option<usize>,
    pub churn: Vec<ChurnEvent>,
    /// Once the system is idle, the next sequential operation starts after a
    /// uniform pause in `[0, churn_gap_max]` seconds.
    pub churn_gap_max: f64,
    pub policy: Policy,
    pub checkpoint: CheckpointMode,
    pub ledger: LedgerParams,
    /// Votes and registrations count as soon as they are included.
    pub skip_confirmation: bool,
    pub price: PriceModel,
    pub network: NetworkConfig,
    /// Latency of the total-order broadcast after GST.
    pub tob_latency: f64,
    /// Defaults to the contract's registration cost.
    pub registration_fee: Option<u64>,
    pub voting: VotingMode,
    /// Defaults to twice the expected confirmation time.
    pub revote_timeout: Option<f64>,
    pub confirmation_grace: f64,
    pub adversary: CorruptionSchedule,
    pub clients: Vec<ClientSpec>,
    /// Nodes against which a proof of misbehavior is accepted.
    pub provably_faulty: Vec<NodeId>,
    /// Run even if the churn plan cannot be published safely.
    pub allow_unpublishable: bool,
    pub max_time: Option<f64>,
    /// Write a per-block trace.
    pub trace_blocks: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "scenario".into(),
            seed: 1,
            initial_size: 4,
            target_size: None,
            churn: Vec::new(),
            churn_gap_max: 15.0,
            policy: Policy::Every,
            checkpoint: CheckpointMode::default(),
            ledger: LedgerParams::default(),
            skip_confirmation: false,
            price: PriceModel::default(),
            network: NetworkConfig::default(),
            tob_latency: 0.95,
            registration_fee: None,
            voting: VotingMode::Count,
            revote_timeout: None,
            confirmation_grace: 0.6,
            adversary: CorruptionSchedule::default(),
            clients: Vec::new(),
            provably_faulty: Vec::new(),
            allow_unpublishable: false,
            max_time: None,
            trace_blocks: false,
        }
    }
}

fn positive(v: f64, field: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::scenario(field, "must be positive"))
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let sc: ScenarioConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("(document)")
                .to_string();
            Error::Scenario { field, reason: msg }
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Ledger parameters actually used by the run.
    pub fn effective_ledger(&self) -> LedgerParams {
        let mut l = self.ledger.clone();
        if self.skip_confirmation {
            l.confirmation_depth = 0;
        }
        l
    }

    /// Default staleness bound: expected confirmation time plus `delta`.
    pub fn default_p(&self) -> f64 {
        self.effective_ledger().expected_confirmation_time() + self.network.delta
    }

    pub fn grace_p(&self) -> f64 {
        self.adversary.grace_p.unwrap_or_else(|| self.default_p())
    }

    pub fn revote_timeout(&self) -> f64 {
        self.revote_timeout
            .unwrap_or_else(|| 2.0 * self.ledger.expected_confirmation_time().max(1.0))
    }

    pub fn registration_fee(&self) -> u64 {
        self.registration_fee.unwrap_or(self.ledger.registration_cost)
    }

    pub fn genesis(&self) -> Result<Configuration> {
        Configuration::genesis(self.initial_size)
    }

    /// Every node named anywhere in the scenario, plus the genesis members.
    pub fn declared_nodes(&self) -> BTreeSet<NodeId> {
        let mut out: BTreeSet<NodeId> = (0..self.initial_size as u32).map(NodeId).collect();
        for e in &self.churn {
            out.insert(e.op.node());
        }
        out
    }

    /// Local configurations the explicit churn list produces, genesis first.
    pub fn project(&self) -> Result<Vec<Configuration>> {
        let mut cur = self.genesis()?;
        let mut out = vec![cur.clone()];
        for (i, e) in self.churn.iter().enumerate() {
            let field = || format!("churn[{i}]");
            cur = match e.op {
                ChurnOp::Join { node } => {
                    if cur.contains(node) {
                        return Err(Error::scenario(field(), format!("{node} is already a member")));
                    }
                    cur.with_member(node)
                }
                ChurnOp::Leave { node } | ChurnOp::Evict { node, .. } => {
                    if !cur.contains(node) {
                        return Err(Error::scenario(field(), format!("{node} is not a member")));
                    }
                    if let ChurnOp::Evict { by, .. } = e.op {
                        if by == node || !cur.contains(by) {
                            return Err(Error::scenario(field(), format!("{by} cannot evict {node}")));
                        }
                    }
                    cur.without_member(node)
                        .map_err(|e| Error::scenario(field(), e.to_string()))?
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Replays the configuration sequence under the policy and checks that
    /// every configuration stays publishable: the threshold is within the
    /// batching bound of the last stored configuration, that configuration
    /// keeps enough correct members, and it overlaps every local one.
    pub fn check_publishable(&self, configs: &[Configuration]) -> Result<()> {
        let Some(first) = configs.first() else {
            return Ok(());
        };
        let mut published = first.clone();
        let mut last_voted = first.clone();
        let mut left = 0usize;
        for (prev, c) in configs.iter().zip(&configs[1..]) {
            let t = policy_threshold(self.policy, c);
            if t > max_batch_threshold(&published) {
                return Err(Error::Unpublishable(format!(
                    "threshold {t} at {c} exceeds the batching bound {} of stored {published}",
                    max_batch_threshold(&published)
                )));
            }
            if c.size() < prev.size() {
                left += 1;
            }
            if left > max_correct_leavers(&published) || !overlap_ok(&published, c) {
                return Err(Error::Unpublishable(format!(
                    "{c} cannot be reached from stored {published}: {left} departures, {} allowed",
                    max_correct_leavers(&published)
                )));
            }
            if symmetric_difference(&last_voted, c) >= t {
                published = c.clone();
                last_voted = c.clone();
                left = 0;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_size == 0 {
            return Err(Error::scenario("initial_size", "must be at least 1"));
        }
        if let Some(t) = self.target_size {
            if t < self.initial_size {
                return Err(Error::scenario("target_size", "must be at least initial_size"));
            }
        }
        if self.policy == Policy::Fixed(0) {
            return Err(Error::scenario("policy", "fixed threshold must be at least 1"));
        }
        match self.checkpoint {
            CheckpointMode::Interval { seconds } => positive(seconds, "checkpoint.seconds")?,
            CheckpointMode::Requests { count: 0 } => {
                return Err(Error::scenario("checkpoint.count", "must be at least 1"))
            }
            CheckpointMode::Requests { .. } => {}
        }
        self.ledger.validate()?;
        self.price.validate()?;
        self.network.validate()?;
        if !(self.churn_gap_max >= 0.0 && self.churn_gap_max.is_finite()) {
            return Err(Error::scenario("churn_gap_max", "must be a non-negative number of seconds"));
        }
        positive(self.tob_latency, "tob_latency")?;
        positive(self.confirmation_grace, "confirmation_grace")?;
        if let Some(r) = self.revote_timeout {
            positive(r, "revote_timeout")?;
        }
        if let Some(m) = self.max_time {
            positive(m, "max_time")?;
        }
        if let Some(p) = self.adversary.grace_p {
            positive(p, "adversary.grace_p")?;
        }
        if self.registration_fee() < self.ledger.registration_cost {
            return Err(Error::scenario(
                "registration_fee",
                "below the contract's registration cost",
            ));
        }
        if let VotingMode::StakeWeighted { stakes } = &self.voting {
            for n in self.declared_nodes() {
                if !stakes.contains_key(&n) {
                    return Err(Error::scenario("voting.stakes", format!("no stake for {n}")));
                }
            }
        }
        let mut last_at = 0.0;
        for (i, e) in self.churn.iter().enumerate() {
            if let Some(at) = e.at {
                if !(at >= last_at && at.is_finite()) {
                    return Err(Error::scenario(
                        format!("churn[{i}].at"),
                        "timed operations must be listed in time order",
                    ));
                }
                last_at = at;
            }
        }
        let declared = self.declared_nodes();
        for (i, e) in self.adversary.entries.iter().enumerate() {
            let field = format!("adversary.entries[{i}]");
            if !declared.contains(&e.node) {
                return Err(Error::scenario(field, format!("{} is not part of the scenario", e.node)));
            }
            if e.behaviors.is_empty() {
                return Err(Error::scenario(field, "no behaviors"));
            }
            if let Trigger::At(t) = e.trigger {
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(Error::scenario(field + ".trigger", "must be non-negative"));
                }
            }
        }
        for (i, c) in self.clients.iter().enumerate() {
            if let Some(p) = c.p_bound {
                positive(p, &format!("clients[{i}].p_bound"))?;
            }
            for r in &c.requests {
                let (RequestTime::At(t) | RequestTime::AfterCorruption(t)) = *r;
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(Error::scenario(
                        format!("clients[{i}].requests"),
                        "times must be non-negative",
                    ));
                }
            }
        }
        let configs = self.project()?;
        if !self.allow_unpublishable {
            self.check_publishable(&configs)?;
        }
        Ok(())
    }
}
