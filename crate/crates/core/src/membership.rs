//! Fault-tolerance, quorum, overlap and batching arithmetic over configurations.
//!
//! Every function here is pure. Sizes are validated once, at [`Configuration`]
//! construction: an empty member set is rejected, so the arithmetic below is
//! total over every value a caller can hold.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque node identity. The simulator binds one signing key to each id.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A numbered member set together with the vote threshold needed to replace it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Configuration {
    pub number: u64,
    members: BTreeSet<NodeId>,
    /// Votes needed at the membership service to replace this configuration.
    pub v: u32,
}

impl Configuration {
    /// Builds a configuration with `v = max_faults + 1`.
    pub fn new(number: u64, members: impl IntoIterator<Item = NodeId>) -> Result<Self> {
        let members: BTreeSet<NodeId> = members.into_iter().collect();
        if members.is_empty() {
            return Err(Error::input("configuration must have at least one member"));
        }
        let v = faults_for_size(members.len()) as u32 + 1;
        Ok(Configuration { number, members, v })
    }

    /// Configuration `number` over ids `0..size`.
    pub fn genesis(size: usize) -> Result<Self> {
        Self::new(0, (0..size as u32).map(NodeId))
    }

    pub fn members(&self) -> &BTreeSet<NodeId> {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.members.contains(&id)
    }

    /// Successor configuration with `id` added. The number is incremented by one.
    pub fn with_member(&self, id: NodeId) -> Self {
        let mut members = self.members.clone();
        members.insert(id);
        Self::new(self.number + 1, members).expect("non-empty by construction")
    }

    /// Successor configuration with `id` removed, or an error if it would be empty.
    pub fn without_member(&self, id: NodeId) -> Result<Self> {
        let mut members = self.members.clone();
        members.remove(&id);
        Self::new(self.number + 1, members)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}{{", self.number)?;
        for (i, m) in self.members.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{m}")?;
        }
        f.write_str("}")
    }
}

fn faults_for_size(n: usize) -> usize {
    (n - 1) / 3
}

/// Largest number of Byzantine members tolerated: `⌊(|C| − 1) / 3⌋`.
pub fn max_faults(c: &Configuration) -> usize {
    faults_for_size(c.size())
}

/// Votes required to replace `c` at the membership service.
pub fn vote_threshold(c: &Configuration) -> usize {
    max_faults(c) + 1
}

/// Whether the published configuration still has enough correct members inside
/// the local one to vote it out, even if `max_faults(local)` local members misbehave.
pub fn overlap_ok(published: &Configuration, local: &Configuration) -> bool {
    let common = published.members.intersection(&local.members).count();
    common >= max_faults(published) + max_faults(local) + 1
}

/// Upper bound on the batching threshold `t` while `published` is the stored configuration.
pub fn max_batch_threshold(published: &Configuration) -> usize {
    let f = max_faults(published);
    (3 * f) / 2 + 1 + (published.size() - 1) % 3
}

/// How many correct members may leave before the stored configuration can no longer be replaced.
pub fn max_correct_leavers(published: &Configuration) -> usize {
    published.size() - (2 * max_faults(published) + 1)
}

/// `|members(a) △ members(b)|`; numbers and thresholds are ignored.
pub fn symmetric_difference(a: &Configuration, b: &Configuration) -> usize {
    a.members.symmetric_difference(&b.members).count()
}

/// How many local reconfigurations are allowed before the membership service must be updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Publish every configuration (`t = 1`).
    Every,
    /// `t = max(1, ⌊f(C_cur)/2⌋)`.
    HalfF,
    /// A constant threshold. Scenario validation rejects values above
    /// [`max_batch_threshold`] unless explicitly bypassed.
    Fixed(u32),
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::Every => "t1".into(),
            Policy::HalfF => "halff".into(),
            Policy::Fixed(t) => format!("fixed{t}"),
        }
    }
}

/// Threshold `t` in force for the current local configuration.
pub fn policy_threshold(policy: Policy, current: &Configuration) -> usize {
    match policy {
        Policy::Every => 1,
        Policy::HalfF => (max_faults(current) / 2).max(1),
        Policy::Fixed(t) => t.max(1) as usize,
    }
}
