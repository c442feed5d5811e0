//! The membership-service state machine hosted on the ledger.
//!
//! It stores the authoritative configuration of the BFT system, collects
//! registration fees from joining nodes, counts votes from members of the
//! stored configuration and, once a proposed successor has enough votes,
//! installs it and pays the voters out of the fees of every node that joined
//! or left in between.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::membership::{symmetric_difference, Configuration, NodeId};

/// Currency units held and transferred by the contract.
pub type Amount = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub id: NodeId,
    pub fee: Amount,
    /// First half of the fee was paid out when the node joined.
    pub join_paid: bool,
    /// Second half was paid out when it left; the registration is spent.
    pub consumed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingMode {
    #[default]
    Count,
    /// Votes weigh by stake; more than a third of the members' total stake is required.
    StakeWeighted { stakes: BTreeMap<NodeId, u64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegisterRejection {
    BelowCost,
    /// An unspent registration for the same id already exists.
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteRejection {
    NotMember,
    /// Proposed number does not exceed the stored one.
    Stale,
    /// The voter already voted for this configuration.
    Repeated,
}

/// Record of one stored-configuration replacement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub previous: Configuration,
    pub installed: Configuration,
    pub voters: BTreeSet<NodeId>,
    pub reward: Amount,
    pub per_voter: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteOutcome {
    Counted {
        /// This was the first vote recorded for the configuration.
        first: bool,
        /// Updates triggered by this vote, oldest first. Usually zero or one.
        updates: Vec<UpdateEvent>,
    },
    Ignored(VoteRejection),
}

impl VoteOutcome {
    pub fn accepted(&self) -> bool {
        matches!(self, VoteOutcome::Counted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BmsState {
    c_cur: Configuration,
    registrations: Vec<Registration>,
    votes: BTreeMap<Configuration, BTreeSet<NodeId>>,
    balance: Amount,
    cost: Amount,
    mode: VotingMode,
    collected: Amount,
    paid_out: Amount,
    credits: BTreeMap<NodeId, Amount>,
}

impl BmsState {
    pub fn new(genesis: Configuration, cost: Amount) -> Self {
        Self::with_mode(genesis, cost, VotingMode::Count)
    }

    pub fn with_mode(genesis: Configuration, cost: Amount, mode: VotingMode) -> Self {
        BmsState {
            c_cur: genesis,
            registrations: Vec::new(),
            votes: BTreeMap::new(),
            balance: 0,
            cost,
            mode,
            collected: 0,
            paid_out: 0,
            credits: BTreeMap::new(),
        }
    }

    /// The stored configuration; the answer to a CONFIG-REQUEST.
    pub fn config_request(&self) -> &Configuration {
        &self.c_cur
    }

    pub fn registrations(&self) -> &[Registration] {
        &self.registrations
    }

    /// Whether `id` holds an accepted registration that has not been used to join yet.
    pub fn is_registered(&self, id: NodeId) -> bool {
        self.registrations
            .iter()
            .any(|r| r.id == id && !r.join_paid && !r.consumed)
    }

    pub fn votes(&self) -> &BTreeMap<Configuration, BTreeSet<NodeId>> {
        &self.votes
    }

    pub fn balance(&self) -> Amount {
        self.balance
    }

    pub fn cost(&self) -> Amount {
        self.cost
    }

    pub fn mode(&self) -> &VotingMode {
        &self.mode
    }

    /// Total fees accepted so far.
    pub fn collected(&self) -> Amount {
        self.collected
    }

    /// Total rewards transferred to voters so far.
    pub fn paid_out(&self) -> Amount {
        self.paid_out
    }

    /// Rewards received per account.
    pub fn credits(&self) -> &BTreeMap<NodeId, Amount> {
        &self.credits
    }

    /// `paid_out + balance = collected`.
    pub fn conserves_funds(&self) -> bool {
        self.paid_out.checked_add(self.balance) == Some(self.collected)
    }

    /// Handles `⟨REGISTER, id, fee⟩`. A rejected registration has its funds returned.
    pub fn register(&mut self, id: NodeId, fee: Amount) -> Result<(), RegisterRejection> {
        if fee < self.cost {
            return Err(RegisterRejection::BelowCost);
        }
        if self.registrations.iter().any(|r| r.id == id && !r.consumed) {
            return Err(RegisterRejection::Duplicate);
        }
        self.registrations.push(Registration {
            id,
            fee,
            join_paid: false,
            consumed: false,
        });
        self.balance += fee;
        self.collected += fee;
        Ok(())
    }

    /// Handles `⟨VOTE, C, p⟩` from an authenticated voter `p`.
    ///
    /// Errors only in stake-weighted mode when a member has no stake entry,
    /// or if paying out a reward would overdraw the balance.
    pub fn vote(&mut self, proposed: &Configuration, voter: NodeId) -> Result<VoteOutcome> {
        if !self.c_cur.contains(voter) {
            return Ok(VoteOutcome::Ignored(VoteRejection::NotMember));
        }
        if proposed.number <= self.c_cur.number {
            return Ok(VoteOutcome::Ignored(VoteRejection::Stale));
        }
        if let VotingMode::StakeWeighted { stakes } = &self.mode {
            if let Some(missing) = self.c_cur.members().iter().find(|m| !stakes.contains_key(m))
            {
                return Err(Error::InvalidState(format!("no stake recorded for {missing}")));
            }
        }
        // Thresholds are always derived from the member set, never taken from the wire.
        let key = Configuration::new(proposed.number, proposed.members().iter().copied())?;
        let voters = self.votes.entry(key.clone()).or_default();
        let first = voters.is_empty();
        if !voters.insert(voter) {
            return Ok(VoteOutcome::Ignored(VoteRejection::Repeated));
        }
        let mut updates = Vec::new();
        while let Some(update) = self.try_update()? {
            updates.push(update);
        }
        Ok(VoteOutcome::Counted { first, updates })
    }

    /// Whether votes for `c` carry more than a third of the stored configuration's stake.
    pub fn weighted_vote_threshold_met(&self, c: &Configuration) -> Result<bool> {
        let VotingMode::StakeWeighted { stakes } = &self.mode else {
            return Err(Error::InvalidState("contract is not stake-weighted".into()));
        };
        let stake_of = |id: &NodeId| {
            stakes
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidState(format!("no stake recorded for {id}")))
        };
        let mut total: u128 = 0;
        for m in self.c_cur.members() {
            total += stake_of(m)? as u128;
        }
        let mut voted: u128 = 0;
        if let Some(voters) = self.votes.get(c) {
            for v in voters {
                voted += stake_of(v)? as u128;
            }
        }
        Ok(3 * voted > total)
    }

    fn qualifies(&self, c: &Configuration, voters: &BTreeSet<NodeId>) -> Result<bool> {
        if c.number <= self.c_cur.number {
            return Ok(false);
        }
        match self.mode {
            VotingMode::Count => Ok(voters.len() >= self.c_cur.v as usize),
            VotingMode::StakeWeighted { .. } => self.weighted_vote_threshold_met(c),
        }
    }

    /// Installs the highest-numbered configuration that has reached its vote
    /// threshold, if any, and pays its voters.
    pub fn try_update(&mut self) -> Result<Option<UpdateEvent>> {
        let mut chosen = None;
        for (c, voters) in self.votes.iter().rev() {
            if self.qualifies(c, voters)? {
                chosen = Some(c.clone());
                break;
            }
        }
        let Some(next) = chosen else {
            return Ok(None);
        };
        let voters = self.votes.get(&next).cloned().unwrap_or_default();

        let mut reward: Amount = 0;
        for r in self.registrations.iter_mut().filter(|r| !r.consumed) {
            if next.contains(r.id) && !self.c_cur.contains(r.id) && !r.join_paid {
                r.join_paid = true;
                reward += r.fee / 2;
            } else if self.c_cur.contains(r.id) && !next.contains(r.id) && r.join_paid {
                r.consumed = true;
                reward += r.fee - r.fee / 2;
            }
        }
        debug_assert!(symmetric_difference(&next, &self.c_cur) > 0 || reward == 0);

        let per_voter = if voters.is_empty() {
            0
        } else {
            reward / voters.len() as Amount
        };
        let payout = per_voter * voters.len() as Amount;
        if payout > self.balance {
            return Err(Error::InvalidState(format!(
                "reward {payout} exceeds balance {}",
                self.balance
            )));
        }
        self.balance -= payout;
        self.paid_out += payout;
        for v in &voters {
            *self.credits.entry(*v).or_default() += per_voter;
        }

        let previous = std::mem::replace(&mut self.c_cur, next.clone());
        let members = self.c_cur.members().clone();
        self.votes.retain(|c, _| c.number > next.number);
        for set in self.votes.values_mut() {
            set.retain(|v| members.contains(v));
        }
        self.votes.retain(|_, set| !set.is_empty());

        Ok(Some(UpdateEvent {
            previous,
            installed: next,
            voters,
            reward,
            per_voter,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(number: u64, ids: &[u32]) -> Configuration {
        Configuration::new(number, ids.iter().copied().map(NodeId)).unwrap()
    }

    fn c0() -> BmsState {
        BmsState::new(cfg(0, &[0, 1, 2, 3]), 100)
    }

    #[test]
    fn register_at_cost_boundary() {
        let mut s = c0();
        assert_eq!(s.register(NodeId(4), 100), Ok(()));
        assert_eq!(s.register(NodeId(5), 99), Err(RegisterRejection::BelowCost));
        assert_eq!(s.balance(), 100);
        assert!(s.is_registered(NodeId(4)));
        assert!(!s.is_registered(NodeId(5)));
    }

    #[test]
    fn duplicate_unspent_registration_rejected() {
        let mut s = c0();
        s.register(NodeId(4), 100).unwrap();
        assert_eq!(s.register(NodeId(4), 150), Err(RegisterRejection::Duplicate));
        assert_eq!(s.balance(), 100);
    }

    #[test]
    fn two_votes_trigger_update_at_size_four() {
        let mut s = c0();
        let c1 = cfg(1, &[0, 1, 2, 3, 4]);
        let out = s.vote(&c1, NodeId(0)).unwrap();
        assert_eq!(
            out,
            VoteOutcome::Counted {
                first: true,
                updates: vec![]
            }
        );
        let out = s.vote(&c1, NodeId(1)).unwrap();
        let VoteOutcome::Counted { first, updates } = out else {
            panic!("vote ignored")
        };
        assert!(!first);
        assert_eq!(updates.len(), 1);
        assert_eq!(s.config_request(), &c1);
        assert_eq!(s.config_request().v, 2);
    }

    #[test]
    fn non_member_vote_ignored() {
        let mut s = c0();
        let c1 = cfg(1, &[0, 1, 2, 3, 4]);
        assert_eq!(
            s.vote(&c1, NodeId(4)).unwrap(),
            VoteOutcome::Ignored(VoteRejection::NotMember)
        );
        assert!(s.votes().is_empty());
    }

    #[test]
    fn repeated_vote_is_a_no_op() {
        let mut s = c0();
        let c1 = cfg(1, &[0, 1, 2, 3, 4]);
        s.vote(&c1, NodeId(0)).unwrap();
        assert_eq!(
            s.vote(&c1, NodeId(0)).unwrap(),
            VoteOutcome::Ignored(VoteRejection::Repeated)
        );
        assert_eq!(s.votes()[&c1].len(), 1);
        assert_eq!(s.config_request().number, 0);
    }

    #[test]
    fn stale_number_ignored() {
        let mut s = c0();
        assert_eq!(
            s.vote(&cfg(0, &[0, 1, 2]), NodeId(0)).unwrap(),
            VoteOutcome::Ignored(VoteRejection::Stale)
        );
    }

    #[test]
    fn wire_threshold_is_recomputed() {
        let mut s = c0();
        let mut c1 = cfg(1, &[0, 1, 2, 3, 4]);
        c1.v = 99;
        s.vote(&c1, NodeId(0)).unwrap();
        s.vote(&c1, NodeId(1)).unwrap();
        assert_eq!(s.config_request().v, 2);
    }

    #[test]
    fn one_join_reward_split_between_two_voters() {
        let mut s = c0();
        s.register(NodeId(4), 100).unwrap();
        let c1 = cfg(1, &[0, 1, 2, 3, 4]);
        s.vote(&c1, NodeId(0)).unwrap();
        let VoteOutcome::Counted { updates, .. } = s.vote(&c1, NodeId(1)).unwrap() else {
            panic!()
        };
        assert_eq!(updates[0].reward, 50);
        assert_eq!(updates[0].per_voter, 25);
        assert_eq!(s.credits()[&NodeId(0)], 25);
        assert_eq!(s.credits()[&NodeId(1)], 25);
        assert_eq!(s.balance(), 50);
        assert!(s.conserves_funds());
    }

    #[test]
    fn join_plus_leave_pays_both_halves() {
        let mut s = c0();
        s.register(NodeId(4), 100).unwrap();
        s.register(NodeId(5), 100).unwrap();
        let c1 = cfg(1, &[0, 1, 2, 3, 4]);
        s.vote(&c1, NodeId(0)).unwrap();
        s.vote(&c1, NodeId(1)).unwrap();
        // Node 4 leaves while node 5 joins.
        let c2 = cfg(2, &[0, 1, 2, 3, 5]);
        s.vote(&c2, NodeId(2)).unwrap();
        let VoteOutcome::Counted { updates, .. } = s.vote(&c2, NodeId(3)).unwrap() else {
            panic!()
        };
        assert_eq!(updates[0].reward, 100);
        assert_eq!(updates[0].per_voter, 50);
        assert!(s.registrations()[0].consumed);
        assert!(s.registrations()[1].join_paid && !s.registrations()[1].consumed);
        assert!(s.conserves_funds());
        // The spent registration no longer blocks a new one.
        s.register(NodeId(4), 100).unwrap();
    }

    #[test]
    fn no_qualifying_configuration_leaves_state_unchanged() {
        let mut s = c0();
        let before = s.clone();
        assert_eq!(s.try_update().unwrap(), None);
        assert_eq!(s, before);
    }

    #[test]
    fn skipping_numbers_is_allowed() {
        let mut s = c0();
        let c5 = cfg(5, &[0, 1, 2, 3, 4, 5]);
        s.vote(&c5, NodeId(0)).unwrap();
        s.vote(&c5, NodeId(1)).unwrap();
        assert_eq!(s.config_request().number, 5);
    }

    #[test]
    fn stale_votes_are_collected_and_outsiders_pruned() {
        let mut s = c0();
        let c1 = cfg(1, &[0, 1, 2, 4]);
        let c2 = cfg(2, &[0, 1, 2, 4, 5]);
        s.vote(&c2, NodeId(3)).unwrap();
        s.vote(&c1, NodeId(0)).unwrap();
        s.vote(&c1, NodeId(1)).unwrap();
        assert_eq!(s.config_request(), &c1);
        // Node 3 is no longer a member so its vote for C2 no longer counts.
        assert!(s.votes().is_empty());
    }

    #[test]
    fn stake_weighted_threshold() {
        let stakes: BTreeMap<NodeId, u64> = (0..4).map(|i| (NodeId(i), 10)).collect();
        let mut s = BmsState::with_mode(
            cfg(0, &[0, 1, 2, 3]),
            100,
            VotingMode::StakeWeighted { stakes },
        );
        let c1 = cfg(1, &[0, 1, 2, 3, 4]);
        s.vote(&c1, NodeId(0)).unwrap();
        assert_eq!(s.config_request().number, 0, "1/4 of stake is not enough");
        s.vote(&c1, NodeId(1)).unwrap();
        assert_eq!(s.config_request().number, 1, "1/2 of stake suffices");
    }

    #[test]
    fn single_whale_decides() {
        let stakes: BTreeMap<NodeId, u64> =
            [(NodeId(0), 1000), (NodeId(1), 1), (NodeId(2), 1), (NodeId(3), 1)].into();
        let mut s = BmsState::with_mode(
            cfg(0, &[0, 1, 2, 3]),
            100,
            VotingMode::StakeWeighted { stakes },
        );
        let c1 = cfg(1, &[0, 1, 2, 3, 4]);
        s.vote(&c1, NodeId(0)).unwrap();
        assert_eq!(s.config_request().number, 1);
    }

    #[test]
    fn missing_stake_is_invalid_state() {
        let stakes: BTreeMap<NodeId, u64> = (0..3).map(|i| (NodeId(i), 10)).collect();
        let mut s = BmsState::with_mode(
            cfg(0, &[0, 1, 2, 3]),
            100,
            VotingMode::StakeWeighted { stakes },
        );
        assert!(matches!(
            s.vote(&cfg(1, &[0, 1]), NodeId(0)),
            Err(Error::InvalidState(_))
        ));
        assert!(s.weighted_vote_threshold_met(&cfg(1, &[0, 1])).is_err());
        assert!(c0().weighted_vote_threshold_met(&cfg(1, &[0, 1])).is_err());
    }
}
