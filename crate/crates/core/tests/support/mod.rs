//! Test-only reference models shared by the integration suites.

#![allow(dead_code)]

pub mod reference {
    //! Literal interpreter of the membership contract over plain vectors.

    use std::collections::BTreeMap;

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct Cfg {
        pub number: u64,
        /// Sorted, duplicate-free.
        pub members: Vec<u32>,
    }

    impl Cfg {
        pub fn new(number: u64, mut members: Vec<u32>) -> Self {
            members.sort_unstable();
            members.dedup();
            Cfg { number, members }
        }

        pub fn v(&self) -> usize {
            (self.members.len() - 1) / 3 + 1
        }

        fn has(&self, id: u32) -> bool {
            self.members.contains(&id)
        }
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct Reg {
        pub id: u32,
        pub fee: u64,
        pub joined: bool,
        pub left: bool,
    }

    #[derive(Debug, Clone)]
    pub struct Model {
        pub cur: Cfg,
        pub regs: Vec<Reg>,
        /// `(config, voters in arrival order)`.
        pub votes: Vec<(Cfg, Vec<u32>)>,
        pub balance: u64,
        pub cost: u64,
        pub collected: u64,
        pub credits: BTreeMap<u32, u64>,
        pub stakes: Option<BTreeMap<u32, u64>>,
        pub installed: Vec<(Cfg, Vec<u32>)>,
    }

    impl Model {
        pub fn new(genesis: Cfg, cost: u64) -> Self {
            Model {
                cur: genesis,
                regs: vec![],
                votes: vec![],
                balance: 0,
                cost,
                collected: 0,
                credits: BTreeMap::new(),
                stakes: None,
                installed: vec![],
            }
        }

        pub fn register(&mut self, id: u32, fee: u64) -> bool {
            if fee < self.cost {
                return false;
            }
            for r in &self.regs {
                if r.id == id && !r.left {
                    return false;
                }
            }
            self.regs.push(Reg {
                id,
                fee,
                joined: false,
                left: false,
            });
            self.balance += fee;
            self.collected += fee;
            true
        }

        pub fn vote(&mut self, c: Cfg, p: u32) -> bool {
            if !self.cur.has(p) || c.number <= self.cur.number {
                return false;
            }
            let mut slot = None;
            for (i, (k, _)) in self.votes.iter().enumerate() {
                if *k == c {
                    slot = Some(i);
                }
            }
            let i = match slot {
                Some(i) => i,
                None => {
                    self.votes.push((c, vec![]));
                    self.votes.len() - 1
                }
            };
            if self.votes[i].1.contains(&p) {
                return false;
            }
            self.votes[i].1.push(p);
            while self.step() {}
            true
        }

        fn enough(&self, voters: &[u32]) -> bool {
            match &self.stakes {
                None => voters.len() >= self.cur.v(),
                Some(st) => {
                    let total: u64 = self.cur.members.iter().map(|m| st[m]).sum();
                    let got: u64 = voters.iter().map(|m| st[m]).sum();
                    3 * got > total
                }
            }
        }

        fn step(&mut self) -> bool {
            let mut best: Option<usize> = None;
            for (i, (c, voters)) in self.votes.iter().enumerate() {
                if c.number > self.cur.number && self.enough(voters) {
                    let better = match best {
                        None => true,
                        Some(b) => {
                            let o = &self.votes[b].0;
                            (c.number, &c.members) > (o.number, &o.members)
                        }
                    };
                    if better {
                        best = Some(i);
                    }
                }
            }
            let Some(i) = best else { return false };
            let (next, voters) = self.votes[i].clone();
            let mut reward = 0;
            for r in self.regs.iter_mut() {
                if r.left {
                    continue;
                }
                let in_new = next.has(r.id);
                let in_old = self.cur.has(r.id);
                if in_new && !in_old && !r.joined {
                    r.joined = true;
                    reward += r.fee / 2;
                } else if in_old && !in_new && r.joined {
                    r.left = true;
                    reward += r.fee - r.fee / 2;
                }
            }
            let share = reward / voters.len() as u64;
            for p in &voters {
                *self.credits.entry(*p).or_insert(0) += share;
                self.balance -= share;
            }
            self.installed.push((next.clone(), voters.clone()));
            self.cur = next.clone();
            let mut kept = vec![];
            for (c, vs) in self.votes.drain(..) {
                if c.number <= next.number {
                    continue;
                }
                let vs: Vec<u32> = vs.into_iter().filter(|p| next.has(*p)).collect();
                if !vs.is_empty() {
                    kept.push((c, vs));
                }
            }
            self.votes = kept;
            true
        }

        pub fn paid(&self) -> u64 {
            self.credits.values().sum()
        }
    }
}

pub mod oracle {
    //! Random register/vote sequences replayed against both the contract and [`super::reference`].

    use std::collections::{BTreeMap, BTreeSet};

    use bms_core::contract::{BmsState, VotingMode};
    use bms_core::membership::{Configuration, NodeId};
    use proptest::prelude::*;

    use super::reference::{Cfg, Model};

    #[derive(Debug, Clone)]
    pub enum Op {
        Register { id: u32, fee: u64 },
        Vote { number: u64, members: Vec<u32>, voter: u32 },
    }

    /// Small pool of member sets so that votes collide often enough to trigger updates.
    const POOL: [&[u32]; 5] = [&[0, 1, 2, 3, 4], &[0, 1, 2], &[1, 2, 3, 4, 5, 6], &[0, 2, 4, 6, 8, 9], &[7]];

    pub fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            1 => (0u32..10, 90u64..130).prop_map(|(id, fee)| Op::Register { id, fee }),
            3 => (1u64..6, 0usize..POOL.len(), 0u32..10)
                .prop_map(|(number, i, voter)| Op::Vote { number, members: POOL[i].to_vec(), voter }),
        ]
    }

    fn to_cfg(c: &Configuration) -> Cfg {
        Cfg::new(c.number, c.members().iter().map(|n| n.0).collect())
    }

    fn check_same(state: &BmsState, model: &Model) -> Result<(), TestCaseError> {
        prop_assert_eq!(to_cfg(state.config_request()), model.cur.clone());
        prop_assert_eq!(state.config_request().v as usize, model.cur.v());
        prop_assert_eq!(state.balance(), model.balance);
        prop_assert_eq!(state.collected(), model.collected);
        let regs: Vec<(u32, u64, bool, bool)> = state
            .registrations()
            .iter()
            .map(|r| (r.id.0, r.fee, r.join_paid, r.consumed))
            .collect();
        let model_regs: Vec<(u32, u64, bool, bool)> = model
            .regs
            .iter()
            .map(|r| (r.id, r.fee, r.joined, r.left))
            .collect();
        prop_assert_eq!(regs, model_regs);
        let votes: BTreeMap<(u64, Vec<u32>), BTreeSet<u32>> = state
            .votes()
            .iter()
            .map(|(c, v)| {
                let c = to_cfg(c);
                ((c.number, c.members), v.iter().map(|n| n.0).collect())
            })
            .collect();
        let model_votes: BTreeMap<(u64, Vec<u32>), BTreeSet<u32>> = model
            .votes
            .iter()
            .map(|(c, v)| ((c.number, c.members.clone()), v.iter().copied().collect()))
            .collect();
        prop_assert_eq!(votes, model_votes);
        let credits: BTreeMap<u32, u64> = state.credits().iter().map(|(k, v)| (k.0, *v)).collect();
        let model_credits: BTreeMap<u32, u64> =
            model.credits.iter().filter(|(_, v)| **v > 0).map(|(k, v)| (*k, *v)).collect();
        let credits: BTreeMap<u32, u64> = credits.into_iter().filter(|(_, v)| *v > 0).collect();
        prop_assert_eq!(credits, model_credits);
        prop_assert!(state.conserves_funds());
        prop_assert_eq!(model.paid() + model.balance, model.collected);
        Ok(())
    }

    pub fn replay(genesis_size: u32, ops: &[Op], stakes: Option<BTreeMap<u32, u64>>) -> Result<(), TestCaseError> {
        let genesis = Configuration::genesis(genesis_size as usize).unwrap();
        let mode = match &stakes {
            None => VotingMode::Count,
            Some(s) => VotingMode::StakeWeighted {
                stakes: s.iter().map(|(k, v)| (NodeId(*k), *v)).collect(),
            },
        };
        let mut state = BmsState::with_mode(genesis, 100, mode);
        let mut model = Model::new(Cfg::new(0, (0..genesis_size).collect()), 100);
        model.stakes = stakes;
        for op in ops {
            match op {
                Op::Register { id, fee } => {
                    let a = state.register(NodeId(*id), *fee).is_ok();
                    let b = model.register(*id, *fee);
                    prop_assert_eq!(a, b);
                }
                Op::Vote { number, members, voter } => {
                    let c = Configuration::new(*number, members.iter().copied().map(NodeId)).unwrap();
                    let previous = state.config_request().clone();
                    let a = state.vote(&c, NodeId(*voter)).unwrap();
                    let b = model.vote(Cfg::new(*number, members.clone()), *voter);
                    prop_assert_eq!(a.accepted(), b);
                    // Safety: an installed configuration always has enough votes from the stored one.
                    if let bms_core::contract::VoteOutcome::Counted { updates, .. } = &a {
                        for u in updates {
                            prop_assert!(u.installed.number > u.previous.number);
                            prop_assert!(u.voters.iter().all(|p| u.previous.contains(*p)));
                            if model.stakes.is_none() {
                                prop_assert!(u.voters.len() >= u.previous.v as usize);
                            }
                        }
                        if let Some(first) = updates.first() {
                            prop_assert_eq!(&first.previous, &previous);
                        }
                    }
                }
            }
            check_same(&state, &model)?;
        }
        Ok(())
    }
}
