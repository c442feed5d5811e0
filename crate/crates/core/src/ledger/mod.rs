//! Simulated single-chain ledger hosting the membership contract.
//!
//! Block production times are drawn ahead of time from one random stream so
//! that the block at which a transaction lands, and the time at which that
//! block reaches confirmation depth, are known as soon as the transaction is
//! submitted. Observers see block `b` at `produced_at(b) + their delay` and
//! read the contract state as of `visible head - depth`.

mod gas;

pub use gas::{usd_cost, GasSchedule, PriceModel};

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::contract::{
    Amount, BmsState, RegisterRejection, UpdateEvent, VoteOutcome, VoteRejection,
};
use crate::error::{Error, Result};
use crate::membership::{Configuration, NodeId};
use crate::sim::{rng_stream, Moments, SimRng, SimTime, TruncatedNormal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LedgerParams {
    pub block_interval: Moments,
    pub inclusion_delay: Moments,
    pub confirmation_depth: u64,
    /// Observers learn of a block after a delay drawn once per observer from `U[0, max)`.
    pub observer_delay_max: f64,
    pub registration_cost: Amount,
    pub gas: GasSchedule,
}

impl Default for LedgerParams {
    fn default() -> Self {
        LedgerParams {
            block_interval: Moments::new(15.0, 5.0, 1.0),
            inclusion_delay: Moments::new(27.7, 24.9, 0.0),
            confirmation_depth: 37,
            observer_delay_max: 0.5,
            registration_cost: 1_000_000,
            gas: GasSchedule::default(),
        }
    }
}

impl LedgerParams {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("ledger.{f}");
        if !(self.block_interval.min > 0.0) {
            return Err(Error::scenario(field("block_interval.min"), "must be positive"));
        }
        if !(self.observer_delay_max >= 0.0 && self.observer_delay_max.is_finite()) {
            return Err(Error::scenario(field("observer_delay_max"), "must be non-negative"));
        }
        TruncatedNormal::from_moments(self.block_interval)
            .map_err(|e| Error::scenario(field("block_interval"), e.to_string()))?;
        TruncatedNormal::from_moments(self.inclusion_delay)
            .map_err(|e| Error::scenario(field("inclusion_delay"), e.to_string()))?;
        Ok(())
    }

    /// Expected time for a transaction to reach confirmation depth once included.
    pub fn expected_confirmation_time(&self) -> f64 {
        self.confirmation_depth as f64 * self.block_interval.mean
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxKind {
    Register { node: NodeId, fee: Amount },
    Vote { config: Configuration, voter: NodeId },
}

impl TxKind {
    pub fn label(&self) -> &'static str {
        match self {
            TxKind::Register { .. } => "register",
            TxKind::Vote { .. } => "vote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerTransaction {
    pub kind: TxKind,
    pub submitter: NodeId,
    pub submitted_at: SimTime,
}

impl LedgerTransaction {
    pub fn attached_funds(&self) -> Amount {
        match self.kind {
            TxKind::Register { fee, .. } => fee,
            TxKind::Vote { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxEffect {
    Registered,
    RegisterRejected(RegisterRejection),
    VoteCounted {
        first: bool,
        updates: Vec<UpdateEvent>,
    },
    VoteIgnored(VoteRejection),
    /// The submitter tried to vote on behalf of another node.
    BadSignature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxReceipt {
    pub gas_used: u64,
    pub included_height: u64,
    pub accepted: bool,
    pub effect: TxEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub tx: LedgerTransaction,
    /// Height of the block the transaction is scheduled into.
    pub height: u64,
    pub receipt: Option<TxReceipt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub produced_at: SimTime,
    pub txs: Vec<TxId>,
}

/// Result of producing one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcome {
    pub block: Block,
    /// The stored configuration or the registration set changed.
    pub membership_changed: bool,
}

#[derive(Debug)]
pub struct Ledger {
    params: LedgerParams,
    block_dist: TruncatedNormal,
    inclusion_dist: TruncatedNormal,
    block_rng: SimRng,
    inclusion_rng: SimRng,
    /// `times[h]` is when block `h` is (or will be) produced. Block 0 is genesis at time 0.
    times: Vec<SimTime>,
    blocks: Vec<Block>,
    txs: Vec<TxRecord>,
    state: BmsState,
    /// `(height, state after that block)` for every block that changed the state.
    snapshots: Vec<(u64, BmsState)>,
}

impl Ledger {
    pub fn new(params: LedgerParams, genesis: BmsState, seed: u64) -> Result<Self> {
        params.validate()?;
        let block_dist = TruncatedNormal::from_moments(params.block_interval)?;
        let inclusion_dist = inclusion_distribution(&params, &block_dist)?;
        Ok(Ledger {
            params,
            block_dist,
            inclusion_dist,
            block_rng: rng_stream(seed, 10),
            inclusion_rng: rng_stream(seed, 11),
            times: vec![SimTime::ZERO],
            blocks: vec![Block {
                height: 0,
                produced_at: SimTime::ZERO,
                txs: Vec::new(),
            }],
            txs: Vec::new(),
            snapshots: vec![(0, genesis.clone())],
            state: genesis,
        })
    }

    pub fn params(&self) -> &LedgerParams {
        &self.params
    }

    /// Production time of block `height`, drawing further intervals if needed.
    pub fn block_time(&mut self, height: u64) -> SimTime {
        while self.times.len() as u64 <= height {
            let last = *self.times.last().expect("genesis time");
            let dt = self.block_dist.sample(&mut self.block_rng);
            self.times.push(last + dt);
        }
        self.times[height as usize]
    }

    /// Time at which a transaction included at `height` reaches confirmation depth.
    pub fn confirmation_time(&mut self, height: u64) -> SimTime {
        self.block_time(height + self.params.confirmation_depth)
    }

    /// Height of the latest produced block.
    pub fn head(&self) -> u64 {
        self.blocks.len() as u64 - 1
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn txs(&self) -> &[TxRecord] {
        &self.txs
    }

    pub fn tx(&self, id: TxId) -> Result<&TxRecord> {
        self.txs
            .get(id.0 as usize)
            .ok_or_else(|| Error::input(format!("unknown transaction {}", id.0)))
    }

    /// Head state, including unconfirmed blocks.
    pub fn head_state(&self) -> &BmsState {
        &self.state
    }

    /// When the next block is due.
    pub fn next_block_time(&mut self) -> SimTime {
        let h = self.head() + 1;
        self.block_time(h)
    }

    /// Adds a transaction to the pool and fixes the block it will be included in.
    ///
    /// A delay is drawn from the inclusion distribution; the transaction lands
    /// in the block, among those produced after submission, whose time is
    /// nearest to `submitted_at + delay`.
    pub fn submit(&mut self, tx: LedgerTransaction) -> TxId {
        let delay = self.inclusion_dist.sample(&mut self.inclusion_rng);
        let start = tx.submitted_at.as_secs();
        let mut first = self.head() + 1;
        while self.block_time(first) <= tx.submitted_at {
            first += 1;
        }
        let h = nearest_block(first, start + delay, |h| self.block_time(h).as_secs());
        let id = TxId(self.txs.len() as u64);
        self.txs.push(TxRecord {
            tx,
            height: h,
            receipt: None,
        });
        id
    }

    /// Produces the next block, executing its transactions in submission order.
    pub fn produce_block(&mut self) -> Result<BlockOutcome> {
        let height = self.head() + 1;
        let produced_at = self.block_time(height);
        let ids: Vec<TxId> = self
            .txs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.height == height && r.receipt.is_none())
            .map(|(i, _)| TxId(i as u64))
            .collect();
        let before_cfg = self.state.config_request().clone();
        let before_regs = self.state.registrations().len();
        let mut changed = false;
        for id in &ids {
            let tx = self.txs[id.0 as usize].tx.clone();
            let receipt = self.execute(&tx, height)?;
            changed |= receipt.accepted;
            self.txs[id.0 as usize].receipt = Some(receipt);
            if !self.state.conserves_funds() {
                return Err(Error::Invariant {
                    name: "reward-conservation",
                    at: produced_at.as_secs(),
                    detail: format!(
                        "paid {} + balance {} != collected {}",
                        self.state.paid_out(),
                        self.state.balance(),
                        self.state.collected()
                    ),
                });
            }
        }
        if changed {
            self.snapshots.push((height, self.state.clone()));
        }
        let block = Block {
            height,
            produced_at,
            txs: ids,
        };
        self.blocks.push(block.clone());
        Ok(BlockOutcome {
            block,
            membership_changed: self.state.config_request() != &before_cfg
                || self.state.registrations().len() != before_regs,
        })
    }

    fn execute(&mut self, tx: &LedgerTransaction, height: u64) -> Result<TxReceipt> {
        let g = &self.params.gas;
        let (gas_used, accepted, effect) = match &tx.kind {
            TxKind::Register { node, fee } => match self.state.register(*node, *fee) {
                Ok(()) => (g.register(true), true, TxEffect::Registered),
                Err(r) => (g.register(false), false, TxEffect::RegisterRejected(r)),
            },
            TxKind::Vote { voter, .. } if *voter != tx.submitter => {
                (g.ignored(), false, TxEffect::BadSignature)
            }
            TxKind::Vote { config, voter } => match self.state.vote(config, *voter)? {
                VoteOutcome::Counted { first, updates } => {
                    let sizes: Vec<(usize, usize)> = updates
                        .iter()
                        .map(|u| (u.previous.size(), u.installed.size()))
                        .collect();
                    let gas = g.vote(config.size(), first, &sizes);
                    (gas, true, TxEffect::VoteCounted { first, updates })
                }
                VoteOutcome::Ignored(r) => (g.ignored(), false, TxEffect::VoteIgnored(r)),
            },
        };
        Ok(TxReceipt {
            gas_used,
            included_height: height,
            accepted,
            effect,
        })
    }

    /// `head - included_height >= depth`.
    pub fn is_confirmed(&self, id: TxId, depth: u64) -> Result<bool> {
        let record = self.tx(id)?;
        let Some(receipt) = &record.receipt else {
            return Ok(false);
        };
        Ok(self.head() - receipt.included_height >= depth)
    }

    /// Contract state after block `height`.
    pub fn state_at(&self, height: u64) -> &BmsState {
        let idx = self.snapshots.partition_point(|(h, _)| *h <= height);
        &self.snapshots[idx - 1].1
    }

    /// Highest produced block an observer with `delay` has seen at `now`.
    pub fn visible_head(&self, now: SimTime, delay: f64) -> u64 {
        let idx = self
            .blocks
            .partition_point(|b| b.produced_at.as_secs() + delay <= now.as_secs());
        idx.saturating_sub(1) as u64
    }

    /// `(visible head, confirmed contract state)` for an observer with `delay`.
    pub fn observer_state(&self, now: SimTime, delay: f64) -> (u64, &BmsState) {
        let head = self.visible_head(now, delay);
        let confirmed = head.saturating_sub(self.params.confirmation_depth);
        let state = if head < self.params.confirmation_depth {
            self.state_at(0)
        } else {
            self.state_at(confirmed)
        };
        (head, state)
    }
}

/// Among blocks `first, first + 1, ...` the one produced nearest to `target`.
fn nearest_block(first: u64, target: f64, mut time_of: impl FnMut(u64) -> f64) -> u64 {
    let mut h = first;
    while time_of(h) < target {
        h += 1;
    }
    if h > first && target - time_of(h - 1) < time_of(h) - target {
        h -= 1;
    }
    h
}

/// Mean realized inclusion latency when delays come from `dist`, estimated on
/// a fixed synthetic chain.
fn realized_inclusion_mean(dist: &TruncatedNormal, block_dist: &TruncatedNormal) -> f64 {
    const SAMPLES: usize = 20_000;
    let mut rng = rng_stream(0x1ed9e5, 0);
    let mut times = vec![0.0];
    let horizon = SAMPLES as f64 * block_dist.mean() + 10_000.0;
    while *times.last().unwrap() < horizon {
        let last = *times.last().unwrap();
        times.push(last + block_dist.sample(&mut rng));
    }
    let span = times.last().unwrap() - 5_000.0;
    let mut total = 0.0;
    for i in 0..SAMPLES {
        let s = span * (i as f64 + 0.5) / SAMPLES as f64;
        let first = times.partition_point(|&t| t <= s) as u64;
        let d = dist.sample(&mut rng);
        let h = nearest_block(first, s + d, |h| times[h as usize]);
        total += times[h as usize] - s;
    }
    total / SAMPLES as f64
}

/// Delay distribution whose realized latency, after rounding to blocks, has
/// the configured mean. Blocks can only be hit after submission, which biases
/// short delays upwards; the requested mean is lowered to compensate.
fn inclusion_distribution(
    params: &LedgerParams,
    block_dist: &TruncatedNormal,
) -> Result<TruncatedNormal> {
    type Key = [u64; 6];
    static CACHE: OnceLock<Mutex<HashMap<Key, TruncatedNormal>>> = OnceLock::new();
    let (b, m) = (params.block_interval, params.inclusion_delay);
    let key = [b.mean, b.sd, b.min, m.mean, m.sd, m.min].map(f64::to_bits);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(d) = cache.lock().expect("cache lock").get(&key) {
        return Ok(*d);
    }
    let d = calibrate_inclusion(m, block_dist)?;
    cache.lock().expect("cache lock").insert(key, d);
    Ok(d)
}

fn calibrate_inclusion(m: Moments, block_dist: &TruncatedNormal) -> Result<TruncatedNormal> {
    let plain = TruncatedNormal::from_moments(m)?;
    if m.sd == 0.0 || m.mean <= m.min {
        return Ok(plain);
    }
    let with_mean = |mean: f64| TruncatedNormal::from_moments(Moments::new(mean, m.sd, m.min));
    // Lowest requested mean the shape allows for this sd.
    let floor = m.min + m.sd * 1.0001;
    let (mut lo, mut hi) = (floor.min(m.mean), m.mean);
    if realized_inclusion_mean(&plain, block_dist) <= m.mean {
        return Ok(plain);
    }
    if realized_inclusion_mean(&with_mean(lo)?, block_dist) >= m.mean {
        return with_mean(lo);
    }
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if realized_inclusion_mean(&with_mean(mid)?, block_dist) > m.mean {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    with_mean(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(seed: u64) -> Ledger {
        let genesis = BmsState::new(Configuration::genesis(4).unwrap(), 100);
        Ledger::new(LedgerParams::default(), genesis, seed).unwrap()
    }

    fn register(node: u32, at: f64) -> LedgerTransaction {
        LedgerTransaction {
            kind: TxKind::Register {
                node: NodeId(node),
                fee: 100,
            },
            submitter: NodeId(node),
            submitted_at: SimTime::secs(at),
        }
    }

    fn vote(voter: u32, config: &Configuration, at: f64) -> LedgerTransaction {
        LedgerTransaction {
            kind: TxKind::Vote {
                config: config.clone(),
                voter: NodeId(voter),
            },
            submitter: NodeId(voter),
            submitted_at: SimTime::secs(at),
        }
    }

    #[test]
    fn zero_delay_lands_in_next_block() {
        let mut params = LedgerParams::default();
        params.inclusion_delay = Moments::new(0.0, 0.0, 0.0);
        let genesis = BmsState::new(Configuration::genesis(4).unwrap(), 100);
        let mut l = Ledger::new(params, genesis, 1).unwrap();
        let id = l.submit(register(9, 0.0));
        assert_eq!(l.tx(id).unwrap().height, 1);
        let out = l.produce_block().unwrap();
        assert_eq!(out.block.txs, vec![id]);
        assert!(out.membership_changed);
    }

    #[test]
    fn empty_blocks_are_produced() {
        let mut l = ledger(2);
        let out = l.produce_block().unwrap();
        assert!(out.block.txs.is_empty());
        assert!(!out.membership_changed);
        assert_eq!(l.head(), 1);
    }

    #[test]
    fn same_seed_same_inclusion_heights() {
        let heights = |seed| {
            let mut l = ledger(seed);
            (0..50)
                .map(|i| {
                    let id = l.submit(register(i, i as f64));
                    l.tx(id).unwrap().height
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(heights(7), heights(7));
        assert_ne!(heights(7), heights(8));
    }

    #[test]
    fn block_interval_mean() {
        let mut l = ledger(3);
        let t = l.block_time(1000).as_secs();
        assert!((t / 1000.0 - 15.0).abs() < 1.0, "{}", t / 1000.0);
        for h in 1..1000 {
            assert!(l.block_time(h) > l.block_time(h - 1));
        }
    }

    #[test]
    fn realized_inclusion_latency_mean() {
        let mut l = ledger(4);
        let mut total = 0.0;
        let n = 4000;
        for i in 0..n {
            let at = i as f64 * 61.3;
            while l.next_block_time() <= SimTime::secs(at) {
                l.produce_block().unwrap();
            }
            let id = l.submit(register(10 + i, at));
            let h = l.tx(id).unwrap().height;
            total += l.block_time(h) - SimTime::secs(at);
        }
        let mean = total / n as f64;
        assert!((mean - 27.7).abs() < 1.0, "{mean}");
    }

    #[test]
    fn txs_execute_in_submission_order() {
        let mut params = LedgerParams::default();
        params.inclusion_delay = Moments::new(0.0, 0.0, 0.0);
        let genesis = BmsState::new(Configuration::genesis(4).unwrap(), 100);
        let mut l = Ledger::new(params, genesis, 5).unwrap();
        let a = l.submit(register(9, 0.0));
        let b = l.submit(register(9, 0.0));
        l.produce_block().unwrap();
        assert!(l.tx(a).unwrap().receipt.as_ref().unwrap().accepted);
        let rb = l.tx(b).unwrap().receipt.clone().unwrap();
        assert!(!rb.accepted);
        assert_eq!(rb.gas_used, l.params().gas.g_base);
    }

    #[test]
    fn confirmation_boundary() {
        let mut params = LedgerParams::default();
        params.inclusion_delay = Moments::new(0.0, 0.0, 0.0);
        let genesis = BmsState::new(Configuration::genesis(4).unwrap(), 100);
        let mut l = Ledger::new(params, genesis, 6).unwrap();
        let id = l.submit(register(9, 0.0));
        l.produce_block().unwrap();
        for _ in 0..36 {
            l.produce_block().unwrap();
        }
        assert!(!l.is_confirmed(id, 37).unwrap());
        l.produce_block().unwrap();
        assert!(l.is_confirmed(id, 37).unwrap());
        assert!(l.is_confirmed(TxId(99), 37).is_err());
        assert_eq!(LedgerParams::default().expected_confirmation_time(), 555.0);
    }

    #[test]
    fn observers_see_by_delay() {
        let mut params = LedgerParams::default();
        params.confirmation_depth = 0;
        let genesis = BmsState::new(Configuration::genesis(4).unwrap(), 100);
        let mut l = Ledger::new(params, genesis, 7).unwrap();
        l.produce_block().unwrap();
        let t1 = l.blocks()[1].produced_at;
        assert_eq!(l.observer_state(t1, 0.0).0, 1);
        assert_eq!(l.observer_state(t1, 0.3).0, 0);
        assert_eq!(l.observer_state(t1 + 0.3, 0.3).0, 1);
    }

    #[test]
    fn confirmed_view_lags_head() {
        let mut params = LedgerParams::default();
        params.inclusion_delay = Moments::new(0.0, 0.0, 0.0);
        params.confirmation_depth = 3;
        let genesis = BmsState::new(Configuration::genesis(4).unwrap(), 100);
        let mut l = Ledger::new(params, genesis, 8).unwrap();
        let c1 = Configuration::new(1, (0..5).map(NodeId)).unwrap();
        l.submit(vote(0, &c1, 0.0));
        l.submit(vote(1, &c1, 0.0));
        l.produce_block().unwrap();
        assert_eq!(l.head_state().config_request(), &c1);
        for h in 1..=4 {
            let t = l.blocks()[h].produced_at;
            let (_, s) = l.observer_state(t, 0.0);
            assert_eq!(s.config_request().number, if h < 4 { 0 } else { 1 });
            l.produce_block().unwrap();
        }
    }

    #[test]
    fn vote_for_someone_else_is_rejected() {
        let mut params = LedgerParams::default();
        params.inclusion_delay = Moments::new(0.0, 0.0, 0.0);
        let genesis = BmsState::new(Configuration::genesis(4).unwrap(), 100);
        let mut l = Ledger::new(params, genesis, 9).unwrap();
        let c1 = Configuration::new(1, (0..5).map(NodeId)).unwrap();
        let mut tx = vote(0, &c1, 0.0);
        tx.submitter = NodeId(7);
        let id = l.submit(tx);
        l.produce_block().unwrap();
        let r = l.tx(id).unwrap().receipt.clone().unwrap();
        assert_eq!(r.effect, TxEffect::BadSignature);
        assert!(r.gas_used > 0);
    }
}
