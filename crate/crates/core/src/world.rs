//! One simulation run: ledger, replicas, joiners, clients and the adversary,
//! all driven by a single event queue.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::adversary::{
    validate_schedule, Behavior, CorruptionEntry, CorruptionSchedule, DropPattern,
    PublishedConfig, Timeline, Trigger,
};
use crate::client::{Client, ClientAction, ClientTimer};
use crate::codec::Encode;
use crate::contract::{BmsState, UpdateEvent};
use crate::error::{Error, Result};
use crate::ledger::{usd_cost, Ledger, LedgerParams, LedgerTransaction, TxEffect, TxId, TxKind};
use crate::membership::{
    overlap_ok, policy_threshold, symmetric_difference, Configuration, NodeId,
};
use crate::metrics::{
    BlockRecord, ClientReport, ConfigRecord, JoinRecord, RunOutput, UpdateRecord, VoteRecord,
};
use crate::node::{
    config_reply_bytes, leave_bytes, Action, CheckpointMode, ClientReply, Ctx, JoinResponse,
    Joiner, Message, NodeParams, ProofOfMisbehavior, ReconfigRequest, Replica, Timer, TobPayload,
};
use crate::scenario::{ChurnOp, ClientSpec, RequestTime, ScenarioConfig};
use crate::sim::{rng_stream, EventQueue, KeyRegistry, SimRng, SimTime};

/// Origin recorded for checkpoint markers.
const ORDERING_SERVICE: NodeId = NodeId(u32::MAX);
/// Clients get ids from here up.
pub const CLIENT_BASE: u32 = 1_000_000;
const DEFAULT_MAX_TIME: f64 = 1e7;
const CLIENT_TIMEOUT: f64 = 10.0;

#[derive(Debug)]
enum Event {
    Block,
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Message,
    },
    TobDeliver(u64),
    CheckpointTick,
    View(NodeId),
    NodeTimer(NodeId, Timer),
    ClientTimer(usize, ClientTimer),
    ClientRequest(usize),
    ChurnStart(usize),
    SeqStart(ChurnOp),
    Corrupt,
}

enum Role {
    /// Declared but not started yet.
    Waiting,
    Joining(Joiner),
    Active(Box<Replica>),
    /// Left the system.
    Retired,
}

struct Slot {
    delay: f64,
    role: Role,
}

#[derive(Default)]
struct JoinMarks {
    submitted: Option<SimTime>,
    register_tx: Option<TxId>,
    ordered: Option<SimTime>,
    applied: Option<SimTime>,
}

struct Corruption {
    /// `None` until the trigger is known.
    at: Option<SimTime>,
    after_retirement: bool,
    behaviors: Vec<Behavior>,
}

struct ClientSlot {
    client: Client,
    spec: ClientSpec,
    delay: f64,
    issued: usize,
}

#[derive(Default)]
struct Tob {
    log: Vec<(NodeId, TobPayload)>,
    in_flight: BTreeMap<u64, (NodeId, TobPayload)>,
    next_id: u64,
    seen: HashSet<[u8; 32]>,
    last_at: SimTime,
}

pub struct World {
    sc: ScenarioConfig,
    ledger_params: LedgerParams,
    q: EventQueue<Event>,
    net_rng: SimRng,
    key_rng: SimRng,
    setup_rng: SimRng,
    churn_rng: SimRng,
    keys: KeyRegistry,
    ledger: Ledger,
    params: NodeParams,
    nodes: BTreeMap<NodeId, Slot>,
    clients: Vec<ClientSlot>,
    tob: Tob,
    corruption: BTreeMap<NodeId, Corruption>,
    marks: BTreeMap<NodeId, JoinMarks>,
    seq_next: usize,
    seq_active: Option<NodeId>,
    /// A sequential operation is scheduled but has not started.
    seq_waiting: bool,
    active_ops: BTreeSet<NodeId>,
    timed_pending: usize,
    next_fresh: u32,
    /// Agreed local configurations with their first installation time.
    history: Vec<(Configuration, SimTime)>,
    published: Vec<(PublishedConfig, u64)>,
    vote_gas: BTreeMap<Configuration, u64>,
    /// `(client, req_id, result)` produced by correct replicas.
    honest: HashSet<(NodeId, u64, u64)>,
    out: RunOutput,
    grace_p: f64,
    error: Option<Error>,
}

impl World {
    pub fn new(sc: ScenarioConfig) -> Result<Self> {
        sc.validate()?;
        let ledger_params = sc.effective_ledger();
        let genesis = sc.genesis()?;
        let bms = BmsState::with_mode(
            genesis.clone(),
            ledger_params.registration_cost,
            sc.voting.clone(),
        );
        let ledger = Ledger::new(ledger_params.clone(), bms, sc.seed)?;
        let revote = sc.revote_timeout();
        let params = NodeParams {
            policy: sc.policy,
            checkpoint: sc.checkpoint,
            revote_timeout: revote,
            confirmation_grace: sc.confirmation_grace,
            join_retry: 2.0 * revote,
            registration_fee: sc.registration_fee(),
            provably_faulty: sc.provably_faulty.iter().copied().collect(),
        };
        let declared = sc.declared_nodes();
        let next_fresh = declared.iter().next_back().map_or(0, |n| n.0 + 1);
        let mut w = World {
            ledger_params,
            q: EventQueue::new(),
            net_rng: rng_stream(sc.seed, 2),
            key_rng: rng_stream(sc.seed, 3),
            setup_rng: rng_stream(sc.seed, 1),
            churn_rng: rng_stream(sc.seed, 4),
            keys: KeyRegistry::new(),
            ledger,
            params,
            nodes: BTreeMap::new(),
            clients: Vec::new(),
            tob: Tob::default(),
            corruption: BTreeMap::new(),
            marks: BTreeMap::new(),
            seq_next: 0,
            seq_active: None,
            seq_waiting: false,
            active_ops: BTreeSet::new(),
            timed_pending: 0,
            next_fresh,
            history: vec![(genesis.clone(), SimTime::ZERO)],
            published: Vec::new(),
            vote_gas: BTreeMap::new(),
            honest: HashSet::new(),
            out: RunOutput {
                name: sc.name.clone(),
                seed: sc.seed,
                ..RunOutput::default()
            },
            grace_p: sc.grace_p(),
            error: None,
            sc,
        };
        for n in declared {
            w.add_node(n);
            if genesis.contains(n) {
                let r = Replica::new(n, genesis.clone(), w.params.clone());
                w.nodes.get_mut(&n).expect("just added").role = Role::Active(Box::new(r));
                w.q.schedule(SimTime::ZERO, Event::View(n))?;
            }
        }
        w.setup_corruption()?;
        w.setup_clients()?;
        let first_block = w.ledger.next_block_time();
        w.q.schedule(first_block, Event::Block)?;
        if let CheckpointMode::Interval { seconds } = w.sc.checkpoint {
            w.q.schedule(SimTime::secs(seconds), Event::CheckpointTick)?;
        }
        for (i, e) in w.sc.churn.iter().enumerate() {
            if let Some(at) = e.at {
                w.q.schedule(SimTime::secs(at), Event::ChurnStart(i))?;
                w.timed_pending += 1;
            }
        }
        Ok(w)
    }

    fn add_node(&mut self, n: NodeId) {
        if self.nodes.contains_key(&n) {
            return;
        }
        self.keys.register(n, &mut self.key_rng);
        let delay = self.setup_rng.random::<f64>() * self.ledger_params.observer_delay_max;
        self.nodes.insert(
            n,
            Slot {
                delay,
                role: Role::Waiting,
            },
        );
    }

    fn setup_corruption(&mut self) -> Result<()> {
        for e in &self.sc.adversary.entries {
            let c = self.corruption.entry(e.node).or_insert(Corruption {
                at: None,
                after_retirement: false,
                behaviors: Vec::new(),
            });
            let at = match e.trigger {
                Trigger::AtStart => Some(SimTime::ZERO),
                Trigger::At(t) => Some(SimTime::secs(t)),
                Trigger::AfterRetirement => {
                    c.after_retirement = true;
                    None
                }
            };
            if let Some(at) = at {
                c.at = Some(c.at.map_or(at, |x| x.min(at)));
            }
            for b in &e.behaviors {
                if !c.behaviors.contains(b) {
                    c.behaviors.push(*b);
                }
            }
        }
        let times: Vec<SimTime> = self.corruption.values().filter_map(|c| c.at).collect();
        for at in times {
            self.q.schedule(at, Event::Corrupt)?;
        }
        Ok(())
    }

    fn setup_clients(&mut self) -> Result<()> {
        let p = self.sc.default_p();
        for (i, spec) in self.sc.clients.clone().into_iter().enumerate() {
            let id = NodeId(CLIENT_BASE + i as u32);
            self.keys.register(id, &mut self.key_rng);
            let delay = self.setup_rng.random::<f64>() * self.ledger_params.observer_delay_max;
            let view = self.ledger.observer_state(SimTime::ZERO, delay).1;
            let client = Client::bootstrap(
                id,
                spec.mode,
                view,
                SimTime::ZERO,
                spec.p_bound.unwrap_or(p),
                CLIENT_TIMEOUT,
            );
            for r in &spec.requests {
                if let RequestTime::At(t) = r {
                    self.q.schedule(SimTime::secs(*t), Event::ClientRequest(i))?;
                }
            }
            self.clients.push(ClientSlot {
                client,
                spec,
                delay,
                issued: 0,
            });
        }
        self.schedule_after_corruption()
    }

    /// Schedules requests that wait for the adversary once every corruption time is known.
    fn schedule_after_corruption(&mut self) -> Result<()> {
        if self.corruption.values().any(|c| c.at.is_none()) {
            return Ok(());
        }
        let last = self
            .corruption
            .values()
            .filter_map(|c| c.at)
            .max()
            .unwrap_or(SimTime::ZERO)
            .max(self.q.now());
        for i in 0..self.clients.len() {
            for r in self.clients[i].spec.requests.clone() {
                if let RequestTime::AfterCorruption(d) = r {
                    self.q.schedule(last + d, Event::ClientRequest(i))?;
                }
            }
        }
        // Only once: mark the requests as scheduled by rewriting them.
        for c in &mut self.clients {
            for r in &mut c.spec.requests {
                if let RequestTime::AfterCorruption(d) = *r {
                    *r = RequestTime::At(last.as_secs() + d);
                }
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let limit = self.sc.max_time.unwrap_or(DEFAULT_MAX_TIME);
        let mut completed = false;
        self.advance()?;
        loop {
            if self.finished() {
                completed = true;
                break;
            }
            match self.q.peek_time() {
                Some(t) if t.as_secs() <= limit => {}
                _ => break,
            }
            let (_, ev) = self.q.pop().expect("peeked");
            self.handle(ev)?;
            if let Some(e) = self.error.take() {
                return Err(e);
            }
            self.advance()?;
        }
        self.check_schedule();
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        Ok(self.finish(completed))
    }

    fn now(&self) -> SimTime {
        self.q.now()
    }

    fn is_corrupt(&self, n: NodeId) -> bool {
        self.corruption
            .get(&n)
            .and_then(|c| c.at)
            .is_some_and(|at| at <= self.now())
    }

    fn has_behavior(&self, n: NodeId, b: Behavior) -> bool {
        self.is_corrupt(n) && self.corruption[&n].behaviors.contains(&b)
    }

    fn fail(&mut self, name: &'static str, detail: String) {
        if self.error.is_none() {
            self.error = Some(Error::Invariant {
                name,
                at: self.now().as_secs(),
                detail,
            });
        }
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::Block => self.on_block()?,
            Event::Deliver { from, to, msg } => self.on_deliver(from, to, msg),
            Event::TobDeliver(id) => {
                let (origin, payload) = self.tob.in_flight.remove(&id).expect("in flight");
                self.tob_deliver(origin, payload);
            }
            Event::CheckpointTick => {
                self.tob_deliver(ORDERING_SERVICE, TobPayload::Checkpoint);
                if let CheckpointMode::Interval { seconds } = self.sc.checkpoint {
                    self.q.schedule_in(seconds, Event::CheckpointTick);
                }
            }
            Event::View(n) => self.on_view(n),
            Event::NodeTimer(n, timer) => self.on_node_timer(n, timer),
            Event::ClientTimer(i, timer) => {
                let now = self.now();
                let c = &mut self.clients[i];
                let view = self.ledger.observer_state(now, c.delay).1;
                let acts = c.client.on_timer(timer, view, now);
                self.apply_client(i, acts);
            }
            Event::ClientRequest(i) => self.on_client_request(i),
            Event::ChurnStart(i) => {
                self.timed_pending -= 1;
                let op = self.sc.churn[i].op;
                self.start_op(op, false);
            }
            Event::SeqStart(op) => {
                self.seq_waiting = false;
                self.start_op(op, true);
            }
            Event::Corrupt => self.check_schedule(),
        }
        Ok(())
    }

    // --- churn -------------------------------------------------------------

    fn seq_remaining(&self) -> bool {
        self.sc.churn[self.seq_next..].iter().any(|e| e.at.is_none())
    }

    fn stored_size(&self) -> usize {
        self.ledger.head_state().config_request().size()
    }

    fn needs_more(&self) -> bool {
        self.sc.target_size.is_some_and(|t| self.stored_size() < t)
    }

    /// No correct member has pending requests or an unpublished backlog of `t` changes.
    fn idle(&self) -> bool {
        self.nodes.iter().all(|(n, s)| match &s.role {
            Role::Active(r) => self.is_corrupt(*n) || !r.is_member() || r.is_idle(),
            _ => true,
        })
    }

    fn clients_done(&self) -> bool {
        self.clients
            .iter()
            .all(|c| c.issued >= c.spec.requests.len() && !c.client.is_busy())
    }

    fn finished(&self) -> bool {
        self.seq_active.is_none()
            && !self.seq_waiting
            && !self.seq_remaining()
            && !self.needs_more()
            && self.active_ops.is_empty()
            && self.timed_pending == 0
            && self.clients_done()
            && self.idle()
    }

    /// Starts the next sequential operation once the previous one is done and the system is idle.
    fn advance(&mut self) -> Result<()> {
        if self.seq_active.is_some() || self.seq_waiting || !self.idle() {
            return Ok(());
        }
        let mut next = None;
        while self.seq_next < self.sc.churn.len() {
            let e = self.sc.churn[self.seq_next];
            self.seq_next += 1;
            if e.at.is_none() {
                next = Some(e.op);
                break;
            }
        }
        if next.is_none() && self.needs_more() {
            let n = NodeId(self.next_fresh);
            self.next_fresh += 1;
            next = Some(ChurnOp::Join { node: n });
        }
        let Some(op) = next else {
            return Ok(());
        };
        let gap = self.churn_rng.random::<f64>() * self.sc.churn_gap_max;
        self.seq_waiting = true;
        self.q.schedule_in(gap, Event::SeqStart(op));
        Ok(())
    }

    fn start_op(&mut self, op: ChurnOp, sequential: bool) {
        let node = op.node();
        self.active_ops.insert(node);
        if sequential {
            self.seq_active = Some(node);
        }
        match op {
            ChurnOp::Join { node } => {
                self.add_node(node);
                let slot = self.nodes.get_mut(&node).expect("added");
                if !matches!(slot.role, Role::Waiting | Role::Retired) {
                    self.fail("churn", format!("{node} cannot join while active"));
                    return;
                }
                let mut j = Joiner::new(node, self.params.clone());
                let acts = j.start();
                slot.role = Role::Joining(j);
                self.marks.insert(
                    node,
                    JoinMarks {
                        submitted: Some(self.now()),
                        ..JoinMarks::default()
                    },
                );
                self.apply(node, acts);
            }
            ChurnOp::Leave { node } => {
                let sig = self.keys.sign(node, &leave_bytes(node)).expect("registered");
                self.submit_request(node, ReconfigRequest::Leave { node, sig });
            }
            ChurnOp::Evict { node, by } => {
                let pom = ProofOfMisbehavior {
                    accused: node,
                    evidence: b"equivocation".to_vec(),
                };
                self.submit_request(by, ReconfigRequest::Evict { node, pom });
            }
        }
    }

    /// `sender` hands `req` to every member it knows and broadcasts it itself.
    fn submit_request(&mut self, sender: NodeId, req: ReconfigRequest) {
        let members = match self.nodes.get(&sender).map(|s| &s.role) {
            Some(Role::Active(r)) => r.state.c_cur.clone(),
            _ => {
                self.fail("churn", format!("{sender} is not an active replica"));
                return;
            }
        };
        let mut acts: Vec<Action> = members
            .members()
            .iter()
            .filter(|m| **m != sender)
            .map(|m| Action::Send {
                to: *m,
                msg: Message::Submit(req.clone()),
            })
            .collect();
        acts.push(Action::Broadcast(TobPayload::Request(req)));
        self.apply(sender, acts);
    }

    fn complete_op(&mut self, node: NodeId) {
        self.active_ops.remove(&node);
        if self.seq_active == Some(node) {
            self.seq_active = None;
        }
    }

    // --- actions -----------------------------------------------------------

    fn bogus(&self, c: &Configuration) -> Configuration {
        let coalition: Vec<NodeId> = self
            .corruption
            .keys()
            .copied()
            .filter(|n| self.has_behavior(*n, Behavior::VoteBogus))
            .collect();
        Configuration::new(c.number, coalition).unwrap_or_else(|_| c.clone())
    }

    fn filter(&self, n: NodeId, a: Action) -> Option<Action> {
        if !self.is_corrupt(n) {
            return Some(a);
        }
        let mut a = a;
        for b in &self.corruption[&n].behaviors {
            a = match (b, a) {
                (
                    Behavior::Silent,
                    Action::Send { .. } | Action::Broadcast(_) | Action::Vote(_) | Action::Register { .. },
                ) => return None,
                (Behavior::WithholdVote, Action::Vote(_)) => return None,
                (Behavior::VoteBogus, Action::Vote(c)) => Action::Vote(self.bogus(&c)),
                (Behavior::DropMessages(p), a) => {
                    let drop = match (p, &a) {
                        (DropPattern::All, Action::Send { .. } | Action::Broadcast(_)) => true,
                        (DropPattern::RegisterConfirms, Action::Send { msg, .. }) => {
                            matches!(msg, Message::RegisterConfirm { .. })
                        }
                        (DropPattern::FinalResponses, Action::Send { msg, .. }) => {
                            matches!(msg, Message::FinalResponse { .. })
                        }
                        (DropPattern::ClientReplies, Action::Send { msg, .. }) => {
                            matches!(msg, Message::ClientReply { .. })
                        }
                        _ => false,
                    };
                    if drop {
                        return None;
                    }
                    a
                }
                (_, a) => a,
            };
        }
        Some(a)
    }

    fn apply(&mut self, n: NodeId, acts: Vec<Action>) {
        let correct = !self.is_corrupt(n);
        for a in acts {
            let Some(a) = self.filter(n, a) else {
                continue;
            };
            match a {
                Action::Send { to, msg } => {
                    if let (true, Message::ClientReply { reply, .. }) = (correct, &msg) {
                        self.honest.insert((to, reply.req_id, reply.result));
                    }
                    self.send(n, to, msg);
                }
                Action::Broadcast(p) => self.tob_broadcast(n, p),
                Action::Vote(config) => {
                    self.ledger.submit(LedgerTransaction {
                        kind: TxKind::Vote { config, voter: n },
                        submitter: n,
                        submitted_at: self.now(),
                    });
                }
                Action::Register { fee } => {
                    let id = self.ledger.submit(LedgerTransaction {
                        kind: TxKind::Register { node: n, fee },
                        submitter: n,
                        submitted_at: self.now(),
                    });
                    self.marks.entry(n).or_default().register_tx = Some(id);
                }
                Action::Timer { after, timer } => self.q.schedule_in(after, Event::NodeTimer(n, timer)),
                Action::Applied { request, config } => {
                    if correct {
                        self.on_applied(request, config);
                    }
                }
                Action::Activate(response) => self.activate(n, *response),
            }
        }
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: Message) {
        let now = self.now();
        if let Some(at) = self.sc.network.delivery_time(now, &mut self.net_rng) {
            self.q
                .schedule(at, Event::Deliver { from, to, msg })
                .expect("delivery is never in the past");
        }
    }

    fn apply_client(&mut self, i: usize, acts: Vec<ClientAction>) {
        let id = self.clients[i].client.id;
        for a in acts {
            match a {
                ClientAction::Send { to, msg } => self.send(id, to, msg),
                ClientAction::Timer { after, timer } => {
                    self.q.schedule_in(after, Event::ClientTimer(i, timer))
                }
            }
        }
    }

    // --- total-order broadcast ---------------------------------------------

    fn tob_broadcast(&mut self, origin: NodeId, payload: TobPayload) {
        let digest: [u8; 32] = Sha256::digest(payload.encode()).into();
        if !self.tob.seen.insert(digest) {
            return;
        }
        let start = self.now().max(self.sc.network.gst());
        let at = (start + self.sc.tob_latency).max(self.tob.last_at);
        self.tob.last_at = at;
        let id = self.tob.next_id;
        self.tob.next_id += 1;
        self.tob.in_flight.insert(id, (origin, payload));
        self.q.schedule(at, Event::TobDeliver(id)).expect("future delivery");
    }

    fn tob_deliver(&mut self, origin: NodeId, payload: TobPayload) {
        self.tob.log.push((origin, payload.clone()));
        let now = self.now();
        let mut outs = Vec::new();
        for (id, slot) in self.nodes.iter_mut() {
            if let Role::Active(r) = &mut slot.role {
                let view = self.ledger.observer_state(now, slot.delay).1;
                let ctx = Ctx {
                    now,
                    keys: &self.keys,
                    view,
                };
                outs.push((*id, r.on_tob(origin, &payload, &ctx)));
            }
        }
        if let TobPayload::Request(ReconfigRequest::Join { node, .. }) = &payload {
            let accepted = self.nodes.iter().any(|(id, s)| match &s.role {
                Role::Active(r) if !self.is_corrupt(*id) => {
                    r.state.c_cur.contains(*node)
                        || r.state.pending_requests.iter().any(|p| p.is_join() && p.node() == *node)
                }
                _ => false,
            });
            if accepted {
                if let Some(m) = self.marks.get_mut(node) {
                    m.ordered.get_or_insert(now);
                }
            }
        }
        for (id, acts) in outs {
            self.apply(id, acts);
        }
        for slot in self.nodes.values_mut() {
            if matches!(&slot.role, Role::Active(r) if !r.is_member()) {
                slot.role = Role::Retired;
            }
        }
    }

    // --- node events -------------------------------------------------------

    fn on_view(&mut self, n: NodeId) {
        let now = self.now();
        let Some(slot) = self.nodes.get_mut(&n) else {
            return;
        };
        let view = self.ledger.observer_state(now, slot.delay).1;
        let ctx = Ctx {
            now,
            keys: &self.keys,
            view,
        };
        let acts = match &mut slot.role {
            Role::Active(r) => r.on_ledger_view(&ctx),
            Role::Joining(j) => j.on_ledger_view(&ctx),
            _ => vec![],
        };
        self.apply(n, acts);
    }

    fn on_node_timer(&mut self, n: NodeId, timer: Timer) {
        let now = self.now();
        let Some(slot) = self.nodes.get_mut(&n) else {
            return;
        };
        let view = self.ledger.observer_state(now, slot.delay).1;
        let ctx = Ctx {
            now,
            keys: &self.keys,
            view,
        };
        let acts = match &mut slot.role {
            Role::Active(r) => r.on_timer(timer),
            Role::Joining(j) => j.on_timer(timer, &ctx),
            _ => vec![],
        };
        self.apply(n, acts);
    }

    /// Forged answers of a corrupted node; `None` lets the node behave normally.
    fn adversary_answer(&mut self, n: NodeId, from: NodeId, msg: &Message) -> Option<()> {
        if self.has_behavior(n, Behavior::Silent) {
            return Some(());
        }
        match msg {
            Message::ConfigQuery if self.has_behavior(n, Behavior::ForgeConfigResponse) => {
                let coalition: Vec<NodeId> = self
                    .corruption
                    .keys()
                    .copied()
                    .filter(|m| self.has_behavior(*m, Behavior::ForgeConfigResponse))
                    .collect();
                let number = self.history.last().map_or(0, |(c, _)| c.number) + 1;
                let config = Configuration::new(number, coalition).ok()?;
                let tag = self.keys.sign(n, &config_reply_bytes(&config)).ok()?;
                self.send(n, from, Message::ConfigReply { config, tag });
                Some(())
            }
            Message::ClientRequest { req_id, .. } if self.has_behavior(n, Behavior::StaleQuorum) => {
                let reply = ClientReply {
                    req_id: *req_id,
                    result: u64::MAX - req_id,
                };
                let tag = self.keys.sign(n, &reply.encode()).ok()?;
                self.send(n, from, Message::ClientReply { reply, tag });
                Some(())
            }
            _ => None,
        }
    }

    fn on_deliver(&mut self, from: NodeId, to: NodeId, msg: Message) {
        let now = self.now();
        if to.0 >= CLIENT_BASE {
            let i = (to.0 - CLIENT_BASE) as usize;
            let Some(c) = self.clients.get_mut(i) else {
                return;
            };
            let acts = c.client.on_message(from, &msg, &self.keys, now);
            self.apply_client(i, acts);
            return;
        }
        if self.is_corrupt(to) && self.adversary_answer(to, from, &msg).is_some() {
            return;
        }
        let Some(slot) = self.nodes.get_mut(&to) else {
            return;
        };
        let view = self.ledger.observer_state(now, slot.delay).1;
        let ctx = Ctx {
            now,
            keys: &self.keys,
            view,
        };
        let acts = match &mut slot.role {
            Role::Active(r) => r.on_message(from, &msg, &ctx),
            Role::Joining(j) => j.on_message(from, &msg, &ctx),
            _ => vec![],
        };
        self.apply(to, acts);
    }

    fn on_client_request(&mut self, i: usize) {
        let now = self.now();
        let c = &mut self.clients[i];
        if c.client.is_busy() {
            self.q.schedule_in(1.0, Event::ClientRequest(i));
            return;
        }
        c.issued += 1;
        let view = self.ledger.observer_state(now, c.delay).1;
        let acts = c.client.submit(1, view, now);
        self.apply_client(i, acts);
    }

    fn on_applied(&mut self, request: ReconfigRequest, config: Configuration) {
        let k = config.number as usize;
        if k < self.history.len() {
            if self.history[k].0 != config {
                self.fail(
                    "agreement",
                    format!("installed {config}, others installed {}", self.history[k].0),
                );
            }
            return;
        }
        let prev = &self.history.last().expect("genesis").0;
        if k > self.history.len() || symmetric_difference(prev, &config) != 1 {
            self.fail("single-change", format!("{config} does not follow {prev}"));
            return;
        }
        let stored = self.ledger.head_state().config_request();
        if !self.sc.allow_unpublishable && !overlap_ok(stored, &config) {
            self.fail("publishable", format!("{config} no longer overlaps stored {stored}"));
            return;
        }
        let now = self.now();
        self.history.push((config, now));
        match request {
            ReconfigRequest::Join { node, .. } => {
                if let Some(m) = self.marks.get_mut(&node) {
                    m.applied.get_or_insert(now);
                }
            }
            ReconfigRequest::Leave { node, .. } | ReconfigRequest::Evict { node, .. } => {
                self.complete_op(node)
            }
        }
        self.check_schedule();
    }

    fn activate(&mut self, n: NodeId, response: JoinResponse) {
        let now = self.now();
        let Some(slot) = self.nodes.get_mut(&n) else {
            return;
        };
        let proof_ready = match &slot.role {
            Role::Joining(j) => j.proof_ready_at,
            _ => return,
        };
        let mut r = Replica::from_response(n, &response, self.params.clone());
        r.set_replaying(true);
        let mut outs = Vec::new();
        let view = self.ledger.observer_state(now, slot.delay).1;
        let ctx = Ctx {
            now,
            keys: &self.keys,
            view,
        };
        for (origin, payload) in self.tob.log.iter().skip(response.log_position as usize) {
            outs.extend(r.on_tob(*origin, payload, &ctx));
        }
        r.set_replaying(false);
        slot.role = Role::Active(Box::new(r));
        self.apply(n, outs);
        self.record_join(n, &response, proof_ready);
        self.complete_op(n);
        self.on_view(n);
    }

    fn record_join(&mut self, n: NodeId, response: &JoinResponse, proof_ready: Option<SimTime>) {
        let now = self.now();
        let Some(m) = self.marks.remove(&n) else {
            return;
        };
        let included = m
            .register_tx
            .and_then(|id| self.ledger.tx(id).ok())
            .and_then(|r| r.receipt.as_ref())
            .map(|r| r.included_height);
        let (Some(submitted), Some(h)) = (m.submitted, included) else {
            return;
        };
        let inclusion = self.ledger.block_time(h);
        let proof_ready = proof_ready.unwrap_or(now);
        let ordered = m.ordered.unwrap_or(proof_ready);
        let applied = m.applied.unwrap_or(now);
        let confirm = if self.sc.skip_confirmation {
            let depth = self.sc.ledger.confirmation_depth;
            self.ledger.block_time(h + depth) - inclusion
        } else {
            proof_ready - inclusion
        };
        self.out.joins.push(JoinRecord {
            size: response.config.size(),
            t: policy_threshold(self.sc.policy, &response.config),
            tx_latency_s: inclusion - submitted,
            confirm_latency_s: confirm,
            ordering_latency_s: ordered - proof_ready,
            checkpoint_latency_s: applied - ordered,
            node: n,
            joined_at: now.as_secs(),
        });
    }

    // --- ledger ------------------------------------------------------------

    fn on_block(&mut self) -> Result<()> {
        let outcome = self.ledger.produce_block()?;
        let h = outcome.block.height;
        let time = outcome.block.produced_at.as_secs();
        for id in &outcome.block.txs {
            let rec = self.ledger.tx(*id)?.clone();
            let receipt = rec.receipt.expect("executed");
            if self.sc.trace_blocks {
                self.out.blocks.push(BlockRecord {
                    height: h,
                    time,
                    tx_kind: rec.tx.kind.label().into(),
                    gas_used: receipt.gas_used,
                    accepted: receipt.accepted,
                });
            }
            if let (TxEffect::VoteCounted { first, updates }, TxKind::Vote { config, voter }) =
                (receipt.effect, &rec.tx.kind)
            {
                *self.vote_gas.entry(config.clone()).or_default() += receipt.gas_used;
                self.out.votes.push(VoteRecord {
                    size: config.size(),
                    config_number: config.number,
                    gas_used: receipt.gas_used,
                    is_first_vote: first,
                    is_update_vote: !updates.is_empty(),
                    voter: *voter,
                    height: h,
                });
                for u in updates {
                    self.on_publish(u, h)?;
                }
            }
        }
        if outcome.membership_changed {
            let at = self.ledger.confirmation_time(h);
            for (n, slot) in &self.nodes {
                if matches!(slot.role, Role::Active(_) | Role::Joining(_)) {
                    self.q.schedule(at + slot.delay, Event::View(*n))?;
                }
            }
        }
        let next = self.ledger.next_block_time();
        self.q.schedule(next, Event::Block)?;
        Ok(())
    }

    fn on_publish(&mut self, u: UpdateEvent, h: u64) -> Result<()> {
        let published_at =
            self.ledger.confirmation_time(h).as_secs() + self.ledger_params.observer_delay_max;
        let total = self.vote_gas.get(&u.installed).copied().unwrap_or(0);
        let changes = symmetric_difference(&u.previous, &u.installed).max(1);
        let joiners = u
            .installed
            .members()
            .difference(u.previous.members())
            .count();
        self.out.updates.push(UpdateRecord {
            size: u.installed.size(),
            joiners,
            total_gas: total,
            gas_per_join: total as f64 / changes as f64,
            usd_per_join: usd_cost(total, &self.sc.price) / changes as f64,
            previous_size: u.previous.size(),
            changes,
            config_number: u.installed.number,
            voters: u.voters.len(),
            height: h,
        });
        let floor = u.installed.number;
        self.vote_gas.retain(|c, _| c.number > floor);
        self.published.push((
            PublishedConfig {
                config: u.installed,
                published_at,
            },
            h,
        ));
        self.resolve_retirements()
    }

    fn timeline(&self) -> Timeline {
        let mut published = vec![PublishedConfig {
            config: self.history[0].0.clone(),
            published_at: 0.0,
        }];
        published.extend(self.published.iter().map(|(p, _)| p.clone()));
        Timeline {
            published,
            local: self
                .history
                .iter()
                .map(|(c, at)| (c.clone(), at.as_secs()))
                .collect(),
        }
    }

    fn resolve_retirements(&mut self) -> Result<()> {
        let timeline = self.timeline();
        let mut newly = Vec::new();
        for (n, c) in self.corruption.iter_mut() {
            if c.after_retirement && c.at.is_none() {
                if let Some(r) = timeline.retirement(*n) {
                    let at = SimTime::secs(r + self.grace_p);
                    c.at = Some(at);
                    newly.push(at);
                }
            }
        }
        if newly.is_empty() {
            return Ok(());
        }
        for at in newly {
            self.q.schedule(at, Event::Corrupt)?;
        }
        self.schedule_after_corruption()
    }

    /// Runtime check of the fault bound against the configurations seen so far.
    fn check_schedule(&mut self) {
        let now = self.now();
        let entries: Vec<CorruptionEntry> = self
            .corruption
            .iter()
            .filter_map(|(n, c)| {
                c.at.filter(|at| *at <= now).map(|at| CorruptionEntry {
                    node: *n,
                    trigger: Trigger::At(at.as_secs()),
                    behaviors: c.behaviors.clone(),
                })
            })
            .collect();
        if entries.is_empty() {
            return;
        }
        let s = CorruptionSchedule {
            entries,
            grace_p: None,
        };
        if let Err(v) = validate_schedule(&s, &self.timeline(), self.grace_p) {
            self.error.get_or_insert(Error::Schedule(v));
        }
    }

    fn finish(mut self, completed: bool) -> RunOutput {
        let published: BTreeMap<u64, (f64, u64)> = self
            .published
            .iter()
            .map(|(p, h)| (p.config.number, (p.published_at, *h)))
            .collect();
        self.out.configs = self
            .history
            .iter()
            .map(|(c, at)| ConfigRecord {
                number: c.number,
                size: c.size(),
                installed_at_s: at.as_secs(),
                published_at_s: if c.number == 0 {
                    Some(0.0)
                } else {
                    published.get(&c.number).map(|p| p.0)
                },
                published_height: if c.number == 0 {
                    Some(0)
                } else {
                    published.get(&c.number).map(|p| p.1)
                },
            })
            .collect();
        for slot in &self.clients {
            let c = &slot.client;
            let forged = c
                .accepted
                .iter()
                .filter(|a| !self.honest.contains(&(c.id, a.req_id, a.reply.result)))
                .count();
            self.out.clients.push(ClientReport {
                id: c.id,
                mode: c.mode,
                requests: slot.issued,
                accepted: c.accepted.len(),
                forged,
                last_config: c.accepted.last().map(|a| a.config.number),
            });
        }
        let stored = self.ledger.head_state().config_request();
        self.out.completed = completed;
        self.out.end_time = self.now().as_secs();
        self.out.final_size = self.history.last().expect("genesis").0.size();
        self.out.stored_number = stored.number;
        self.out.stored_size = stored.size();
        self.out
    }
}

/// Runs one scenario to completion or to its time limit.
pub fn run_scenario(sc: &ScenarioConfig) -> Result<RunOutput> {
    World::new(sc.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::membership::Policy;

    fn sweep(policy: Policy, to: usize, seed: u64) -> RunOutput {
        let sc = ScenarioConfig {
            seed,
            policy,
            target_size: Some(to),
            ..ScenarioConfig::default()
        };
        run_scenario(&sc).unwrap()
    }

    #[test]
    fn small_sweep_publishes_every_join() {
        let out = sweep(Policy::Every, 8, 1);
        assert!(out.completed);
        assert_eq!(out.joins.len(), 4);
        assert_eq!(out.stored_size, 8);
        assert_eq!(out.updates.len(), 4);
        for (j, size) in out.joins.iter().zip(5..) {
            assert_eq!(j.size, size);
            assert!(j.tx_latency_s > 0.0 && j.confirm_latency_s > 400.0, "{j:?}");
            assert!((0.95..=1.0).contains(&j.ordering_latency_s), "{j:?}");
            assert!(j.checkpoint_latency_s <= 20.0 + 1e-9, "{j:?}");
        }
    }
}
