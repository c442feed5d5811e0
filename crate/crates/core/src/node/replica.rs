use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{
    confirm_bytes, config_reply_bytes, leave_bytes, queue_to_vec, Action, CheckpointMode,
    ClientReply, Ctx, JoinResponse, Message, NodeParams, ProtocolData, ReconfigRequest, Timer,
    TobPayload,
};
use crate::codec::Encode;
use crate::membership::{
    max_faults, policy_threshold, symmetric_difference, Configuration, NodeId,
};

/// Replicated protocol state. Identical on every correct member after each
/// delivered payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub c_cur: Configuration,
    pub c_last_voted: Configuration,
    pub pending_requests: VecDeque<ReconfigRequest>,
    pub observed_config: BTreeMap<Configuration, BTreeSet<NodeId>>,
    /// Latest configuration agreed to be stored at the membership service.
    pub bms_latest: Configuration,
    /// Counter application.
    pub app_state: u64,
    pub log_position: u64,
    pub delivered_since_checkpoint: u32,
}

impl NodeState {
    pub fn genesis(c0: Configuration) -> Self {
        NodeState {
            c_last_voted: c0.clone(),
            bms_latest: c0.clone(),
            c_cur: c0,
            pending_requests: VecDeque::new(),
            observed_config: BTreeMap::new(),
            app_state: 0,
            log_position: 0,
            delivered_since_checkpoint: 0,
        }
    }

    pub fn from_response(r: &JoinResponse) -> Self {
        let app_state = u64::from_le_bytes(
            r.app_state
                .get(..8)
                .and_then(|b| b.try_into().ok())
                .unwrap_or_default(),
        );
        NodeState {
            c_cur: r.config.clone(),
            c_last_voted: r.protocol.last_voted.clone(),
            pending_requests: r.protocol.pending.iter().cloned().collect(),
            observed_config: r
                .protocol
                .observed
                .iter()
                .map(|(c, who)| (c.clone(), who.iter().copied().collect()))
                .collect(),
            bms_latest: r.protocol.bms_latest.clone(),
            app_state,
            log_position: r.log_position,
            delivered_since_checkpoint: 0,
        }
    }

    pub fn response(&self) -> JoinResponse {
        JoinResponse {
            app_state: self.app_state.encode(),
            config: self.c_cur.clone(),
            log_position: self.log_position,
            protocol: ProtocolData {
                last_voted: self.c_last_voted.clone(),
                bms_latest: self.bms_latest.clone(),
                pending: queue_to_vec(&self.pending_requests),
                observed: self
                    .observed_config
                    .iter()
                    .map(|(c, who)| (c.clone(), who.iter().copied().collect()))
                    .collect(),
            },
        }
    }
}

/// Highest-numbered configuration observed by at least `f(c_cur) + 1`
/// current members, or `fallback` if none is newer.
pub fn latest_bms_config(
    observed: &BTreeMap<Configuration, BTreeSet<NodeId>>,
    c_cur: &Configuration,
    fallback: &Configuration,
) -> Configuration {
    let need = max_faults(c_cur) + 1;
    observed
        .iter()
        .rev()
        .filter(|(c, who)| {
            c.number > fallback.number
                && who.iter().filter(|p| c_cur.contains(**p)).count() >= need
        })
        .map(|(c, _)| c.clone())
        .next()
        .unwrap_or_else(|| fallback.clone())
}

#[derive(Debug, Clone)]
pub struct Replica {
    pub id: NodeId,
    pub state: NodeState,
    params: NodeParams,
    /// Stored configuration in this node's own confirmed ledger view.
    seen_locally: Option<Configuration>,
    /// Joiners that announced before their registration was visible here.
    awaiting_registration: BTreeSet<NodeId>,
    /// Set while replaying the log after a state transfer; outputs are suppressed.
    replaying: bool,
}

impl Replica {
    pub fn new(id: NodeId, genesis: Configuration, params: NodeParams) -> Self {
        Replica {
            id,
            state: NodeState::genesis(genesis),
            params,
            seen_locally: None,
            awaiting_registration: BTreeSet::new(),
            replaying: false,
        }
    }

    pub fn from_response(id: NodeId, response: &JoinResponse, params: NodeParams) -> Self {
        Replica {
            id,
            state: NodeState::from_response(response),
            params,
            seen_locally: None,
            awaiting_registration: BTreeSet::new(),
            replaying: false,
        }
    }

    pub fn params(&self) -> &NodeParams {
        &self.params
    }

    pub fn is_member(&self) -> bool {
        self.state.c_cur.contains(self.id)
    }

    pub fn set_replaying(&mut self, on: bool) {
        self.replaying = on;
    }

    pub fn threshold(&self) -> usize {
        policy_threshold(self.params.policy, &self.state.c_cur)
    }

    /// Nothing pending and the membership service close enough to allow new requests.
    pub fn is_idle(&self) -> bool {
        self.state.pending_requests.is_empty()
            && symmetric_difference(&self.state.bms_latest, &self.state.c_cur) < self.threshold()
    }

    /// Reacts to this node's confirmed ledger view moving forward.
    pub fn on_ledger_view(&mut self, ctx: &Ctx) -> Vec<Action> {
        let mut out = Vec::new();
        let stored = ctx.view.config_request();
        if self.seen_locally.as_ref() != Some(stored) {
            self.seen_locally = Some(stored.clone());
            out.push(Action::Broadcast(TobPayload::BmsConfig {
                config: stored.clone(),
                observer: self.id,
            }));
        }
        let ready: Vec<NodeId> = self
            .awaiting_registration
            .iter()
            .copied()
            .filter(|j| ctx.view.is_registered(*j))
            .collect();
        for j in ready {
            self.awaiting_registration.remove(&j);
            out.push(self.confirm(j, ctx));
        }
        out
    }

    fn confirm(&self, joiner: NodeId, ctx: &Ctx) -> Action {
        let tag = ctx
            .keys
            .sign(self.id, &confirm_bytes(joiner))
            .expect("replica key registered");
        Action::Send {
            to: joiner,
            msg: Message::RegisterConfirm { joiner, tag },
        }
    }

    pub fn on_message(&mut self, from: NodeId, msg: &Message, ctx: &Ctx) -> Vec<Action> {
        match msg {
            Message::RegisterAnnounce => {
                if ctx.view.is_registered(from) {
                    vec![self.confirm(from, ctx)]
                } else {
                    self.awaiting_registration.insert(from);
                    vec![]
                }
            }
            Message::Submit(req) => vec![Action::Broadcast(TobPayload::Request(req.clone()))],
            Message::ClientRequest { req_id, op } => vec![Action::Broadcast(TobPayload::ClientOp {
                client: from,
                req_id: *req_id,
                op: *op,
            })],
            Message::ConfigQuery => {
                let config = self.state.c_cur.clone();
                let tag = ctx
                    .keys
                    .sign(self.id, &config_reply_bytes(&config))
                    .expect("replica key registered");
                vec![Action::Send {
                    to: from,
                    msg: Message::ConfigReply { config, tag },
                }]
            }
            Message::RegisterConfirm { .. }
            | Message::FinalResponse { .. }
            | Message::ClientReply { .. }
            | Message::ConfigReply { .. } => vec![],
        }
    }

    fn valid(&self, req: &ReconfigRequest, ctx: &Ctx) -> bool {
        let c = &self.state.c_cur;
        let queued = |node: NodeId| self.state.pending_requests.iter().any(|r| r.node() == node);
        match req {
            ReconfigRequest::Join { node, proof } => {
                proof.subject == *node
                    && !c.contains(*node)
                    && !queued(*node)
                    && proof.is_valid(c, ctx.keys)
            }
            ReconfigRequest::Leave { node, sig } => {
                c.contains(*node) && !queued(*node) && ctx.keys.check(*node, &leave_bytes(*node), sig)
            }
            ReconfigRequest::Evict { node, pom } => {
                pom.accused == *node
                    && c.contains(*node)
                    && !queued(*node)
                    && self.params.provably_faulty.contains(node)
            }
        }
    }

    /// Handles a payload delivered by total-order broadcast from `origin`.
    pub fn on_tob(&mut self, origin: NodeId, payload: &TobPayload, ctx: &Ctx) -> Vec<Action> {
        self.state.log_position += 1;
        let mut out = Vec::new();
        match payload {
            TobPayload::Request(req) => {
                if self.valid(req, ctx) {
                    self.state.pending_requests.push_back(req.clone());
                }
                self.state.delivered_since_checkpoint += 1;
                if let CheckpointMode::Requests { count } = self.params.checkpoint {
                    if self.state.delivered_since_checkpoint >= count {
                        out.extend(self.checkpoint(ctx));
                    }
                }
            }
            TobPayload::BmsConfig { config, observer } => {
                if *observer == origin {
                    self.observe(config, *observer);
                }
            }
            TobPayload::ClientOp { client, req_id, .. } => {
                self.state.app_state += 1;
                let reply = ClientReply {
                    req_id: *req_id,
                    result: self.state.app_state,
                };
                let tag = ctx
                    .keys
                    .sign(self.id, &reply.encode())
                    .expect("replica key registered");
                out.push(Action::Send {
                    to: *client,
                    msg: Message::ClientReply { reply, tag },
                });
            }
            TobPayload::Checkpoint => {
                if matches!(self.params.checkpoint, CheckpointMode::Interval { .. }) {
                    out.extend(self.checkpoint(ctx));
                }
            }
        }
        if self.replaying {
            out.retain(|a| matches!(a, Action::Applied { .. }));
        }
        out
    }

    /// Records one observation. Only `config` changed, so only it can become
    /// the new latest configuration.
    fn observe(&mut self, config: &Configuration, observer: NodeId) {
        let s = &mut self.state;
        let who = s.observed_config.entry(config.clone()).or_default();
        who.insert(observer);
        if config.number <= s.bms_latest.number {
            return;
        }
        let need = max_faults(&s.c_cur) + 1;
        if who.iter().filter(|p| s.c_cur.contains(**p)).count() >= need {
            s.bms_latest = config.clone();
            let floor = config.number;
            s.observed_config.retain(|c, _| c.number >= floor);
        }
    }

    fn refresh_latest(&mut self) {
        let latest = latest_bms_config(
            &self.state.observed_config,
            &self.state.c_cur,
            &self.state.bms_latest,
        );
        if latest != self.state.bms_latest {
            self.state.bms_latest = latest;
            let floor = self.state.bms_latest.number;
            self.state.observed_config.retain(|c, _| c.number >= floor);
        }
    }

    /// Applies pending requests while the membership service is close enough
    /// to the current configuration, then answers the nodes that joined.
    pub fn checkpoint(&mut self, ctx: &Ctx) -> Vec<Action> {
        self.state.delivered_since_checkpoint = 0;
        let mut out = Vec::new();
        let mut joined = Vec::new();
        while !self.state.pending_requests.is_empty()
            && symmetric_difference(&self.state.bms_latest, &self.state.c_cur) < self.threshold()
        {
            let req = self.state.pending_requests.pop_front().expect("non-empty");
            let next = match &req {
                ReconfigRequest::Join { node, .. } => {
                    if self.state.c_cur.contains(*node) {
                        continue;
                    }
                    joined.push(*node);
                    self.state.c_cur.with_member(*node)
                }
                ReconfigRequest::Leave { node, .. } | ReconfigRequest::Evict { node, .. } => {
                    match self.state.c_cur.without_member(*node) {
                        Ok(c) if self.state.c_cur.contains(*node) => c,
                        _ => continue,
                    }
                }
            };
            self.state.c_cur = next;
            // The set of members whose observations count has changed.
            self.refresh_latest();
            out.push(Action::Applied {
                request: req,
                config: self.state.c_cur.clone(),
            });
            out.extend(self.maybe_vote());
        }
        if !joined.is_empty() && self.is_member() {
            let response = self.state.response();
            let tag = ctx
                .keys
                .sign(self.id, &response.encode())
                .expect("replica key registered");
            for j in joined.into_iter().filter(|j| self.state.c_cur.contains(*j)) {
                out.push(Action::Send {
                    to: j,
                    msg: Message::FinalResponse {
                        response: Box::new(response.clone()),
                        tag,
                    },
                });
            }
        }
        out
    }

    fn maybe_vote(&mut self) -> Vec<Action> {
        if symmetric_difference(&self.state.c_last_voted, &self.state.c_cur) < self.threshold() {
            return vec![];
        }
        self.state.c_last_voted = self.state.c_cur.clone();
        if !self.is_member() {
            return vec![];
        }
        vec![
            Action::Vote(self.state.c_cur.clone()),
            Action::Timer {
                after: self.params.revote_timeout,
                timer: Timer::Revote {
                    number: self.state.c_cur.number,
                },
            },
        ]
    }

    pub fn on_timer(&mut self, timer: Timer) -> Vec<Action> {
        let Timer::Revote { number } = timer else {
            return vec![];
        };
        let s = &self.state;
        let superseded = s.c_last_voted.number != number || s.c_cur != s.c_last_voted;
        if superseded || s.bms_latest.number >= number || !s.bms_latest.contains(self.id) {
            return vec![];
        }
        vec![
            Action::Vote(s.c_cur.clone()),
            Action::Timer {
                after: self.params.revote_timeout,
                timer,
            },
        ]
    }
}
