//! Reconfigurable BFT replica, its joining driver, and the messages they exchange.

mod joiner;
mod replica;

pub use joiner::{JoinPhase, Joiner};
pub use replica::{latest_bms_config, NodeState, Replica};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::Encode;
use crate::contract::BmsState;
use crate::membership::{Configuration, NodeId, Policy};
use crate::sim::{KeyRegistry, SimTime, Tag};

/// When replicas take a checkpoint and apply pending reconfigurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    /// Every `seconds` of simulated time.
    Interval { seconds: f64 },
    /// After every `count` delivered requests.
    Requests { count: u32 },
}

impl Default for CheckpointMode {
    fn default() -> Self {
        CheckpointMode::Interval { seconds: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub policy: Policy,
    pub checkpoint: CheckpointMode,
    /// A vote not reflected at the membership service after this long is resubmitted.
    pub revote_timeout: f64,
    /// How long a joiner keeps collecting confirmations after reaching the minimum.
    pub confirmation_grace: f64,
    pub join_retry: f64,
    pub registration_fee: u64,
    /// Nodes for which a proof of misbehavior is considered valid.
    pub provably_faulty: BTreeSet<NodeId>,
}

/// Opaque misbehavior certificate; validity is decided by [`NodeParams::provably_faulty`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProofOfMisbehavior {
    pub accused: NodeId,
    pub evidence: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProofOfRegistration {
    pub subject: NodeId,
    pub confirmations: BTreeMap<NodeId, Tag>,
}

impl ProofOfRegistration {
    /// Valid iff at least `f(c) + 1` distinct members of `c` signed a confirmation for the subject.
    pub fn is_valid(&self, c: &Configuration, keys: &KeyRegistry) -> bool {
        let bytes = confirm_bytes(self.subject);
        let good = self
            .confirmations
            .iter()
            .filter(|(who, tag)| c.contains(**who) && keys.check(**who, &bytes, tag))
            .count();
        good > crate::membership::max_faults(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReconfigRequest {
    Join { node: NodeId, proof: ProofOfRegistration },
    Leave { node: NodeId, sig: Tag },
    Evict { node: NodeId, pom: ProofOfMisbehavior },
}

impl ReconfigRequest {
    pub fn node(&self) -> NodeId {
        match self {
            ReconfigRequest::Join { node, .. }
            | ReconfigRequest::Leave { node, .. }
            | ReconfigRequest::Evict { node, .. } => *node,
        }
    }

    pub fn is_join(&self) -> bool {
        matches!(self, ReconfigRequest::Join { .. })
    }
}

/// Payloads ordered by total-order broadcast.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TobPayload {
    Request(ReconfigRequest),
    /// `observer` saw `config` stored at the membership service.
    BmsConfig { config: Configuration, observer: NodeId },
    ClientOp { client: NodeId, req_id: u64, op: u64 },
    /// Checkpoint marker inserted by the ordering service on the checkpoint timer.
    Checkpoint,
}

/// Protocol data handed to a joiner with the application state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolData {
    pub last_voted: Configuration,
    pub bms_latest: Configuration,
    pub pending: Vec<ReconfigRequest>,
    pub observed: Vec<(Configuration, Vec<NodeId>)>,
}

/// Final join response: `(app_state, configuration, log_position, protocol data)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinResponse {
    pub app_state: Vec<u8>,
    pub config: Configuration,
    pub log_position: u64,
    pub protocol: ProtocolData,
}

impl JoinResponse {
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClientReply {
    pub req_id: u64,
    pub result: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    RegisterAnnounce,
    RegisterConfirm { joiner: NodeId, tag: Tag },
    /// Ask a member to put a reconfiguration request into total order.
    Submit(ReconfigRequest),
    FinalResponse { response: Box<JoinResponse>, tag: Tag },
    ClientRequest { req_id: u64, op: u64 },
    ClientReply { reply: ClientReply, tag: Tag },
    ConfigQuery,
    ConfigReply { config: Configuration, tag: Tag },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::RegisterAnnounce => "register-announce",
            Message::RegisterConfirm { .. } => "register-confirm",
            Message::Submit(_) => "submit",
            Message::FinalResponse { .. } => "final-response",
            Message::ClientRequest { .. } => "client-request",
            Message::ClientReply { .. } => "client-reply",
            Message::ConfigQuery => "config-query",
            Message::ConfigReply { .. } => "config-reply",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Timer {
    Revote { number: u64 },
    ConfirmationGrace,
    AnnounceRetry,
    JoinRetry,
}

/// Effects requested by a node; the simulator carries them out.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: NodeId, msg: Message },
    Broadcast(TobPayload),
    Vote(Configuration),
    Register { fee: u64 },
    Timer { after: f64, timer: Timer },
    /// A reconfiguration request was applied at a checkpoint.
    Applied { request: ReconfigRequest, config: Configuration },
    /// The joiner gathered enough matching final responses.
    Activate(Box<JoinResponse>),
}

/// What a node can see while handling an event.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub keys: &'a KeyRegistry,
    /// Contract state at this node's confirmed ledger view.
    pub view: &'a BmsState,
}

pub fn confirm_bytes(joiner: NodeId) -> Vec<u8> {
    let mut out = b"register-confirm".to_vec();
    joiner.encode_to(&mut out);
    out
}

pub fn leave_bytes(node: NodeId) -> Vec<u8> {
    let mut out = b"leave".to_vec();
    node.encode_to(&mut out);
    out
}

pub fn config_reply_bytes(config: &Configuration) -> Vec<u8> {
    let mut out = b"config".to_vec();
    config.encode_to(&mut out);
    out
}

impl Encode for Tag {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self.as_bytes());
    }
}

impl Encode for ProofOfRegistration {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.subject.encode_to(out);
        (self.confirmations.len() as u32).encode_to(out);
        for (who, tag) in &self.confirmations {
            who.encode_to(out);
            tag.encode_to(out);
        }
    }
}

impl Encode for ReconfigRequest {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            ReconfigRequest::Join { node, proof } => {
                out.push(0);
                node.encode_to(out);
                proof.encode_to(out);
            }
            ReconfigRequest::Leave { node, sig } => {
                out.push(1);
                node.encode_to(out);
                sig.encode_to(out);
            }
            ReconfigRequest::Evict { node, pom } => {
                out.push(2);
                node.encode_to(out);
                pom.accused.encode_to(out);
                pom.evidence.as_slice().encode_to(out);
            }
        }
    }
}

impl Encode for TobPayload {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            TobPayload::Request(r) => {
                out.push(0);
                r.encode_to(out);
            }
            TobPayload::BmsConfig { config, observer } => {
                out.push(1);
                config.encode_to(out);
                observer.encode_to(out);
            }
            TobPayload::ClientOp { client, req_id, op } => {
                out.push(2);
                client.encode_to(out);
                req_id.encode_to(out);
                op.encode_to(out);
            }
            TobPayload::Checkpoint => out.push(3),
        }
    }
}

impl Encode for ProtocolData {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.last_voted.encode_to(out);
        self.bms_latest.encode_to(out);
        self.pending.encode_to(out);
        (self.observed.len() as u32).encode_to(out);
        for (c, who) in &self.observed {
            c.encode_to(out);
            who.encode_to(out);
        }
    }
}

impl Encode for JoinResponse {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.app_state.as_slice().encode_to(out);
        self.config.encode_to(out);
        self.log_position.encode_to(out);
        self.protocol.encode_to(out);
    }
}

impl Encode for ClientReply {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.req_id.encode_to(out);
        self.result.encode_to(out);
    }
}

impl Encode for Message {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self.kind().as_bytes());
        match self {
            Message::RegisterAnnounce | Message::ConfigQuery => {}
            Message::RegisterConfirm { joiner, tag } => {
                joiner.encode_to(out);
                tag.encode_to(out);
            }
            Message::Submit(r) => r.encode_to(out),
            Message::FinalResponse { response, tag } => {
                response.encode_to(out);
                tag.encode_to(out);
            }
            Message::ClientRequest { req_id, op } => {
                req_id.encode_to(out);
                op.encode_to(out);
            }
            Message::ClientReply { reply, tag } => {
                reply.encode_to(out);
                tag.encode_to(out);
            }
            Message::ConfigReply { config, tag } => {
                config.encode_to(out);
                tag.encode_to(out);
            }
        }
    }
}

pub(crate) fn queue_to_vec(q: &VecDeque<ReconfigRequest>) -> Vec<ReconfigRequest> {
    q.iter().cloned().collect()
}
