//! Client of the BFT system. It learns the configuration from the membership
//! service (or, in the control mode, only from the members it already knows)
//! and accepts a result once `f + 1` members of that configuration agree.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::Encode;
use crate::contract::BmsState;
use crate::membership::{max_faults, Configuration, NodeId};
use crate::node::{config_reply_bytes, ClientReply, Message};
use crate::sim::{KeyRegistry, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    WithBms,
    /// Never reads the membership service; asks the members it knows instead.
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClientTimer {
    Request { req_id: u64 },
    ConfigQuery { req_id: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientAction {
    Send { to: NodeId, msg: Message },
    Timer { after: f64, timer: ClientTimer },
}

/// A result the client accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub req_id: u64,
    pub reply: ClientReply,
    pub signers: BTreeSet<NodeId>,
    /// Configuration the quorum was counted against.
    pub config: Configuration,
    pub at: SimTime,
}

#[derive(Debug, Clone)]
struct Outstanding {
    req_id: u64,
    op: u64,
    querying_config: bool,
    config_replies: BTreeMap<Configuration, BTreeSet<NodeId>>,
    replies: BTreeMap<ClientReply, BTreeSet<NodeId>>,
}

#[derive(Debug, Clone)]
pub struct Client {
    pub id: NodeId,
    pub mode: ClientMode,
    pub cached_config: Configuration,
    pub cached_at: SimTime,
    pub p_bound: f64,
    request_timeout: f64,
    next_req: u64,
    outstanding: Option<Outstanding>,
    pub accepted: Vec<Accepted>,
    /// `(time, stored configuration read)` for every read of the membership service.
    pub refreshes: Vec<(SimTime, Configuration)>,
}

impl Client {
    /// Reads the stored configuration and caches it.
    pub fn bootstrap(
        id: NodeId,
        mode: ClientMode,
        view: &BmsState,
        now: SimTime,
        p_bound: f64,
        request_timeout: f64,
    ) -> Self {
        Client {
            id,
            mode,
            cached_config: view.config_request().clone(),
            cached_at: now,
            p_bound,
            request_timeout,
            next_req: 0,
            outstanding: None,
            accepted: Vec::new(),
            refreshes: vec![(now, view.config_request().clone())],
        }
    }

    pub fn is_busy(&self) -> bool {
        self.outstanding.is_some()
    }

    pub fn is_stale(&self, now: SimTime) -> bool {
        now.since(self.cached_at) > self.p_bound
    }

    fn refresh(&mut self, view: &BmsState, now: SimTime) {
        self.cached_config = view.config_request().clone();
        self.cached_at = now;
        self.refreshes.push((now, self.cached_config.clone()));
    }

    fn send_to_members(&self, msg: Message) -> Vec<ClientAction> {
        self.cached_config
            .members()
            .iter()
            .map(|m| ClientAction::Send {
                to: *m,
                msg: msg.clone(),
            })
            .collect()
    }

    fn send_request(&mut self) -> Vec<ClientAction> {
        let o = self.outstanding.as_mut().expect("outstanding request");
        o.querying_config = false;
        let (req_id, op) = (o.req_id, o.op);
        let mut out = self.send_to_members(Message::ClientRequest { req_id, op });
        out.push(ClientAction::Timer {
            after: self.request_timeout,
            timer: ClientTimer::Request { req_id },
        });
        out
    }

    /// Starts a new request. `view` is this client's confirmed ledger view.
    pub fn submit(&mut self, op: u64, view: &BmsState, now: SimTime) -> Vec<ClientAction> {
        let req_id = self.next_req;
        self.next_req += 1;
        self.outstanding = Some(Outstanding {
            req_id,
            op,
            querying_config: false,
            config_replies: BTreeMap::new(),
            replies: BTreeMap::new(),
        });
        match self.mode {
            ClientMode::WithBms => {
                if self.is_stale(now) {
                    self.refresh(view, now);
                }
                self.send_request()
            }
            ClientMode::Control if self.is_stale(now) => {
                self.outstanding.as_mut().expect("just set").querying_config = true;
                let mut out = self.send_to_members(Message::ConfigQuery);
                out.push(ClientAction::Timer {
                    after: self.request_timeout,
                    timer: ClientTimer::ConfigQuery { req_id },
                });
                out
            }
            ClientMode::Control => self.send_request(),
        }
    }

    pub fn on_message(
        &mut self,
        from: NodeId,
        msg: &Message,
        keys: &KeyRegistry,
        now: SimTime,
    ) -> Vec<ClientAction> {
        let quorum = max_faults(&self.cached_config) + 1;
        if !self.cached_config.contains(from) {
            return vec![];
        }
        let Some(o) = self.outstanding.as_mut() else {
            return vec![];
        };
        match msg {
            Message::ConfigReply { config, tag } if o.querying_config => {
                if !keys.check(from, &config_reply_bytes(config), tag) {
                    return vec![];
                }
                let who = o.config_replies.entry(config.clone()).or_default();
                who.insert(from);
                if who.len() >= quorum {
                    if config.number > self.cached_config.number {
                        self.cached_config = config.clone();
                    }
                    self.cached_at = now;
                    return self.send_request();
                }
                vec![]
            }
            Message::ClientReply { reply, tag } if !o.querying_config => {
                if reply.req_id != o.req_id || !keys.check(from, &reply.encode(), tag) {
                    return vec![];
                }
                let who = o.replies.entry(reply.clone()).or_default();
                who.insert(from);
                if who.len() >= quorum {
                    self.accepted.push(Accepted {
                        req_id: reply.req_id,
                        reply: reply.clone(),
                        signers: who.clone(),
                        config: self.cached_config.clone(),
                        at: now,
                    });
                    self.outstanding = None;
                }
                vec![]
            }
            _ => vec![],
        }
    }

    pub fn on_timer(&mut self, timer: ClientTimer, view: &BmsState, now: SimTime) -> Vec<ClientAction> {
        let Some(o) = &self.outstanding else {
            return vec![];
        };
        match timer {
            ClientTimer::ConfigQuery { req_id } if o.req_id == req_id && o.querying_config => {
                // Nobody answered consistently; go ahead with what is cached.
                self.send_request()
            }
            ClientTimer::Request { req_id } if o.req_id == req_id && !o.querying_config => {
                if self.mode == ClientMode::WithBms {
                    self.refresh(view, now);
                }
                let o = self.outstanding.as_mut().expect("checked");
                o.replies.clear();
                self.send_request()
            }
            _ => vec![],
        }
    }
}
