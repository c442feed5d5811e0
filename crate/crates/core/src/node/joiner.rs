use std::collections::{BTreeMap, BTreeSet};

use super::{
    confirm_bytes, Action, Ctx, JoinResponse, Message, NodeParams, ProofOfRegistration,
    ReconfigRequest, Timer,
};
use crate::codec::Encode;
use crate::membership::{max_faults, Configuration, NodeId};
use crate::sim::{SimTime, Tag};

#[derive(Debug, Clone, PartialEq)]
pub enum JoinPhase {
    /// Waiting for the registration to reach confirmation depth.
    Registering,
    /// Collecting confirmations from the members of `target`.
    Announcing {
        target: Configuration,
        grace_armed: bool,
    },
    /// Join request sent; waiting for matching final responses.
    Requested { target: Configuration },
    Done,
}

/// Client-side driver of a node joining the system.
#[derive(Debug, Clone)]
pub struct Joiner {
    pub id: NodeId,
    pub phase: JoinPhase,
    params: NodeParams,
    confirmations: BTreeMap<NodeId, Tag>,
    /// Response digest → (response, senders).
    responses: BTreeMap<[u8; 32], (JoinResponse, BTreeSet<NodeId>)>,
    pub proof_ready_at: Option<SimTime>,
}

impl Joiner {
    pub fn new(id: NodeId, params: NodeParams) -> Self {
        Joiner {
            id,
            phase: JoinPhase::Registering,
            params,
            confirmations: BTreeMap::new(),
            responses: BTreeMap::new(),
            proof_ready_at: None,
        }
    }

    pub fn start(&mut self) -> Vec<Action> {
        vec![Action::Register {
            fee: self.params.registration_fee,
        }]
    }

    fn announce(&mut self, target: Configuration) -> Vec<Action> {
        let mut out: Vec<Action> = target
            .members()
            .iter()
            .filter(|m| **m != self.id)
            .map(|m| Action::Send {
                to: *m,
                msg: Message::RegisterAnnounce,
            })
            .collect();
        out.push(Action::Timer {
            after: self.params.join_retry,
            timer: Timer::AnnounceRetry,
        });
        self.confirmations.retain(|who, _| target.contains(*who));
        self.phase = JoinPhase::Announcing {
            target,
            grace_armed: false,
        };
        out
    }

    pub fn on_ledger_view(&mut self, ctx: &Ctx) -> Vec<Action> {
        if self.phase == JoinPhase::Registering && ctx.view.is_registered(self.id) {
            return self.announce(ctx.view.config_request().clone());
        }
        vec![]
    }

    pub fn on_message(&mut self, from: NodeId, msg: &Message, ctx: &Ctx) -> Vec<Action> {
        match msg {
            Message::RegisterConfirm { joiner, tag } if *joiner == self.id => {
                let JoinPhase::Announcing {
                    target,
                    grace_armed,
                } = &mut self.phase
                else {
                    return vec![];
                };
                if !target.contains(from) || !ctx.keys.check(from, &confirm_bytes(self.id), tag) {
                    return vec![];
                }
                self.confirmations.insert(from, *tag);
                if self.confirmations.len() > max_faults(target) && !*grace_armed {
                    *grace_armed = true;
                    return vec![Action::Timer {
                        after: self.params.confirmation_grace,
                        timer: Timer::ConfirmationGrace,
                    }];
                }
                vec![]
            }
            Message::FinalResponse { response, tag } => {
                if self.phase == JoinPhase::Done
                    || from == self.id
                    || !response.config.contains(from)
                    || !response.config.contains(self.id)
                    || !ctx.keys.check(from, &response.encode(), tag)
                {
                    return vec![];
                }
                let entry = self
                    .responses
                    .entry(response.digest())
                    .or_insert_with(|| ((**response).clone(), BTreeSet::new()));
                entry.1.insert(from);
                if entry.1.len() > max_faults(&response.config) {
                    self.phase = JoinPhase::Done;
                    return vec![Action::Activate(response.clone())];
                }
                vec![]
            }
            _ => vec![],
        }
    }

    fn send_request(&mut self, now: SimTime) -> Vec<Action> {
        let JoinPhase::Announcing { target, .. } = &self.phase else {
            return vec![];
        };
        let target = target.clone();
        let req = ReconfigRequest::Join {
            node: self.id,
            proof: ProofOfRegistration {
                subject: self.id,
                confirmations: self.confirmations.clone(),
            },
        };
        self.proof_ready_at.get_or_insert(now);
        let mut out: Vec<Action> = target
            .members()
            .iter()
            .filter(|m| **m != self.id)
            .map(|m| Action::Send {
                to: *m,
                msg: Message::Submit(req.clone()),
            })
            .collect();
        out.push(Action::Timer {
            after: self.params.join_retry,
            timer: Timer::JoinRetry,
        });
        self.phase = JoinPhase::Requested { target };
        out
    }

    pub fn on_timer(&mut self, timer: Timer, ctx: &Ctx) -> Vec<Action> {
        match (timer, &self.phase) {
            (Timer::ConfirmationGrace, JoinPhase::Announcing { .. }) => self.send_request(ctx.now),
            (Timer::AnnounceRetry, JoinPhase::Announcing { .. }) => {
                self.announce(ctx.view.config_request().clone())
            }
            // Not admitted yet: the proof may have been too small for the
            // replicas' configuration. Gather confirmations afresh.
            (Timer::JoinRetry, JoinPhase::Requested { .. }) => {
                self.announce(ctx.view.config_request().clone())
            }
            _ => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::BmsState;
    use crate::membership::Policy;
    use crate::node::{CheckpointMode, NodeState};
    use crate::sim::{rng_stream, KeyRegistry};

    fn params() -> NodeParams {
        NodeParams {
            policy: Policy::Every,
            checkpoint: CheckpointMode::default(),
            revote_timeout: 1110.0,
            confirmation_grace: 0.6,
            join_retry: 1110.0,
            registration_fee: 100,
            provably_faulty: BTreeSet::new(),
        }
    }

    fn setup() -> (KeyRegistry, BmsState) {
        let mut rng = rng_stream(2, 0);
        let mut keys = KeyRegistry::new();
        for i in 0..8 {
            keys.register(NodeId(i), &mut rng);
        }
        let mut view = BmsState::new(Configuration::genesis(4).unwrap(), 100);
        view.register(NodeId(4), 100).unwrap();
        (keys, view)
    }

    fn confirm(keys: &KeyRegistry, by: u32) -> Message {
        Message::RegisterConfirm {
            joiner: NodeId(4),
            tag: keys.sign(NodeId(by), &confirm_bytes(NodeId(4))).unwrap(),
        }
    }

    #[test]
    fn collects_f_plus_one_then_waits_grace() {
        let (keys, view) = setup();
        let ctx = Ctx {
            now: SimTime::secs(600.0),
            keys: &keys,
            view: &view,
        };
        let mut j = Joiner::new(NodeId(4), params());
        let out = j.on_ledger_view(&ctx);
        assert_eq!(out.len(), 5, "four announces and a retry timer");
        assert!(j.on_message(NodeId(0), &confirm(&keys, 0), &ctx).is_empty());
        // A confirmation signed by someone else is ignored.
        assert!(j.on_message(NodeId(1), &confirm(&keys, 2), &ctx).is_empty());
        let out = j.on_message(NodeId(1), &confirm(&keys, 1), &ctx);
        assert!(matches!(out[0], Action::Timer { timer: Timer::ConfirmationGrace, .. }));
        j.on_message(NodeId(2), &confirm(&keys, 2), &ctx);
        j.on_message(NodeId(3), &confirm(&keys, 3), &ctx);
        let out = j.on_timer(Timer::ConfirmationGrace, &ctx);
        let Action::Send { msg: Message::Submit(ReconfigRequest::Join { proof, .. }), .. } = &out[0]
        else {
            panic!("expected join request")
        };
        assert_eq!(proof.confirmations.len(), 4);
        assert!(proof.is_valid(&Configuration::genesis(4).unwrap(), &keys));
        assert_eq!(j.proof_ready_at, Some(SimTime::secs(600.0)));
    }

    #[test]
    fn activates_on_f_plus_one_matching_responses() {
        let (keys, view) = setup();
        let ctx = Ctx {
            now: SimTime::ZERO,
            keys: &keys,
            view: &view,
        };
        let mut j = Joiner::new(NodeId(4), params());
        j.phase = JoinPhase::Requested {
            target: Configuration::genesis(4).unwrap(),
        };
        let c1 = Configuration::genesis(5).unwrap();
        let mut state = NodeState::genesis(Configuration::genesis(4).unwrap());
        state.c_cur = Configuration::new(1, c1.members().iter().copied()).unwrap();
        let good = state.response();
        let mut bad = good.clone();
        bad.app_state = vec![9; 8];
        let msg = |by: u32, r: &JoinResponse| Message::FinalResponse {
            response: Box::new(r.clone()),
            tag: keys.sign(NodeId(by), &r.encode()).unwrap(),
        };
        assert!(j.on_message(NodeId(0), &msg(0, &bad), &ctx).is_empty());
        assert!(j.on_message(NodeId(1), &msg(1, &good), &ctx).is_empty());
        // A non-member's response does not count.
        assert!(j.on_message(NodeId(7), &msg(7, &good), &ctx).is_empty());
        let out = j.on_message(NodeId(2), &msg(2, &good), &ctx);
        assert!(matches!(&out[0], Action::Activate(r) if **r == good));
        assert_eq!(j.phase, JoinPhase::Done);
    }
}
