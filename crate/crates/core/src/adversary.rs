//! Corruption schedules and their validation against the fault model: at most
//! `f(C)` misbehaving members in any configuration while it is current or
//! published less than `P` ago, and no limit for retired members afterwards.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::client::ClientMode;
use crate::error::{Error, Result};
use crate::membership::{max_correct_leavers, max_faults, Configuration, NodeId, Policy};
use crate::scenario::{ChurnEvent, ChurnOp, ClientSpec, RequestTime, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    AtStart,
    At(f64),
    /// `P` after the first published configuration that no longer contains the node.
    AfterRetirement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPattern {
    All,
    RegisterConfirms,
    FinalResponses,
    ClientReplies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Sends nothing at all.
    Silent,
    /// Answers configuration queries with a configuration made of its coalition.
    ForgeConfigResponse,
    WithholdVote,
    /// Votes for a configuration made of its coalition instead of the real one.
    VoteBogus,
    DropMessages(DropPattern),
    /// Answers client requests with forged results signed by itself.
    StaleQuorum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionEntry {
    pub node: NodeId,
    pub trigger: Trigger,
    pub behaviors: Vec<Behavior>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSchedule {
    pub entries: Vec<CorruptionEntry>,
    /// Publishing time `P`; defaults to the client staleness bound.
    pub grace_p: Option<f64>,
}

impl CorruptionSchedule {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A configuration found with more misbehaving members than it tolerates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleViolation {
    pub config: Configuration,
    pub at: f64,
    pub corrupt: usize,
    pub bound: usize,
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} has {} misbehaving members at t={:.3}s, tolerates {}",
            self.config, self.corrupt, self.at, self.bound
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedConfig {
    pub config: Configuration,
    /// When every correct observer sees it at confirmation depth.
    pub published_at: f64,
}

/// Configuration history used to check a schedule.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    /// Stored configurations in publication order, starting with genesis at 0.
    pub published: Vec<PublishedConfig>,
    /// `(configuration, installed at)` for every local configuration.
    pub local: Vec<(Configuration, f64)>,
}

impl Timeline {
    /// Publication time of the first configuration that excludes `node`
    /// after one that included it.
    pub fn retirement(&self, node: NodeId) -> Option<f64> {
        let mut was_member = false;
        for p in &self.published {
            if p.config.contains(node) {
                was_member = true;
            } else if was_member {
                return Some(p.published_at);
            }
        }
        None
    }

    /// `(configuration, start, end)` spans during which the fault bound applies.
    fn spans(&self, p: f64) -> Vec<(&Configuration, f64, f64)> {
        let mut out = Vec::new();
        for (i, pc) in self.published.iter().enumerate() {
            let end = self
                .published
                .get(i + 1)
                .map_or(f64::INFINITY, |next| next.published_at + p);
            out.push((&pc.config, pc.published_at, end));
        }
        for (i, (c, at)) in self.local.iter().enumerate() {
            let end = self.local.get(i + 1).map_or(f64::INFINITY, |next| next.1);
            out.push((c, *at, end));
        }
        out
    }
}

/// Earliest time each node starts misbehaving; `None` if its trigger never fires.
pub fn corruption_times(
    s: &CorruptionSchedule,
    timeline: &Timeline,
    p: f64,
) -> BTreeMap<NodeId, Option<f64>> {
    let mut out: BTreeMap<NodeId, Option<f64>> = BTreeMap::new();
    for e in &s.entries {
        let at = match e.trigger {
            Trigger::AtStart => Some(0.0),
            Trigger::At(t) => Some(t),
            Trigger::AfterRetirement => timeline.retirement(e.node).map(|r| r + p),
        };
        let slot = out.entry(e.node).or_insert(at);
        *slot = match (*slot, at) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
    out
}

/// Checks that no configuration ever has more than `f(C)` misbehaving members
/// while it is current, or published less than `p` ago.
pub fn validate_schedule(
    s: &CorruptionSchedule,
    timeline: &Timeline,
    p: f64,
) -> std::result::Result<(), ScheduleViolation> {
    let times = corruption_times(s, timeline, p);
    for (config, start, end) in timeline.spans(p) {
        let mut bad: Vec<f64> = config
            .members()
            .iter()
            .filter_map(|m| times.get(m).copied().flatten())
            .filter(|t| *t < end)
            .collect();
        let bound = max_faults(config);
        if bad.len() > bound {
            bad.sort_by(f64::total_cmp);
            return Err(ScheduleViolation {
                config: config.clone(),
                at: bad[bound].max(start),
                corrupt: bad.len(),
                bound,
            });
        }
    }
    Ok(())
}

/// Parameters of a long-range attack scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongRange {
    pub initial_size: usize,
    pub mode: ClientMode,
    pub seed: u64,
    /// Members replaced per publication; each round joins and removes this many.
    pub per_publish: usize,
}

impl LongRange {
    pub fn new(mode: ClientMode, seed: u64) -> Self {
        LongRange {
            initial_size: 4,
            mode,
            seed,
            per_publish: 1,
        }
    }
}

/// A scenario in which the initial configuration is replaced completely, its
/// members turn malicious once retired, and a client holding the initial
/// configuration comes back afterwards.
pub fn long_range_scenario(lr: LongRange) -> Result<ScenarioConfig> {
    let n = lr.initial_size;
    if n < 4 {
        return Err(Error::input("long-range scenario needs at least 4 initial members"));
    }
    let genesis = Configuration::genesis(n)?;
    let k = lr.per_publish.max(1);
    if k > max_correct_leavers(&genesis) {
        return Err(Error::Unpublishable(format!(
            "{k} departures per publication exceed the {} correct members {genesis} can lose",
            max_correct_leavers(&genesis)
        )));
    }
    let mut churn = Vec::new();
    let old: Vec<u32> = (0..n as u32).collect();
    let new: Vec<u32> = (n as u32..2 * n as u32).collect();
    for (olds, news) in old.chunks(k).zip(new.chunks(k)) {
        for j in news {
            churn.push(ChurnEvent::sequential(ChurnOp::Join { node: NodeId(*j) }));
        }
        for l in olds {
            churn.push(ChurnEvent::sequential(ChurnOp::Leave { node: NodeId(*l) }));
        }
    }
    let policy = if k == 1 {
        Policy::Every
    } else {
        Policy::Fixed(2 * k as u32)
    };
    let entries = old
        .iter()
        .map(|o| CorruptionEntry {
            node: NodeId(*o),
            trigger: Trigger::AfterRetirement,
            behaviors: vec![Behavior::StaleQuorum, Behavior::ForgeConfigResponse],
        })
        .collect();
    let sc = ScenarioConfig {
        name: format!("long-range-{}", lr.seed),
        seed: lr.seed,
        initial_size: n,
        churn,
        policy,
        adversary: CorruptionSchedule {
            entries,
            grace_p: None,
        },
        clients: vec![ClientSpec {
            mode: lr.mode,
            p_bound: None,
            requests: vec![RequestTime::AfterCorruption(1.0)],
        }],
        ..ScenarioConfig::default()
    };
    sc.validate()?;
    Ok(sc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(number: u64, ids: impl IntoIterator<Item = u32>) -> Configuration {
        Configuration::new(number, ids.into_iter().map(NodeId)).unwrap()
    }

    fn entry(node: u32, trigger: Trigger) -> CorruptionEntry {
        CorruptionEntry {
            node: NodeId(node),
            trigger,
            behaviors: vec![Behavior::Silent],
        }
    }

    fn single(c: Configuration) -> Timeline {
        Timeline {
            published: vec![PublishedConfig {
                config: c.clone(),
                published_at: 0.0,
            }],
            local: vec![(c, 0.0)],
        }
    }

    #[test]
    fn two_of_four_current_is_a_violation() {
        let s = CorruptionSchedule {
            entries: vec![entry(0, Trigger::AtStart), entry(1, Trigger::At(10.0))],
            grace_p: None,
        };
        let err = validate_schedule(&s, &single(cfg(0, 0..4)), 555.0).unwrap_err();
        assert_eq!((err.corrupt, err.bound, err.at), (2, 1, 10.0));
    }

    #[test]
    fn one_of_four_current_is_fine() {
        let s = CorruptionSchedule {
            entries: vec![entry(2, Trigger::AtStart)],
            grace_p: None,
        };
        assert!(validate_schedule(&s, &single(cfg(0, 0..4)), 555.0).is_ok());
    }

    /// Grows from 4 to 100 members one join per publication, then corrupts all of C0.
    fn growth_timeline() -> Timeline {
        let mut t = Timeline::default();
        for k in 0..=96u64 {
            let c = cfg(k, 0..(4 + k as u32));
            t.published.push(PublishedConfig {
                config: c.clone(),
                published_at: k as f64 * 1200.0,
            });
            t.local.push((c, k as f64 * 1200.0));
        }
        // Full turnover afterwards: C97 holds only new members.
        let c = cfg(97, 200..300);
        t.published.push(PublishedConfig {
            config: c.clone(),
            published_at: 97.0 * 1200.0,
        });
        t.local.push((c, 97.0 * 1200.0));
        t
    }

    #[test]
    fn retired_configuration_may_be_corrupted_after_p() {
        let t = growth_timeline();
        let p = 555.0;
        let late = t.published[97].published_at + p + 1.0;
        let s = CorruptionSchedule {
            entries: (0..4).map(|i| entry(i, Trigger::At(late))).collect(),
            grace_p: None,
        };
        assert!(validate_schedule(&s, &t, p).is_ok());
        // Before C1 has been published for P, C0 itself is still covered.
        let early = t.published[1].published_at + p - 1.0;
        let s = CorruptionSchedule {
            entries: (0..4).map(|i| entry(i, Trigger::At(early))).collect(),
            grace_p: None,
        };
        assert!(validate_schedule(&s, &t, p).is_err());
    }

    #[test]
    fn after_retirement_is_always_valid() {
        let t = growth_timeline();
        let s = CorruptionSchedule {
            entries: (0..100).map(|i| entry(i, Trigger::AfterRetirement)).collect(),
            grace_p: None,
        };
        assert!(validate_schedule(&s, &t, 555.0).is_ok());
        let times = corruption_times(&s, &t, 555.0);
        assert_eq!(times[&NodeId(0)], Some(97.0 * 1200.0 + 555.0));
    }

    #[test]
    fn generator_refuses_unpublishable_turnover() {
        let mut lr = LongRange::new(ClientMode::WithBms, 1);
        assert!(long_range_scenario(lr).is_ok());
        lr.per_publish = 2;
        assert!(matches!(long_range_scenario(lr), Err(Error::Unpublishable(_))));
        lr.initial_size = 3;
        assert!(long_range_scenario(lr).is_err());
    }

    #[test]
    fn generated_scenario_turns_over_fully() {
        let sc = long_range_scenario(LongRange::new(ClientMode::Control, 3)).unwrap();
        let last = sc.project().unwrap().last().unwrap().clone();
        assert!(last.members().iter().all(|m| m.0 >= 4));
        assert_eq!(last.size(), 4);
    }
}
