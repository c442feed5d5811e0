use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SimRng, SimTime};
use crate::error::{Error, Result};

/// What the adversary may do to messages sent before GST.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreGstPolicy {
    pub drop_probability: f64,
    pub max_delay: f64,
}

impl Default for PreGstPolicy {
    fn default() -> Self {
        PreGstPolicy {
            drop_probability: 0.0,
            max_delay: 10.0,
        }
    }
}

/// Eventually synchronous network: arbitrary delay or loss before GST, at most
/// `delta` after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub gst: f64,
    pub delta: f64,
    pub pre_gst: PreGstPolicy,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            gst: 0.0,
            delta: 0.05,
            pre_gst: PreGstPolicy::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::scenario("network.delta", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pre_gst.drop_probability) {
            return Err(Error::scenario(
                "network.pre_gst.drop_probability",
                "must lie in [0, 1]",
            ));
        }
        if !(self.gst >= 0.0 && self.gst.is_finite()) {
            return Err(Error::scenario("network.gst", "must be non-negative"));
        }
        if !(self.pre_gst.max_delay >= 0.0 && self.pre_gst.max_delay.is_finite()) {
            return Err(Error::scenario(
                "network.pre_gst.max_delay",
                "must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn gst(&self) -> SimTime {
        SimTime::secs(self.gst)
    }

    /// Arrival time of a message between correct endpoints, or `None` if the
    /// adversary drops it. A delivered message always arrives by
    /// `max(sent_at, gst) + delta`.
    pub fn delivery_time(&self, sent_at: SimTime, rng: &mut SimRng) -> Option<SimTime> {
        let gst = self.gst();
        let bounded = |rng: &mut SimRng| rng.random::<f64>() * self.delta;
        if sent_at >= gst {
            return Some(sent_at + bounded(rng));
        }
        if rng.random::<f64>() < self.pre_gst.drop_probability {
            return None;
        }
        let adversarial = sent_at + rng.random::<f64>() * self.pre_gst.max_delay;
        let deadline = gst + bounded(rng);
        Some(if adversarial < deadline {
            adversarial
        } else {
            deadline
        })
    }
}
