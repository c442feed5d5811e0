use serde::{Deserialize, Serialize};

/// Gas units charged per operation class. All fields are non-negative by type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasSchedule {
    /// Charged for every transaction, including rejected ones.
    pub g_base: u64,
    pub g_vote_store: u64,
    /// Calldata cost per member listed in the voted configuration.
    pub g_vote_per_member: u64,
    /// Surcharge on the first vote recorded for a configuration.
    pub g_first_vote_init: u64,
    /// Surcharge on the vote that installs a new configuration.
    pub g_update_fixed: u64,
    pub g_update_per_member: u64,
    pub g_register: u64,
    /// Refund per member dropped from the stored configuration by an update.
    pub refund_per_freed_member: u64,
}

/// Fitted to measured per-join anchors with `calibrate-gas`.
impl Default for GasSchedule {
    fn default() -> Self {
        GasSchedule {
            g_base: 21_000,
            g_vote_store: 16_244,
            g_vote_per_member: 301,
            g_first_vote_init: 50_915,
            g_update_fixed: 38_187,
            g_update_per_member: 0,
            g_register: 65_000,
            refund_per_freed_member: 4_800,
        }
    }
}

impl GasSchedule {
    pub fn register(&self, accepted: bool) -> u64 {
        if accepted {
            self.g_base + self.g_register
        } else {
            self.g_base
        }
    }

    pub fn ignored(&self) -> u64 {
        self.g_base
    }

    /// Gas of a counted vote for a configuration with `voted_size` members.
    /// `updates` lists `(previous size, installed size)` for each triggered update.
    pub fn vote(&self, voted_size: usize, first: bool, updates: &[(usize, usize)]) -> u64 {
        let mut gas = self.g_base + self.g_vote_store + self.g_vote_per_member * voted_size as u64;
        if first {
            gas += self.g_first_vote_init;
        }
        let mut refund = 0;
        for &(prev, new) in updates {
            gas += self.g_update_fixed + self.g_update_per_member * new as u64;
            refund += self.refund_per_freed_member * prev.saturating_sub(new) as u64;
        }
        // Refunds are capped at half the gas consumed so the charge stays positive.
        gas - refund.min(gas / 2)
    }
}

/// Converts gas to US dollars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceModel {
    pub gas_price_gwei: f64,
    pub eth_usd: f64,
}

impl Default for PriceModel {
    fn default() -> Self {
        PriceModel {
            gas_price_gwei: 93.1,
            eth_usd: 386.10,
        }
    }
}

impl PriceModel {
    pub fn validate(&self) -> crate::error::Result<()> {
        if !(self.gas_price_gwei > 0.0 && self.eth_usd > 0.0) {
            return Err(crate::error::Error::scenario(
                "price",
                "gas price and ether price must be positive",
            ));
        }
        Ok(())
    }
}

pub fn usd_cost(gas: u64, pm: &PriceModel) -> f64 {
    gas as f64 * pm.gas_price_gwei * 1e-9 * pm.eth_usd
}
