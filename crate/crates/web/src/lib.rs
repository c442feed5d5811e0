//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Every function returns a JSON string so the page can stay plain JavaScript.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use bms_core::client::ClientMode;
use bms_core::experiments::{attack_demo, sweep};
use bms_core::ledger::usd_cost;
use bms_core::membership::{
    max_batch_threshold, max_correct_leavers, max_faults, policy_threshold, vote_threshold,
    Configuration, Policy,
};
use bms_core::ScenarioConfig;

#[derive(Serialize)]
struct Bounds {
    size: usize,
    f: usize,
    v: usize,
    max_batch_threshold: usize,
    max_correct_leavers: usize,
    halff_threshold: usize,
}

#[derive(Serialize)]
struct UpdatePoint {
    size: usize,
    joiners: usize,
    gas_per_join: f64,
    usd_per_join: f64,
}

#[derive(Serialize)]
struct Latencies {
    tx: f64,
    confirm: f64,
    ordering: f64,
    checkpoint: f64,
}

#[derive(Serialize)]
struct SweepView {
    policy: String,
    joins: usize,
    updates: Vec<UpdatePoint>,
    mean_latency: Latencies,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Fault, vote and batching bounds for a system of `size` members.
#[wasm_bindgen]
pub fn batching_bounds(size: usize) -> Result<String, JsError> {
    let c = Configuration::genesis(size).map_err(js_err)?;
    let b = Bounds {
        size,
        f: max_faults(&c),
        v: vote_threshold(&c),
        max_batch_threshold: max_batch_threshold(&c),
        max_correct_leavers: max_correct_leavers(&c),
        halff_threshold: policy_threshold(Policy::HalfF, &c),
    };
    serde_json::to_string(&b).map_err(js_err)
}

/// Size sweep under `policy` (`"t1"` or `"halff"`): per-join update gas and mean join latencies.
#[wasm_bindgen]
pub fn gas_sweep(policy: &str, from: usize, to: usize, seed: u64) -> Result<String, JsError> {
    let p = match policy {
        "t1" => Policy::Every,
        "halff" => Policy::HalfF,
        other => return Err(JsError::new(&format!("unknown policy {other:?}"))),
    };
    let out = sweep(p, from, to, seed).map_err(js_err)?;
    let price = ScenarioConfig::default().price;
    let view = SweepView {
        policy: p.label(),
        joins: out.joins.len(),
        updates: out
            .updates
            .iter()
            .map(|u| UpdatePoint {
                size: u.size,
                joiners: u.joiners,
                gas_per_join: u.gas_per_join,
                usd_per_join: usd_cost(u.total_gas, &price) / u.changes.max(1) as f64,
            })
            .collect(),
        mean_latency: Latencies {
            tx: mean(out.joins.iter().map(|j| j.tx_latency_s)),
            confirm: mean(out.joins.iter().map(|j| j.confirm_latency_s)),
            ordering: mean(out.joins.iter().map(|j| j.ordering_latency_s)),
            checkpoint: mean(out.joins.iter().map(|j| j.checkpoint_latency_s)),
        },
    };
    serde_json::to_string(&view).map_err(js_err)
}

/// Long-range attack runs against a client that reads the membership service (`"bms"`) or not (`"control"`).
#[wasm_bindgen]
pub fn long_range_attack(mode: &str, seeds: u64) -> Result<String, JsError> {
    let mode = match mode {
        "bms" => ClientMode::WithBms,
        "control" => ClientMode::Control,
        other => return Err(JsError::new(&format!("unknown mode {other:?}"))),
    };
    let sum = attack_demo(mode, seeds, 1).map_err(js_err)?;
    serde_json::to_string(&sum).map_err(js_err)
}
