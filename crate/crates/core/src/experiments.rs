//! Canned experiments: size sweeps, the long-range attack demonstration, the
//! publication stall, and fitting the gas schedule to measured anchors.

use std::path::Path;
use std::thread;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adversary::{long_range_scenario, Behavior, CorruptionEntry, LongRange, Trigger};
use crate::client::ClientMode;
use crate::error::{Error, Result};
use crate::ledger::{usd_cost, GasSchedule};
use crate::membership::{NodeId, Policy};
use crate::metrics::{RunOutput, UpdateRecord};
use crate::scenario::{ChurnEvent, ChurnOp, ScenarioConfig};
use crate::world::run_scenario;

/// Joins one node at a time until the stored configuration reaches `to` members.
pub fn sweep_scenario(policy: Policy, from: usize, to: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("sweep-{}-{from}-{to}", policy.label()),
        seed,
        initial_size: from,
        target_size: Some(to),
        policy,
        ..ScenarioConfig::default()
    }
}

pub fn sweep(policy: Policy, from: usize, to: usize, seed: u64) -> Result<RunOutput> {
    if from < 1 || to < from {
        return Err(Error::input(format!("bad sweep range {from}..{to}")));
    }
    run_scenario(&sweep_scenario(policy, from, to, seed))
}

/// Runs `f` for every item on a small pool of threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        // Also the path taken on targets without threads.
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub mode: ClientMode,
    pub runs: usize,
    /// Runs in which the client accepted at least one forged result.
    pub runs_with_forgery: usize,
    pub forged_total: usize,
    pub accepted_total: usize,
}

/// Long-range attack against a client that was offline during a full turnover.
pub fn attack_demo(mode: ClientMode, seeds: u64, first_seed: u64) -> Result<AttackSummary> {
    let seeds: Vec<u64> = (first_seed..first_seed + seeds).collect();
    let outs = parallel_map(&seeds, |s| {
        run_scenario(&long_range_scenario(LongRange::new(mode, *s))?)
    });
    let mut sum = AttackSummary {
        mode,
        runs: 0,
        runs_with_forgery: 0,
        forged_total: 0,
        accepted_total: 0,
    };
    for out in outs {
        let out = out?;
        let forged = out.forged_total();
        sum.runs += 1;
        sum.forged_total += forged;
        sum.accepted_total += out.clients.iter().map(|c| c.accepted).sum::<usize>();
        if forged > 0 {
            sum.runs_with_forgery += 1;
        }
    }
    Ok(sum)
}

fn withholders(nodes: &[u32]) -> Vec<CorruptionEntry> {
    nodes
        .iter()
        .map(|n| CorruptionEntry {
            node: NodeId(*n),
            trigger: Trigger::AtStart,
            behaviors: vec![Behavior::WithholdVote],
        })
        .collect()
}

fn churn(ops: &[ChurnOp]) -> Vec<ChurnEvent> {
    ops.iter().copied().map(ChurnEvent::sequential).collect()
}

/// Seven members, two of which never vote. Three joins and three departures
/// pile up under a threshold of six, leaving only two correct voters from the
/// stored configuration: publication can never happen.
pub fn stall_scenario(seed: u64) -> ScenarioConfig {
    let mut sc = ScenarioConfig {
        name: format!("stall-{seed}"),
        seed,
        initial_size: 7,
        policy: Policy::Fixed(6),
        allow_unpublishable: true,
        churn: churn(&[
            ChurnOp::Join { node: NodeId(7) },
            ChurnOp::Join { node: NodeId(8) },
            ChurnOp::Join { node: NodeId(9) },
            ChurnOp::Leave { node: NodeId(0) },
            ChurnOp::Leave { node: NodeId(1) },
            ChurnOp::Leave { node: NodeId(2) },
        ]),
        ..ScenarioConfig::default()
    };
    sc.adversary.entries = withholders(&[5, 6]);
    sc.max_time = Some(100.0 * sc.ledger.expected_confirmation_time());
    sc
}

/// Same system with a threshold of four and two departures: still publishable.
pub fn liveness_scenario(seed: u64, gst: f64) -> ScenarioConfig {
    let mut sc = ScenarioConfig {
        name: format!("liveness-{seed}"),
        seed,
        initial_size: 7,
        policy: Policy::Fixed(4),
        churn: churn(&[
            ChurnOp::Join { node: NodeId(7) },
            ChurnOp::Join { node: NodeId(8) },
            ChurnOp::Leave { node: NodeId(0) },
            ChurnOp::Leave { node: NodeId(1) },
        ]),
        ..ScenarioConfig::default()
    };
    sc.network.gst = gst;
    sc.adversary.entries = withholders(&[5, 6]);
    sc.max_time = Some(100.0 * sc.ledger.expected_confirmation_time());
    sc
}

/// A measured per-join gas figure for one system size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasAnchor {
    pub size: usize,
    pub gas_per_join: f64,
}

/// Per-join update gas measured on the reference deployment.
pub const DEFAULT_ANCHORS: [GasAnchor; 4] = [
    GasAnchor { size: 5, gas_per_join: 166_640.0 },
    GasAnchor { size: 25, gas_per_join: 113_314.0 },
    GasAnchor { size: 60, gas_per_join: 111_179.0 },
    GasAnchor { size: 93, gas_per_join: 127_590.0 },
];

/// Reads `size,gas_per_join` rows.
pub fn load_anchors(path: &Path) -> Result<Vec<GasAnchor>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::input(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFit {
    pub size: usize,
    pub target: f64,
    pub simulated: f64,
    pub usd: f64,
}

impl AnchorFit {
    pub fn ratio(&self) -> f64 {
        self.simulated / self.target
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub schedule: GasSchedule,
    /// False if the fit was degenerate and `schedule` is the input unchanged.
    pub fitted: bool,
    pub anchors: Vec<AnchorFit>,
}

/// The update whose batch of joins brought the system to `size`.
pub fn covering_update(updates: &[UpdateRecord], size: usize) -> Option<&UpdateRecord> {
    updates
        .iter()
        .find(|u| u.previous_size < size && size <= u.size)
}

/// Non-negative least squares by enumerating active sets; fine for a handful of unknowns.
fn nnls(a: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let m = a.ncols();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let cols: Vec<usize> = (0..m).filter(|c| mask & (1 << c) != 0).collect();
        let sub = a.select_columns(&cols);
        let svd = sub.clone().svd(true, true);
        if svd.rank(1e-9 * svd.singular_values.max()) < cols.len() {
            continue;
        }
        let Ok(w) = svd.solve(y, 1e-12) else {
            continue;
        };
        if w.iter().any(|v| *v < 0.0) {
            continue;
        }
        let resid = (&sub * &w - y).norm();
        if best.as_ref().is_none_or(|(r, _)| resid < *r - 1e-9) {
            let mut full = DVector::zeros(m);
            for (i, c) in cols.iter().enumerate() {
                full[*c] = w[i];
            }
            best = Some((resid, full));
        }
    }
    best.map(|(_, w)| w)
}

fn anchor_fits(out: &RunOutput, anchors: &[GasAnchor], sc: &ScenarioConfig) -> Result<Vec<AnchorFit>> {
    anchors
        .iter()
        .map(|a| {
            let u = covering_update(&out.updates, a.size).ok_or_else(|| {
                Error::Calibration(format!("no update covers size {}", a.size))
            })?;
            Ok(AnchorFit {
                size: a.size,
                target: a.gas_per_join,
                simulated: u.gas_per_join,
                usd: usd_cost(u.total_gas, &sc.price) / u.changes as f64,
            })
        })
        .collect()
}

/// Fits the vote and update constants of `base` to per-join anchors under the
/// HalfF policy, keeping `g_base`, registration and refund terms. The fixed
/// per-update part is split between the first-vote and update surcharges in
/// the proportion `base` uses.
pub fn calibrate_gas(anchors: &[GasAnchor], base: &GasSchedule, seed: u64) -> Result<Calibration> {
    const UNKNOWNS: usize = 4;
    if anchors.len() < UNKNOWNS {
        return Err(Error::Calibration(format!(
            "under-determined: {} anchors for {UNKNOWNS} unknowns",
            anchors.len()
        )));
    }
    let from = 4;
    if let Some(a) = anchors.iter().find(|a| a.size <= from) {
        return Err(Error::Calibration(format!("anchor size {} must exceed {from}", a.size)));
    }
    let to = anchors.iter().map(|a| a.size).max().expect("non-empty");
    let mut sc = sweep_scenario(Policy::HalfF, from, to, seed);
    sc.ledger.gas = *base;
    let out = run_scenario(&sc)?;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for a in anchors {
        let u = covering_update(&out.updates, a.size)
            .ok_or_else(|| Error::Calibration(format!("no update covers size {}", a.size)))?;
        let (v, n, k) = (u.voters as f64, u.size as f64, u.changes as f64);
        // Columns: vote storage, per listed member, fixed per update, per installed member.
        rows.extend([v / k, v * n / k, 1.0 / k, n / k]);
        y.push(a.gas_per_join - v * base.g_base as f64 / k);
    }
    let a = DMatrix::from_row_slice(anchors.len(), UNKNOWNS, &rows);
    let y = DVector::from_vec(y);
    let Some(w) = nnls(&a, &y) else {
        return Ok(Calibration {
            schedule: *base,
            fitted: false,
            anchors: anchor_fits(&out, anchors, &sc)?,
        });
    };
    let fixed = w[2];
    let split = base.g_first_vote_init + base.g_update_fixed;
    let first_share = if split == 0 {
        0.5
    } else {
        base.g_first_vote_init as f64 / split as f64
    };
    let schedule = GasSchedule {
        g_vote_store: w[0].round() as u64,
        g_vote_per_member: w[1].round() as u64,
        g_first_vote_init: (fixed * first_share).round() as u64,
        g_update_fixed: (fixed * (1.0 - first_share)).round() as u64,
        g_update_per_member: w[3].round() as u64,
        ..*base
    };
    sc.ledger.gas = schedule;
    let check = run_scenario(&sc)?;
    Ok(Calibration {
        schedule,
        fitted: true,
        anchors: anchor_fits(&check, anchors, &sc)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_anchor_is_under_determined() {
        let err = calibrate_gas(&DEFAULT_ANCHORS[..1], &GasSchedule::default(), 1).unwrap_err();
        assert!(matches!(err, Error::Calibration(m) if m.contains("under-determined")));
    }

    #[test]
    fn nnls_recovers_exact_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 3.0, 5.0]);
        let w = nnls(&a, &y).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-9 && (w[1] - 3.0).abs() < 1e-9);
        // A negative unconstrained optimum is clamped to zero.
        let y = DVector::from_vec(vec![-1.0, 3.0, 2.0]);
        let w = nnls(&a, &y).unwrap();
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..37).collect();
        assert_eq!(parallel_map(&items, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn stall_and_liveness_scenarios_validate() {
        assert!(stall_scenario(1).validate().is_ok());
        let mut sc = stall_scenario(1);
        sc.allow_unpublishable = false;
        assert!(matches!(sc.validate(), Err(Error::Unpublishable(_))));
        assert!(liveness_scenario(1, 0.0).validate().is_ok());
    }
}
