use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bms_core::client::ClientMode;
use bms_core::experiments::{
    attack_demo, calibrate_gas, load_anchors, sweep_scenario, DEFAULT_ANCHORS,
};
use bms_core::ledger::GasSchedule;
use bms_core::membership::Policy;
use bms_core::metrics::RunOutput;
use bms_core::{run_scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "bms-sim", version, about = "Simulator for BFT reconfiguration backed by a ledger membership service")]
struct Cli {
    /// Output directory for CSV files.
    #[arg(long, global = true, env = "BMS_SIM_OUT", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    T1,
    Halff,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Bms,
    Control,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario file.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Count registrations as soon as they are included; confirmation
        /// latency is then reported from block times.
        #[arg(long)]
        skip_confirmation: bool,
    },
    /// Grow the system one join at a time.
    Sweep {
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long, default_value_t = 4)]
        from: usize,
        #[arg(long, default_value_t = 100)]
        to: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        skip_confirmation: bool,
    },
    /// Long-range attack against a client that slept through a full turnover.
    AttackDemo {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        first_seed: u64,
    },
    /// Fit the gas schedule to per-join anchors (`size,gas_per_join` CSV).
    CalibrateGas {
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn report(out: &RunOutput, dir: &Path) -> Result<()> {
    out.write_csvs(dir)
        .with_context(|| format!("writing CSVs to {}", dir.display()))?;
    println!(
        "{}: {} joins, {} counted votes, {} updates; final size {}, stored C{} ({} members); t_end {:.1}s{}",
        out.name,
        out.joins.len(),
        out.votes.len(),
        out.updates.len(),
        out.final_size,
        out.stored_number,
        out.stored_size,
        out.end_time,
        if out.completed { "" } else { " (time limit)" }
    );
    if !out.joins.is_empty() {
        println!(
            "mean latency: tx {:.2}s, confirm {:.2}s, ordering {:.3}s, checkpoint {:.2}s",
            mean(out.joins.iter().map(|j| j.tx_latency_s)),
            mean(out.joins.iter().map(|j| j.confirm_latency_s)),
            mean(out.joins.iter().map(|j| j.ordering_latency_s)),
            mean(out.joins.iter().map(|j| j.checkpoint_latency_s)),
        );
    }
    for c in &out.clients {
        println!(
            "client {} ({:?}): {} accepted, {} forged",
            c.id, c.mode, c.accepted, c.forged
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run {
            file,
            seed,
            skip_confirmation,
        } => {
            let mut sc = ScenarioConfig::load(&file)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            sc.skip_confirmation |= skip_confirmation;
            let out = run_scenario(&sc)?;
            report(&out, &cli.out)?;
        }
        Cmd::Sweep {
            policy,
            from,
            to,
            seed,
            skip_confirmation,
        } => {
            if from < 1 || to < from {
                bail!("--from must be at least 1 and no larger than --to");
            }
            let policy = match policy {
                PolicyArg::T1 => Policy::Every,
                PolicyArg::Halff => Policy::HalfF,
            };
            let mut sc = sweep_scenario(policy, from, to, seed);
            sc.skip_confirmation = skip_confirmation;
            let out = run_scenario(&sc)?;
            report(&out, &cli.out)?;
        }
        Cmd::AttackDemo {
            mode,
            seeds,
            first_seed,
        } => {
            let mode = match mode {
                ModeArg::Bms => ClientMode::WithBms,
                ModeArg::Control => ClientMode::Control,
            };
            let sum = attack_demo(mode, seeds, first_seed)?;
            println!(
                "{:?}: forged result accepted in {}/{} runs ({} forged of {} accepted)",
                sum.mode, sum.runs_with_forgery, sum.runs, sum.forged_total, sum.accepted_total
            );
            fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("attack.json");
            fs::write(&path, serde_json::to_string_pretty(&sum)?)?;
            println!("wrote {}", path.display());
        }
        Cmd::CalibrateGas { anchors, seed } => {
            let anchors = match anchors {
                Some(p) => load_anchors(&p)?,
                None => DEFAULT_ANCHORS.to_vec(),
            };
            let cal = calibrate_gas(&anchors, &GasSchedule::default(), seed)?;
            if !cal.fitted {
                eprintln!("degenerate fit; keeping the default schedule");
            }
            println!("size  target      simulated   ratio   usd");
            for a in &cal.anchors {
                println!(
                    "{:>4}  {:>10.0}  {:>10.0}  {:.4}  {:.2}",
                    a.size,
                    a.target,
                    a.simulated,
                    a.ratio(),
                    a.usd
                );
            }
            let json = serde_json::to_string_pretty(&cal.schedule)?;
            println!("{json}");
            fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("gas_schedule.json");
            fs::write(&path, json)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
