use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::audit::{audit_sim, AuditReport};
use super::report::RunReport;
use super::HarnessError;
use crate::consensus::ConsensusConfig;
use crate::execution::GasConfig;
use crate::pipeline::{PipelineConfig, PipelineVariant, StageName};
use crate::simnet::{FaultBehavior, FaultSpec, NetworkConfig, SimConfig, Topology, Workload};
use crate::storage::StorageConfig;
use crate::types::{Micros, NodeId, MILLI, SECOND};

pub const REPORT_HEADER: &str = "variant,target_tps,seed,submitted,confirmed,committed_tps,p25_us,p50_us,p75_us,mean_us,tcon_p50_us,wasted_exec,records_reverted";

pub const BREAKDOWN_HEADER: &str =
    "variant,target_tps,stage,mean_offset_start_us,mean_offset_end_us,mean_duration_us,samples";

/// Renders `breakdown.csv` as one horizontal bar per stage and variant.
pub const PLOT_SCRIPT: &str = r#"import csv, sys
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

src = sys.argv[1] if len(sys.argv) > 1 else "breakdown.csv"
rows = list(csv.DictReader(open(src)))
variants = sorted({r["variant"] for r in rows})
fig, axes = plt.subplots(len(variants), 1, figsize=(9, 2.2 * len(variants)), squeeze=False)
for ax, v in zip(axes[:, 0], variants):
    mine = [r for r in rows if r["variant"] == v]
    for i, r in enumerate(mine):
        start = float(r["mean_offset_start_us"]) / 1000
        width = float(r["mean_duration_us"]) / 1000
        ax.barh(i, width, left=start)
    ax.set_yticks(range(len(mine)), [r["stage"] for r in mine])
    ax.invert_yaxis()
    ax.set_title(v)
    ax.set_xlabel("ms since block dissemination")
fig.tight_layout()
fig.savefig(src.rsplit(".", 1)[0] + ".png", dpi=120)
"#;

/// Desk-scale load configuration: four validators, co-located fullnode and
/// client, 40 ms between validators. Execution costs 100 us per
/// transaction and a commit 5 ms plus 50 us per transaction.
pub fn experiment_config(
    variant: PipelineVariant,
    rate_tps: u64,
    duration: Micros,
    seed: u64,
) -> SimConfig {
    let network = NetworkConfig::constant(MILLI, MILLI, 40 * MILLI);
    let mut consensus = ConsensusConfig::for_n(4);
    consensus.propose_empty = false;
    consensus.round_timeout = SECOND;
    consensus.max_block_txns = 500;
    let pipeline = PipelineConfig {
        variant,
        gas: GasConfig {
            per_txn_gas: 1,
            block_gas_limit: 500,
            exec_time_per_gas: 100,
        },
        storage: StorageConfig {
            commit_base: 5 * MILLI,
            commit_per_txn: 50,
            marker_upgrade: 500,
        },
        exec_prep: 0,
        ..PipelineConfig::default()
    };
    let mut cfg = SimConfig::new(network, consensus, pipeline);
    cfg.seed = seed;
    cfg.topology = Topology {
        fullnodes: 1,
        clients: 4,
        ..Topology::default()
    };
    cfg.workload = Workload {
        txns: rate_tps * duration / SECOND,
        rate_tps,
        accounts: 256,
        payload_len: 32,
        ..Workload::default()
    };
    cfg
}

/// Steady-state part of the submission period: the first tenth is warm-up
/// and the window closes when submissions stop. Commits counted here are
/// insensitive to the latency of the variant, since each transaction's
/// commit is shifted by the same amount at both window edges.
pub fn throughput_window(w: &Workload) -> (Micros, Micros) {
    let end = w.end();
    (w.start + (end - w.start) / 10, end)
}

/// Runs a configuration to quiescence and returns its report and audit.
pub fn run_experiment(cfg: &SimConfig) -> Result<(RunReport, AuditReport), HarnessError> {
    let mut sim = cfg.build()?;
    sim.run_to_quiescence()?;
    let report = RunReport::collect(&sim, cfg, throughput_window(&cfg.workload));
    Ok((report, audit_sim(&sim, cfg)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub target_tps: u64,
    pub report: RunReport,
    pub audit: AuditReport,
}

impl SweepPoint {
    pub fn csv_record(&self) -> Vec<String> {
        let r = &self.report;
        let opt = |x: Option<Micros>| x.map(|v| v.to_string()).unwrap_or_default();
        vec![
            r.variant.name().to_string(),
            self.target_tps.to_string(),
            r.seed.to_string(),
            r.submitted.to_string(),
            r.confirmed.to_string(),
            format!("{:.1}", r.committed_tps),
            opt(r.p25),
            opt(r.p50),
            opt(r.p75),
            format!("{:.0}", r.mean_latency),
            opt(r.tcon_p50),
            r.wasted_exec.to_string(),
            r.records_reverted.to_string(),
        ]
    }
}

/// One run per load level, the workload scaled to last `duration`.
pub fn sweep(
    base: &SimConfig,
    rates: &[u64],
    duration: Micros,
) -> Result<Vec<SweepPoint>, HarnessError> {
    rates
        .par_iter()
        .map(|&rate| {
            let mut cfg = base.clone();
            cfg.workload.rate_tps = rate;
            cfg.workload.txns = rate * duration / SECOND;
            let (report, audit) = run_experiment(&cfg)?;
            Ok(SweepPoint {
                target_tps: rate,
                report,
                audit,
            })
        })
        .collect()
}

pub fn write_report_csv(w: impl Write, points: &[SweepPoint]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER.split(','))?;
    for p in points {
        out.write_record(p.csv_record())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub variant: String,
    pub target_tps: u64,
    pub stage: StageName,
    pub mean_offset_start: f64,
    pub mean_offset_end: f64,
    pub mean_duration: f64,
    pub samples: usize,
}

/// Mean stage timings for one run.
pub fn breakdown(cfg: &SimConfig) -> Result<Vec<BreakdownRow>, HarnessError> {
    let (report, _) = run_experiment(cfg)?;
    Ok(report
        .stages
        .iter()
        .map(|s| BreakdownRow {
            variant: report.variant.name().to_string(),
            target_tps: cfg.workload.rate_tps,
            stage: s.stage,
            mean_offset_start: s.mean_start,
            mean_offset_end: s.mean_end,
            mean_duration: s.mean_duration,
            samples: s.samples,
        })
        .collect())
}

pub fn write_breakdown_csv(w: impl Write, rows: &[BreakdownRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BREAKDOWN_HEADER.split(','))?;
    for r in rows {
        out.write_record([
            r.variant.clone(),
            r.target_tps.to_string(),
            r.stage.as_str().to_string(),
            format!("{:.0}", r.mean_offset_start),
            format!("{:.0}", r.mean_offset_end),
            format!("{:.0}", r.mean_duration),
            r.samples.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultRunResult {
    pub equivocators: usize,
    pub report: RunReport,
    pub audit: AuditReport,
}

/// Same load with the first `equivocators` validators equivocating
/// whenever they lead.
pub fn fault_run(base: &SimConfig, equivocators: usize) -> Result<FaultRunResult, HarnessError> {
    let mut cfg = base.clone();
    cfg.faults = (0..equivocators as u32)
        .map(|i| FaultSpec {
            node: NodeId::validator(i),
            behavior: FaultBehavior::Equivocate { double_vote: false },
        })
        .collect();
    let (report, audit) = run_experiment(&cfg)?;
    Ok(FaultRunResult {
        equivocators,
        report,
        audit,
    })
}

/// Ten validators with small blocks, loaded close to their fault-free
/// capacity so that lost rounds show up as lost throughput.
pub fn fault_config(variant: PipelineVariant, duration: Micros, seed: u64) -> SimConfig {
    let mut cfg = experiment_config(variant, 0, duration, seed);
    cfg.consensus = ConsensusConfig {
        max_block_txns: 40,
        round_timeout: 300 * MILLI,
        ..cfg.consensus
    };
    cfg.consensus = ConsensusConfig {
        n: 10,
        f: 3,
        ..cfg.consensus
    };
    cfg.pipeline.gas.block_gas_limit = 40;
    // one block per 40 ms round at most
    let rate = 40 * SECOND / cfg.network.delta_vv * 9 / 10;
    cfg.workload.rate_tps = rate;
    cfg.workload.txns = rate * duration / SECOND;
    cfg
}
