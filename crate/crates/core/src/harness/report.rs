use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nodes::SimNode;
use crate::pipeline::{PipelineVariant, StageName, StageRow};
use crate::simnet::{SimConfig, Simulation};
use crate::types::{BlockId, Micros, NodeId};

/// Nearest-rank percentile of sorted samples; `q` in `[0, 1]`.
pub fn percentile(sorted: &[Micros], q: f64) -> Option<Micros> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn mean(xs: &[Micros]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
    }
}

/// Mean timing of one stage, relative to the first input of each block's
/// transactions at a validator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStat {
    pub stage: StageName,
    pub mean_start: f64,
    pub mean_end: f64,
    pub mean_duration: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: PipelineVariant,
    pub seed: u64,
    pub submitted: u64,
    pub confirmed: u64,
    /// Client-observed end-to-end latencies, sorted.
    pub latencies: Vec<Micros>,
    pub p25: Option<Micros>,
    pub p50: Option<Micros>,
    pub p75: Option<Micros>,
    pub mean_latency: f64,
    /// Dissemination plus ordering per transaction at its input validator.
    pub tcon_p50: Option<Micros>,
    pub tcon_mean: f64,
    /// Transactions committed by the reference validator while the workload
    /// ran, per second.
    pub committed_tps: f64,
    pub stages: Vec<StageStat>,
    pub wasted_exec: u64,
    pub records_reverted: u64,
    pub trace_hash: String,
    pub end_time: Micros,
}

/// First validator that runs the protocol as written.
pub(crate) fn reference_validator(cfg: &SimConfig) -> NodeId {
    cfg.honest_validators()
        .into_iter()
        .next()
        .expect("at least one honest validator")
}

/// Stage offsets per block, measured from the earliest dissemination start
/// of that block at any validator. Blocks without transactions are skipped.
pub(crate) fn stage_stats(rows: &[StageRow]) -> Vec<StageStat> {
    let mut origin: BTreeMap<BlockId, Micros> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.stage == StageName::Dissemination) {
        origin
            .entry(r.block_id)
            .and_modify(|t| *t = (*t).min(r.start))
            .or_insert(r.start);
    }
    let mut acc: BTreeMap<StageName, (Vec<Micros>, Vec<Micros>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.txns > 0) {
        let Some(&t0) = origin.get(&r.block_id) else {
            continue;
        };
        let e = acc.entry(r.stage).or_default();
        e.0.push(r.start.saturating_sub(t0));
        e.1.push(r.end.saturating_sub(t0));
    }
    StageName::ALL
        .iter()
        .filter_map(|s| {
            let (starts, ends) = acc.get(s)?;
            let durations: Vec<Micros> = starts.iter().zip(ends).map(|(a, b)| b - a).collect();
            Some(StageStat {
                stage: *s,
                mean_start: mean(starts),
                mean_end: mean(ends),
                mean_duration: mean(&durations),
                samples: starts.len(),
            })
        })
        .collect()
}

impl RunReport {
    /// Summarizes a finished run. Throughput counts commits at the
    /// reference validator inside `[window.0, window.1)`.
    pub fn collect(sim: &Simulation, cfg: &SimConfig, window: (Micros, Micros)) -> RunReport {
        let mut latencies = Vec::new();
        let mut submitted = 0;
        let mut rows = Vec::new();
        let mut wasted = 0;
        let mut reverted = 0;
        let honest = cfg.honest_validators();
        for node in sim.nodes() {
            match node {
                SimNode::Client(c) => {
                    submitted += c.submitted;
                    latencies.extend(c.samples.iter().map(|s| s.latency()));
                }
                SimNode::Validator(v) if honest.contains(&v.id()) => {
                    rows.extend_from_slice(&v.pipeline.trace);
                    wasted += v.pipeline.stats.wasted_exec;
                    reverted += v.pipeline.stats.records_reverted;
                }
                SimNode::Fullnode(f) => rows.extend_from_slice(&f.pipeline.trace),
                _ => {}
            }
        }
        latencies.sort_unstable();
        let reference = reference_validator(cfg);
        let v = sim
            .node(&reference)
            .and_then(SimNode::as_validator)
            .expect("reference validator");
        let mut tcon: Vec<Micros> = v.tcon_samples.iter().map(|s| s.latency()).collect();
        tcon.sort_unstable();
        let (from, to) = window;
        let committed: usize = v
            .pipeline
            .committed
            .iter()
            .filter(|c| c.at >= from && c.at < to)
            .map(|c| c.txns)
            .sum();
        let span = to.saturating_sub(from).max(1);
        RunReport {
            variant: cfg.pipeline.variant,
            seed: cfg.seed,
            submitted,
            confirmed: latencies.len() as u64,
            p25: percentile(&latencies, 0.25),
            p50: percentile(&latencies, 0.50),
            p75: percentile(&latencies, 0.75),
            mean_latency: mean(&latencies),
            latencies,
            tcon_p50: percentile(&tcon, 0.5),
            tcon_mean: mean(&tcon),
            committed_tps: committed as f64 * 1e6 / span as f64,
            stages: stage_stats(&rows),
            wasted_exec: wasted,
            records_reverted: reverted,
            trace_hash: sim.trace_hash().to_hex(),
            end_time: sim.now(),
        }
    }

    pub fn stage(&self, stage: StageName) -> Option<&StageStat> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}
