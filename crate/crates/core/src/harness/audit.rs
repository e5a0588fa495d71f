use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusConfig;
use crate::execution::GasConfig;
use crate::nodes::SimNode;
use crate::pipeline::{PipelineConfig, PipelineVariant};
use crate::simnet::{
    FaultBehavior, FaultSpec, NetworkConfig, SimConfig, Simulation, Topology, Workload,
};
use crate::storage::{Marker, StorageConfig};
use crate::types::{BlockId, Micros, NodeId, MILLI, SECOND};

/// Outcome of one audited run. `violations` is empty when every safety,
/// revert and liveness check passed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n: usize,
    pub seed: u64,
    pub variant: String,
    pub submitted: u64,
    pub confirmed: u64,
    pub certified_blocks: usize,
    pub records_reverted: u64,
    pub trace_hash: String,
    pub end_time: Micros,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Violations other than unconfirmed transactions.
    pub fn safety_ok(&self) -> bool {
        self.violations.iter().all(|v| v.starts_with("liveness"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub n: usize,
    pub runs: usize,
    pub passed: usize,
    pub certified_blocks: usize,
    pub records_reverted: u64,
    /// Failing runs only.
    pub failures: Vec<AuditReport>,
}

/// A randomized adversarial schedule: `f` equivocating validators (double
/// voting on odd seeds), random pre-GST delays, a random GST and a
/// partition of one honest validator that heals by GST.
pub fn safety_config(n: usize, seed: u64, variant: PipelineVariant) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ n as u64);
    let delta_vv = rng.gen_range(2..=10) * MILLI;
    let mut network = NetworkConfig::constant(MILLI, MILLI, delta_vv);
    network.gst = rng.gen_range(0..=400) * MILLI;
    network.pre_gst_max_delay = rng.gen_range(1..=6) * delta_vv;

    let mut consensus = ConsensusConfig::for_n(n);
    consensus.propose_empty = false;
    consensus.round_timeout = 5 * delta_vv;
    consensus.max_block_txns = rng.gen_range(2..=8);

    let pipeline = PipelineConfig {
        variant,
        gas: GasConfig {
            per_txn_gas: 1,
            block_gas_limit: 64,
            exec_time_per_gas: rng.gen_range(0..=2) * MILLI,
        },
        storage: StorageConfig {
            commit_base: MILLI,
            commit_per_txn: rng.gen_range(0..=2) * MILLI,
            marker_upgrade: 100,
        },
        ..PipelineConfig::default()
    };
    let mut cfg = SimConfig::new(network, consensus, pipeline);
    cfg.seed = seed;
    cfg.topology = Topology {
        fullnodes: 2,
        clients: 2,
        direct: false,
        query_timeout: 2 * SECOND,
        progress_timeout: SECOND,
    };
    cfg.workload = Workload {
        txns: rng.gen_range(8..=24),
        rate_tps: rng.gen_range(20..=200),
        start: rng.gen_range(0..=100) * MILLI,
        accounts: 8,
        payload_len: 16,
        ..Workload::default()
    };

    let f = cfg.consensus.f;
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);
    for &v in &order[..f] {
        cfg.faults.push(FaultSpec {
            node: NodeId::validator(v),
            behavior: FaultBehavior::Equivocate {
                double_vote: seed % 2 == 1,
            },
        });
    }
    let gst = cfg.network.gst;
    if gst > 0 {
        let victim = order[f];
        let mut peers: Vec<NodeId> = order
            .iter()
            .filter(|&&v| v != victim)
            .map(|&v| NodeId::validator(v))
            .collect();
        peers.shuffle(&mut rng);
        peers.truncate(rng.gen_range(1..=peers.len()));
        let from = rng.gen_range(0..gst);
        let until = rng.gen_range(from + 1..=gst);
        cfg.faults.push(FaultSpec {
            node: NodeId::validator(victim),
            behavior: FaultBehavior::Partition { peers, from, until },
        });
    }
    cfg
}

/// Builds and runs `cfg` to quiescence with signature auditing, then checks
/// the finished state.
pub fn audit_run(cfg: &SimConfig) -> AuditReport {
    let mut sim = match cfg.build() {
        Ok(sim) => sim,
        Err(e) => {
            return AuditReport {
                violations: vec![format!("config: {e}")],
                ..blank(cfg)
            }
        }
    };
    sim.audit_signatures = true;
    let stalled = sim.run_to_quiescence().err();
    let mut report = audit_sim(&sim, cfg);
    if let Some(e) = stalled {
        report.violations.insert(0, format!("liveness: {e}"));
    }
    report
}

fn blank(cfg: &SimConfig) -> AuditReport {
    AuditReport {
        n: cfg.consensus.n,
        seed: cfg.seed,
        variant: cfg.pipeline.variant.name().to_string(),
        ..AuditReport::default()
    }
}

/// Audits a simulation that has already run.
pub(crate) fn audit_sim(sim: &Simulation, cfg: &SimConfig) -> AuditReport {
    let mut report = blank(cfg);
    check(sim, cfg, &mut report);
    report
}

fn check(sim: &Simulation, cfg: &SimConfig, report: &mut AuditReport) {
    let v = &mut report.violations;
    let honest: BTreeSet<NodeId> = cfg.honest_validators().into_iter().collect();
    let mut pipelines = Vec::new();
    let mut certified = BTreeSet::new();
    for node in sim.nodes() {
        match node {
            SimNode::Validator(val) if honest.contains(&val.id()) => {
                pipelines.push(&val.pipeline);
                certified.extend(val.certified.iter().copied());
                if val.consensus.safety_violations() > 0 {
                    v.push(format!("{}: conflicting order quorum observed", val.id()));
                }
            }
            SimNode::Fullnode(f) => {
                pipelines.push(&f.pipeline);
                if let Some(why) = &f.halted {
                    v.push(format!("{} halted: {why}", f.id()));
                }
            }
            SimNode::Client(c) => {
                report.submitted += c.submitted;
                report.confirmed += c.samples.len() as u64;
            }
            _ => {}
        }
    }
    report.certified_blocks = certified.len();
    report.trace_hash = sim.trace_hash().to_hex();
    report.end_time = sim.now();
    if sim.stats.forged > 0 {
        v.push(format!("{} forged signatures delivered", sim.stats.forged));
    }

    // committed logs are prefixes of the longest one
    let logs: Vec<Vec<BlockId>> = pipelines
        .iter()
        .map(|p| p.committed.iter().map(|c| c.block_id).collect())
        .collect();
    let longest = logs
        .iter()
        .max_by_key(|l| l.len())
        .cloned()
        .unwrap_or_default();
    for (p, log) in pipelines.iter().zip(&logs) {
        if log[..] != longest[..log.len()] {
            v.push(format!(
                "{}: committed log diverges from the longest log",
                p.me
            ));
        }
    }

    for p in &pipelines {
        report.records_reverted += p.stats.records_reverted;
        if p.stats.committed_violations > 0 {
            v.push(format!(
                "{}: {} attempts to revert or rewrite Committed records",
                p.me, p.stats.committed_violations
            ));
        }
        let h = p.h_cmt();
        for r in p.storage.records() {
            if r.height == 0 {
                continue;
            }
            if r.height <= h {
                let in_log = p.committed.get(r.height as usize).map(|c| c.block_id);
                if r.marker != Marker::Committed || in_log != Some(r.block_id) {
                    v.push(format!(
                        "{}: record at height {} disagrees with the committed log",
                        p.me, r.height
                    ));
                }
            } else if r.marker == Marker::OptCommitted {
                // an optimistic record must still belong to a live candidate
                if !p.contains(&r.block_id) {
                    v.push(format!(
                        "{}: orphaned OptCommitted record at height {}",
                        p.me, r.height
                    ));
                }
            }
        }
    }
    for node in sim.nodes() {
        let SimNode::Validator(val) = node else {
            continue;
        };
        if !honest.contains(&val.id()) {
            continue;
        }
        let ordered = val.consensus.ordered_chain();
        for r in val
            .pipeline
            .storage
            .records()
            .filter(|r| r.marker == Marker::OptCommitted)
        {
            if ordered.get(&r.height).is_some_and(|id| *id != r.block_id) {
                v.push(format!(
                    "{}: OptCommitted record at height {} conflicts with the ordered chain",
                    val.id(),
                    r.height
                ));
            }
        }
        let missing = certified
            .iter()
            .filter(|id| !val.consensus.is_ordered(id))
            .count();
        if missing > 0 {
            v.push(format!(
                "{}: {missing} certified blocks never ordered",
                val.id()
            ));
        }
    }

    // identical storage below the lowest commit height
    let floor = pipelines.iter().map(|p| p.h_cmt()).min().unwrap_or(0);
    if let Some(first) = pipelines.first() {
        let reference: Vec<_> = first
            .storage
            .records()
            .filter(|r| r.height <= floor)
            .collect();
        for p in &pipelines[1..] {
            let mine: Vec<_> = p.storage.records().filter(|r| r.height <= floor).collect();
            if mine.len() != reference.len()
                || mine.iter().zip(&reference).any(|(a, b)| !a.same_content(b))
            {
                v.push(format!(
                    "{}: storage differs from {} at or below height {floor}",
                    p.me, first.me
                ));
            }
        }
    }

    if report.confirmed < report.submitted || report.submitted < cfg.workload.txns {
        v.push(format!(
            "liveness: {} of {} transactions confirmed ({} scheduled)",
            report.confirmed, report.submitted, cfg.workload.txns
        ));
    }
}

/// Audits `seeds` adversarial schedules at size `n`, in parallel.
pub fn audit_suite(
    n: usize,
    seeds: std::ops::Range<u64>,
    variant: PipelineVariant,
) -> SuiteSummary {
    let reports: Vec<AuditReport> = seeds
        .into_par_iter()
        .map(|s| audit_run(&safety_config(n, s, variant)))
        .collect();
    let mut summary = SuiteSummary {
        n,
        runs: reports.len(),
        ..SuiteSummary::default()
    };
    for r in reports {
        summary.certified_blocks += r.certified_blocks;
        summary.records_reverted += r.records_reverted;
        if r.ok() {
            summary.passed += 1;
        } else {
            summary.failures.push(r);
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safety_configs_validate() {
        for n in [4, 7, 10] {
            for seed in 0..50 {
                safety_config(n, seed, PipelineVariant::ZAPTOS)
                    .validate()
                    .unwrap();
            }
        }
    }

    #[test]
    fn small_suite_passes() {
        for variant in [PipelineVariant::ZAPTOS, PipelineVariant::BASELINE] {
            let s = audit_suite(4, 0..16, variant);
            assert!(s.failures.is_empty(), "{:#?}", s.failures);
        }
    }
}
