//! Experiments: closed-form latency, single-transaction conformance runs,
//! load sweeps, stage breakdowns, fault runs and the safety audit.

mod audit;
mod experiments;
mod report;

pub use audit::{audit_run, audit_suite, safety_config, AuditReport, SuiteSummary};
pub use experiments::{
    breakdown, experiment_config, fault_config, fault_run, run_experiment, sweep,
    throughput_window, write_breakdown_csv, write_report_csv, BreakdownRow, FaultRunResult,
    SweepPoint, BREAKDOWN_HEADER, PLOT_SCRIPT, REPORT_HEADER,
};
pub use report::{percentile, RunReport, StageStat};

use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusConfig;
use crate::execution::GasConfig;
use crate::nodes::SimNode;
use crate::pipeline::{PipelineConfig, PipelineVariant};
use crate::simnet::{NetworkConfig, SimConfig, SimError, Topology, Workload};
use crate::storage::StorageConfig;
use crate::types::{Micros, NodeId, SECOND};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyParams {
    pub delta_cf: Micros,
    pub delta_fv: Micros,
    pub delta_vv: Micros,
    pub t_con: Micros,
    pub t_exe: Micros,
    pub t_cmt: Micros,
}

/// Closed-form end-to-end latency of one transaction for the baseline and
/// the parallel pipeline. The parallel form charges each of the three
/// stages that can outlast the consensus round separately.
pub fn analytic_latency(p: &LatencyParams) -> (Micros, Micros) {
    let hops = 2 * p.delta_cf + 2 * p.delta_fv;
    let baseline = hops + p.delta_vv + p.t_con + 2 * p.t_exe + 2 * p.t_cmt;
    let zaptos = hops
        + p.t_con
        + (p.t_exe + p.t_cmt).saturating_sub(2 * p.delta_vv)
        + p.t_exe.saturating_sub(p.delta_vv)
        + p.t_cmt.saturating_sub(p.delta_vv);
    (baseline, zaptos)
}

/// Latency of the parallel pipeline along its critical path: execution
/// starts two hops before ordering, certification needs execution plus one
/// hop after the order vote, and commit needs execution plus the write.
/// The three paths overlap, so only the longest one counts.
pub fn critical_path_latency(p: &LatencyParams) -> Micros {
    let tail = p
        .t_exe
        .saturating_sub(p.delta_vv)
        .max((p.t_exe + p.t_cmt).saturating_sub(2 * p.delta_vv));
    2 * p.delta_cf + 2 * p.delta_fv + p.t_con + tail
}

/// Client-to-validator mode: same pipeline without the fullnode hops and
/// without fullnode re-execution.
pub fn direct_latency(p: &LatencyParams, variant: PipelineVariant) -> Micros {
    let hops = 2 * p.delta_cf;
    if variant.opt_execution {
        hops + p.t_con
            + p.t_exe
                .saturating_sub(p.delta_vv)
                .max((p.t_exe + p.t_cmt).saturating_sub(2 * p.delta_vv))
    } else {
        hops + p.t_con + p.t_exe + p.delta_vv + p.t_cmt
    }
}

/// Delays and stage costs of a single-transaction run; consensus latency
/// is measured, not configured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleTxnParams {
    pub delta_cf: Micros,
    pub delta_fv: Micros,
    pub delta_vv: Micros,
    pub t_exe: Micros,
    pub t_cmt: Micros,
}

impl SingleTxnParams {
    pub fn with_tcon(&self, t_con: Micros) -> LatencyParams {
        LatencyParams {
            delta_cf: self.delta_cf,
            delta_fv: self.delta_fv,
            delta_vv: self.delta_vv,
            t_con,
            t_exe: self.t_exe,
            t_cmt: self.t_cmt,
        }
    }
}

/// One transaction, four validators, one fullnode next to `v0`, constant
/// delays, no queuing: execution costs `t_exe`, a state write `t_cmt`,
/// and the marker upgrade is free.
pub fn single_txn_config(p: &SingleTxnParams, variant: PipelineVariant, direct: bool) -> SimConfig {
    let network = NetworkConfig::constant(p.delta_cf, p.delta_fv, p.delta_vv);
    let slowest = network.max_delay() + p.t_exe + p.t_cmt;
    let mut consensus = ConsensusConfig::for_n(4);
    consensus.propose_empty = false;
    consensus.round_timeout = 100 * slowest + 10 * SECOND;
    let pipeline = PipelineConfig {
        variant,
        gas: GasConfig {
            per_txn_gas: 1,
            block_gas_limit: 1_000,
            exec_time_per_gas: p.t_exe,
        },
        storage: StorageConfig {
            commit_base: 0,
            commit_per_txn: p.t_cmt,
            marker_upgrade: 0,
        },
        exec_prep: 0,
        ..PipelineConfig::default()
    };
    let mut cfg = SimConfig::new(network, consensus, pipeline);
    cfg.topology = Topology {
        fullnodes: 1,
        clients: 1,
        direct,
        query_timeout: 1_000 * slowest + 100 * SECOND,
        progress_timeout: 1_000 * slowest + 100 * SECOND,
    };
    cfg.workload = Workload {
        txns: 1,
        rate_tps: 1,
        accounts: 2,
        ..Workload::default()
    };
    cfg
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleTxnResult {
    /// Client submission to verified confirmation.
    pub latency: Micros,
    /// Input at the first validator to ordering there.
    pub t_con: Micros,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] crate::simnet::ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("transaction was never confirmed")]
    Unconfirmed,
}

pub fn run_single_txn(
    p: &SingleTxnParams,
    variant: PipelineVariant,
    direct: bool,
) -> Result<SingleTxnResult, HarnessError> {
    let cfg = single_txn_config(p, variant, direct);
    let mut sim = cfg.build()?;
    sim.run_to_quiescence()?;
    let client = sim
        .node(&NodeId::client(0))
        .and_then(SimNode::as_client)
        .expect("client");
    let sample = client.samples.first().ok_or(HarnessError::Unconfirmed)?;
    let v0 = sim
        .node(&NodeId::validator(0))
        .and_then(SimNode::as_validator)
        .expect("validator");
    let tcon = v0.tcon_samples.first().ok_or(HarnessError::Unconfirmed)?;
    Ok(SingleTxnResult {
        latency: sample.latency(),
        t_con: tcon.latency(),
    })
}

/// Both variants run on one parameter point, next to the closed forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conformance {
    pub params: SingleTxnParams,
    pub t_con: Micros,
    pub baseline: Micros,
    pub zaptos: Micros,
    pub analytic_baseline: Micros,
    pub analytic_zaptos: Micros,
    pub critical_path: Micros,
}

impl Conformance {
    pub fn baseline_exact(&self) -> bool {
        self.baseline == self.analytic_baseline
    }

    pub fn zaptos_exact(&self) -> bool {
        self.zaptos == self.analytic_zaptos
    }
}

pub fn conformance(p: &SingleTxnParams) -> Result<Conformance, HarnessError> {
    let b = run_single_txn(p, PipelineVariant::BASELINE, false)?;
    let z = run_single_txn(p, PipelineVariant::ZAPTOS, false)?;
    // both variants order the lone transaction identically
    debug_assert_eq!(b.t_con, z.t_con);
    let lp = p.with_tcon(b.t_con);
    let (analytic_baseline, analytic_zaptos) = analytic_latency(&lp);
    Ok(Conformance {
        params: *p,
        t_con: b.t_con,
        baseline: b.latency,
        zaptos: z.latency,
        analytic_baseline,
        analytic_zaptos,
        critical_path: critical_path_latency(&lp),
    })
}

/// Uniform random parameter points, every component in `[0, max]`.
pub fn latency_grid(seed: u64, points: usize, max: Micros) -> Vec<SingleTxnParams> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..points)
        .map(|_| SingleTxnParams {
            delta_cf: rng.gen_range(0..=max),
            delta_fv: rng.gen_range(0..=max),
            delta_vv: rng.gen_range(0..=max),
            t_exe: rng.gen_range(0..=max),
            t_cmt: rng.gen_range(0..=max),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MILLI;

    #[test]
    fn analytic_example() {
        let p = LatencyParams {
            delta_cf: 0,
            delta_fv: 0,
            delta_vv: 50,
            t_con: 200,
            t_exe: 60,
            t_cmt: 60,
        };
        assert_eq!(analytic_latency(&p), (490, 240));
        assert_eq!(critical_path_latency(&p), 220);
    }

    #[test]
    fn analytic_fast_stages_reduce_to_consensus() {
        let p = LatencyParams {
            delta_cf: 7,
            delta_fv: 3,
            delta_vv: 50,
            t_con: 200,
            t_exe: 0,
            t_cmt: 0,
        };
        assert_eq!(analytic_latency(&p).1, 2 * 7 + 2 * 3 + 200);
    }

    #[test]
    fn analytic_zero() {
        assert_eq!(analytic_latency(&LatencyParams::default()), (0, 0));
    }

    #[test]
    fn baseline_single_txn_matches_closed_form() {
        let p = SingleTxnParams {
            delta_cf: 3 * MILLI,
            delta_fv: 5 * MILLI,
            delta_vv: 50,
            t_exe: 60,
            t_cmt: 60,
        };
        let r = run_single_txn(&p, PipelineVariant::BASELINE, false).unwrap();
        assert_eq!(r.t_con, 4 * 50);
        assert_eq!(r.latency, analytic_latency(&p.with_tcon(r.t_con)).0);
    }

    #[test]
    fn zaptos_single_txn_follows_critical_path() {
        let p = SingleTxnParams {
            delta_cf: 0,
            delta_fv: 0,
            delta_vv: 50,
            t_exe: 60,
            t_cmt: 60,
        };
        let r = run_single_txn(&p, PipelineVariant::ZAPTOS, false).unwrap();
        assert_eq!(r.t_con, 200);
        assert_eq!(r.latency, 220);
    }

    #[test]
    fn direct_mode_saves_three_rounds() {
        let p = SingleTxnParams {
            delta_cf: 4,
            delta_fv: 9,
            delta_vv: 50,
            t_exe: 80,
            t_cmt: 70,
        };
        let b = run_single_txn(&p, PipelineVariant::BASELINE, true).unwrap();
        let z = run_single_txn(&p, PipelineVariant::ZAPTOS, true).unwrap();
        assert_eq!(b.latency - z.latency, 3 * 50);
        assert_eq!(
            b.latency,
            direct_latency(&p.with_tcon(b.t_con), PipelineVariant::BASELINE)
        );
        assert_eq!(
            z.latency,
            direct_latency(&p.with_tcon(z.t_con), PipelineVariant::ZAPTOS)
        );
    }
}
