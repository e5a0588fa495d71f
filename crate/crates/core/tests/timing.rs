use std::collections::BTreeMap;

use proptest::prelude::*;

use pipesim::harness::{
    analytic_latency, critical_path_latency, experiment_config, run_experiment, run_single_txn,
    safety_config, SingleTxnParams,
};
use pipesim::nodes::{SimNode, Validator};
use pipesim::pipeline::{PipelineVariant, StageName, StageRow};
use pipesim::simnet::{FaultBehavior, FaultSpec, SimConfig, Simulation};
use pipesim::types::{BlockId, Micros, NodeId, MILLI, SECOND};

const DELTA: Micros = 40 * MILLI;

/// Steady load on the desk-scale setup, with empty blocks so rounds keep
/// turning between submissions.
fn steady(variant: PipelineVariant) -> SimConfig {
    let mut cfg = experiment_config(variant, 500, 2 * SECOND, 5);
    cfg.consensus.propose_empty = true;
    cfg
}

fn run(cfg: &SimConfig, until: Micros) -> Simulation {
    let mut sim = cfg.build().unwrap();
    sim.run_until(until).unwrap();
    sim
}

fn validator(sim: &Simulation, i: u32) -> &Validator {
    sim.node(&NodeId::validator(i))
        .and_then(SimNode::as_validator)
        .unwrap()
}

fn rows(v: &Validator, stage: StageName) -> Vec<&StageRow> {
    v.pipeline
        .trace
        .iter()
        .filter(|r| r.stage == stage)
        .collect()
}

#[test]
fn ordering_takes_three_rounds_after_the_proposal() {
    let sim = run(&steady(PipelineVariant::ZAPTOS), 3 * SECOND);
    let mut checked = 0;
    for i in 0..4 {
        let v = validator(&sim, i);
        for r in rows(v, StageName::Ordering)
            .into_iter()
            .filter(|r| r.height > 2)
        {
            if v.consensus
                .block(&r.block_id)
                .is_some_and(|b| b.proposer == v.id())
            {
                assert_eq!(
                    r.end - r.start,
                    3 * DELTA,
                    "height {} at its leader",
                    r.height
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 50, "{checked}");
}

#[test]
fn blocks_are_ordered_one_round_apart() {
    let sim = run(&steady(PipelineVariant::ZAPTOS), 3 * SECOND);
    let ordered: Vec<(u64, Micros)> = rows(validator(&sim, 1), StageName::Ordering)
        .iter()
        .map(|r| (r.height, r.end))
        .collect();
    assert!(ordered.len() > 50);
    for w in ordered.windows(2).filter(|w| w[0].0 > 2) {
        assert_eq!(w[1].0, w[0].0 + 1);
        assert_eq!(w[1].1 - w[0].1, DELTA, "heights {} and {}", w[0].0, w[1].0);
    }
}

#[test]
fn optimistic_execution_starts_two_rounds_earlier() {
    let starts = |variant| {
        let sim = run(&steady(variant), 3 * SECOND);
        let v = validator(&sim, 1);
        rows(v, StageName::Execution)
            .into_iter()
            .filter(|r| {
                r.txns > 0
                    && v.consensus
                        .block(&r.block_id)
                        .is_some_and(|b| b.proposer != v.id())
            })
            .map(|r| (r.height, (r.block_id, r.start)))
            .collect::<BTreeMap<u64, (BlockId, Micros)>>()
    };
    let base = starts(PipelineVariant::BASELINE);
    let zap = starts(PipelineVariant::ZAPTOS);
    let mut checked = 0;
    for (h, (id, t)) in &zap {
        let Some((bid, bt)) = base.get(h) else {
            continue;
        };
        assert_eq!(id, bid, "same block at height {h}");
        assert_eq!(bt - t, 2 * DELTA, "height {h}");
        checked += 1;
    }
    assert!(checked > 20, "{checked}");
}

#[test]
fn same_seed_same_trace() {
    let cfg = steady(PipelineVariant::ZAPTOS);
    assert_eq!(
        run(&cfg, 2 * SECOND).trace_hash(),
        run(&cfg, 2 * SECOND).trace_hash()
    );

    let cfg = safety_config(7, 11, PipelineVariant::BASELINE);
    let a = run_experiment(&cfg).unwrap().0;
    let b = run_experiment(&cfg).unwrap().0;
    assert_eq!(a.trace_hash, b.trace_hash);
    assert_eq!(a.latencies, b.latencies);
    let mut other = cfg.clone();
    other.seed = 12;
    let c = run_experiment(&other).unwrap().0;
    assert_ne!(
        a.trace_hash, c.trace_hash,
        "pre-GST delays depend on the seed"
    );
}

#[test]
fn chain_survives_a_leader_crashed_from_the_start() {
    for variant in [PipelineVariant::BASELINE, PipelineVariant::ZAPTOS] {
        let mut cfg = experiment_config(variant, 100, 3 * SECOND, 2);
        let leader = cfg.consensus.leader(1);
        cfg.faults.push(FaultSpec {
            node: leader,
            behavior: FaultBehavior::Crash { at: 0 },
        });
        let (report, audit) = run_experiment(&cfg).unwrap();
        assert!(audit.ok(), "{:?}", audit.violations);
        assert_eq!(report.confirmed, 300);
    }
}

fn exact(p: &SingleTxnParams) {
    let base = run_single_txn(p, PipelineVariant::BASELINE, false).unwrap();
    let zap = run_single_txn(p, PipelineVariant::ZAPTOS, false).unwrap();
    let q = p.with_tcon(base.t_con);
    assert_eq!(zap.t_con, base.t_con);
    assert_eq!(base.latency, analytic_latency(&q).0, "{p:?}");
    assert_eq!(zap.latency, critical_path_latency(&q), "{p:?}");
}

#[test]
fn execution_time_sweep_across_one_round() {
    let delta_vv = 50 * MILLI;
    for i in 0..20 {
        let t_exe = i * 4 * delta_vv / 19;
        exact(&SingleTxnParams {
            delta_cf: 2 * MILLI,
            delta_fv: 3 * MILLI,
            delta_vv,
            t_exe,
            t_cmt: 30 * MILLI,
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Short stages hide entirely behind ordering.
    #[test]
    fn short_stages_add_only_the_client_hops(
        delta_cf in 0..20 * MILLI,
        delta_fv in 0..20 * MILLI,
        delta_vv in 1..100 * MILLI,
        exe in 0.0..=1.0f64,
        cmt in 0.0..=1.0f64,
    ) {
        let t_exe = (exe * delta_vv as f64) as Micros;
        let t_cmt = (cmt * (2 * delta_vv - t_exe) as f64) as Micros;
        let p = SingleTxnParams { delta_cf, delta_fv, delta_vv, t_exe, t_cmt };
        let zap = run_single_txn(&p, PipelineVariant::ZAPTOS, false).unwrap();
        prop_assert_eq!(zap.latency, 2 * delta_cf + 2 * delta_fv + zap.t_con);
    }

    #[test]
    fn single_transaction_latency_follows_the_stage_sums(
        delta_cf in 0..50 * MILLI,
        delta_fv in 0..50 * MILLI,
        delta_vv in 0..200 * MILLI,
        t_exe in 0..500 * MILLI,
        t_cmt in 0..500 * MILLI,
    ) {
        let p = SingleTxnParams { delta_cf, delta_fv, delta_vv, t_exe, t_cmt };
        exact(&p);
    }
}
