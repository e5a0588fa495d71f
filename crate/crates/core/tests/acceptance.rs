//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use pipesim::execution::{leaf_hash, verify_inclusion, MerkleAccumulator};
use pipesim::harness::{
    audit_suite, conformance, experiment_config, fault_config, fault_run, latency_grid,
    run_experiment, safety_config, sweep, AuditReport, Conformance, SingleTxnParams,
};
use pipesim::nodes::SimNode;
use pipesim::pipeline::PipelineVariant;
use pipesim::simnet::{FaultBehavior, FaultSpec, SimConfig};
use pipesim::types::{InclusionProof, Micros, Transaction, MILLI, SECOND};

const GRID_SEED: u64 = 2024;
const GRID_POINTS: usize = 100;
const GRID_MAX: Micros = 500 * MILLI;
const GRID_BUDGET: Duration = Duration::from_secs(30);
const REGIME_POINTS: usize = 50;
const SAFETY_SIZES: [usize; 3] = [4, 7, 10];
const SAFETY_SEEDS: u64 = 1_000;
const SAFETY_BUDGET: Duration = Duration::from_secs(300);
const PARITY_RATE: u64 = 2_000;
const PARITY_HORIZON: Micros = 60 * SECOND;
const PARITY_SEEDS: [u64; 3] = [1, 2, 3];
const SWEEP_RATES: [u64; 6] = [500, 1_000, 2_000, 4_000, 6_000, 8_000];
const SWEEP_DURATION: Micros = 10 * SECOND;
const FAULT_DURATION: Micros = 20 * SECOND;
const MAX_LOG: usize = 256;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn conform_all(points: &[SingleTxnParams]) -> Vec<Conformance> {
    points
        .par_iter()
        .map(|p| conformance(p).expect("single transaction confirms"))
        .collect()
}

fn formula_exactness() -> Outcome {
    let t0 = Instant::now();
    let rows = conform_all(&latency_grid(GRID_SEED, GRID_POINTS, GRID_MAX));
    let took = t0.elapsed();
    let base = rows.iter().filter(|c| c.baseline_exact()).count();
    let zap = rows.iter().filter(|c| c.zaptos_exact()).count();
    let crit = rows.iter().filter(|c| c.zaptos == c.critical_path).count();
    outcome(
        base == GRID_POINTS && zap == GRID_POINTS && took < GRID_BUDGET,
        format!(
            "baseline {base}/{GRID_POINTS}, zaptos {zap}/{GRID_POINTS} exact (zaptos on its critical path {crit}/{GRID_POINTS}), {:.1}s",
            took.as_secs_f64()
        ),
    )
}

/// Random points inside one regime: both stages at least one round, or
/// both at most one round.
fn regime_points(seed: u64, slow: bool) -> Vec<SingleTxnParams> {
    latency_grid(seed, REGIME_POINTS, GRID_MAX)
        .into_iter()
        .map(|mut p| {
            let vv = p.delta_vv.max(1);
            if slow {
                p.delta_vv = vv / 2;
                p.t_exe = p.delta_vv + p.t_exe % (GRID_MAX - p.delta_vv + 1);
                p.t_cmt = p.delta_vv + p.t_cmt % (GRID_MAX - p.delta_vv + 1);
            } else {
                p.delta_vv = vv;
                p.t_exe %= vv + 1;
                p.t_cmt %= vv + 1;
            }
            p
        })
        .collect()
}

fn round_savings() -> Outcome {
    let slow = conform_all(&regime_points(GRID_SEED + 1, true));
    let fast = conform_all(&regime_points(GRID_SEED + 2, false));
    let five = slow
        .iter()
        .filter(|c| c.baseline - c.zaptos == 5 * c.params.delta_vv)
        .count();
    let hidden = fast
        .iter()
        .filter(|c| c.zaptos == 2 * c.params.delta_cf + 2 * c.params.delta_fv + c.t_con)
        .count();
    outcome(
        five == slow.len() && hidden == fast.len(),
        format!(
            "slow stages save five rounds {five}/{}, short stages fully hidden {hidden}/{}",
            slow.len(),
            fast.len()
        ),
    )
}

fn has(r: &AuditReport, needles: &[&str]) -> bool {
    r.violations
        .iter()
        .any(|v| needles.iter().any(|n| v.contains(n)))
}

struct SafetyResults {
    runs: usize,
    reports: Vec<AuditReport>,
    certified: usize,
    reverted: u64,
    took: Duration,
}

fn safety_suite() -> SafetyResults {
    let t0 = Instant::now();
    let mut reports = Vec::new();
    let (mut runs, mut certified, mut reverted) = (0, 0, 0);
    for n in SAFETY_SIZES {
        for variant in [PipelineVariant::ZAPTOS, PipelineVariant::BASELINE] {
            let s = audit_suite(n, 0..SAFETY_SEEDS, variant);
            runs += s.runs;
            certified += s.certified_blocks;
            reverted += s.records_reverted;
            reports.extend(s.failures);
        }
    }
    SafetyResults {
        runs,
        reports,
        certified,
        reverted,
        took: t0.elapsed(),
    }
}

fn safety(s: &SafetyResults) -> Outcome {
    let bad = s
        .reports
        .iter()
        .filter(|r| {
            has(
                r,
                &[
                    "diverges",
                    "revert or rewrite",
                    "disagrees with the committed log",
                    "conflicting order quorum",
                    "forged",
                ],
            )
        })
        .count();
    let unconfirmed = s.reports.iter().filter(|r| has(r, &["liveness"])).count();
    outcome(
        bad == 0 && s.took < SAFETY_BUDGET,
        format!(
            "{} schedules, {bad} with inconsistent logs or Committed reverts, {unconfirmed} not fully confirmed, {:.0}s",
            s.runs,
            s.took.as_secs_f64()
        ),
    )
}

fn certified_ordered(s: &SafetyResults) -> Outcome {
    let bad = s
        .reports
        .iter()
        .filter(|r| has(r, &["never ordered"]))
        .count();
    outcome(
        bad == 0,
        format!(
            "{} certified blocks over {} schedules, {bad} runs with an unordered one",
            s.certified, s.runs
        ),
    )
}

fn revert_consistency(s: &SafetyResults) -> Outcome {
    let bad = s
        .reports
        .iter()
        .filter(|r| {
            has(
                r,
                &[
                    "storage differs",
                    "orphaned",
                    "conflicts with the ordered chain",
                ],
            )
        })
        .count();
    outcome(
        bad == 0,
        format!(
            "{} records reverted over {} schedules, {bad} runs with divergent storage or orphans",
            s.reverted, s.runs
        ),
    )
}

/// Runs to a horizon covering two view changes and one fullnode failover
/// past the last submission, and counts what every honest node committed.
fn committed_everywhere(cfg: &SimConfig) -> (u64, u64, u64) {
    let mut sim = cfg.build().expect("valid config");
    let t = &cfg.topology;
    let horizon = cfg.workload.end()
        + 2 * cfg.consensus.round_timeout
        + t.progress_timeout
        + t.query_timeout
        + 10 * cfg.network.max_delay();
    sim.run_until(horizon).expect("no livelock");
    let honest = cfg.honest_validators();
    let (mut submitted, mut confirmed, mut least) = (0, 0, u64::MAX);
    for node in sim.nodes() {
        let pipeline = match node {
            SimNode::Client(c) => {
                submitted += c.submitted;
                confirmed += c.samples.len() as u64;
                continue;
            }
            SimNode::Validator(v) if honest.contains(&v.id()) => &v.pipeline,
            SimNode::Fullnode(f) => &f.pipeline,
            _ => continue,
        };
        least = least.min(pipeline.committed.iter().map(|c| c.txns as u64).sum());
    }
    (submitted, confirmed, least)
}

fn liveness() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for variant in [PipelineVariant::BASELINE, PipelineVariant::ZAPTOS] {
        let mut free = experiment_config(variant, 200, 5 * SECOND, 3);
        // the mid-run crash takes down the fullnode's validator
        free.topology.progress_timeout = free.consensus.round_timeout;
        free.topology.query_timeout = free.consensus.round_timeout;
        let mut crashed = free.clone();
        let leader = crashed.consensus.leader(1);
        crashed.faults.push(FaultSpec {
            node: leader,
            behavior: FaultBehavior::Crash { at: 0 },
        });
        let mut late = free.clone();
        let leader = late.consensus.leader(0);
        late.faults.push(FaultSpec {
            node: leader,
            behavior: FaultBehavior::Crash { at: 2 * SECOND },
        });
        for (name, cfg) in [
            ("fault-free", free),
            ("leader crashed at start", crashed),
            ("leader crashed mid-run", late),
        ] {
            let (submitted, confirmed, committed) = committed_everywhere(&cfg);
            let ok =
                submitted == cfg.workload.txns && confirmed == submitted && committed == submitted;
            pass &= ok;
            parts.push(format!("{} {name} {committed}/{submitted}", variant.name()));
        }
    }
    outcome(pass, parts.join(", "))
}

fn throughput_parity() -> Outcome {
    let block = experiment_config(PipelineVariant::ZAPTOS, PARITY_RATE, PARITY_HORIZON, 0)
        .consensus
        .max_block_txns as i64;
    let diffs: Vec<(u64, i64, i64)> = PARITY_SEEDS
        .par_iter()
        .map(|&seed| {
            let count = |variant| {
                // delays are constant, so the seed also shifts the arrivals
                // against the round boundaries
                let mut cfg = experiment_config(variant, PARITY_RATE, PARITY_HORIZON, seed);
                cfg.workload.start = seed * 13 * MILLI;
                let (r, _) = run_experiment(&cfg).expect("run");
                let (from, to) = pipesim::harness::throughput_window(&cfg.workload);
                (r.committed_tps * (to - from) as f64 / SECOND as f64).round() as i64
            };
            (
                seed,
                count(PipelineVariant::BASELINE),
                count(PipelineVariant::ZAPTOS),
            )
        })
        .collect();
    let worst = diffs
        .iter()
        .map(|(_, b, z)| (b - z).abs())
        .max()
        .unwrap_or(0);
    let detail = diffs
        .iter()
        .map(|(s, b, z)| format!("seed {s}: {b} vs {z}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        worst <= block,
        format!("{detail}; worst difference {worst}, block payload {block}"),
    )
}

fn directions() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;

    let base = sweep(
        &experiment_config(PipelineVariant::BASELINE, 0, SWEEP_DURATION, 1),
        &SWEEP_RATES,
        SWEEP_DURATION,
    )
    .expect("sweep");
    let zap = sweep(
        &experiment_config(PipelineVariant::ZAPTOS, 0, SWEEP_DURATION, 1),
        &SWEEP_RATES,
        SWEEP_DURATION,
    )
    .expect("sweep");
    let below = base
        .iter()
        .zip(&zap)
        .filter(|(b, z)| z.report.p50 < b.report.p50)
        .count();
    pass &= below == SWEEP_RATES.len();
    parts.push(format!(
        "(a) zaptos p50 lower at {below}/{} loads",
        SWEEP_RATES.len()
    ));

    // one scheduling quantum: a transaction waits at most one block interval
    // for the next proposal
    let cfg = experiment_config(PipelineVariant::ZAPTOS, 0, SWEEP_DURATION, 1);
    let hops = 2 * cfg.network.delta_cf + 2 * cfg.network.delta_fv;
    let quantum = cfg.network.delta_vv;
    let worst = zap
        .iter()
        .map(|p| {
            (p.report.p50.unwrap_or(Micros::MAX) - hops).abs_diff(p.report.tcon_p50.unwrap_or(0))
        })
        .max()
        .unwrap_or(Micros::MAX);
    pass &= worst <= quantum;
    parts.push(format!(
        "(b) p50 minus client hops within {worst}us of consensus p50 (quantum {quantum}us)"
    ));

    let mut fault = Vec::new();
    for variant in [PipelineVariant::BASELINE, PipelineVariant::ZAPTOS] {
        let cfg = fault_config(variant, FAULT_DURATION, 1);
        let runs: Vec<_> = [0usize, 1, 3]
            .par_iter()
            .map(|&k| fault_run(&cfg, k).expect("fault run"))
            .collect();
        fault.push(runs);
    }
    let (b, z) = (&fault[0], &fault[1]);
    let degrades = |runs: &[pipesim::harness::FaultRunResult]| {
        runs[1].report.committed_tps < runs[0].report.committed_tps
            && runs[2].report.committed_tps < runs[0].report.committed_tps
    };
    let lower = (1..3).all(|i| z[i].report.mean_latency < b[i].report.mean_latency);
    pass &= degrades(b) && degrades(z) && lower;
    parts.push(format!(
        "(c) tps 0/1/3 equivocators baseline {:.0}/{:.0}/{:.0} zaptos {:.0}/{:.0}/{:.0}, mean ms baseline {:.0}/{:.0} zaptos {:.0}/{:.0}",
        b[0].report.committed_tps,
        b[1].report.committed_tps,
        b[2].report.committed_tps,
        z[0].report.committed_tps,
        z[1].report.committed_tps,
        z[2].report.committed_tps,
        b[1].report.mean_latency / 1e3,
        b[2].report.mean_latency / 1e3,
        z[1].report.mean_latency / 1e3,
        z[2].report.mean_latency / 1e3,
    ));
    outcome(pass, parts.join("; "))
}

fn tampered(proof: &InclusionProof) -> Vec<InclusionProof> {
    let mut out = Vec::new();
    for i in 0..proof.sibling_path.len() {
        let mut p = proof.clone();
        p.sibling_path[i].0[0] ^= 1;
        out.push(p);
    }
    let mut p = proof.clone();
    p.root.0[31] ^= 1;
    out.push(p);
    let mut p = proof.clone();
    p.leaf_digest.0[0] ^= 1;
    out.push(p);
    let mut p = proof.clone();
    p.leaf_count += 1;
    out.push(p);
    if proof.leaf_count > 1 {
        let mut p = proof.clone();
        p.leaf_count -= 1;
        out.push(p);
    }
    if !proof.sibling_path.is_empty() {
        let mut p = proof.clone();
        p.sibling_path.pop();
        out.push(p);
    }
    out
}

fn inclusion_proofs() -> Outcome {
    let log: Vec<Transaction> = (0..MAX_LOG as u64)
        .map(|i| Transaction::transfer(i % 7, (i + 3) % 7, i, i / 7))
        .collect();
    let mut acc = MerkleAccumulator::new();
    let (mut valid, mut rejected_valid, mut tamper_checks, mut tamper_accepted) = (0, 0, 0, 0);
    for size in 1..=MAX_LOG {
        acc.append(leaf_hash(&log[size - 1]));
        for pos in 0..size {
            let proof = acc.prove(pos as u64).expect("position inside the log");
            valid += 1;
            rejected_valid += !verify_inclusion(&proof, pos as u64, &log[pos]) as usize;
            for bad in tampered(&proof) {
                tamper_checks += 1;
                tamper_accepted += verify_inclusion(&bad, pos as u64, &log[pos]) as usize;
            }
            let other = (pos + 1) % size;
            if other != pos {
                tamper_checks += 1;
                tamper_accepted += verify_inclusion(&proof, pos as u64, &log[other]) as usize;
            }
        }
    }
    outcome(
        rejected_valid == 0 && tamper_accepted == 0,
        format!("{valid} proofs, {rejected_valid} rejected; {tamper_checks} tampered checks, {tamper_accepted} accepted"),
    )
}

fn determinism() -> Outcome {
    let mut configs = vec![
        experiment_config(PipelineVariant::ZAPTOS, 1_000, 5 * SECOND, 9),
        experiment_config(PipelineVariant::BASELINE, 1_000, 5 * SECOND, 9),
        fault_config(PipelineVariant::ZAPTOS, 5 * SECOND, 4),
    ];
    for seed in 0..20 {
        configs.push(safety_config(
            4 + 3 * (seed as usize % 3),
            seed,
            PipelineVariant::ZAPTOS,
        ));
    }
    let mismatched = configs
        .par_iter()
        .filter(|cfg| {
            let a = run_experiment(cfg).expect("run").0;
            let b = run_experiment(cfg).expect("run").0;
            a.trace_hash != b.trace_hash
        })
        .count();
    outcome(
        mismatched == 0,
        format!(
            "{} configurations replayed, {mismatched} trace hashes differ",
            configs.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, o: Outcome| {
        println!(
            "[{}] {id:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += !o.pass as u32;
    };
    report(1, "formula exactness", formula_exactness());
    report(2, "round savings", round_savings());
    let suite = safety_suite();
    report(3, "safety suite", safety(&suite));
    report(
        4,
        "certification implies ordering",
        certified_ordered(&suite),
    );
    report(5, "liveness", liveness());
    report(6, "throughput parity", throughput_parity());
    report(7, "revert consistency", revert_consistency(&suite));
    report(8, "qualitative directions", directions());
    report(9, "inclusion proofs", inclusion_proofs());
    report(10, "determinism", determinism());
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
