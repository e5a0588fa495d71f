use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pipesim::harness::{
    analytic_latency, audit_suite, breakdown, conformance, critical_path_latency,
    experiment_config, fault_config, fault_run, latency_grid, sweep, write_breakdown_csv,
    write_report_csv, LatencyParams, PLOT_SCRIPT,
};
use pipesim::pipeline::PipelineVariant;
use pipesim::simnet::SimConfig;
use pipesim::types::{Micros, MILLI, SECOND};

#[derive(Parser)]
#[command(
    name = "pipesim",
    about = "Simulated baseline and parallel blockchain pipelines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML simulation config; the built-in desk-scale setup otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline, zaptos, or custom (the flags in --config). Both when omitted.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-form latencies while execution time crosses one round.
    Formula {
        #[arg(long, default_value_t = 0)]
        delta_cf: Micros,
        #[arg(long, default_value_t = 0)]
        delta_fv: Micros,
        #[arg(long, default_value_t = 50)]
        delta_vv: Micros,
        #[arg(long, default_value_t = 200)]
        t_con: Micros,
        #[arg(long, default_value_t = 60)]
        t_cmt: Micros,
        #[arg(long, default_value_t = 20)]
        points: u64,
    },
    /// Single-transaction runs checked against the closed forms.
    VerifyLatency {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of random parameter points.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Latency against offered load.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Offered loads in transactions per second.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "500,1000,2000,4000,6000,8000,12000,16000"
        )]
        rates: Vec<u64>,
        /// Submission period per load level, in seconds.
        #[arg(long, default_value_t = 10)]
        duration: u64,
    },
    /// Mean stage timings of one run per variant.
    Breakdown {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        rate: u64,
        #[arg(long, default_value_t = 10)]
        duration: u64,
        /// Also write every processed event to trace.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Equivocating leaders at n = 10.
    Faults {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,3")]
        equivocators: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        duration: u64,
    },
    /// Randomized adversarial schedules with safety, revert and liveness checks.
    Audit {
        #[arg(long, value_delimiter = ',', default_value = "4,7,10")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "zaptos")]
        variant: String,
    },
}

fn variants(common: &Common, cfg: Option<&SimConfig>) -> Result<Vec<PipelineVariant>> {
    match common.variant.as_deref() {
        None => Ok(vec![PipelineVariant::BASELINE, PipelineVariant::ZAPTOS]),
        Some("custom") => match cfg {
            Some(c) => Ok(vec![c.pipeline.variant]),
            None => bail!("--variant custom needs --config"),
        },
        Some(name) => Ok(vec![name.parse().map_err(anyhow::Error::msg)?]),
    }
}

fn load(common: &Common) -> Result<Option<SimConfig>> {
    let Some(path) = &common.config else {
        return Ok(None);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = SimConfig::from_toml(&text).with_context(|| format!("{}", path.display()))?;
    Ok(Some(cfg))
}

/// The file config with the given variant, or the built-in setup.
fn base(
    common: &Common,
    file: Option<&SimConfig>,
    variant: PipelineVariant,
    rate: u64,
    duration: u64,
) -> SimConfig {
    match file {
        Some(c) => {
            let mut c = c.clone();
            c.pipeline.variant = variant;
            c
        }
        None => {
            let mut c = experiment_config(variant, rate, duration * SECOND, common.seed);
            c.seed = common.seed;
            c
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn formula(p: LatencyParams, points: u64) {
    println!(
        "{:>10} {:>10} {:>10} {:>10} {:>10}",
        "t_exe", "baseline", "zaptos", "difference", "crit_path"
    );
    let top = 4 * p.delta_vv.max(1);
    for i in 0..points {
        let t_exe = top * i / points.saturating_sub(1).max(1);
        let q = LatencyParams { t_exe, ..p };
        let (b, z) = analytic_latency(&q);
        println!(
            "{:>10} {:>10} {:>10} {:>10} {:>10}",
            t_exe,
            b,
            z,
            b - z,
            critical_path_latency(&q)
        );
    }
}

fn verify_latency(seed: u64, points: usize, out: &Path) -> Result<bool> {
    let grid = latency_grid(seed, points, 500 * MILLI);
    let mut w = csv::Writer::from_writer(create(out, "conformance.csv")?);
    w.write_record([
        "delta_cf",
        "delta_fv",
        "delta_vv",
        "t_exe",
        "t_cmt",
        "t_con",
        "baseline",
        "analytic_baseline",
        "zaptos",
        "analytic_zaptos",
        "critical_path",
    ])?;
    let (mut base_ok, mut zap_ok, mut crit_ok) = (0, 0, 0);
    for p in &grid {
        let c = conformance(p)?;
        base_ok += c.baseline_exact() as usize;
        zap_ok += c.zaptos_exact() as usize;
        crit_ok += (c.zaptos == c.critical_path) as usize;
        let row = [
            p.delta_cf,
            p.delta_fv,
            p.delta_vv,
            p.t_exe,
            p.t_cmt,
            c.t_con,
            c.baseline,
            c.analytic_baseline,
            c.zaptos,
            c.analytic_zaptos,
            c.critical_path,
        ];
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    println!("baseline equals closed form:      {base_ok}/{points}");
    println!("zaptos equals closed form:        {zap_ok}/{points}");
    println!("zaptos equals its critical path:  {crit_ok}/{points}");
    Ok(base_ok == points && zap_ok == points)
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Formula {
            delta_cf,
            delta_fv,
            delta_vv,
            t_con,
            t_cmt,
            points,
        } => {
            formula(
                LatencyParams {
                    delta_cf,
                    delta_fv,
                    delta_vv,
                    t_con,
                    t_exe: 0,
                    t_cmt,
                },
                points,
            );
            Ok(true)
        }
        Cmd::VerifyLatency { seed, seeds, out } => verify_latency(seed, seeds, &out),
        Cmd::Sweep {
            common,
            rates,
            duration,
        } => {
            let file = load(&common)?;
            let mut points = Vec::new();
            for v in variants(&common, file.as_ref())? {
                let cfg = base(&common, file.as_ref(), v, rates[0], duration);
                points.extend(sweep(&cfg, &rates, duration * SECOND)?);
            }
            write_report_csv(create(&common.out, "report.csv")?, &points)?;
            let mut ok = true;
            for p in &points {
                let r = &p.report;
                println!(
                    "{:>8} {:>7} tps  committed {:>9.1} tps  p50 {:>8} us  confirmed {}/{}",
                    r.variant.name(),
                    p.target_tps,
                    r.committed_tps,
                    r.p50.unwrap_or(0),
                    r.confirmed,
                    r.submitted
                );
                if !p.audit.safety_ok() {
                    ok = false;
                    eprintln!("audit failed: {:?}", p.audit.violations);
                }
            }
            Ok(ok)
        }
        Cmd::Breakdown {
            common,
            rate,
            duration,
            trace,
        } => {
            let file = load(&common)?;
            let mut rows = Vec::new();
            for v in variants(&common, file.as_ref())? {
                let cfg = base(&common, file.as_ref(), v, rate, duration);
                rows.extend(breakdown(&cfg)?);
                if trace {
                    let mut sim = cfg.build()?;
                    sim.record_trace(true);
                    sim.run_to_quiescence()?;
                    sim.write_trace(create(&common.out, &format!("trace_{}.jsonl", v.name()))?)?;
                }
            }
            write_breakdown_csv(create(&common.out, "breakdown.csv")?, &rows)?;
            fs::write(common.out.join("plot_breakdown.py"), PLOT_SCRIPT)?;
            for r in &rows {
                println!(
                    "{:>8} {:>14} start {:>9.0} end {:>9.0} duration {:>9.0}",
                    r.variant,
                    r.stage.as_str(),
                    r.mean_offset_start,
                    r.mean_offset_end,
                    r.mean_duration
                );
            }
            Ok(true)
        }
        Cmd::Faults {
            common,
            equivocators,
            duration,
        } => {
            let file = load(&common)?;
            let mut ok = true;
            let mut w = csv::Writer::from_writer(create(&common.out, "faults.csv")?);
            w.write_record([
                "variant",
                "equivocators",
                "committed_tps",
                "mean_us",
                "p50_us",
                "confirmed",
                "submitted",
            ])?;
            for v in variants(&common, file.as_ref())? {
                let cfg = match &file {
                    Some(c) => SimConfig {
                        pipeline: pipesim::pipeline::PipelineConfig {
                            variant: v,
                            ..c.pipeline.clone()
                        },
                        ..c.clone()
                    },
                    None => fault_config(v, duration * SECOND, common.seed),
                };
                for &k in &equivocators {
                    let r = fault_run(&cfg, k)?;
                    let rep = &r.report;
                    println!(
                        "{:>8} equivocators {}  committed {:>8.1} tps  mean {:>9.0} us  confirmed {}/{}",
                        v.name(),
                        k,
                        rep.committed_tps,
                        rep.mean_latency,
                        rep.confirmed,
                        rep.submitted
                    );
                    w.write_record([
                        v.name().to_string(),
                        k.to_string(),
                        format!("{:.1}", rep.committed_tps),
                        format!("{:.0}", rep.mean_latency),
                        rep.p50.unwrap_or(0).to_string(),
                        rep.confirmed.to_string(),
                        rep.submitted.to_string(),
                    ])?;
                    if !r.audit.ok() {
                        ok = false;
                        eprintln!("audit failed: {:?}", r.audit.violations);
                    }
                }
            }
            w.flush()?;
            Ok(ok)
        }
        Cmd::Audit {
            n,
            seeds,
            seed,
            variant,
        } => {
            let variant: PipelineVariant = variant.parse().map_err(anyhow::Error::msg)?;
            let mut ok = true;
            for size in n {
                let s = audit_suite(size, seed..seed + seeds, variant);
                println!(
                    "n={:<3} {}/{} schedules clean, {} certified blocks, {} records reverted",
                    size, s.passed, s.runs, s.certified_blocks, s.records_reverted
                );
                for f in &s.failures {
                    ok = false;
                    eprintln!("  seed {}: {:?}", f.seed, f.violations);
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
