//! Command-line front end: generate networks, run sweeps, aggregate metrics
//! and run the oracle-equivalence suite.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use crate::sim::experiment::{resolve_topology_name, Experiment, ExperimentConfig, MetricsReport};
use crate::sim::rulegen::generate_rules;
use crate::verify;

#[derive(Parser)]
#[command(name = "pathwarden", version, about = "Trajectory-based data-plane intrusion detection, simulated end to end")]
struct Cli {
    /// Seed override applied to whatever the subcommand runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML) for subcommands that take one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a topology file and a matching rules file.
    Gen {
        /// Named topology (aarnet, zib54, line:N, ring:N, star:N,
        /// transit-spine, branching-isp) or a topology JSON path.
        #[arg(long, default_value = "aarnet")]
        topology: String,
        /// Number of destination prefixes to spread across devices.
        #[arg(long, default_value_t = 40)]
        prefixes: usize,
        /// Header width L in bits.
        #[arg(long, default_value_t = 32)]
        header_bits: u16,
    },
    /// Run a full experiment from a config file.
    Sweep,
    /// Aggregate metrics files from an output directory.
    Report {
        #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
        format: ReportFormat,
    },
    /// Exhaustively check the symbolic engine against per-header simulation.
    Verify {
        #[arg(long, default_value_t = 8)]
        max_devices: usize,
        #[arg(long, default_value_t = 12)]
        header_bits: u16,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

pub fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match cli.cmd {
        Cmd::Gen { topology, prefixes, header_bits } => {
            gen(&cli.out_dir, &topology, prefixes, header_bits, cli.seed.unwrap_or(0))
        }
        Cmd::Sweep => {
            let config = cli
                .config
                .as_deref()
                .context("sweep needs --config pointing at an experiment TOML")?;
            sweep(&cli.out_dir, config, cli.seed)
        }
        Cmd::Report { format } => report(&cli.out_dir, format),
        Cmd::Verify { max_devices, header_bits, cases } => {
            run_verify(max_devices, header_bits, cases, cli.seed.unwrap_or(0))
        }
    }
}

fn gen(out_dir: &Path, topology: &str, prefixes: usize, header_bits: u16, seed: u64) -> anyhow::Result<()> {
    let topo = resolve_topology_name(topology)?;
    let generated = generate_rules(&topo, prefixes, header_bits, seed)?;
    let topo_path = out_dir.join("topology.json");
    let rules_path = out_dir.join("rules.json");
    fs::write(&topo_path, topo.to_json())?;
    fs::write(&rules_path, generated.rules.to_json())?;
    let rule_count: usize = generated.rules.tables.iter().map(|t| t.rules.len()).sum();
    println!(
        "generated {}: {} devices, {} links, {} prefixes, {} rules",
        topology,
        topo.devices.len(),
        topo.links.len(),
        prefixes,
        rule_count
    );
    println!("wrote {} and {}", topo_path.display(), rules_path.display());
    Ok(())
}

fn sweep(out_dir: &Path, config: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let text = fs::read_to_string(config)
        .with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let mut experiment = Experiment::new(cfg)?;
    let implants = experiment.implant_configured_attacks()?;
    let report = experiment.run()?;

    let metrics: Vec<&MetricsReport> = report.sweeps.iter().map(|s| &s.metrics).collect();
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    fs::write(out_dir.join("verdicts.jsonl"), report.verdicts_jsonl())?;
    fs::write(
        out_dir.join("scanplan.json"),
        report
            .sweeps
            .last()
            .map(|s| s.scan_plan.to_json())
            .unwrap_or_default(),
    )?;
    fs::write(out_dir.join("implants.json"), serde_json::to_string_pretty(&report.implants)?)?;
    fs::write(out_dir.join("alarms.log"), experiment.alarm_log.join(""))?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &metrics)?;

    for sweep in &report.sweeps {
        let m = &sweep.metrics;
        println!(
            "sweep {}: implanted {} reachable {} detected {} fp {} fn {} verdicts {}+{} trajectories {}",
            m.sweep,
            m.implanted,
            m.reachable,
            m.detected,
            m.false_positives,
            m.false_negatives,
            m.nonbenign_verdicts,
            m.benign_verdicts,
            m.trajectories,
        );
        // Wall-clock timings go to the console only; the report files stay
        // byte-identical for a fixed seed.
        eprintln!(
            "sweep {} timings: corpus {}ms target-id {}ms scan {}ms policy {}ms",
            m.sweep,
            sweep.timings.corpus_ms,
            sweep.timings.target_id_ms,
            sweep.timings.scan_ms,
            sweep.timings.policy_ms
        );
    }
    if !implants.is_empty() {
        println!("implants: {}", implants.len());
    }
    println!("reports in {}", out_dir.display());
    Ok(())
}

fn write_metrics_csv(path: &Path, metrics: &[&MetricsReport]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sweep",
        "devices",
        "rules",
        "trajectories",
        "implanted",
        "reachable",
        "detected",
        "accuracy",
        "false_positives",
        "false_negatives",
        "localization_hits",
        "localization_total",
        "benign_verdicts",
        "nonbenign_verdicts",
        "probes_sent",
        "actions_issued",
    ])?;
    for m in metrics {
        w.write_record([
            m.sweep.to_string(),
            m.devices.to_string(),
            m.rules.to_string(),
            m.trajectories.to_string(),
            m.implanted.to_string(),
            m.reachable.to_string(),
            m.detected.to_string(),
            m.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
            m.false_positives.to_string(),
            m.false_negatives.to_string(),
            m.localization_hits.to_string(),
            m.localization_total.to_string(),
            m.benign_verdicts.to_string(),
            m.nonbenign_verdicts.to_string(),
            m.probes_sent.to_string(),
            m.actions_issued.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn report(out_dir: &Path, format: ReportFormat) -> anyhow::Result<()> {
    let path = out_dir.join("metrics.json");
    if !path.exists() {
        bail!("no metrics.json under {}; run `sweep` first", out_dir.display());
    }
    let text = fs::read_to_string(&path)?;
    let metrics: Vec<serde_json::Value> = serde_json::from_str(&text)?;
    match format {
        ReportFormat::Json => {
            let aggregate = serde_json::json!({
                "sweeps": metrics.len(),
                "metrics": metrics,
            });
            let out = out_dir.join("aggregate.json");
            fs::write(&out, serde_json::to_string_pretty(&aggregate)?)?;
            println!("wrote {}", out.display());
        }
        ReportFormat::Csv => {
            let out = out_dir.join("aggregate.csv");
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["sweep", "detected", "reachable", "accuracy", "false_positives", "false_negatives"])?;
            for m in &metrics {
                w.write_record([
                    m["sweep"].to_string(),
                    m["detected"].to_string(),
                    m["reachable"].to_string(),
                    m["accuracy"].to_string(),
                    m["false_positives"].to_string(),
                    m["false_negatives"].to_string(),
                ])?;
            }
            w.flush()?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn run_verify(max_devices: usize, header_bits: u16, cases: usize, seed: u64) -> anyhow::Result<()> {
    let report = verify::run_suite(max_devices, header_bits, cases, seed);
    for case in &report.cases {
        if case.ok() {
            println!(
                "ok   {} ({} pairs, {} headers walked)",
                case.name, case.pairs_checked, case.headers_walked
            );
        } else {
            println!("FAIL {}", case.name);
            for m in case.mismatches.iter().take(5) {
                println!("     {m}");
            }
        }
    }
    let walked = report.total_headers();
    if report.all_ok() {
        println!("all {} cases equivalent ({walked} headers walked)", report.cases.len());
        Ok(())
    } else {
        bail!("oracle equivalence failed");
    }
}
