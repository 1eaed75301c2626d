//! `dcc`: run, compare and sweep the cluster controllers from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dcc_core::admm::AdmmConfig;
use dcc_core::harness::{
    admm_histogram, compare_algorithms, read_iteration_counts, run_experiment, scalability_sweep,
    sweep, write_report, ControllerKind, ExperimentConfig, SweepParam,
};

/// Exit status when a controller that guarantees bounded queues breaks them.
const GUARANTEE_BROKEN: u8 = 2;

#[derive(Parser)]
#[command(
    name = "dcc",
    version,
    about = "Workload and energy coordination experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for report files.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// offline, greedy, proposed, no-sharing, traditional or admm (b1..b4 accepted).
    #[arg(long, global = true, value_name = "NAME")]
    controller: Option<ControllerKind>,
    /// Dotted config key and TOML value, e.g. `controller.admm.rho=0.5`.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one controller and write its report.
    Run,
    /// Run several controllers on the same trace and tabulate their costs.
    Compare {
        /// Comma-separated controllers; all when omitted.
        #[arg(long, value_delimiter = ',')]
        controllers: Vec<ControllerKind>,
    },
    /// Re-run the configured controller over a list of parameter values.
    Sweep {
        /// v, v-fraction or share-scale.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Bucket ADMM iteration counts from iteration-trace files.
    Histogram {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bucket: usize,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,75,100")]
        thresholds: Vec<usize>,
        /// Largest acceptable fraction of slots above the threshold.
        #[arg(long, default_value_t = 0.3)]
        target: f64,
    },
    /// Time truncated against untruncated ADMM on random clusters.
    Scale {
        /// Sizes as BACKxFRONT, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "2x3,3x2,5x3,10x5,20x10")]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 100)]
        slots: usize,
        #[arg(long, default_value_t = 50)]
        threshold: usize,
        #[arg(long, default_value_t = 100_000)]
        untruncated_cap: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(kind) = common.controller {
        overrides.push(format!("controller.kind=\"{}\"", kind.name()));
    }
    if let Some(out) = &common.out {
        overrides.push(format!(
            "output.dir={}",
            toml_string(&out.display().to_string())
        ));
    }
    overrides.extend(common.overrides.iter().cloned());
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml_with_overrides("", &overrides)?,
    };
    Ok(cfg)
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn write_file(dir: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (i, j) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size `{s}` is not BACKxFRONT"))?;
    Ok((i.trim().parse()?, j.trim().parse()?))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    let out = cfg.output.dir.clone();
    let mut broken = false;
    match cli.command {
        Command::Run => {
            let report = run_experiment(&cfg)?;
            println!(
                "{} over {} slots: f = {:.6} (grid {:.6}, battery {:.6}, transfer {:.6}, rejection {:.6})",
                report.controller,
                report.slots,
                report.totals.f_total,
                report.totals.f_grid,
                report.totals.f_batt,
                report.totals.f_tran,
                report.totals.f_work
            );
            if let Some(v) = report.v {
                println!("V = {v:.6}");
            }
            let vc = &report.violations;
            println!(
                "violations: front {} back {} battery {} decision {}",
                vc.front_queue, vc.back_queue, vc.battery, vc.decision
            );
            if let Some(a) = &report.admm {
                println!(
                    "admm: mean {:.1} iterations, {} truncated slots",
                    a.mean_iterations, a.truncated_slots
                );
            }
            if let Some(g) = &report.gap_audit {
                println!(
                    "gap {:.6} vs bound {:.6}: {}",
                    g.gap,
                    g.bound,
                    if g.holds { "holds" } else { "exceeded" }
                );
            }
            broken = report.breaks_guarantee();
        }
        Command::Compare { controllers } => {
            let kinds = if controllers.is_empty() {
                ControllerKind::ALL.to_vec()
            } else {
                controllers
            };
            let table = compare_algorithms(&cfg, &kinds)?;
            print!("{table}");
            if let Some(audit) = &table.share_audit {
                println!(
                    "sharing audit: {} slots x {} scales, {} violations",
                    audit.slots,
                    audit.scales.len(),
                    audit.violations
                );
            }
            write_file(out.as_deref(), "comparison.csv", &table.to_csv())?;
            if let Some(dir) = &out {
                for r in &table.reports {
                    write_report(r, &dir.join(r.controller.name()))?;
                }
            }
            broken = table.reports.iter().any(|r| r.breaks_guarantee());
        }
        Command::Sweep { param, values } => {
            let report = sweep(&cfg, param, &values)?;
            let csv = report.summary_csv();
            print!("{csv}");
            for p in report
                .points
                .iter()
                .filter_map(|p| p.skipped.as_ref().map(|why| (p.value, why)))
            {
                eprintln!("skipped {}: {}", p.0, p.1);
            }
            if let Some(audit) = &report.share_audit {
                println!(
                    "sharing audit: {} violations over {} slots",
                    audit.violations, audit.slots
                );
            }
            write_file(out.as_deref(), "sweep.csv", &csv)?;
            if let Some(dir) = &out {
                for (n, p) in report.points.iter().enumerate() {
                    if let Some(r) = &p.report {
                        write_report(r, &dir.join(format!("point-{n:02}")))?;
                    }
                }
            }
            broken = report
                .points
                .iter()
                .filter_map(|p| p.report.as_ref())
                .any(|r| r.breaks_guarantee());
        }
        Command::Histogram {
            traces,
            bucket,
            thresholds,
            target,
        } => {
            let paths: Vec<&Path> = traces.iter().map(PathBuf::as_path).collect();
            let counts = read_iteration_counts(&paths)?;
            let h = admm_histogram(&counts, bucket, &thresholds, target);
            println!("{} slots", h.total);
            for b in &h.buckets {
                println!("[{:>5}, {:>5}) {}", b.lo, b.hi, b.count);
            }
            for (t, f) in &h.exceed {
                println!("above {t}: {:.1}%", 100.0 * f);
            }
            match h.recommended {
                Some(n) => println!("recommended truncation: {n}"),
                None => println!("no candidate threshold meets the target"),
            }
            if let Some(dir) = &out {
                let mut w = csv::Writer::from_writer(Vec::new());
                for b in &h.buckets {
                    w.serialize(b)?;
                }
                write_file(
                    Some(dir),
                    "histogram.csv",
                    &String::from_utf8(w.into_inner()?)?,
                )?;
                write_file(
                    Some(dir),
                    "histogram.json",
                    &serde_json::to_string_pretty(&h)?,
                )?;
            }
        }
        Command::Scale {
            sizes,
            slots,
            threshold,
            untruncated_cap,
        } => {
            let sizes = sizes
                .iter()
                .map(|s| parse_size(s))
                .collect::<Result<Vec<_>>>()?;
            if slots == 0 {
                bail!("--slots must be positive");
            }
            let rows = scalability_sweep(
                &sizes,
                slots,
                cfg.seed,
                &AdmmConfig::default(),
                threshold,
                untruncated_cap,
            )?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            let csv = String::from_utf8(w.into_inner()?)?;
            print!("{csv}");
            write_file(out.as_deref(), "scale.csv", &csv)?;
        }
    }
    Ok(if broken {
        eprintln!("a bounded controller left its queue or battery bounds");
        ExitCode::from(GUARANTEE_BROKEN)
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            // Library errors already embed their source; print each cause once.
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
