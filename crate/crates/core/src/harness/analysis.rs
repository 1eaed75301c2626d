use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ControllerConfig, ControllerKind, ExperimentConfig};
use super::run::{simulate, solve_slot, v_from_fraction, Experiment, RunReport, ViolationCounters};
use super::{ControllerFailure, HarnessError};
use crate::admm::AdmmConfig;
use crate::lyapunov::{LyapunovParams, QueueMode};
use crate::model::{CostBreakdown, SystemState};
use crate::scenario::random_scenario;

/// Controller config for `kind`, keeping only the knobs it accepts.
fn knobs_for(base: &ControllerConfig, kind: ControllerKind) -> ControllerConfig {
    let mut c = base.clone();
    c.kind = kind;
    if !kind.uses_lyapunov() {
        c.v = None;
        c.v_fraction = None;
    }
    if kind != ControllerKind::Greedy {
        c.p_th = None;
    }
    c
}

/// Slot-wise check that the per-slot optimum does not increase with the
/// sharing scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareAudit {
    pub scales: Vec<f64>,
    pub slots: usize,
    /// Slot/scale pairs where a larger scale gave a larger optimum.
    pub violations: usize,
    pub max_excess: f64,
}

impl ShareAudit {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Re-solves the per-slot problem at every state in `states` for each
/// sharing scale (relative to the experiment's cluster) and checks that the
/// optimum is non-increasing in the scale.
pub fn share_scale_audit(
    exp: &Experiment,
    lyap: &LyapunovParams,
    states: &[SystemState],
    scales: &[f64],
) -> Result<ShareAudit, HarnessError> {
    let mut scales = scales.to_vec();
    scales.sort_by(f64::total_cmp);
    let clusters: Vec<_> = scales
        .iter()
        .map(|&s| exp.params.with_share_scale(s))
        .collect();
    let per_slot: Vec<Result<Vec<f64>, HarnessError>> = states
        .par_iter()
        .map(|state| {
            let input = exp.trace.slot(state.slot);
            clusters
                .iter()
                .map(|p| {
                    solve_slot(state, &input, p, lyap)
                        .map(|(_, obj)| obj)
                        .map_err(|e| HarnessError::Controller {
                            controller: ControllerKind::Proposed,
                            slot: Some(state.slot),
                            source: Box::new(ControllerFailure::Online(e)),
                        })
                })
                .collect()
        })
        .collect();
    let mut audit = ShareAudit {
        scales,
        slots: states.len(),
        violations: 0,
        max_excess: 0.0,
    };
    for objs in per_slot {
        for w in objs?.windows(2) {
            let excess = w[1] - w[0];
            if excess > 1e-9 * w[0].abs().max(1.0) {
                audit.violations += 1;
            }
            audit.max_excess = audit.max_excess.max(excess);
        }
    }
    Ok(audit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: ControllerKind,
    pub f_batt: f64,
    pub f_grid: f64,
    pub f_tran: f64,
    pub f_work: f64,
    pub f: f64,
    /// Total cost relative to the offline benchmark, in percent.
    pub relative: Option<f64>,
    pub violations: ViolationCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub slots: usize,
    pub rows: Vec<ComparisonRow>,
    /// Present when both `proposed` and `no-sharing` were run.
    pub share_audit: Option<ShareAudit>,
    #[serde(skip)]
    pub reports: Vec<RunReport>,
}

impl ComparisonTable {
    pub fn row(&self, kind: ControllerKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.controller == kind)
    }

    pub fn report(&self, kind: ControllerKind) -> Option<&RunReport> {
        self.reports.iter().find(|r| r.controller == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("controller,f_batt,f_grid,f_tran,f_work,f,relative_percent\n");
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                r.controller,
                r.f_batt,
                r.f_grid,
                r.f_tran,
                r.f_work,
                r.f,
                r.relative.map_or_else(String::new, |v| v.to_string())
            );
        }
        out
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9}",
            "controller", "f_batt", "f_grid", "f_tran", "f_work", "f", "vs offl."
        )?;
        for r in &self.rows {
            let rel = r
                .relative
                .map_or_else(|| "—".to_string(), |v| format!("{v:.1}%"));
            writeln!(
                f,
                "{:<12} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>9}",
                r.controller.name(),
                r.f_batt,
                r.f_grid,
                r.f_tran,
                r.f_work,
                r.f,
                rel
            )?;
        }
        Ok(())
    }
}

/// Runs every controller in `kinds` on the same trace and tabulates the
/// accumulated cost components.
pub fn compare_algorithms(
    config: &ExperimentConfig,
    kinds: &[ControllerKind],
) -> Result<ComparisonTable, HarnessError> {
    let exp = Experiment::prepare(config)?;
    let reports: Vec<RunReport> = kinds
        .par_iter()
        .map(|&k| simulate(&exp, &knobs_for(&config.controller, k)))
        .collect::<Result<_, _>>()?;
    let offline = reports
        .iter()
        .find(|r| r.controller == ControllerKind::Offline)
        .map(|r| r.totals.f_total);
    let rows = reports
        .iter()
        .map(|r| {
            let t = &r.totals;
            ComparisonRow {
                controller: r.controller,
                f_batt: t.f_batt,
                f_grid: t.f_grid,
                f_tran: t.f_tran,
                f_work: t.f_work,
                f: t.f_total,
                relative: offline
                    .filter(|o| o.abs() > 1e-12)
                    .map(|o| 100.0 * t.f_total / o),
                violations: r.violations,
            }
        })
        .collect();
    let share_audit = match (
        reports
            .iter()
            .find(|r| r.controller == ControllerKind::Proposed),
        kinds.contains(&ControllerKind::NoSharing),
    ) {
        (Some(proposed), true) => {
            let lyap =
                exp.lyapunov_for(&knobs_for(&config.controller, ControllerKind::Proposed))?;
            Some(share_scale_audit(
                &exp,
                &lyap,
                &proposed.states,
                &[0.0, 1.0],
            )?)
        }
        _ => None,
    };
    Ok(ComparisonTable {
        slots: exp.slots(),
        rows,
        share_audit,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// Absolute V.
    V,
    /// V as a fraction of the admissible interval.
    VFraction,
    /// Multiplier on every sharing cap.
    ShareScale,
}

impl std::str::FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "v" => Ok(SweepParam::V),
            "v-fraction" => Ok(SweepParam::VFraction),
            "share-scale" | "u-bar-scale" => Ok(SweepParam::ShareScale),
            other => Err(HarnessError::Config(format!(
                "unknown sweep parameter `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// V actually used, for Lyapunov controllers.
    pub v: Option<f64>,
    /// Why the point was not run.
    pub skipped: Option<String>,
    pub totals: Option<CostBreakdown>,
    pub violations: Option<ViolationCounters>,
    #[serde(skip)]
    pub report: Option<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    /// Slot-wise objective check, for sharing-scale sweeps.
    pub share_audit: Option<ShareAudit>,
}

impl SweepReport {
    pub fn ran(&self) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(|p| p.skipped.is_none())
    }

    /// `value,v,f,f_grid,f_batt,skipped` per point.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("value,v,f,f_grid,f_batt,skipped\n");
        for p in &self.points {
            let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
            out += &format!(
                "{},{},{},{},{},{}\n",
                p.value,
                opt(p.v),
                opt(p.totals.map(|t| t.f_total)),
                opt(p.totals.map(|t| t.f_grid)),
                opt(p.totals.map(|t| t.f_batt)),
                p.skipped.as_deref().unwrap_or("")
            );
        }
        out
    }
}

/// One run per value of `param`. Values outside the admissible range are
/// skipped with a reason.
pub fn sweep(
    config: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepReport, HarnessError> {
    if values.is_empty() {
        return Ok(SweepReport {
            param,
            points: Vec::new(),
            share_audit: None,
        });
    }
    let exp = Experiment::prepare(config)?;
    let ctrl = &config.controller;
    let base_lyap = if ctrl.kind.uses_lyapunov() {
        let mut plain = ctrl.clone();
        plain.v = None;
        plain.v_fraction = None;
        Some(exp.lyapunov_for(&plain)?)
    } else {
        None
    };
    if matches!(param, SweepParam::V | SweepParam::VFraction) && base_lyap.is_none() {
        return Err(HarnessError::Config(format!(
            "controller `{}` takes no V",
            ctrl.kind
        )));
    }

    let points: Vec<SweepPoint> = values
        .par_iter()
        .map(|&value| -> Result<SweepPoint, HarnessError> {
            let mut point = SweepPoint {
                value,
                v: None,
                skipped: None,
                totals: None,
                violations: None,
                report: None,
            };
            let mut run_exp = exp.clone();
            let mut run_ctrl = ctrl.clone();
            match param {
                SweepParam::V | SweepParam::VFraction => {
                    let lyap = base_lyap.as_ref().expect("checked above");
                    let v = if param == SweepParam::V {
                        value
                    } else if value > 0.0 && value <= 1.0 {
                        v_from_fraction(lyap, value)
                    } else {
                        point.skipped = Some(format!("fraction {value} outside (0, 1]"));
                        return Ok(point);
                    };
                    point.v = Some(v);
                    if let Some(reason) = inadmissible(lyap, v) {
                        point.skipped = Some(reason);
                        return Ok(point);
                    }
                    run_ctrl.v = Some(v);
                    run_ctrl.v_fraction = None;
                }
                SweepParam::ShareScale => {
                    if !(value >= 0.0) {
                        point.skipped = Some(format!("scale {value} is negative"));
                        return Ok(point);
                    }
                    run_exp.params = exp.params.with_share_scale(value);
                }
            }
            let report = simulate(&run_exp, &run_ctrl)?;
            point.v = report.v;
            point.totals = Some(report.totals);
            point.violations = Some(report.violations);
            point.report = Some(report);
            Ok(point)
        })
        .collect::<Result<_, _>>()?;

    let share_audit = match (param, &base_lyap) {
        (SweepParam::ShareScale, Some(lyap)) => {
            let scales: Vec<f64> = points
                .iter()
                .filter(|p| p.skipped.is_none())
                .map(|p| p.value)
                .collect();
            // Any trajectory will do: feasible-set inclusion holds at every state.
            let states = points
                .iter()
                .find_map(|p| p.report.as_ref())
                .map(|r| r.states.clone())
                .unwrap_or_default();
            Some(share_scale_audit(&exp, lyap, &states, &scales)?)
        }
        _ => None,
    };
    Ok(SweepReport {
        param,
        points,
        share_audit,
    })
}

fn inadmissible(lyap: &LyapunovParams, v: f64) -> Option<String> {
    if !(v > 0.0) {
        return Some(format!("V = {v} is not positive"));
    }
    if lyap.mode == QueueMode::Bounded && (v < lyap.v_min || v > lyap.v_max) {
        return Some(format!(
            "V = {v} outside the admissible interval [{}, {}]",
            lyap.v_min.max(0.0),
            lyap.v_max
        ));
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Inclusive lower edge.
    pub lo: usize,
    /// Exclusive upper edge.
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub total: usize,
    pub buckets: Vec<HistogramBucket>,
    /// `(threshold, fraction of slots needing more iterations)`.
    pub exceed: Vec<(usize, f64)>,
    /// Smallest candidate threshold whose exceed fraction is within target.
    pub recommended: Option<usize>,
}

impl Histogram {
    pub fn exceed_fraction(counts: &[usize], threshold: usize) -> f64 {
        if counts.is_empty() {
            0.0
        } else {
            counts.iter().filter(|&&c| c > threshold).count() as f64 / counts.len() as f64
        }
    }
}

/// Buckets iteration counts and recommends a truncation threshold.
pub fn admm_histogram(
    counts: &[usize],
    bucket_width: usize,
    thresholds: &[usize],
    target: f64,
) -> Histogram {
    let width = bucket_width.max(1);
    let mut buckets: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in counts {
        *buckets.entry(c / width).or_default() += 1;
    }
    let mut candidates = thresholds.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let exceed: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&t| (t, Histogram::exceed_fraction(counts, t)))
        .collect();
    Histogram {
        total: counts.len(),
        buckets: buckets
            .into_iter()
            .map(|(b, count)| HistogramBucket {
                lo: b * width,
                hi: (b + 1) * width,
                count,
            })
            .collect(),
        recommended: exceed.iter().find(|(_, f)| *f <= target).map(|(t, _)| *t),
        exceed,
    }
}

/// Iterations per slot from one or more JSON-lines iteration traces.
/// Slots are keyed by file order then slot number.
pub fn read_iteration_counts(paths: &[&Path]) -> Result<Vec<usize>, HarnessError> {
    #[derive(Deserialize)]
    struct Line {
        slot: usize,
        n: usize,
    }
    let mut counts = Vec::new();
    for path in paths {
        let file = std::fs::File::open(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut per_slot: BTreeMap<usize, usize> = BTreeMap::new();
        for (no, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| HarnessError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line)
                .map_err(|e| HarnessError::Config(format!("{}:{}: {e}", path.display(), no + 1)))?;
            let n = per_slot.entry(rec.slot).or_default();
            *n = (*n).max(rec.n);
        }
        counts.extend(per_slot.into_values());
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub back_ends: usize,
    pub front_ends: usize,
    pub agents: usize,
    pub untruncated_seconds: f64,
    pub truncated_seconds: f64,
    /// Seconds per agent per slot.
    pub per_agent_untruncated: f64,
    pub per_agent_truncated: f64,
    /// Truncated over untruncated total time.
    pub ratio: f64,
    /// Fraction of untruncated slots needing more than the threshold.
    pub exceed_fraction: f64,
    pub truncated_cost: f64,
    pub untruncated_cost: f64,
}

/// Times untruncated and truncated ADMM on one experiment.
pub fn truncation_timing(
    exp: &Experiment,
    base: &AdmmConfig,
    threshold: usize,
    untruncated_cap: usize,
) -> Result<ScaleRow, HarnessError> {
    let run = |max_iter| {
        let ctrl = ControllerConfig {
            kind: ControllerKind::Admm,
            admm: AdmmConfig {
                max_iter,
                record_iterations: false,
                ..base.clone()
            },
            ..ControllerConfig::default()
        };
        simulate(exp, &ctrl)
    };
    let full = run(untruncated_cap)?;
    let cut = run(threshold)?;
    let agents = exp.params.num_back() + exp.params.num_front() + 1;
    let slots = exp.slots().max(1) as f64;
    let (tu, tt) = (full.total_wall_seconds(), cut.total_wall_seconds());
    let iterations = &full.admm.as_ref().expect("admm run").iterations;
    Ok(ScaleRow {
        back_ends: exp.params.num_back(),
        front_ends: exp.params.num_front(),
        agents,
        untruncated_seconds: tu,
        truncated_seconds: tt,
        per_agent_untruncated: tu / agents as f64 / slots,
        per_agent_truncated: tt / agents as f64 / slots,
        ratio: if tu > 0.0 { tt / tu } else { 1.0 },
        exceed_fraction: Histogram::exceed_fraction(iterations, threshold),
        truncated_cost: cut.totals.f_total,
        untruncated_cost: full.totals.f_total,
    })
}

/// Truncated versus untruncated ADMM timing on random clusters of each
/// `(back ends, front ends)` size.
pub fn scalability_sweep(
    sizes: &[(usize, usize)],
    slots: usize,
    seed: u64,
    base: &AdmmConfig,
    threshold: usize,
    untruncated_cap: usize,
) -> Result<Vec<ScaleRow>, HarnessError> {
    sizes
        .iter()
        .map(|&(ni, nj)| {
            if ni == 0 || nj == 0 || ni > 20 || nj > 20 {
                return Err(HarnessError::Config(format!(
                    "size ({ni}, {nj}) outside 1..=20"
                )));
            }
            let (params, trace) = random_scenario(seed, ni, nj, slots);
            let exp = Experiment {
                config: ExperimentConfig {
                    slots,
                    seed,
                    ..ExperimentConfig::default()
                },
                params,
                trace,
            };
            truncation_timing(&exp, base, threshold, untruncated_cap)
        })
        .collect()
}
