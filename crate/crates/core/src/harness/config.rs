use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::admm::AdmmConfig;
use crate::model::ClusterParams;
use crate::traces::SynthShape;

/// Where the exogenous series come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum TraceSource {
    /// Synthetic generator; `seed` falls back to the experiment seed.
    Synth {
        #[serde(default)]
        shape: SynthShape,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Directory holding the CSV series and their sidecar.
    Csv { path: PathBuf },
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Synth {
            shape: SynthShape::default(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    /// Full-horizon optimum with known future.
    #[serde(alias = "b1")]
    Offline,
    /// Threshold charging plus per-slot cost minimization.
    #[serde(alias = "b2")]
    Greedy,
    /// Drift-plus-penalty with bounded virtual queues.
    Proposed,
    /// Proposed controller with every sharing cap set to zero.
    #[serde(alias = "b3")]
    NoSharing,
    /// Drift-plus-penalty with rectified virtual queues.
    #[serde(alias = "b4")]
    Traditional,
    /// Proposed controller solved by consensus ADMM.
    Admm,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 6] = [
        ControllerKind::Offline,
        ControllerKind::Greedy,
        ControllerKind::Proposed,
        ControllerKind::NoSharing,
        ControllerKind::Traditional,
        ControllerKind::Admm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Offline => "offline",
            ControllerKind::Greedy => "greedy",
            ControllerKind::Proposed => "proposed",
            ControllerKind::NoSharing => "no-sharing",
            ControllerKind::Traditional => "traditional",
            ControllerKind::Admm => "admm",
        }
    }

    /// Controllers whose construction rules out physical bound violations.
    pub fn guarantees_bounds(self) -> bool {
        matches!(
            self,
            ControllerKind::Offline
                | ControllerKind::Greedy
                | ControllerKind::Proposed
                | ControllerKind::NoSharing
        )
    }

    pub fn uses_lyapunov(self) -> bool {
        matches!(
            self,
            ControllerKind::Proposed
                | ControllerKind::NoSharing
                | ControllerKind::Traditional
                | ControllerKind::Admm
        )
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        ControllerKind::deserialize(
            serde::de::value::StrDeserializer::<serde::de::value::Error>::new(&key),
        )
        .map_err(|_| HarnessError::Config(format!("unknown controller `{s}`")))
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Starting charge of every battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BatteryInit {
    /// The controller's battery target `δ_i`.
    #[default]
    Target,
    Floor,
    /// Midpoint of `[B_min, B_max]`.
    Mid,
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Absolute V; checked against the admissible interval unless the
    /// controller is `traditional`.
    pub v: Option<f64>,
    /// V as a fraction of the admissible interval `[max(v_min, 0), v_max]`.
    pub v_fraction: Option<f64>,
    /// Greedy charging threshold; defaults to the trace's median buy price.
    pub p_th: Option<f64>,
    /// Multiplier applied to every sharing cap.
    pub share_scale: f64,
    pub admm: AdmmConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Proposed,
            v: None,
            v_fraction: None,
            p_th: None,
            share_scale: 1.0,
            admm: AdmmConfig {
                max_iter: 50,
                ..AdmmConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Dump ADMM iteration records as JSON lines.
    pub iteration_trace: bool,
    /// Solve the offline problem too and compare the gap with its bound.
    pub gap_audit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub slots: usize,
    /// Cluster description; the three-site reference cluster when absent.
    /// Arrival bounds are always taken from the trace.
    pub cluster: Option<ClusterParams>,
    pub trace: TraceSource,
    pub initial_battery: BatteryInit,
    pub controller: ControllerConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            slots: 500,
            cluster: None,
            trace: TraceSource::default(),
            initial_battery: BatteryInit::default(),
            controller: ControllerConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides. Values are
    /// read as TOML and fall back to plain strings.
    pub fn from_toml_with_overrides(
        text: &str,
        overrides: &[String],
    ) -> Result<Self, HarnessError> {
        let mut doc: toml::Table = toml::from_str(text)?;
        let defaults = toml::Table::try_from(Self::default()).expect("defaults serialize");
        for o in overrides {
            // A nested override into an absent table starts from that table's
            // defaults so tagged sections keep their tag.
            if let Some((top, _)) = o
                .split_once('=')
                .and_then(|(k, _)| k.trim().split_once('.'))
            {
                if !doc.contains_key(top) {
                    if let Some(t @ toml::Value::Table(_)) = defaults.get(top) {
                        doc.insert(top.to_string(), t.clone());
                    }
                }
            }
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let c = &self.controller;
        if !(c.share_scale >= 0.0) {
            return Err(HarnessError::Config(format!(
                "share_scale must be non-negative, got {}",
                c.share_scale
            )));
        }
        if c.v.is_some() && c.v_fraction.is_some() {
            return Err(HarnessError::Config(
                "set at most one of `v` and `v_fraction`".into(),
            ));
        }
        if let Some(v) = c.v {
            if !(v > 0.0) {
                return Err(HarnessError::Config(format!("v must be positive, got {v}")));
            }
        }
        if let Some(f) = c.v_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(HarnessError::Config(format!(
                    "v_fraction must lie in (0, 1], got {f}"
                )));
            }
        }
        if (c.v.is_some() || c.v_fraction.is_some()) && !c.kind.uses_lyapunov() {
            return Err(HarnessError::Config(format!(
                "controller `{}` takes no V",
                c.kind
            )));
        }
        if c.p_th.is_some() && c.kind != ControllerKind::Greedy {
            return Err(HarnessError::Config(format!(
                "controller `{}` takes no p_th",
                c.kind
            )));
        }
        if c.kind == ControllerKind::Admm {
            c.admm
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if let TraceSource::Csv { path } = &self.trace {
            if !path.is_dir() {
                return Err(HarnessError::Config(format!(
                    "trace directory {} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(cluster) = &self.cluster {
            cluster
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

fn apply_override(doc: &mut toml::Table, entry: &str) -> Result<(), HarnessError> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{entry}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| HarnessError::Config(format!("override `{entry}` has an empty key")))?;
    let mut table = doc;
    for part in parts {
        let node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = node.as_table_mut().ok_or_else(|| {
            HarnessError::Config(format!("override `{entry}`: `{part}` is not a table"))
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn override_into_absent_tagged_table_keeps_defaults() {
        let cfg =
            ExperimentConfig::from_toml_with_overrides("", &["trace.shape.arrival_base=9".into()])
                .unwrap();
        match cfg.trace {
            TraceSource::Synth { shape, .. } => {
                assert_eq!(shape.arrival_base, 9.0);
                assert_eq!(shape.period, SynthShape::default().period);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "seed = 3\n",
            &[
                "controller.kind=admm".into(),
                "controller.admm.max_iter=20".into(),
                "slots=10".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.slots, 10);
        assert_eq!(cfg.controller.kind, ControllerKind::Admm);
        assert_eq!(cfg.controller.admm.max_iter, 20);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.controller.kind = ControllerKind::Greedy;
        cfg.controller.p_th = Some(0.05);
        cfg.initial_battery = BatteryInit::Values(vec![20.0, 30.0, 40.0]);
        cfg.cluster = Some(crate::scenario::reference_params());
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_knobs() {
        for o in [
            "controller.share_scale=-1",
            "controller.v=0",
            "controller.v_fraction=1.5",
            "controller.p_th=0.1",
            "controller.bogus=1",
        ] {
            assert!(
                ExperimentConfig::from_toml_with_overrides("", &[o.to_string()]).is_err(),
                "{o} accepted"
            );
        }
        let both = [
            "controller.v=10".to_string(),
            "controller.v_fraction=0.5".to_string(),
        ];
        assert!(ExperimentConfig::from_toml_with_overrides("", &both).is_err());
    }

    #[test]
    fn controller_names_parse() {
        for k in ControllerKind::ALL {
            assert_eq!(k.name().parse::<ControllerKind>().unwrap(), k);
        }
        assert_eq!(
            "B4".parse::<ControllerKind>().unwrap(),
            ControllerKind::Traditional
        );
        assert!("nope".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn missing_csv_directory_is_rejected() {
        let text = "[trace]\nsource = \"csv\"\npath = \"/definitely/not/here\"\n";
        assert!(matches!(
            ExperimentConfig::from_toml_str(text),
            Err(HarnessError::Config(_))
        ));
    }
}
