//! Exogenous time series: loading, writing, auditing and synthesis.
//!
//! On disk a trace is a directory holding one CSV per series
//! (`arrivals.csv`, `pv.csv`, `price_buy.csv`, `price_sell.csv`, each with
//! header `slot,entity_id,value`) and a `trace.toml` sidecar with units,
//! declared bounds and a provenance label. Values are normalized to kWh and
//! $/kWh on load; written files are always normalized.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PriceBounds, SlotInput};

pub const SIDECAR: &str = "trace.toml";
const HEADER: [&str; 3] = ["slot", "entity_id", "value"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("{series} slot {slot} entity {entity}: value {value} breaks declared bound {bound}")]
    Bound {
        series: &'static str,
        slot: usize,
        entity: usize,
        value: f64,
        bound: f64,
    },
    #[error("series length mismatch: {0}")]
    LengthMismatch(String),
    #[error("slot {slot} back end {entity}: sell price {sell} exceeds buy price {buy}")]
    SellAboveBuy {
        slot: usize,
        entity: usize,
        sell: f64,
        buy: f64,
    },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error("trace has {have} slots, {need} requested")]
    TooShort { have: usize, need: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnergyUnit {
    #[serde(rename = "kWh")]
    KWh,
    #[serde(rename = "MWh")]
    MWh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriceUnit {
    #[serde(rename = "$/kWh")]
    PerKWh,
    #[serde(rename = "$/MWh")]
    PerMWh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Units {
    pub energy: EnergyUnit,
    pub price: PriceUnit,
}

impl Units {
    pub const NORMALIZED: Units = Units {
        energy: EnergyUnit::KWh,
        price: PriceUnit::PerKWh,
    };

    fn energy_factor(&self) -> f64 {
        match self.energy {
            EnergyUnit::KWh => 1.0,
            EnergyUnit::MWh => 1000.0,
        }
    }

    fn price_factor(&self) -> f64 {
        match self.price {
            PriceUnit::PerKWh => 1.0,
            PriceUnit::PerMWh => 1e-3,
        }
    }
}

impl Default for Units {
    fn default() -> Self {
        Self::NORMALIZED
    }
}

/// Worst-case values the trace promises to respect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclaredBounds {
    pub arrival_max: Vec<f64>,
    pub buy_max: f64,
    pub sell_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    slots: usize,
    front_ends: usize,
    back_ends: usize,
    provenance: String,
    units: Units,
    bounds: DeclaredBounds,
}

/// Per-slot series, indexed `[slot][entity]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub arrivals: Vec<Vec<f64>>,
    pub pv: Vec<Vec<f64>>,
    pub price_buy: Vec<Vec<f64>>,
    pub price_sell: Vec<Vec<f64>>,
    pub bounds: DeclaredBounds,
    pub provenance: String,
}

impl TraceSet {
    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }

    pub fn num_front(&self) -> usize {
        self.bounds.arrival_max.len()
    }

    pub fn num_back(&self) -> usize {
        self.pv.first().map_or(0, Vec::len)
    }

    /// Exogenous input of slot `t` with the midpoint sharing price.
    pub fn slot(&self, t: usize) -> SlotInput {
        SlotInput::with_midpoint_trade(
            self.arrivals[t].clone(),
            self.pv[t].clone(),
            self.price_buy[t].clone(),
            self.price_sell[t].clone(),
        )
    }

    pub fn price_bounds(&self) -> PriceBounds {
        PriceBounds {
            buy_max: self.bounds.buy_max,
            sell_min: self.bounds.sell_min,
        }
    }

    /// First `t` slots.
    pub fn prefix(&self, t: usize) -> Result<Self, TraceError> {
        if t > self.len() {
            return Err(TraceError::TooShort {
                have: self.len(),
                need: t,
            });
        }
        Ok(Self {
            arrivals: self.arrivals[..t].to_vec(),
            pv: self.pv[..t].to_vec(),
            price_buy: self.price_buy[..t].to_vec(),
            price_sell: self.price_sell[..t].to_vec(),
            bounds: self.bounds.clone(),
            provenance: self.provenance.clone(),
        })
    }

    /// Median of every buy price in the trace.
    pub fn median_buy_price(&self) -> f64 {
        let mut all: Vec<f64> = self.price_buy.iter().flatten().copied().collect();
        if all.is_empty() {
            return 0.0;
        }
        all.sort_by(f64::total_cmp);
        let n = all.len();
        if n % 2 == 1 {
            all[n / 2]
        } else {
            0.5 * (all[n / 2 - 1] + all[n / 2])
        }
    }

    /// Checks shapes, sign conventions and the declared bounds.
    pub fn audit(&self) -> Result<(), TraceError> {
        let t = self.len();
        let (nj, ni) = (self.num_front(), self.num_back());
        for (name, series, width) in [
            ("pv", &self.pv, ni),
            ("price_buy", &self.price_buy, ni),
            ("price_sell", &self.price_sell, ni),
            ("arrivals", &self.arrivals, nj),
        ] {
            if series.len() != t || series.iter().any(|row| row.len() != width) {
                return Err(TraceError::LengthMismatch(format!(
                    "{name} is not {t} slots of {width} entities"
                )));
            }
        }
        for s in 0..t {
            for (j, &a) in self.arrivals[s].iter().enumerate() {
                if !(a >= 0.0) || a > self.bounds.arrival_max[j] {
                    return Err(TraceError::Bound {
                        series: "arrivals",
                        slot: s,
                        entity: j,
                        value: a,
                        bound: self.bounds.arrival_max[j],
                    });
                }
            }
            for i in 0..ni {
                let (z, buy, sell) = (self.pv[s][i], self.price_buy[s][i], self.price_sell[s][i]);
                if !(z >= 0.0) {
                    return Err(TraceError::Bound {
                        series: "pv",
                        slot: s,
                        entity: i,
                        value: z,
                        bound: 0.0,
                    });
                }
                if sell > buy {
                    return Err(TraceError::SellAboveBuy {
                        slot: s,
                        entity: i,
                        sell,
                        buy,
                    });
                }
                if !(buy <= self.bounds.buy_max) {
                    return Err(TraceError::Bound {
                        series: "price_buy",
                        slot: s,
                        entity: i,
                        value: buy,
                        bound: self.bounds.buy_max,
                    });
                }
                if !(sell >= self.bounds.sell_min) {
                    return Err(TraceError::Bound {
                        series: "price_sell",
                        slot: s,
                        entity: i,
                        value: sell,
                        bound: self.bounds.sell_min,
                    });
                }
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_series(
    path: &Path,
    slots: usize,
    entities: usize,
    scale: f64,
) -> Result<Vec<Vec<f64>>, TraceError> {
    let parse = |line: u64, msg: String| TraceError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header = rdr.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(parse(1, format!("expected header {}", HEADER.join(","))));
    }
    let mut out = vec![vec![f64::NAN; entities]; slots];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse(
                line,
                format!("expected 3 fields, found {}", rec.len()),
            ));
        }
        let slot: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse(line, "bad slot index".into()))?;
        let entity: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse(line, "bad entity id".into()))?;
        let value: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| parse(line, "bad value".into()))?;
        if !value.is_finite() {
            return Err(parse(line, "non-finite value".into()));
        }
        if slot >= slots || entity >= entities {
            return Err(parse(
                line,
                format!("({slot}, {entity}) outside {slots} slots x {entities} entities"),
            ));
        }
        if !out[slot][entity].is_nan() {
            return Err(parse(
                line,
                format!("duplicate entry for ({slot}, {entity})"),
            ));
        }
        out[slot][entity] = value * scale;
    }
    for (s, row) in out.iter().enumerate() {
        if let Some(e) = row.iter().position(|v| v.is_nan()) {
            return Err(TraceError::LengthMismatch(format!(
                "{} has no value for slot {s} entity {e}",
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Loads a trace directory, normalizing units and auditing declared bounds.
pub fn load_trace_csv(dir: &Path) -> Result<TraceSet, TraceError> {
    let side_path = dir.join(SIDECAR);
    let text = fs::read_to_string(&side_path).map_err(io_err(&side_path))?;
    let side: Sidecar = toml::from_str(&text).map_err(|e| TraceError::Sidecar(e.to_string()))?;
    if side.bounds.arrival_max.len() != side.front_ends {
        return Err(TraceError::Sidecar(
            "arrival_max must list one bound per front end".into(),
        ));
    }
    let (ef, pf) = (side.units.energy_factor(), side.units.price_factor());
    let trace = TraceSet {
        arrivals: read_series(&dir.join("arrivals.csv"), side.slots, side.front_ends, 1.0)?,
        pv: read_series(&dir.join("pv.csv"), side.slots, side.back_ends, ef)?,
        price_buy: read_series(&dir.join("price_buy.csv"), side.slots, side.back_ends, pf)?,
        price_sell: read_series(&dir.join("price_sell.csv"), side.slots, side.back_ends, pf)?,
        bounds: DeclaredBounds {
            arrival_max: side.bounds.arrival_max,
            buy_max: side.bounds.buy_max * pf,
            sell_min: side.bounds.sell_min * pf,
        },
        provenance: side.provenance,
    };
    trace.audit()?;
    Ok(trace)
}

fn write_series(path: &Path, series: &[Vec<f64>]) -> Result<(), TraceError> {
    let mut text = String::from("slot,entity_id,value\n");
    for (s, row) in series.iter().enumerate() {
        for (e, v) in row.iter().enumerate() {
            writeln!(text, "{s},{e},{v}").expect("writing to a String cannot fail");
        }
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Writes a normalized trace directory readable by [`load_trace_csv`].
pub fn write_trace_csv(trace: &TraceSet, dir: &Path) -> Result<(), TraceError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let side = Sidecar {
        slots: trace.len(),
        front_ends: trace.num_front(),
        back_ends: trace.num_back(),
        provenance: trace.provenance.clone(),
        units: Units::NORMALIZED,
        bounds: trace.bounds.clone(),
    };
    let text = toml::to_string(&side).map_err(|e| TraceError::Sidecar(e.to_string()))?;
    let side_path = dir.join(SIDECAR);
    fs::write(&side_path, text).map_err(io_err(&side_path))?;
    write_series(&dir.join("arrivals.csv"), &trace.arrivals)?;
    write_series(&dir.join("pv.csv"), &trace.pv)?;
    write_series(&dir.join("price_buy.csv"), &trace.price_buy)?;
    write_series(&dir.join("price_sell.csv"), &trace.price_sell)
}

/// Diurnal generator settings. Amplitudes are absolute, in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthShape {
    /// Slots per diurnal period.
    pub period: usize,
    pub arrival_base: f64,
    pub arrival_amp: f64,
    pub arrival_noise: f64,
    pub pv_peak: f64,
    pub pv_noise: f64,
    pub price_base: f64,
    pub price_amp: f64,
    pub price_noise: f64,
    /// Sell price as a fraction of the buy price.
    pub sell_fraction: f64,
    /// Phase offset between consecutive entities, in radians.
    pub phase_step: f64,
}

impl Default for SynthShape {
    fn default() -> Self {
        Self {
            period: 288,
            arrival_base: 2.5,
            arrival_amp: 1.5,
            arrival_noise: 0.5,
            pv_peak: 4.0,
            pv_noise: 0.5,
            price_base: 0.06,
            price_amp: 0.025,
            price_noise: 0.005,
            sell_fraction: 0.5,
            phase_step: 0.4,
        }
    }
}

/// Deterministic synthetic trace with analytic declared bounds.
pub fn synth_generate(
    seed: u64,
    slots: usize,
    front_ends: usize,
    back_ends: usize,
    shape: &SynthShape,
) -> TraceSet {
    use std::f64::consts::{FRAC_PI_2, TAU};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |amp: f64| {
        if amp > 0.0 {
            rng.gen_range(-amp..=amp)
        } else {
            0.0
        }
    };
    let period = shape.period.max(1) as f64;
    let mut arrivals = Vec::with_capacity(slots);
    let mut pv = Vec::with_capacity(slots);
    let mut price_buy = Vec::with_capacity(slots);
    let mut price_sell = Vec::with_capacity(slots);
    for t in 0..slots {
        let angle = TAU * t as f64 / period;
        arrivals.push(
            (0..front_ends)
                .map(|j| {
                    let wave = (angle + j as f64 * shape.phase_step).sin();
                    (shape.arrival_base + shape.arrival_amp * wave + noise(shape.arrival_noise))
                        .max(0.0)
                })
                .collect::<Vec<_>>(),
        );
        pv.push(
            (0..back_ends)
                .map(|i| {
                    let sun = (angle - FRAC_PI_2 + i as f64 * 0.1 * shape.phase_step).sin();
                    let n = noise(shape.pv_noise);
                    if sun > 0.0 {
                        (shape.pv_peak * sun + n).max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect::<Vec<_>>(),
        );
        let buy: Vec<f64> = (0..back_ends)
            .map(|i| {
                let wave = (angle - 2.0 * FRAC_PI_2 + i as f64 * shape.phase_step).sin();
                shape.price_base + shape.price_amp * wave + noise(shape.price_noise)
            })
            .collect();
        let floor = buy.iter().copied().fold(f64::INFINITY, f64::min);
        price_sell.push(
            buy.iter()
                .map(|b| (shape.sell_fraction * b).min(floor))
                .collect::<Vec<_>>(),
        );
        price_buy.push(buy);
    }
    let buy_floor = shape.price_base - shape.price_amp - shape.price_noise;
    TraceSet {
        arrivals,
        pv,
        price_buy,
        price_sell,
        bounds: DeclaredBounds {
            arrival_max: vec![
                shape.arrival_base + shape.arrival_amp + shape.arrival_noise;
                front_ends
            ],
            buy_max: shape.price_base + shape.price_amp + shape.price_noise,
            sell_min: (shape.sell_fraction * buy_floor).min(buy_floor),
        },
        provenance: format!("synthetic seed={seed}"),
    }
}
