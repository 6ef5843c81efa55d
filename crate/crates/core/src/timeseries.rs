//! Generation and price time series: file ingestion and a seeded synthetic generator.
//!
//! Scenario files are UTF-8 comma-separated text with the header
//! `slot,generation_mw,price`, one record per line. Files written by
//! [`save_scenario`] are canonical and re-load/re-save byte-identically.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCENARIO_HEADER: [&str; 3] = ["slot", "generation_mw", "price"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario file: {0}")]
    Format(String),
    #[error("row {row}, column `{column}`: {message}")]
    Field {
        row: usize,
        column: &'static str,
        message: String,
    },
    #[error("scenario has no records")]
    Empty,
    #[error("slot duration must be positive and finite, got {0}")]
    SlotDuration(f64),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// One market slot: realised generation `x_t` and clearing price `λ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketRecord {
    pub slot: u64,
    pub generation_mw: f64,
    pub price: f64,
}

/// A validated, non-empty series of market records sharing one slot duration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioData {
    records: Vec<MarketRecord>,
    slot_duration_h: f64,
}

impl ScenarioData {
    pub fn new(records: Vec<MarketRecord>, slot_duration_h: f64) -> Result<Self, ScenarioError> {
        if !(slot_duration_h.is_finite() && slot_duration_h > 0.0) {
            return Err(ScenarioError::SlotDuration(slot_duration_h));
        }
        if records.is_empty() {
            return Err(ScenarioError::Empty);
        }
        for (i, rec) in records.iter().enumerate() {
            let row = i + 1;
            if !rec.generation_mw.is_finite() || rec.generation_mw < 0.0 {
                return Err(ScenarioError::Field {
                    row,
                    column: "generation_mw",
                    message: format!("generation must be finite and >= 0, got {}", rec.generation_mw),
                });
            }
            if !rec.price.is_finite() {
                return Err(ScenarioError::Field {
                    row,
                    column: "price",
                    message: format!("price must be finite, got {}", rec.price),
                });
            }
            if i > 0 && rec.slot <= records[i - 1].slot {
                return Err(ScenarioError::Field {
                    row,
                    column: "slot",
                    message: format!(
                        "slot indices must be strictly increasing ({} after {})",
                        rec.slot,
                        records[i - 1].slot
                    ),
                });
            }
        }
        Ok(Self {
            records,
            slot_duration_h,
        })
    }

    pub fn records(&self) -> &[MarketRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn slot_duration_h(&self) -> f64 {
        self.slot_duration_h
    }

    /// Largest generation value in the series (MW).
    pub fn peak_generation_mw(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.generation_mw)
            .fold(0.0, f64::max)
    }

    /// Splits the index range into `parts` contiguous, near-equal slices.
    ///
    /// Earlier slices receive the remainder, so slice lengths differ by at most one.
    pub fn partition(&self, parts: usize) -> Result<Vec<Range<usize>>, ScenarioError> {
        if parts == 0 || parts > self.records.len() {
            return Err(ScenarioError::Argument(format!(
                "cannot split {} records into {parts} slices",
                self.records.len()
            )));
        }
        let base = self.records.len() / parts;
        let extra = self.records.len() % parts;
        let mut start = 0;
        Ok((0..parts)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect())
    }
}

/// Parses scenario text in the documented column format.
pub fn parse_scenario(text: &str, slot_duration_h: f64) -> Result<ScenarioData, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader
        .headers()
        .map_err(|e| ScenarioError::Format(e.to_string()))?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(ScenarioError::Empty);
    }
    if header.iter().collect::<Vec<_>>() != SCENARIO_HEADER {
        return Err(ScenarioError::Format(format!(
            "expected header `{}`, found `{}`",
            SCENARIO_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| ScenarioError::Format(format!("row {row_no}: {e}")))?;
        if row.len() != 3 {
            return Err(ScenarioError::Field {
                row: row_no,
                column: "slot",
                message: format!("expected 3 columns, found {}", row.len()),
            });
        }
        let slot = row[0].parse::<u64>().map_err(|e| ScenarioError::Field {
            row: row_no,
            column: "slot",
            message: format!("`{}`: {e}", &row[0]),
        })?;
        let generation_mw = parse_real(&row[1], row_no, "generation_mw")?;
        let price = parse_real(&row[2], row_no, "price")?;
        records.push(MarketRecord {
            slot,
            generation_mw,
            price,
        });
    }
    ScenarioData::new(records, slot_duration_h)
}

fn parse_real(field: &str, row: usize, column: &'static str) -> Result<f64, ScenarioError> {
    field.parse::<f64>().map_err(|e| ScenarioError::Field {
        row,
        column,
        message: format!("`{field}`: {e}"),
    })
}

pub fn load_scenario(path: impl AsRef<Path>, slot_duration_h: f64) -> Result<ScenarioData, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text, slot_duration_h)
}

/// Canonical text form: header line, then `slot,generation,price` using the
/// shortest representation that parses back to the same `f64`.
pub fn format_scenario(data: &ScenarioData) -> String {
    let mut out = String::with_capacity(data.len() * 24);
    out.push_str(&SCENARIO_HEADER.join(","));
    out.push('\n');
    for r in data.records() {
        let _ = writeln!(out, "{},{},{}", r.slot, r.generation_mw, r.price);
    }
    out
}

pub fn save_scenario(data: &ScenarioData, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    fs::write(path, format_scenario(data)).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parameters of the synthetic generation and price processes.
///
/// Generation in slot `t` (hour-of-day `h = t mod slots_per_day`) is
///
/// ```text
/// x_t = clip(peak · d · sin(π (h − sunrise) / (sunset − sunrise)) + N(0, noise²), 0, ∞)
/// ```
///
/// inside `[sunrise, sunset)` and zero otherwise, where `d ~ U(1 − cloud_variability, 1)`
/// is drawn once per day. Price is
///
/// ```text
/// λ_t = base + daily_amp · cos(2π (h − peak_hour) / slots_per_day)
///            + weekly_ramp · ((t mod week) / week − ½) + N(0, price_noise²)
/// ```
///
/// floored at `price_floor` when set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticProfile {
    pub slots_per_day: usize,
    pub peak_generation_mw: f64,
    pub sunrise_slot: usize,
    pub sunset_slot: usize,
    pub generation_noise_mw: f64,
    pub cloud_variability: f64,
    pub price_base: f64,
    pub price_daily_amplitude: f64,
    pub price_peak_slot: f64,
    pub price_weekly_ramp: f64,
    pub price_noise: f64,
    pub price_floor: Option<f64>,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            slots_per_day: 24,
            peak_generation_mw: 0.6,
            sunrise_slot: 6,
            sunset_slot: 19,
            generation_noise_mw: 0.03,
            cloud_variability: 0.5,
            price_base: 10.0,
            price_daily_amplitude: 5.0,
            price_peak_slot: 20.0,
            price_weekly_ramp: 2.0,
            price_noise: 1.0,
            price_floor: Some(-5.0),
        }
    }
}

impl SyntheticProfile {
    /// Same curves with every stochastic term switched off.
    pub fn noiseless(&self) -> Self {
        Self {
            generation_noise_mw: 0.0,
            cloud_variability: 0.0,
            price_noise: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Argument(m.to_string()));
        if self.slots_per_day == 0 {
            return bad("slots_per_day must be >= 1");
        }
        if self.sunrise_slot >= self.sunset_slot || self.sunset_slot > self.slots_per_day {
            return bad("need sunrise_slot < sunset_slot <= slots_per_day");
        }
        if !(self.peak_generation_mw >= 0.0) {
            return bad("peak_generation_mw must be >= 0");
        }
        if !(self.generation_noise_mw >= 0.0 && self.price_noise >= 0.0) {
            return bad("noise amplitudes must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.cloud_variability) {
            return bad("cloud_variability must lie in [0, 1]");
        }
        let finite = [
            self.price_base,
            self.price_daily_amplitude,
            self.price_peak_slot,
            self.price_weekly_ramp,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("price parameters must be finite");
        }
        Ok(())
    }
}

/// Deterministic synthetic scenario with hourly-style slots.
///
/// The slot duration is `24 / slots_per_day` hours.
pub fn synthesize_scenario(
    seed: u64,
    n_slots: usize,
    profile: &SyntheticProfile,
) -> Result<ScenarioData, ScenarioError> {
    if n_slots < 1 {
        return Err(ScenarioError::Argument("n_slots must be >= 1".into()));
    }
    profile.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen_noise = Normal::new(0.0, profile.generation_noise_mw)
        .map_err(|e| ScenarioError::Argument(e.to_string()))?;
    let price_noise =
        Normal::new(0.0, profile.price_noise).map_err(|e| ScenarioError::Argument(e.to_string()))?;
    let cloud = Uniform::new_inclusive(1.0 - profile.cloud_variability, 1.0)
        .map_err(|e| ScenarioError::Argument(e.to_string()))?;

    let per_day = profile.slots_per_day;
    let week = (per_day * 7) as f64;
    let daylight = (profile.sunset_slot - profile.sunrise_slot) as f64;
    let mut day_factor = 1.0;
    let mut records = Vec::with_capacity(n_slots);
    for t in 0..n_slots {
        let h = t % per_day;
        if h == 0 {
            day_factor = cloud.sample(&mut rng);
        }
        let mut generation = 0.0;
        if (profile.sunrise_slot..profile.sunset_slot).contains(&h) {
            let phase = PI * ((h - profile.sunrise_slot) as f64 + 0.5) / daylight;
            generation = profile.peak_generation_mw * day_factor * phase.sin();
        }
        let gn = gen_noise.sample(&mut rng);
        if generation > 0.0 {
            generation = (generation + gn).max(0.0);
        }

        let daily = (2.0 * PI * (h as f64 - profile.price_peak_slot) / per_day as f64).cos();
        let ramp = (t as f64 % week) / week - 0.5;
        let mut price = profile.price_base
            + profile.price_daily_amplitude * daily
            + profile.price_weekly_ramp * ramp
            + price_noise.sample(&mut rng);
        if let Some(floor) = profile.price_floor {
            price = price.max(floor);
        }

        records.push(MarketRecord {
            slot: t as u64,
            generation_mw: generation,
            price,
        });
    }
    ScenarioData::new(records, 24.0 / per_day as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_row_file_echoes_input() {
        let text = "slot,generation_mw,price\n0,0.0,10\n1,0.3,-2\n";
        let data = parse_scenario(text, 1.0).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.records()[1].generation_mw, 0.3);
        assert_eq!(data.records()[1].price, -2.0);
        assert_eq!(data.slot_duration_h(), 1.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(parse_scenario("", 1.0), Err(ScenarioError::Empty)));
        assert!(matches!(
            parse_scenario("slot,generation_mw,price\n", 1.0),
            Err(ScenarioError::Empty)
        ));
    }

    #[test]
    fn negative_generation_names_the_row() {
        let mut text = String::from("slot,generation_mw,price\n");
        for i in 0..6 {
            let g = if i == 4 { "-0.1" } else { "0.2" };
            text.push_str(&format!("{i},{g},5\n"));
        }
        match parse_scenario(&text, 1.0) {
            Err(ScenarioError::Field { row, column, .. }) => {
                assert_eq!(row, 5);
                assert_eq!(column, "generation_mw");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unparsable_cell_names_row_and_column() {
        let text = "slot,generation_mw,price\n0,0.1,1\n1,0.1,abc\n";
        let err = parse_scenario(text, 1.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("price"), "{msg}");
    }

    #[test]
    fn wrong_header_and_non_monotone_slots() {
        assert!(matches!(
            parse_scenario("t,x,p\n0,1,1\n", 1.0),
            Err(ScenarioError::Format(_))
        ));
        let err = parse_scenario("slot,generation_mw,price\n3,0,1\n3,0,1\n", 1.0).unwrap_err();
        assert!(matches!(err, ScenarioError::Field { row: 2, column: "slot", .. }));
        assert!(matches!(
            parse_scenario("slot,generation_mw,price\n0,0,1\n", 0.0),
            Err(ScenarioError::SlotDuration(_))
        ));
    }

    #[test]
    fn synthesis_is_deterministic_and_seed_sensitive() {
        let p = SyntheticProfile::default();
        let a = synthesize_scenario(0, 24, &p).unwrap();
        let b = synthesize_scenario(0, 24, &p).unwrap();
        assert_eq!(format_scenario(&a), format_scenario(&b));
        let c = synthesize_scenario(1, 24, &p).unwrap();
        assert_ne!(a.records(), c.records());
    }

    #[test]
    fn noiseless_profile_is_dark_at_night() {
        let p = SyntheticProfile::default().noiseless();
        let data = synthesize_scenario(7, 48, &p).unwrap();
        for r in data.records() {
            let h = (r.slot % 24) as usize;
            if h < p.sunrise_slot || h >= p.sunset_slot {
                assert_eq!(r.generation_mw, 0.0, "slot {}", r.slot);
            } else {
                assert!(r.generation_mw > 0.0);
            }
        }
        // day 2 repeats day 1 apart from the weekly ramp, which only touches prices
        for h in 0..24 {
            assert_eq!(data.records()[h].generation_mw, data.records()[h + 24].generation_mw);
        }
    }

    #[test]
    fn zero_slots_is_an_argument_error() {
        assert!(matches!(
            synthesize_scenario(0, 0, &SyntheticProfile::default()),
            Err(ScenarioError::Argument(_))
        ));
    }

    #[test]
    fn price_floor_applies() {
        let p = SyntheticProfile {
            price_base: -20.0,
            price_floor: Some(-3.0),
            ..SyntheticProfile::default()
        };
        let data = synthesize_scenario(3, 100, &p).unwrap();
        assert!(data.records().iter().all(|r| r.price >= -3.0));
    }

    #[test]
    fn partition_covers_every_index_once() {
        let data = synthesize_scenario(0, 50, &SyntheticProfile::default()).unwrap();
        let parts = data.partition(12).unwrap();
        assert_eq!(parts.len(), 12);
        assert_eq!(parts[0].start, 0);
        assert_eq!(parts.last().unwrap().end, 50);
        for w in parts.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert!(data.partition(0).is_err());
        assert!(data.partition(51).is_err());
    }
}
