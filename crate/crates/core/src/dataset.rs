//! City observation panels: ingestion, cleaning, encoding, windowing,
//! chronological splitting, and feature normalization.
//!
//! A panel stores `N_city × T × 8` values: AQI, humidity, rainfall, pressure,
//! temperature, wind speed, and the two wind-direction components.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FEATURES: usize = 8;
pub const AQI: usize = 0;
pub const HUMIDITY: usize = 1;
pub const RAINFALL: usize = 2;
pub const PRESSURE: usize = 3;
pub const TEMPERATURE: usize = 4;
pub const WIND_SPEED: usize = 5;
pub const WIND_X: usize = 6;
pub const WIND_Y: usize = 7;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "aqi",
    "humidity",
    "rainfall",
    "pressure",
    "temperature",
    "wind_speed",
    "wind_x",
    "wind_y",
];

pub const DEFAULT_TAU_IN: usize = 24;
pub const DEFAULT_TAU_OUT: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityRecord {
    pub city_id: usize,
    #[serde(default)]
    pub name: Option<String>,
    pub longitude: f64,
    pub latitude: f64,
}

impl CityRecord {
    pub fn location(&self) -> [f64; 2] {
        [self.longitude, self.latitude]
    }
}

/// Checks ids are exactly `0..N` in order and coordinates are in range.
pub fn validate_cities(cities: &[CityRecord]) -> Result<()> {
    for (row, c) in cities.iter().enumerate() {
        if c.city_id != row {
            return Err(Error::Ingest {
                file: "cities.csv".into(),
                row: row + 2,
                message: format!("city_id {} out of sequence; expected {row}", c.city_id),
            });
        }
        if !(-180.0..=180.0).contains(&c.longitude) || !(-90.0..=90.0).contains(&c.latitude) {
            return Err(Error::Ingest {
                file: "cities.csv".into(),
                row: row + 2,
                message: format!("coordinates ({}, {}) out of range", c.longitude, c.latitude),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindDirection {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
    None,
}

impl WindDirection {
    pub const ALL: [WindDirection; 9] = [
        Self::N,
        Self::NE,
        Self::E,
        Self::SE,
        Self::S,
        Self::SW,
        Self::W,
        Self::NW,
        Self::None,
    ];

    /// Two-component direction vector (east, north).
    pub fn encode(self) -> [i8; 2] {
        match self {
            Self::N => [0, 1],
            Self::NE => [1, 1],
            Self::E => [1, 0],
            Self::SE => [1, -1],
            Self::S => [0, -1],
            Self::SW => [-1, -1],
            Self::W => [-1, 0],
            Self::NW => [-1, 1],
            Self::None => [0, 0],
        }
    }

    pub fn decode(v: [i8; 2]) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.encode() == v)
    }

    pub fn token(self) -> &'static str {
        match self {
            Self::N => "N",
            Self::NE => "NE",
            Self::E => "E",
            Self::SE => "SE",
            Self::S => "S",
            Self::SW => "SW",
            Self::W => "W",
            Self::NW => "NW",
            Self::None => "NONE",
        }
    }
}

impl fmt::Display for WindDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for WindDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|d| d.token() == s)
            .ok_or_else(|| format!("unknown wind direction `{s}`"))
    }
}

/// One city-hour of raw measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub aqi: f64,
    pub humidity: f64,
    pub rainfall: f64,
    pub pressure: f64,
    pub temperature: f64,
    pub wind_speed: f64,
    pub wind_direction: WindDirection,
}

impl Observation {
    pub fn features(&self) -> [f64; N_FEATURES] {
        let [wx, wy] = self.wind_direction.encode();
        [
            self.aqi,
            self.humidity,
            self.rainfall,
            self.pressure,
            self.temperature,
            self.wind_speed,
            f64::from(wx),
            f64::from(wy),
        ]
    }
}

/// Fills holes in one hourly series.
///
/// Interior holes are linearly interpolated between the nearest present
/// neighbours; leading and trailing holes take the nearest present value. The
/// returned mask is `true` exactly where a value was filled.
pub fn interpolate_missing(series: &[Option<f64>]) -> Result<(Vec<f64>, Vec<bool>)> {
    let present: Vec<usize> = series
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|_| i))
        .collect();
    if present.len() < 2 {
        return Err(Error::TooFewValues {
            present: present.len(),
        });
    }
    let mut out = vec![0.0; series.len()];
    let mask: Vec<bool> = series.iter().map(Option::is_none).collect();
    let first = present[0];
    let last = *present.last().unwrap();
    let v_first = series[first].unwrap();
    let v_last = series[last].unwrap();
    out[..first].fill(v_first);
    out[last..].fill(v_last);
    for pair in present.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (series[a].unwrap(), series[b].unwrap());
        let span = (b - a) as f64;
        for (t, o) in out.iter_mut().enumerate().take(b + 1).skip(a) {
            let frac = (t - a) as f64 / span;
            *o = va + (vb - va) * frac;
        }
    }
    Ok((out, mask))
}

/// Calendar indices of an hour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeFeatures {
    pub month: usize,
    pub day_of_week: usize,
    pub hour: usize,
}

impl TimeFeatures {
    pub const MONTHS: usize = 12;
    pub const DAYS: usize = 7;
    pub const HOURS: usize = 24;

    /// Month 0 = January; day-of-week 0 = Monday.
    pub fn from_timestamp(ts: DateTime<Utc>) -> Self {
        Self {
            month: ts.month0() as usize,
            day_of_week: ts.weekday().num_days_from_monday() as usize,
            hour: ts.hour() as usize,
        }
    }
}

pub fn time_features(ts: DateTime<Utc>) -> TimeFeatures {
    TimeFeatures::from_timestamp(ts)
}

/// Parses an hourly ISO-8601 timestamp. Offsets are converted to UTC; naive
/// timestamps are taken as UTC.
pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    let s = s.trim();
    let ts = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        dt.with_timezone(&Utc)
    } else {
        let naive = ["%Y-%m-%dT%H:%M:%SZ", "%Y-%m-%dT%H:%MZ", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
            .iter()
            .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
            .ok_or_else(|| format!("unparseable timestamp `{s}`"))?;
        naive.and_utc()
    };
    if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
        return Err(format!("timestamp `{s}` is not on an hour boundary"));
    }
    Ok(ts)
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Dense hourly observations for all cities.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationPanel {
    pub start: DateTime<Utc>,
    pub hours: usize,
    pub n_cities: usize,
    /// `[city][hour][feature]`, row-major.
    pub data: Vec<f64>,
    /// `true` where the value was filled by interpolation.
    pub mask: Vec<bool>,
}

impl ObservationPanel {
    /// Builds a panel from raw cells (`None` = missing), filling holes per
    /// city and feature.
    pub fn from_raw(start: DateTime<Utc>, n_cities: usize, hours: usize, raw: &[Option<f64>]) -> Result<Self> {
        assert_eq!(raw.len(), n_cities * hours * N_FEATURES);
        let mut data = vec![0.0; raw.len()];
        let mut mask = vec![false; raw.len()];
        let mut series = vec![None; hours];
        for city in 0..n_cities {
            for f in 0..N_FEATURES {
                for (t, s) in series.iter_mut().enumerate() {
                    *s = raw[(city * hours + t) * N_FEATURES + f];
                }
                let (filled, m) = interpolate_missing(&series).map_err(|e| match e {
                    Error::TooFewValues { present } => Error::SparseSeries {
                        city,
                        feature: FEATURE_NAMES[f],
                        present,
                    },
                    other => other,
                })?;
                for t in 0..hours {
                    let i = (city * hours + t) * N_FEATURES + f;
                    data[i] = filled[t];
                    mask[i] = m[t];
                }
            }
        }
        Ok(Self {
            start,
            hours,
            n_cities,
            data,
            mask,
        })
    }

    #[inline]
    pub fn index(&self, city: usize, hour: usize, feature: usize) -> usize {
        (city * self.hours + hour) * N_FEATURES + feature
    }

    #[inline]
    pub fn get(&self, city: usize, hour: usize, feature: usize) -> f64 {
        self.data[self.index(city, hour, feature)]
    }

    pub fn timestamp(&self, hour: usize) -> DateTime<Utc> {
        self.start + Duration::hours(hour as i64)
    }

    /// Hour index of `ts`, if it lies inside the panel.
    pub fn hour_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let h = (ts - self.start).num_hours();
        (h >= 0 && (h as usize) < self.hours && self.timestamp(h as usize) == ts).then_some(h as usize)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the values for window `w`.
    pub fn sample(&self, w: &Window, tau_in: usize, tau_out: usize) -> WindowedSample {
        let mut history = Vec::with_capacity(self.n_cities * tau_in * N_FEATURES);
        let mut target = Vec::with_capacity(self.n_cities * tau_out);
        for city in 0..self.n_cities {
            let a = self.index(city, w.start, 0);
            history.extend_from_slice(&self.data[a..a + tau_in * N_FEATURES]);
            for k in 0..tau_out {
                target.push(self.get(city, w.start + tau_in + k, AQI));
            }
        }
        WindowedSample {
            history,
            target,
            anchor_time: w.anchor_time,
            n_cities: self.n_cities,
            tau_in,
            tau_out,
        }
    }
}

/// Position of one sliding window inside a panel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    /// First history hour.
    pub start: usize,
    /// Timestamp of the last history hour.
    pub anchor_time: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// `[city][τ_in][feature]`.
    pub history: Vec<f64>,
    /// `[city][τ_out]` AQI.
    pub target: Vec<f64>,
    pub anchor_time: DateTime<Utc>,
    pub n_cities: usize,
    pub tau_in: usize,
    pub tau_out: usize,
}

pub fn window_count(hours: usize, tau_in: usize, tau_out: usize, step: usize) -> usize {
    if hours < tau_in + tau_out || step == 0 {
        return 0;
    }
    (hours - tau_in - tau_out) / step + 1
}

/// Chronologically ordered sliding windows.
pub fn make_windows(panel: &ObservationPanel, tau_in: usize, tau_out: usize, step: usize) -> Result<Vec<Window>> {
    if tau_in == 0 || tau_out == 0 || step == 0 {
        return Err(Error::InvalidArgument("τ_in, τ_out and step must be positive".into()));
    }
    let required = tau_in + tau_out;
    if panel.hours < required {
        return Err(Error::TooShort {
            hours: panel.hours,
            required,
        });
    }
    Ok((0..=panel.hours - required)
        .step_by(step)
        .map(|start| Window {
            start,
            anchor_time: panel.timestamp(start + tau_in - 1),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<W> {
    pub train: Vec<W>,
    pub validation: Vec<W>,
    pub test: Vec<W>,
}

impl<W> Split<W> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// 70/10/20 split without shuffling; boundaries at ⌊0.7N⌋ and ⌊0.8N⌋.
pub fn chronological_split<W: Clone>(samples: &[W]) -> Result<Split<W>> {
    let n = samples.len();
    if n < 10 {
        return Err(Error::TooFewSamples(n));
    }
    let a = n * 7 / 10;
    let b = n * 8 / 10;
    Ok(Split {
        train: samples[..a].to_vec(),
        validation: samples[a..b].to_vec(),
        test: samples[b..].to_vec(),
    })
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; N_FEATURES],
            std: vec![1.0; N_FEATURES],
        }
    }

    #[inline]
    pub fn normalize(&self, feature: usize, x: f64) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    #[inline]
    pub fn denormalize(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }

    pub fn normalize_aqi(&self, x: f64) -> f64 {
        self.normalize(AQI, x)
    }

    pub fn denormalize_aqi(&self, z: f64) -> f64 {
        self.denormalize(AQI, z)
    }
}

/// Fits statistics on every hour covered by the history of `train` windows.
/// Wind components keep mean 0 and unit scale.
pub fn fit_normalization(panel: &ObservationPanel, train: &[Window], tau_in: usize) -> NormalizationStats {
    let mut covered = vec![false; panel.hours];
    for w in train {
        covered[w.start..w.start + tau_in].fill(true);
    }
    let mut stats = NormalizationStats::identity();
    for f in 0..WIND_X {
        let values: Vec<f64> = (0..panel.n_cities)
            .flat_map(|c| (0..panel.hours).filter(|&t| covered[t]).map(move |t| (c, t)))
            .map(|(c, t)| panel.get(c, t, f))
            .collect();
        if values.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        stats.mean[f] = mean;
        stats.std[f] = if std > 1e-12 { std } else { 1.0 };
    }
    stats
}

/// Normalizes a materialized sample in place (history features and AQI
/// targets).
pub fn apply_normalization(sample: &mut WindowedSample, stats: &NormalizationStats) {
    for (i, v) in sample.history.iter_mut().enumerate() {
        *v = stats.normalize(i % N_FEATURES, *v);
    }
    for v in &mut sample.target {
        *v = stats.normalize_aqi(*v);
    }
}

pub fn denormalize_sample(sample: &mut WindowedSample, stats: &NormalizationStats) {
    for (i, v) in sample.history.iter_mut().enumerate() {
        *v = stats.denormalize(i % N_FEATURES, *v);
    }
    for v in &mut sample.target {
        *v = stats.denormalize_aqi(*v);
    }
}

// ---------------------------------------------------------------------------
// CSV files

#[derive(Debug, Deserialize)]
struct ObservationRow {
    city_id: usize,
    timestamp: String,
    aqi: Option<f64>,
    humidity: Option<f64>,
    rainfall: Option<f64>,
    pressure: Option<f64>,
    temperature: Option<f64>,
    wind_speed: Option<f64>,
    wind_direction: Option<String>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn read_cities(path: &Path) -> Result<Vec<CityRecord>> {
    let label = file_label(path);
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut cities = Vec::new();
    for (i, row) in rdr.deserialize::<CityRecord>().enumerate() {
        let mut city = row.map_err(|e| Error::Ingest {
            file: label.clone(),
            row: i + 2,
            message: e.to_string(),
        })?;
        if city.name.as_deref() == Some("") {
            city.name = None;
        }
        cities.push(city);
    }
    cities.sort_by_key(|c| c.city_id);
    validate_cities(&cities)?;
    Ok(cities)
}

/// Reads observations into a gap-free panel spanning the earliest to latest
/// timestamp. Absent rows and empty cells are interpolated.
pub fn read_observations(path: &Path, n_cities: usize) -> Result<ObservationPanel> {
    let label = file_label(path);
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let ingest = |row: usize, message: String| Error::Ingest {
        file: label.clone(),
        row,
        message,
    };
    let mut rows: Vec<(usize, usize, DateTime<Utc>, [Option<f64>; N_FEATURES])> = Vec::new();
    for (i, rec) in rdr.deserialize::<ObservationRow>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ingest(line, e.to_string()))?;
        if rec.city_id >= n_cities {
            return Err(ingest(line, format!("unknown city_id {}", rec.city_id)));
        }
        let ts = parse_timestamp(&rec.timestamp).map_err(|m| ingest(line, m))?;
        let wind = match rec.wind_direction.as_deref().map(str::trim) {
            None | Some("") => [None, None],
            Some(tok) => {
                let [x, y] = tok.parse::<WindDirection>().map_err(|m| ingest(line, m))?.encode();
                [Some(f64::from(x)), Some(f64::from(y))]
            }
        };
        let cells = [
            rec.aqi,
            rec.humidity,
            rec.rainfall,
            rec.pressure,
            rec.temperature,
            rec.wind_speed,
            wind[0],
            wind[1],
        ];
        if let Some(bad) = cells[..WIND_X].iter().position(|c| c.is_some_and(|v| !v.is_finite())) {
            return Err(ingest(line, format!("non-finite {}", FEATURE_NAMES[bad])));
        }
        if cells[AQI].is_some_and(|v| v < 0.0) {
            return Err(ingest(line, "negative aqi".into()));
        }
        rows.push((line, rec.city_id, ts, cells));
    }
    let start = rows
        .iter()
        .map(|r| r.2)
        .min()
        .ok_or_else(|| ingest(1, "no observation rows".into()))?;
    let end = rows.iter().map(|r| r.2).max().unwrap();
    let hours = (end - start).num_hours() as usize + 1;
    let mut raw = vec![None; n_cities * hours * N_FEATURES];
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for (line, city, ts, cells) in rows {
        let t = (ts - start).num_hours() as usize;
        if let Some(prev) = seen.insert((city, t), line) {
            return Err(ingest(
                line,
                format!("duplicate observation for city {city} at {} (first on row {prev})", format_timestamp(ts)),
            ));
        }
        let base = (city * hours + t) * N_FEATURES;
        raw[base..base + N_FEATURES].copy_from_slice(&cells);
    }
    ObservationPanel::from_raw(start, n_cities, hours, &raw)
}

pub fn write_cities(path: &Path, cities: &[CityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["city_id", "name", "longitude", "latitude"])?;
    for c in cities {
        w.write_record([
            c.city_id.to_string(),
            c.name.clone().unwrap_or_default(),
            c.longitude.to_string(),
            c.latitude.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the panel; cells flagged in the mask are written empty.
pub fn write_observations(path: &Path, panel: &ObservationPanel) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "city_id,timestamp,aqi,humidity,rainfall,pressure,temperature,wind_speed,wind_direction"
    )?;
    for city in 0..panel.n_cities {
        for t in 0..panel.hours {
            write!(out, "{city},{}", format_timestamp(panel.timestamp(t)))?;
            for f in 0..WIND_X {
                let i = panel.index(city, t, f);
                if panel.mask[i] {
                    write!(out, ",")?;
                } else {
                    write!(out, ",{:.3}", panel.data[i])?;
                }
            }
            let i = panel.index(city, t, WIND_X);
            if panel.mask[i] {
                writeln!(out, ",")?;
            } else {
                let v = [panel.data[i].round() as i8, panel.data[i + 1].round() as i8];
                let dir = WindDirection::decode(v).unwrap_or(WindDirection::None);
                writeln!(out, ",{dir}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_groups(path: &Path, groups: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["city_id", "group_id"])?;
    for (c, g) in groups.iter().enumerate() {
        w.write_record([c.to_string(), g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_groups(path: &Path) -> Result<Vec<usize>> {
    #[derive(Deserialize)]
    struct Row {
        city_id: usize,
        group_id: usize,
    }
    let label = file_label(path);
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut rows = Vec::new();
    for (i, r) in rdr.deserialize::<Row>().enumerate() {
        let r = r.map_err(|e| Error::Ingest {
            file: label.clone(),
            row: i + 2,
            message: e.to_string(),
        })?;
        rows.push((r.city_id, r.group_id));
    }
    rows.sort_unstable();
    Ok(rows.into_iter().map(|(_, g)| g).collect())
}

/// Reads `cities.csv` and `observations.csv` from a directory.
pub fn load_dir(dir: &Path) -> Result<(Vec<CityRecord>, ObservationPanel)> {
    let cities = read_cities(&dir.join("cities.csv"))?;
    let panel = read_observations(&dir.join("observations.csv"), cities.len())?;
    Ok((cities, panel))
}
