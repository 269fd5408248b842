//! Seeded synthetic city panels with planted group structure.
//!
//! Cities are split round-robin into groups. Each group has its own slowly
//! varying pollution driver and prevailing wind; cities add a local
//! component that diffuses over the city graph. Every eighth city sits
//! geographically next to a different group while keeping its own group's
//! dynamics, so location alone does not reveal the planted labels.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    write_cities, write_groups, write_observations, CityRecord, ObservationPanel, WindDirection, N_FEATURES, WIND_X,
};
use crate::error::{Error, Result};
use crate::graph::{build_city_graph, DistanceMetric, DEFAULT_RADIUS_KM};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_cities: usize,
    pub n_groups: usize,
    pub hours: usize,
    pub seed: u64,
    /// Fraction of non-wind cells blanked before interpolation.
    pub missing_rate: f64,
    /// Every `k`-th city (index `k-1`, `2k-1`, ...) is placed near the next
    /// group; 0 disables the displacement.
    pub displaced_every: usize,
    /// Spread of cities around their group centre, in degrees. The default
    /// makes groups wider than the 250 km city-graph radius.
    pub spread_deg: f64,
}

impl SynthConfig {
    pub fn new(n_cities: usize, n_groups: usize, hours: usize, seed: u64) -> Self {
        Self {
            n_cities,
            n_groups,
            hours,
            seed,
            missing_rate: 0.003,
            displaced_every: 8,
            spread_deg: 2.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub cities: Vec<CityRecord>,
    pub panel: ObservationPanel,
    /// Planted group of every city.
    pub labels: Vec<usize>,
}

impl SyntheticData {
    /// Writes `cities.csv`, `observations.csv`, and `groups_true.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_cities(&dir.join("cities.csv"), &self.cities)?;
        write_observations(&dir.join("observations.csv"), &self.panel)?;
        write_groups(&dir.join("groups_true.csv"), &self.labels)
    }
}

pub fn synthetic_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap()
}

const DIRECTIONS: [WindDirection; 8] = [
    WindDirection::N,
    WindDirection::NE,
    WindDirection::E,
    WindDirection::SE,
    WindDirection::S,
    WindDirection::SW,
    WindDirection::W,
    WindDirection::NW,
];

struct GroupProcess {
    centre: [f64; 2],
    base: f64,
    amplitude: f64,
    period: f64,
    phase: f64,
    driver: f64,
    wind: usize,
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    if cfg.n_cities == 0 || cfg.n_groups == 0 || cfg.n_groups > cfg.n_cities {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= groups ({}) <= cities ({})",
            cfg.n_groups, cfg.n_cities
        )));
    }
    if cfg.hours < 2 {
        return Err(Error::InvalidArgument("at least two hours are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();

    // Group centres on a jittered grid so groups stay spatially distinct.
    let cols = (cfg.n_groups as f64).sqrt().ceil() as usize;
    let rows = cfg.n_groups.div_ceil(cols);
    let mut groups: Vec<GroupProcess> = (0..cfg.n_groups)
        .map(|g| {
            let (r, c) = (g / cols, g % cols);
            let lon = 100.0 + 20.0 * (c as f64 + 0.5) / cols as f64 + rng.random_range(-0.5..0.5);
            let lat = 22.0 + 18.0 * (r as f64 + 0.5) / rows as f64 + rng.random_range(-0.5..0.5);
            GroupProcess {
                centre: [lon, lat],
                base: rng.random_range(50.0..130.0),
                amplitude: rng.random_range(10.0..30.0),
                period: rng.random_range(48.0..240.0),
                phase: rng.random_range(0.0..2.0 * PI),
                driver: 0.0,
                wind: rng.random_range(0..DIRECTIONS.len()),
            }
        })
        .collect();

    let labels: Vec<usize> = (0..cfg.n_cities).map(|i| i % cfg.n_groups).collect();
    let mut cities = Vec::with_capacity(cfg.n_cities);
    let spread = Normal::new(0.0, cfg.spread_deg.max(1e-9)).unwrap();
    for (i, &g) in labels.iter().enumerate() {
        let displaced = cfg.displaced_every > 0 && cfg.n_groups > 1 && i % cfg.displaced_every == cfg.displaced_every - 1;
        let host = if displaced { (g + 1) % cfg.n_groups } else { g };
        let c = groups[host].centre;
        cities.push(CityRecord {
            city_id: i,
            name: Some(format!("city{i:03}")),
            longitude: c[0] + spread.sample(&mut rng),
            latitude: c[1] + spread.sample(&mut rng),
        });
    }
    let locations: Vec<[f64; 2]> = cities.iter().map(CityRecord::location).collect();
    let graph = build_city_graph(&locations, DEFAULT_RADIUS_KM, DistanceMetric::Haversine)?;

    let n = cfg.n_cities;
    let hours = cfg.hours;
    let mut local = vec![0.0; n];
    let mut next_local = vec![0.0; n];
    let city_offset: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
    let mut raw = vec![None; n * hours * N_FEATURES];
    let mut weather_noise = vec![[0.0f64; 3]; n];
    for t in 0..hours {
        let tf = t as f64;
        for g in groups.iter_mut() {
            g.driver = 0.97 * g.driver + 8.0 * unit.sample(&mut rng);
            if rng.random::<f64>() < 0.02 {
                g.wind = (g.wind + if rng.random::<bool>() { 1 } else { DIRECTIONS.len() - 1 }) % DIRECTIONS.len();
            }
        }
        for i in 0..n {
            let nb: Vec<usize> = graph.neighbors(i).collect();
            let mean_nb = if nb.is_empty() {
                local[i]
            } else {
                nb.iter().map(|&j| local[j]).sum::<f64>() / nb.len() as f64
            };
            next_local[i] = 0.85 * local[i] + 0.1 * mean_nb + 3.0 * unit.sample(&mut rng);
        }
        std::mem::swap(&mut local, &mut next_local);

        let day = 2.0 * PI * (tf % 24.0) / 24.0;
        let season = 2.0 * PI * tf / (24.0 * 365.0);
        for i in 0..n {
            let g = &groups[labels[i]];
            let host_lat = cities[i].latitude;
            for w in weather_noise[i].iter_mut() {
                *w = 0.9 * *w + 0.45 * unit.sample(&mut rng);
            }
            let temperature = 28.0 - 0.6 * (host_lat - 22.0) - 8.0 * season.cos() - 4.0 * (day - PI / 2.0).cos()
                + weather_noise[i][0];
            let humidity = (65.0 + 15.0 * (day + 0.5).cos() + 6.0 * weather_noise[i][1]).clamp(5.0, 100.0);
            let rain = if humidity > 85.0 && rng.random::<f64>() < 0.3 {
                rng.random_range(0.1..8.0)
            } else {
                0.0
            };
            let pressure = 1013.0 + 6.0 * season.cos() + 2.0 * weather_noise[i][2];
            let wind_speed = (2.5 + 1.5 * (day - PI).cos() + weather_noise[i][0].abs()).max(0.0);
            let dir = DIRECTIONS[g.wind].encode();

            let aqi = g.base
                + g.amplitude * (2.0 * PI * tf / g.period + g.phase).sin()
                + g.driver
                + local[i]
                + city_offset[i]
                + 8.0 * (day + 1.0).cos()
                - 4.0 * (wind_speed - 2.5)
                - 2.0 * rain;
            let values = [
                aqi.max(5.0),
                humidity,
                rain,
                pressure,
                temperature,
                wind_speed,
                dir[0] as f64,
                dir[1] as f64,
            ];
            // Features are ordered as in the CSV; only the wind pair is never blanked.
            for (f, v) in values.into_iter().enumerate() {
                let edge = t == 0 || t + 1 == hours;
                let blank = !edge && f < WIND_X && rng.random::<f64>() < cfg.missing_rate;
                raw[(i * hours + t) * N_FEATURES + f] = (!blank).then_some(v);
            }
        }
    }
    let panel = ObservationPanel::from_raw(synthetic_start(), n, hours, &raw)?;
    Ok(SyntheticData { cities, panel, labels })
}
