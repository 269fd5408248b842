//! Shared fixtures and a scalar-loop reference implementation of the
//! forward pass, written against parameter names only.

#![allow(dead_code)]

use aqgroup::dataset::{CityRecord, ObservationPanel, TimeFeatures, Window, N_FEATURES};
use aqgroup::model::{Batch, ModelConfig};
use aqgroup::nn::ParamStore;
use aqgroup::{Model, Tensor};
use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

/// Two close pairs of cities far apart from each other.
pub fn tiny_cities() -> Vec<CityRecord> {
    [(116.40, 39.90), (116.70, 39.30), (121.47, 31.23), (120.15, 30.28)]
        .iter()
        .enumerate()
        .map(|(i, &(lon, lat))| CityRecord {
            city_id: i,
            name: None,
            longitude: lon,
            latitude: lat,
        })
        .collect()
}

pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::new(4);
    c.n_groups = 2;
    c.d_hidden = 8;
    c.d_ffn = 16;
    c.heads = 2;
    c.d_edge = 3;
    c.time_dims = [2, 2, 2];
    c.tau_in = 4;
    c.tau_out = 2;
    c.seed = 11;
    c
}

/// A random normalized batch of `b` samples for the tiny configuration.
pub fn tiny_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = b * cfg.n_cities * cfg.tau_in;
    let history = Tensor::from_fn(rows, N_FEATURES, |_, _| rng.random_range(-1.5..1.5));
    let times = (0..b)
        .map(|_| TimeFeatures {
            month: rng.random_range(0..12),
            day_of_week: rng.random_range(0..7),
            hour: rng.random_range(0..24),
        })
        .collect();
    let target = Tensor::from_fn(b * cfg.n_cities, cfg.tau_out, |_, _| rng.random_range(-1.0..1.0));
    Batch { history, times, target }
}

/// Overwrites every parameter with `uniform(-scale, scale)` draws so that
/// zero-initialized layers take part in the checks.
pub fn randomize<T: aqgroup::Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.entries_mut() {
        for v in e.value.data_mut() {
            *v = T::lit(rng.random_range(-scale..scale));
        }
    }
}

pub fn tiny_model() -> Model<f64> {
    let mut m = Model::<f64>::new(tiny_config(), &tiny_cities()).unwrap();
    randomize(&mut m.store, 5, 0.5);
    m
}

/// Random fully observed panel starting at 2018-03-01.
pub fn random_panel(n_cities: usize, hours: usize, seed: u64) -> ObservationPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Option<f64>> = (0..n_cities * hours * N_FEATURES)
        .map(|i| Some(if i % N_FEATURES >= 6 { rng.random_range(-1..=1) as f64 } else { rng.random_range(0.0..100.0) }))
        .collect();
    ObservationPanel::from_raw(Utc.with_ymd_and_hms(2018, 3, 1, 0, 0, 0).unwrap(), n_cities, hours, &raw).unwrap()
}

pub fn window_at(panel: &ObservationPanel, start: usize, tau_in: usize) -> Window {
    Window {
        start,
        anchor_time: panel.timestamp(start + tau_in - 1),
    }
}

// ---------------------------------------------------------------------------
// Reference implementation

pub struct Oracle<'a> {
    pub store: &'a ParamStore<f64>,
    pub cfg: ModelConfig,
    pub cities: Vec<[f64; 2]>,
}

pub struct OracleOutput {
    /// Per sample, `[N][d]`.
    pub x: Vec<Mat>,
    pub s: Mat,
    /// Per sample, `R[i][j]` for `i != j`.
    pub r: Vec<Vec<Vec<Option<Vec<f64>>>>>,
    pub x3: Vec<Mat>,
    pub x_output: Vec<Mat>,
    pub predictions: Vec<Mat>,
}

fn haversine(a: [f64; 2], b: [f64; 2]) -> f64 {
    let rad = std::f64::consts::PI / 180.0;
    let dlat = (b[1] - a[1]) * rad;
    let dlon = (b[0] - a[0]) * rad;
    let h = (dlat / 2.0).sin().powi(2) + (a[1] * rad).cos() * (b[1] * rad).cos() * (dlon / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

impl<'a> Oracle<'a> {
    fn p(&self, name: &str) -> &Tensor<f64> {
        self.store.by_name(name)
    }

    fn linear(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        assert_eq!(w.rows(), x.len(), "{name}: input width");
        (0..w.cols())
            .map(|j| {
                let mut acc = b[(0, j)];
                for (i, &xi) in x.iter().enumerate() {
                    acc += xi * w[(i, j)];
                }
                acc
            })
            .collect()
    }

    fn mlp(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let mut layers = 0;
        while self.store.find(&format!("{name}.{layers}.weight")).is_some() {
            layers += 1;
        }
        assert!(layers > 0, "no MLP named {name}");
        let mut h = x.to_vec();
        for l in 0..layers {
            h = self.linear(&format!("{name}.{l}"), &h);
            if l + 1 < layers {
                h = relu(h);
            }
        }
        h
    }

    fn layer_norm(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let g = self.p(&format!("{name}.gain"));
        let b = self.p(&format!("{name}.bias"));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g[(0, c)] + b[(0, c)])
            .collect()
    }

    /// One city's `[τ_in][F]` history → pooled representation.
    fn sequence(&self, hist: &[Vec<f64>]) -> Vec<f64> {
        let d = self.cfg.d_hidden;
        let heads = self.cfg.heads;
        let dk = d / heads;
        let tau = hist.len();
        let mut h: Mat = hist
            .iter()
            .enumerate()
            .map(|(t, row)| {
                let mut x = self.linear("encoder.sequence.input", row);
                for (i, xi) in x.iter_mut().enumerate() {
                    let angle = t as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    *xi += if i % 2 == 0 { angle.sin() } else { angle.cos() };
                }
                x
            })
            .collect();
        for blk in 0..self.cfg.encoder_blocks {
            let pre = format!("encoder.sequence.block{blk}");
            let q: Mat = h.iter().map(|x| self.linear(&format!("{pre}.query"), x)).collect();
            let k: Mat = h.iter().map(|x| self.linear(&format!("{pre}.key"), x)).collect();
            let v: Mat = h.iter().map(|x| self.linear(&format!("{pre}.value"), x)).collect();
            let mut att = vec![vec![0.0; d]; tau];
            for head in 0..heads {
                for i in 0..tau {
                    let mut scores = vec![0.0; tau];
                    for j in 0..tau {
                        let mut dot = 0.0;
                        for c in head * dk..(head + 1) * dk {
                            dot += q[i][c] * k[j][c];
                        }
                        scores[j] = dot / (dk as f64).sqrt();
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..tau {
                        let p = (scores[j] - m).exp() / z;
                        for c in head * dk..(head + 1) * dk {
                            att[i][c] += p * v[j][c];
                        }
                    }
                }
            }
            h = (0..tau)
                .map(|t| {
                    let o = self.linear(&format!("{pre}.output"), &att[t]);
                    let res: Vec<f64> = h[t].iter().zip(&o).map(|(a, b)| a + b).collect();
                    let h1 = self.layer_norm(&format!("{pre}.norm1"), &res);
                    let f = self.linear(&format!("{pre}.ff2"), &relu(self.linear(&format!("{pre}.ff1"), &h1)));
                    let res2: Vec<f64> = h1.iter().zip(&f).map(|(a, b)| a + b).collect();
                    self.layer_norm(&format!("{pre}.norm2"), &res2)
                })
                .collect();
        }
        (0..d).map(|c| h.iter().map(|row| row[c]).sum::<f64>() / tau as f64).collect()
    }

    fn time_vector(&self, t: &TimeFeatures) -> Vec<f64> {
        let m = self.p("encoder.time.month").row(t.month).to_vec();
        let d = self.p("encoder.time.day_of_week").row(t.day_of_week).to_vec();
        let h = self.p("encoder.time.hour").row(t.hour).to_vec();
        concat(&[&m, &d, &h])
    }

    pub fn assignment(&self) -> Mat {
        let l = self.p("assignment.logits");
        (0..l.rows())
            .map(|i| {
                let row = l.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                row.iter().map(|v| (v - m).exp() / z).collect()
            })
            .collect()
    }

    fn normalized_locations(&self) -> Mat {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in &self.cities {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        self.cities
            .iter()
            .map(|c| (0..2).map(|a| (c[a] - lo[a]) / (hi[a] - lo[a])).collect())
            .collect()
    }

    /// `stage` is `encoder` or `decoder`; returns (X³, R used).
    #[allow(clippy::type_complexity)]
    fn stage(
        &self,
        stage: &str,
        x: &Mat,
        s: &Mat,
        r_in: Option<&Vec<Vec<Option<Vec<f64>>>>>,
        time: &[f64],
    ) -> (Mat, Vec<Vec<Option<Vec<f64>>>>) {
        let n = x.len();
        let g = s[0].len();
        let d = self.cfg.d_hidden;
        let loc = self.normalized_locations();
        // Location fusion and city → group.
        let xf: Mat = (0..n).map(|i| self.mlp(&format!("{stage}.location_fusion"), &concat(&[&x[i], &loc[i]]))).collect();
        let mut z = vec![vec![0.0; d]; g];
        for j in 0..g {
            for i in 0..n {
                for c in 0..d {
                    z[j][c] += s[i][j] * xf[i][c];
                }
            }
        }
        // Group correlations.
        let r = match r_in {
            Some(r) => r.clone(),
            None => (0..g)
                .map(|i| {
                    (0..g)
                        .map(|j| (i != j).then(|| relu(self.mlp("encoder.correlation", &concat(&[&z[i], &z[j], time])))))
                        .collect()
                })
                .collect(),
        };
        // Group message passing.
        for l in 0..self.cfg.gnn_layers {
            let pre = format!("{stage}.group_mp.layer{l}");
            z = (0..g)
                .map(|i| {
                    let mut agg = vec![0.0; d];
                    for j in 0..g {
                        if j == i {
                            continue;
                        }
                        let m = self.mlp(&format!("{pre}.message"), &concat(&[&z[i], &z[j], r[j][i].as_ref().unwrap()]));
                        for c in 0..d {
                            agg[c] += m[c];
                        }
                    }
                    self.mlp(&format!("{pre}.update"), &concat(&[&agg, &z[i]]))
                })
                .collect();
        }
        // Group → city, fusion.
        let x1: Mat = (0..n)
            .map(|i| (0..d).map(|c| (0..g).map(|j| s[i][j] * z[j][c]).sum()).collect())
            .collect();
        let mut x2: Mat = (0..n).map(|i| self.mlp(&format!("{stage}.city_fusion"), &concat(&[&x[i], &x1[i]]))).collect();
        // City message passing on the thresholded graph.
        for l in 0..self.cfg.gnn_layers {
            let pre = format!("{stage}.city_mp.layer{l}");
            x2 = (0..n)
                .map(|i| {
                    let mut agg = vec![0.0; d];
                    for nb in 0..n {
                        let dist = haversine(self.cities[nb], self.cities[i]);
                        if nb == i || dist >= self.cfg.radius_km {
                            continue;
                        }
                        let m = self.mlp(&format!("{pre}.message"), &concat(&[&x2[i], &x2[nb], &[1.0 / dist]]));
                        for c in 0..d {
                            agg[c] += m[c];
                        }
                    }
                    self.mlp(&format!("{pre}.update"), &concat(&[&x2[i], &agg]))
                })
                .collect();
        }
        (x2, r)
    }

    pub fn forward(&self, batch: &Batch<f64>) -> OracleOutput {
        let n = self.cfg.n_cities;
        let tau = self.cfg.tau_in;
        let s = self.assignment();
        let mut out = OracleOutput {
            x: vec![],
            s: s.clone(),
            r: vec![],
            x3: vec![],
            x_output: vec![],
            predictions: vec![],
        };
        for (b, t) in batch.times.iter().enumerate() {
            let x: Mat = (0..n)
                .map(|i| {
                    let hist: Mat = (0..tau).map(|k| batch.history.row((b * n + i) * tau + k).to_vec()).collect();
                    self.sequence(&hist)
                })
                .collect();
            let time = self.time_vector(t);
            let (x3, r) = self.stage("encoder", &x, &s, None, &time);
            let (xo, _) = self.stage("decoder", &x3, &s, Some(&r), &time);
            let pred: Mat = xo.iter().map(|row| self.mlp("head", row)).collect();
            out.x.push(x);
            out.r.push(r);
            out.x3.push(x3);
            out.x_output.push(xo);
            out.predictions.push(pred);
        }
        out
    }
}

/// Largest relative deviation `|a-b| / max(|b|, floor)`.
pub fn max_rel_diff(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

pub fn flatten(per_sample: &[Mat]) -> Vec<f64> {
    per_sample.iter().flatten().flatten().copied().collect()
}

/// Writes an acceptance line straight to stderr so it is visible even when
/// the harness captures test output.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!(
        "ACCEPTANCE {id} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}
