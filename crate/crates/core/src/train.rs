//! Training loop, evaluation, group sweeps, ablations, and grouping export.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{
    chronological_split, fit_normalization, make_windows, CityRecord, NormalizationStats, ObservationPanel, Split,
    Window, AQI,
};
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOptions, Model, ModelConfig, Variant};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per forward pass inside a batch; gradients are accumulated.
    /// 0 means the whole batch at once.
    pub micro_batch: usize,
    pub lr_logits: f64,
    pub lr_base: f64,
    /// Seed for batch shuffling.
    pub seed: u64,
    pub shuffle: bool,
    /// Validate every this many epochs (and always after the last one).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            micro_batch: 16,
            lr_logits: 0.05,
            lr_base: 0.001,
            seed: 0,
            shuffle: true,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("epochs, batch_size and validate_every must be positive".into()));
        }
        if !(self.lr_logits >= 0.0 && self.lr_base >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Panel, windows, split, and training-set normalization.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub cities: Vec<CityRecord>,
    pub panel: ObservationPanel,
    pub split: Split<Window>,
    pub stats: NormalizationStats,
    pub tau_in: usize,
    pub tau_out: usize,
}

impl PreparedData {
    /// Sliding windows with stride `step`, a 70/10/20 chronological split,
    /// and statistics fitted on the training histories.
    pub fn new(cities: Vec<CityRecord>, panel: ObservationPanel, tau_in: usize, tau_out: usize, step: usize) -> Result<Self> {
        let windows = make_windows(&panel, tau_in, tau_out, step)?;
        let split = chronological_split(&windows)?;
        Self::with_split(cities, panel, split, tau_in, tau_out)
    }

    pub fn with_split(
        cities: Vec<CityRecord>,
        panel: ObservationPanel,
        split: Split<Window>,
        tau_in: usize,
        tau_out: usize,
    ) -> Result<Self> {
        if cities.len() != panel.n_cities {
            return Err(Error::InvalidArgument(format!(
                "{} cities but the panel has {}",
                cities.len(),
                panel.n_cities
            )));
        }
        if split.train.is_empty() {
            return Err(Error::TooFewSamples(0));
        }
        let stats = fit_normalization(&panel, &split.train, tau_in);
        Ok(Self {
            cities,
            panel,
            split,
            stats,
            tau_in,
            tau_out,
        })
    }

    pub fn batch<T: Scalar>(&self, windows: &[Window]) -> Batch<T> {
        Batch::new(&self.panel, windows, &self.stats, self.tau_in, self.tau_out)
    }

    /// A model configuration matching this data's shape.
    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.cities.len());
        c.tau_in = self.tau_in;
        c.tau_out = self.tau_out;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training MAE over the epoch's batches, in AQI units.
    pub train_mae: f64,
    /// Validation MAE in AQI units, when validated this epoch.
    pub val_mae: Option<f64>,
    /// Largest per-step global gradient norm seen in the epoch.
    pub max_grad_norm: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Callbacks from inside [`train`].
pub trait TrainObserver<T> {
    fn after_step(&mut self, _epoch: usize, _step: usize, _model: &Model<T>) {}
    fn after_epoch(&mut self, _record: &EpochRecord, _model: &Model<T>) {}
}

impl<T> TrainObserver<T> for () {}

/// Collects every epoch record as a JSON line.
pub struct JsonLinesLog<W: Write> {
    pub out: W,
    pub error: Option<std::io::Error>,
}

impl<W: Write> JsonLinesLog<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }
}

impl<T, W: Write> TrainObserver<T> for JsonLinesLog<W> {
    fn after_epoch(&mut self, record: &EpochRecord, _model: &Model<T>) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.error = Some(e);
        }
    }
}

fn grad_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Loss and accumulated parameter gradients for one batch, processed in
/// micro-batches. The loss is the batch MAE in normalized units.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    data: &PreparedData,
    windows: &[Window],
    micro_batch: usize,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let chunk = if micro_batch == 0 { windows.len() } else { micro_batch };
    let mut total: Vec<Option<Tensor<T>>> = vec![None; model.store.len()];
    let mut loss = 0.0;
    for part in windows.chunks(chunk) {
        let weight = part.len() as f64 / windows.len() as f64;
        let batch = data.batch::<T>(part);
        let mut tape = Tape::with_params(&model.store);
        if model.frozen_assignment.is_some() {
            tape.freeze_param(model.assignment.logits);
        }
        let (l, _) = model.loss(&mut tape, &batch, &ForwardOptions::default())?;
        loss += weight * tape.value(l)[(0, 0)].as_f64();
        let w = T::lit(weight);
        for (slot, g) in total.iter_mut().zip(tape.backward(l).into_param_grads()) {
            let Some(g) = g else { continue };
            let g = g.map(|v| v * w);
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
    Ok((loss, total))
}

/// Trains with Adam and restores the parameters of the epoch with the lowest
/// validation MAE (training MAE when there is no validation set).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &PreparedData,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.n_cities() != data.cities.len() || model.config.tau_in != data.tau_in || model.config.tau_out != data.tau_out {
        return Err(Error::Config("model configuration does not match the data".into()));
    }
    model.normalization = data.stats.clone();
    let aqi_std = data.stats.std[AQI];
    let mut opt = Adam::new(&model.store, cfg.lr_logits, cfg.lr_base);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<Window> = data.split.train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sum_loss = 0.0;
        let mut max_norm: f64 = 0.0;
        let mut steps = 0;
        for (b, windows) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(model, data, windows, cfg.micro_batch)?;
            let norm = grad_norm(&grads);
            max_norm = max_norm.max(norm);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite {
                    what: if loss.is_finite() { "gradient" } else { "loss" },
                    epoch,
                    batch: b,
                    max_grad_norm: max_norm,
                });
            }
            opt.step(&mut model.store, &grads);
            sum_loss += loss * windows.len() as f64;
            steps += 1;
            observer.after_step(epoch, steps, model);
        }
        let train_mae = sum_loss / order.len() as f64 * aqi_std;
        let validate = (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs;
        let val_mae = if validate && !data.split.validation.is_empty() {
            Some(evaluate_split(model, data, SplitKind::Validation)?.overall_mae)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_mae,
            val_mae,
            max_grad_norm: max_norm,
            steps,
        };
        let score = if data.split.validation.is_empty() { Some(train_mae) } else { val_mae };
        if let Some(score) = score {
            if best.as_ref().is_none_or(|b| score < b.1) {
                let snapshot = model.store.entries().iter().map(|e| e.value.clone()).collect();
                best = Some((epoch, score, snapshot));
            }
        }
        observer.after_epoch(&record, model);
        history.push(record);
    }

    let (best_epoch, best_val_mae, snapshot) = best.expect("at least one scored epoch");
    for (entry, value) in model.store.entries_mut().iter_mut().zip(snapshot) {
        entry.value = value;
    }
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_mae,
    })
}

/// Error of one forecast horizon, in AQI units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based horizon.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
}

/// Which part of a chronological split to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        }
    }

    pub fn windows(self, split: &Split<Window>) -> &[Window] {
        match self {
            Self::Train => &split.train,
            Self::Validation => &split.validation,
            Self::Test => &split.test,
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split `{s}` (expected train, validation, test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub variant: Variant,
    /// Split label, e.g. `test`.
    pub split: String,
    pub seed: u64,
    pub horizons: Vec<HorizonMetrics>,
    pub overall_mae: f64,
    pub overall_rmse: f64,
    pub samples: usize,
}

pub const METRICS_HEADER: &str = "variant,split,horizon,mae,rmse,seed";

impl MetricsTable {
    /// CSV rows (no header), one per horizon.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for h in &self.horizons {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{}\n",
                self.variant, self.split, h.horizon, h.mae, h.rmse, self.seed
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{METRICS_HEADER}\n{}", self.csv_rows())
    }
}

/// Writes several tables into one `metrics.csv`.
pub fn write_metrics_csv(path: &Path, tables: &[MetricsTable]) -> Result<()> {
    let mut s = format!("{METRICS_HEADER}\n");
    for t in tables {
        s.push_str(&t.csv_rows());
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Accumulates absolute and squared errors per horizon.
#[derive(Clone, Debug)]
pub struct ErrorAccumulator {
    abs: Vec<f64>,
    sq: Vec<f64>,
    count: usize,
    samples: usize,
}

impl ErrorAccumulator {
    pub fn new(tau_out: usize) -> Self {
        Self {
            abs: vec![0.0; tau_out],
            sq: vec![0.0; tau_out],
            count: 0,
            samples: 0,
        }
    }

    /// `pred` and `truth` are `[rows × τ_out]` in AQI units.
    pub fn add(&mut self, pred: &Tensor<f64>, truth: &Tensor<f64>, samples: usize) {
        assert_eq!(pred.shape(), truth.shape());
        for r in 0..pred.rows() {
            for (h, (p, t)) in pred.row(r).iter().zip(truth.row(r)).enumerate() {
                let e = p - t;
                self.abs[h] += e.abs();
                self.sq[h] += e * e;
            }
        }
        self.count += pred.rows();
        self.samples += samples;
    }

    pub fn finish(&self, variant: Variant, split: &str, seed: u64) -> MetricsTable {
        let n = self.count.max(1) as f64;
        let horizons = self
            .abs
            .iter()
            .zip(&self.sq)
            .enumerate()
            .map(|(h, (a, s))| HorizonMetrics {
                horizon: h + 1,
                mae: a / n,
                rmse: (s / n).sqrt(),
            })
            .collect();
        let all = n * self.abs.len() as f64;
        MetricsTable {
            variant,
            split: split.to_string(),
            seed,
            horizons,
            overall_mae: self.abs.iter().sum::<f64>() / all,
            overall_rmse: (self.sq.iter().sum::<f64>() / all).sqrt(),
            samples: self.samples,
        }
    }
}

pub const EVAL_CHUNK: usize = 32;

/// Per-horizon MAE and RMSE over one split, in AQI units.
pub fn evaluate_split<T: Scalar>(model: &Model<T>, data: &PreparedData, split: SplitKind) -> Result<MetricsTable> {
    let windows = split.windows(&data.split);
    if windows.is_empty() {
        return Err(Error::InvalidArgument(format!("the {split} split is empty")));
    }
    evaluate_labeled(model, data, windows, split.name())
}

/// Per-horizon MAE and RMSE over `windows`, in AQI units.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &PreparedData, windows: &[Window]) -> Result<MetricsTable> {
    evaluate_labeled(model, data, windows, "custom")
}

fn evaluate_labeled<T: Scalar>(model: &Model<T>, data: &PreparedData, windows: &[Window], label: &str) -> Result<MetricsTable> {
    let mut acc = ErrorAccumulator::new(data.tau_out);
    for part in windows.chunks(EVAL_CHUNK) {
        let batch = data.batch::<T>(part);
        let pred = model.predict(&batch)?;
        let truth = Tensor::from_fn(batch.target.rows(), batch.target.cols(), |r, c| {
            data.stats.denormalize_aqi(batch.target[(r, c)].as_f64())
        });
        acc.add(&pred, &truth, part.len());
    }
    Ok(acc.finish(model.config.variant, label, model.config.seed))
}

/// Hard group of every city: the arg-max of its assignment row.
pub fn hard_groups<T: Scalar>(model: &Model<T>) -> Vec<usize> {
    model.assignment_matrix().argmax_rows()
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| choose2(v)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        // Both labelings are trivial (all-one-cluster or all-singletons).
        return if a == b { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Mean ARI of `draws` uniformly random `k`-group labelings against `truth`.
pub fn random_assignment_baseline(truth: &[usize], k: usize, draws: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..draws)
        .map(|_| {
            let labels: Vec<usize> = truth.iter().map(|_| rng.random_range(0..k)).collect();
            adjusted_rand_index(truth, &labels)
        })
        .sum();
    total / draws.max(1) as f64
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Outcome of training one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub n_groups: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_mae: f64,
    pub test: MetricsTable,
}

/// Builds, trains, and tests one model.
pub fn run_once<T: Scalar>(data: &PreparedData, model_cfg: ModelConfig, train_cfg: &TrainConfig) -> Result<(Model<T>, RunSummary)> {
    let mut model = Model::<T>::new(model_cfg, &data.cities)?;
    let report = train(&mut model, data, train_cfg, &mut ())?;
    let val_mae = if data.split.validation.is_empty() {
        report.best_val_mae
    } else {
        evaluate_split(&model, data, SplitKind::Validation)?.overall_mae
    };
    let test = if data.split.test.is_empty() {
        ErrorAccumulator::new(data.tau_out).finish(model.config.variant, "test", model.config.seed)
    } else {
        evaluate_split(&model, data, SplitKind::Test)?
    };
    let summary = RunSummary {
        variant: model.config.variant,
        n_groups: model.config.n_groups,
        seed: model.config.seed,
        best_epoch: report.best_epoch,
        val_mae,
        test,
    };
    Ok((model, summary))
}

/// Trains one model per (group count, seed); summaries are ordered by group
/// count, then seed.
pub fn sweep_groups<T: Scalar>(
    data: &PreparedData,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    group_counts: &[usize],
    seeds: &[u64],
) -> Result<Vec<RunSummary>> {
    let mut out = Vec::with_capacity(group_counts.len() * seeds.len());
    for &g in group_counts {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.n_groups = g;
            cfg.seed = seed;
            let tc = TrainConfig { seed, ..train_cfg.clone() };
            out.push(run_once::<T>(data, cfg, &tc)?.1);
        }
    }
    Ok(out)
}

/// `n_group,val_mae,seed`, one row per run.
pub fn sweep_csv(runs: &[RunSummary]) -> String {
    let mut s = String::from("n_group,val_mae,seed\n");
    for r in runs {
        s.push_str(&format!("{},{:.6},{}\n", r.n_groups, r.val_mae, r.seed));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub val_mae: Vec<f64>,
    pub test_mae: Vec<f64>,
    pub median_val_mae: f64,
    pub median_test_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Whether the full model's median validation MAE is no worse than every
    /// other variant's.
    pub full_is_best: bool,
    /// Variants whose median validation MAE beat the full model.
    pub violations: Vec<Variant>,
}

impl AblationReport {
    pub fn from_summaries(variants: &[Variant], seeds: &[u64], runs: &[RunSummary]) -> Self {
        let rows: Vec<AblationRow> = variants
            .iter()
            .map(|&v| {
                let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == v).collect();
                let val: Vec<f64> = mine.iter().map(|r| r.val_mae).collect();
                let test: Vec<f64> = mine.iter().map(|r| r.test.overall_mae).collect();
                AblationRow {
                    variant: v,
                    seeds: seeds.to_vec(),
                    median_val_mae: median(&val),
                    median_test_mae: median(&test),
                    val_mae: val,
                    test_mae: test,
                }
            })
            .collect();
        let full = rows.iter().find(|r| r.variant == Variant::Full).map(|r| r.median_val_mae);
        let violations: Vec<Variant> = match full {
            Some(f) => rows.iter().filter(|r| r.median_val_mae < f).map(|r| r.variant).collect(),
            None => Vec::new(),
        };
        Self {
            full_is_best: full.is_some() && violations.is_empty(),
            violations,
            rows,
        }
    }

    /// Plain-text table with a flag line for ordering violations.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>14} {:>14}\n", "variant", "median_val_mae", "median_test_mae");
        for r in &self.rows {
            s.push_str(&format!("{:<8} {:>14.4} {:>14.4}\n", r.variant.name(), r.median_val_mae, r.median_test_mae));
        }
        if self.full_is_best {
            s.push_str("ordering: ok (full has the lowest median validation MAE)\n");
        } else {
            let names: Vec<&str> = self.violations.iter().map(|v| v.name()).collect();
            s.push_str(&format!("ordering: FLAGGED (beaten by: {})\n", names.join(", ")));
        }
        s
    }
}

/// Trains every variant under every seed and summarizes by median.
pub fn run_ablation<T: Scalar>(
    data: &PreparedData,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<(AblationReport, Vec<RunSummary>)> {
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &v in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.variant = v;
            cfg.seed = seed;
            let tc = TrainConfig { seed, ..train_cfg.clone() };
            runs.push(run_once::<T>(data, cfg, &tc)?.1);
        }
    }
    Ok((AblationReport::from_summaries(variants, seeds, &runs), runs))
}

/// Writes `city_id,lon,lat,group_argmax,p_0..p_{K-1}` to `csv_path` and a
/// point FeatureCollection with a `group` property to `geojson_path`.
pub fn export_grouping<T: Scalar>(model: &Model<T>, csv_path: &Path, geojson_path: &Path) -> Result<()> {
    let s = model.assignment_matrix();
    let groups = s.argmax_rows();
    let k = s.cols();
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header: Vec<String> = ["city_id", "lon", "lat", "group_argmax"].map(String::from).to_vec();
    header.extend((0..k).map(|g| format!("p_{g}")));
    w.write_record(&header)?;
    for (c, &g) in model.cities.iter().zip(&groups) {
        let mut row = vec![
            c.city_id.to_string(),
            c.longitude.to_string(),
            c.latitude.to_string(),
            g.to_string(),
        ];
        row.extend(s.row(c.city_id).iter().map(|p| format!("{:.9}", p.as_f64())));
        w.write_record(&row)?;
    }
    w.flush()?;

    let features: Vec<serde_json::Value> = model
        .cities
        .iter()
        .zip(&groups)
        .map(|(c, &g)| {
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [c.longitude, c.latitude] },
                "properties": {
                    "city_id": c.city_id,
                    "name": c.name,
                    "group": g,
                    "probabilities": s.row(c.city_id).iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                },
            })
        })
        .collect();
    let doc = serde_json::json!({ "type": "FeatureCollection", "features": features });
    std::fs::write(geojson_path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
