//! Encoder–decoder forecaster assembly, batching, and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{
    CityRecord, NormalizationStats, ObservationPanel, TimeFeatures, Window, AQI, DEFAULT_TAU_IN, DEFAULT_TAU_OUT,
    N_FEATURES,
};
use crate::encoder::{SequenceEncoder, TimeEmbedding};
use crate::error::{Error, Result};
use crate::graph::{build_city_graph, build_group_graph, CityGraph, DistanceMetric, GroupGraph, DEFAULT_RADIUS_KM};
use crate::grouping::{cities_to_groups, groups_to_cities, kmeans_assignment, normalize_locations, AssignmentLogits, LocationFusion};
use crate::hier_mp::{CityFusion, CityMessagePassing, CorrelationEncoder, GroupMessagePassing};
use crate::nn::{Mlp, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Architecture variant: the full model or one of its ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Flat model: no group pathway at all.
    Fga,
    /// Hard K-means assignment on locations, frozen during training.
    Kmeans,
    /// Group graph without learned edge attributes.
    NoCe,
    /// Location fusion applied to the sequence representation alone.
    NoLoc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Full, Self::Fga, Self::Kmeans, Self::NoCe, Self::NoLoc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Fga => "fga",
            Self::Kmeans => "kmeans",
            Self::NoCe => "no_ce",
            Self::NoLoc => "no_loc",
        }
    }

    pub fn uses_groups(self) -> bool {
        self != Self::Fga
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}` (expected full, fga, kmeans, no_ce, no_loc)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_cities: usize,
    pub n_groups: usize,
    pub d_hidden: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub gnn_layers: usize,
    pub d_edge: usize,
    pub time_dims: [usize; 3],
    pub tau_in: usize,
    pub tau_out: usize,
    pub radius_km: f64,
    pub distance: DistanceMetric,
    pub logit_init_std: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(n_cities: usize) -> Self {
        Self {
            n_cities,
            n_groups: 15,
            d_hidden: 32,
            d_ffn: 64,
            heads: 4,
            encoder_blocks: 1,
            gnn_layers: 2,
            d_edge: 12,
            time_dims: [4, 4, 4],
            tau_in: DEFAULT_TAU_IN,
            tau_out: DEFAULT_TAU_OUT,
            radius_km: DEFAULT_RADIUS_KM,
            distance: DistanceMetric::Haversine,
            logit_init_std: 0.1,
            variant: Variant::Full,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_cities", self.n_cities),
            ("n_groups", self.n_groups),
            ("d_hidden", self.d_hidden),
            ("d_ffn", self.d_ffn),
            ("heads", self.heads),
            ("encoder_blocks", self.encoder_blocks),
            ("gnn_layers", self.gnn_layers),
            ("d_edge", self.d_edge),
            ("tau_in", self.tau_in),
            ("tau_out", self.tau_out),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.time_dims.contains(&0) {
            return Err(Error::Config("time embedding dims must be positive".into()));
        }
        if !self.d_hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("heads ({}) must divide d_hidden ({})", self.heads, self.d_hidden)));
        }
        if !(self.radius_km > 0.0) || !(self.logit_init_std >= 0.0) {
            return Err(Error::Config("radius_km must be positive and logit_init_std non-negative".into()));
        }
        if self.variant == Variant::Kmeans && self.n_groups > self.n_cities {
            return Err(Error::Config(format!(
                "kmeans needs n_groups ({}) <= n_cities ({})",
                self.n_groups, self.n_cities
            )));
        }
        Ok(())
    }
}

/// One side (encoder or decoder) of the hierarchical pipeline after the
/// sequence encoder.
#[derive(Clone, Debug)]
pub struct Stage {
    pub location_fusion: LocationFusion,
    pub group_mp: GroupMessagePassing,
    pub city_fusion: CityFusion,
    pub city_mp: CityMessagePassing,
}

impl Stage {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_hidden;
        Self {
            location_fusion: LocationFusion::new(
                store,
                rng,
                &format!("{name}.location_fusion"),
                d,
                cfg.variant != Variant::NoLoc,
            ),
            group_mp: GroupMessagePassing::new(store, rng, &format!("{name}.group_mp"), d, cfg.d_edge, cfg.gnn_layers),
            city_fusion: CityFusion::new(store, rng, &format!("{name}.city_fusion"), d),
            city_mp: CityMessagePassing::new(store, rng, &format!("{name}.city_mp"), d, cfg.gnn_layers),
        }
    }
}

/// A mini-batch of normalized samples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[(B·N·τ_in) × F]`.
    pub history: Tensor<T>,
    pub times: Vec<TimeFeatures>,
    /// `[(B·N) × τ_out]`, normalized AQI.
    pub target: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(panel: &ObservationPanel, windows: &[Window], stats: &NormalizationStats, tau_in: usize, tau_out: usize) -> Self {
        let n = panel.n_cities;
        let mut history = Vec::with_capacity(windows.len() * n * tau_in * N_FEATURES);
        let mut target = Vec::with_capacity(windows.len() * n * tau_out);
        for w in windows {
            for city in 0..n {
                for t in w.start..w.start + tau_in {
                    for f in 0..N_FEATURES {
                        history.push(T::lit(stats.normalize(f, panel.get(city, t, f))));
                    }
                }
                for k in 0..tau_out {
                    let h = w.start + tau_in + k;
                    // Forecast-time windows may end before the horizon.
                    let v = if h < panel.hours { panel.get(city, h, AQI) } else { stats.mean[AQI] };
                    target.push(T::lit(stats.normalize_aqi(v)));
                }
            }
        }
        Self {
            history: Tensor::from_vec(windows.len() * n * tau_in, N_FEATURES, history),
            times: windows.iter().map(|w| TimeFeatures::from_timestamp(w.anchor_time)).collect(),
            target: Tensor::from_vec(windows.len() * n, tau_out, target),
        }
    }

    pub fn size(&self) -> usize {
        self.times.len()
    }
}

/// Outputs of the encoder half.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Sequence representations `X`, `[(B·N)×d]`.
    pub x: Var,
    /// Updated city representations `X³`.
    pub x3: Var,
    /// Assignment `S` as used by the encoder; `None` for the flat variant.
    pub assignment: Option<Var>,
    /// Group correlations `R`, `[(B·E)×d_edge]`.
    pub correlations: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    /// Final city representations fed to the head.
    pub x_output: Var,
    /// Normalized predictions `[(B·N)×τ_out]`.
    pub predictions: Var,
}

/// Test hooks for isolating gradient paths.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<T> {
    /// Feed the encoder a detached `S` as well, leaving no gradient path to
    /// the logits.
    pub detach_encoder_assignment: bool,
    /// Replace the decoder's (detached) `S` with this fixed value.
    pub decoder_assignment: Option<Tensor<T>>,
}

enum CorrelationSource {
    Encode(Var),
    Reuse(Option<Var>),
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub cities: Vec<CityRecord>,
    pub normalization: NormalizationStats,
    pub store: ParamStore<T>,
    pub city_graph: CityGraph,
    pub group_graph: GroupGraph,
    /// Min-max normalized locations `[N×2]`.
    pub locations: Tensor<T>,
    /// Fixed one-hot assignment for the K-means variant.
    pub frozen_assignment: Option<Tensor<T>>,
    pub sequence: SequenceEncoder,
    pub time: TimeEmbedding,
    pub assignment: AssignmentLogits,
    pub correlation: CorrelationEncoder,
    pub encoder: Stage,
    pub decoder: Stage,
    pub head: Mlp,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, cities: &[CityRecord]) -> Result<Self> {
        config.validate()?;
        if cities.len() != config.n_cities {
            return Err(Error::Config(format!(
                "config expects {} cities but {} were given",
                config.n_cities,
                cities.len()
            )));
        }
        let raw_locations: Vec<[f64; 2]> = cities.iter().map(CityRecord::location).collect();
        let city_graph = build_city_graph(&raw_locations, config.radius_km, config.distance)?;
        let group_graph = build_group_graph(config.n_groups, config.d_edge);
        let norm = normalize_locations(&raw_locations);
        let locations = Tensor::from_fn(norm.len(), 2, |r, c| T::lit(norm[r][c]));
        let frozen_assignment = match config.variant {
            Variant::Kmeans => Some(kmeans_assignment(&raw_locations, config.n_groups, config.seed)?.assignment()),
            _ => None,
        };

        let cfg = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_hidden;
        let sequence = SequenceEncoder::new(
            &mut store,
            &mut rng,
            "encoder.sequence",
            N_FEATURES,
            d,
            cfg.heads,
            cfg.d_ffn,
            cfg.encoder_blocks,
            cfg.tau_in,
        )?;
        let time = TimeEmbedding::new(&mut store, &mut rng, "encoder.time", cfg.time_dims);
        let assignment = AssignmentLogits::new(&mut store, &mut rng, cfg.n_cities, cfg.n_groups, cfg.logit_init_std);
        let correlation = CorrelationEncoder::new(&mut store, &mut rng, "encoder.correlation", d, time.width(), cfg.d_edge);
        let encoder = Stage::new(&mut store, &mut rng, "encoder", cfg);
        let decoder = Stage::new(&mut store, &mut rng, "decoder", cfg);
        let head = Mlp::new(&mut store, &mut rng, "head", &[d, d, cfg.tau_out]);

        Ok(Self {
            config,
            cities: cities.to_vec(),
            normalization: NormalizationStats::identity(),
            store,
            city_graph,
            group_graph,
            locations,
            frozen_assignment,
            sequence,
            time,
            assignment,
            correlation,
            encoder,
            decoder,
            head,
        })
    }

    pub fn n_cities(&self) -> usize {
        self.config.n_cities
    }

    /// Current assignment matrix `S` (the frozen one for K-means).
    pub fn assignment_matrix(&self) -> Tensor<T> {
        match &self.frozen_assignment {
            Some(s) => s.clone(),
            None => self.assignment.assignment(&self.store),
        }
    }

    fn tiled_locations(&self, batch: usize) -> Tensor<T> {
        let n = self.n_cities();
        let mut out = Tensor::zeros(batch * n, 2);
        for b in 0..batch {
            for i in 0..n {
                out.row_mut(b * n + i).copy_from_slice(self.locations.row(i));
            }
        }
        out
    }

    /// Location fusion → groups → correlations → group MP → cities → city
    /// fusion → city MP. Returns `(X³, R)`.
    fn run_stage(
        &self,
        tape: &mut Tape<'_, T>,
        stage: &Stage,
        x_in: Var,
        s: Option<Var>,
        correlations: CorrelationSource,
        batch: usize,
    ) -> (Var, Option<Var>) {
        let rows = batch * self.n_cities();
        let (x1, r) = match s {
            Some(s) => {
                let loc = tape.constant(self.tiled_locations(batch));
                let xf = stage.location_fusion.forward(tape, x_in, loc);
                let z = cities_to_groups(tape, s, xf);
                let r = match correlations {
                    CorrelationSource::Encode(time) => {
                        if self.config.variant == Variant::NoCe {
                            let edges = batch * self.group_graph.edges.len();
                            tape.constant(Tensor::full(edges, self.config.d_edge, T::one()))
                        } else {
                            self.correlation.forward(tape, z, time, &self.group_graph)
                        }
                    }
                    CorrelationSource::Reuse(r) => r.expect("group pathway needs correlations"),
                };
                let z = stage.group_mp.forward(tape, z, r, &self.group_graph);
                (groups_to_cities(tape, s, z), Some(r))
            }
            None => (tape.constant(Tensor::zeros(rows, self.config.d_hidden)), None),
        };
        let x2 = stage.city_fusion.forward(tape, x_in, x1);
        (stage.city_mp.forward(tape, x2, &self.city_graph), r)
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        let b = batch.size();
        let expect = (b * self.n_cities() * self.config.tau_in, N_FEATURES);
        if batch.history.shape() != expect {
            return Err(Error::InvalidArgument(format!(
                "history shape {:?} does not match expected {expect:?}",
                batch.history.shape()
            )));
        }
        if !batch.history.all_finite() {
            return Err(Error::InvalidArgument("history contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn encode(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>, opts: &ForwardOptions<T>) -> Result<EncoderOutput> {
        self.check_batch(batch)?;
        let b = batch.size();
        let hist = tape.constant(batch.history.clone());
        let x = self.sequence.forward(tape, hist);
        let time = self.time.forward(tape, &batch.times)?;
        let s = if self.config.variant.uses_groups() {
            Some(match &self.frozen_assignment {
                Some(fixed) => tape.constant(fixed.clone()),
                None => {
                    let s = self.assignment.forward(tape);
                    if opts.detach_encoder_assignment {
                        tape.detach(s)
                    } else {
                        s
                    }
                }
            })
        } else {
            None
        };
        let (x3, r) = self.run_stage(tape, &self.encoder, x, s, CorrelationSource::Encode(time), b);
        Ok(EncoderOutput {
            x,
            x3,
            assignment: s,
            correlations: r,
        })
    }

    /// Decoder over `X³` with a gradient-free `S` and the encoder's `R`.
    pub fn decode(&self, tape: &mut Tape<'_, T>, enc: &EncoderOutput, opts: &ForwardOptions<T>, batch: usize) -> Var {
        let s = enc.assignment.map(|s| match &opts.decoder_assignment {
            Some(fixed) => tape.constant(fixed.clone()),
            None => tape.detach(s),
        });
        self.run_stage(tape, &self.decoder, enc.x3, s, CorrelationSource::Reuse(enc.correlations), batch)
            .0
    }

    pub fn forecast_head(&self, tape: &mut Tape<'_, T>, x_output: Var) -> Var {
        self.head.forward(tape, x_output)
    }

    pub fn forward_with(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>, opts: &ForwardOptions<T>) -> Result<ForwardOutput> {
        let encoder = self.encode(tape, batch, opts)?;
        let x_output = self.decode(tape, &encoder, opts, batch.size());
        let predictions = self.forecast_head(tape, x_output);
        Ok(ForwardOutput {
            encoder,
            x_output,
            predictions,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>) -> Result<ForwardOutput> {
        self.forward_with(tape, batch, &ForwardOptions::default())
    }

    /// Training loss (MAE in normalized space) and the forward outputs.
    pub fn loss(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>, opts: &ForwardOptions<T>) -> Result<(Var, ForwardOutput)> {
        let out = self.forward_with(tape, batch, opts)?;
        let loss = tape.mae(out.predictions, batch.target.clone());
        Ok((loss, out))
    }

    /// Normalized predictions `[(B·N)×τ_out]` without gradient tracking.
    pub fn predict_normalized(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(&self.store);
        for id in self.store.ids() {
            tape.freeze_param(id);
        }
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out.predictions).clone())
    }

    /// Predictions in raw AQI units.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Tensor<f64>> {
        let z = self.predict_normalized(batch)?;
        Ok(Tensor::from_fn(z.rows(), z.cols(), |r, c| {
            self.normalization.denormalize_aqi(z[(r, c)].as_f64())
        }))
    }

    pub fn params_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.entry(id).group == group).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            cities: self.cities.clone(),
            normalization: self.normalization.clone(),
            params: self
                .store
                .entries()
                .iter()
                .map(|e| StoredTensor {
                    name: e.name.clone(),
                    group: e.group,
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    data: e.value.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
            frozen_assignment: self.frozen_assignment.as_ref().map(|s| StoredTensor {
                name: "frozen_assignment".into(),
                group: ParamGroup::AssignmentLogits,
                rows: s.rows(),
                cols: s.cols(),
                data: s.data().iter().map(|v| v.as_f64()).collect(),
            }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        let mut model = Self::new(ckpt.config.clone(), &ckpt.cities)?;
        model.normalization = ckpt.normalization.clone();
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter tensors, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for stored in &ckpt.params {
            let id = model
                .store
                .find(&stored.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", stored.name)))?;
            let slot = model.store.value_mut(id);
            if slot.shape() != (stored.rows, stored.cols) || stored.data.len() != stored.rows * stored.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {}×{}, expected {:?}",
                    stored.name,
                    stored.rows,
                    stored.cols,
                    slot.shape()
                )));
            }
            *slot = stored.tensor();
        }
        if let (Some(s), Some(slot)) = (&ckpt.frozen_assignment, model.frozen_assignment.as_mut()) {
            *slot = s.tensor();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Loads a checkpoint; with `expected`, every architectural setting must
    /// match.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if let Some(cfg) = expected {
            ckpt.ensure_compatible(cfg)?;
        }
        Self::from_checkpoint(&ckpt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl StoredTensor {
    fn tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|&v| T::lit(v)).collect())
    }
}

/// Self-describing JSON container for a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub cities: Vec<CityRecord>,
    pub normalization: NormalizationStats,
    pub params: Vec<StoredTensor>,
    pub frozen_assignment: Option<StoredTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::FileNotFound(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    /// Errors when any architectural field differs from `expected` (the seed
    /// is ignored).
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let mut mine = self.config.clone();
        mine.seed = expected.seed;
        if &mine != expected {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch: checkpoint has {:?}, expected {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }
}
